//! Dense tensors, reverse-mode differentiation, AdamW and learning-rate schedules.

pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod params;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use gradcheck::{analytic_grads, compare_grads, grad_check, GradCheckOptions, GradCheckReport};
pub use ops::{eval_op, Op};
pub use optim::{clip_grad_norm, AdamWConfig, OptimizerState};
pub use params::{Init, ParamId, ParamStore, Parameter};
pub use schedule::{LrSchedule, LrScheduler, SchedulerState};
pub use tape::{Gradients, Graph, Tape, Var};
pub use tensor::Tensor;
