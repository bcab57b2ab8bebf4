//! Reverse-mode differentiation over a linear operation tape.

use std::collections::HashMap;

use super::ops::{eval_op, vjp, Op, LAYER_NORM_EPS};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Source {
    Constant,
    Param(ParamId),
    Op { op: Op, inputs: Vec<Var> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    source: Source,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to every parameter leaf on the tape.
#[derive(Debug, Default)]
pub struct Gradients {
    pub by_param: Vec<(ParamId, Tensor)>,
}

/// Records operations in evaluation order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Source::Constant, false)
    }

    pub fn leaf(&mut self, t: Tensor, id: ParamId, requires_grad: bool) -> Var {
        self.push(t, Source::Param(id), requires_grad)
    }

    fn push(&mut self, value: Tensor, source: Source, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, source, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Evaluates `op` on recorded inputs and records the result.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = eval_op(&op, &values)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let source = if requires_grad { Source::Op { op, inputs: inputs.to_vec() } } else { Source::Constant };
        Ok(self.push(out, source, requires_grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Div, &[a, b])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[a])
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::AddScalar(c), &[a])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Transpose, &[a])
    }
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Op::Permute(axes.to_vec()), &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        self.apply(Op::Reshape(shape.to_vec()), &[a])
    }
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        self.apply(Op::Concat(axis), xs)
    }
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Op::Slice { axis, start, end }, &[a])
    }
    pub fn index_select(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.apply(Op::IndexSelect(idx.to_vec()), &[a])
    }
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Sum(axis), &[a])
    }
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Mean(axis), &[a])
    }
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::SumAll, &[a])
    }
    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::MeanAll, &[a])
    }
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Softmax(axis), &[a])
    }
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::LogSoftmax(axis), &[a])
    }
    pub fn layer_norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::LayerNorm { axis, eps: LAYER_NORM_EPS }, &[a])
    }
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Gelu, &[a])
    }
    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sin, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Log, &[a])
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sqrt, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[a])
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Softplus, &[a])
    }
    pub fn l2_norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::L2Norm(axis), &[a])
    }
    pub fn cosine_similarity(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        self.apply(Op::CosineSimilarity(axis), &[a, b])
    }
    pub fn pad_channels(&mut self, x: Var, pad: Var, present: &[usize], expected: usize) -> Result<Var> {
        self.apply(Op::PadChannels { present: present.to_vec(), expected }, &[x, pad])
    }

    /// Rows of `a` scaled to unit L2 norm along the last axis.
    pub fn normalize(&mut self, a: Var) -> Result<Var> {
        let axis = self.shape(a).len() - 1;
        let n = self.l2_norm(a, axis)?;
        let mut kshape = self.shape(a).to_vec();
        kshape[axis] = 1;
        let n = self.reshape(n, &kshape)?;
        self.div(a, n)
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if rv.numel() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        let mut out = Gradients::default();
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.source {
                Source::Constant => {}
                Source::Param(id) => out.by_param.push((*id, g)),
                Source::Op { op, inputs } => {
                    let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let gin = vjp(op, &values, &node.value, &g);
                    for (v, gi) in inputs.iter().zip(gin) {
                        if !self.nodes[v.0].requires_grad {
                            continue;
                        }
                        match &mut grads[v.0] {
                            Some(acc) => acc.add_assign(&gi),
                            slot => *slot = Some(gi),
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// A tape bound to a parameter store: parameters are materialised as leaves
/// on first use and reused afterwards.
pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    track: bool,
    bound: HashMap<ParamId, Var>,
}

impl<'s> Graph<'s> {
    /// `track == false` binds every parameter as a constant (no gradients).
    pub fn new(store: &'s ParamStore, track: bool) -> Self {
        Graph { tape: Tape::new(), store, track, bound: HashMap::new() }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self.store.id(name)?;
        if let Some(v) = self.bound.get(&id) {
            return Ok(*v);
        }
        let p = self.store.get(id);
        let v = self.tape.leaf(p.value.clone(), id, self.track && p.trainable);
        self.bound.insert(id, v);
        Ok(v)
    }

    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.tape.backward(root)
    }
}

impl std::ops::Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl std::ops::DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}
