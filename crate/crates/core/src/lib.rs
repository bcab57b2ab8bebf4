//! Scale-adaptive multimodal Earth-observation encoder with student/teacher
//! latent-prediction pretraining.

pub mod checkpoint;
pub mod combiner;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod heads;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod ssl;

pub use error::{Error, Result};
