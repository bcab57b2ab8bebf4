use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 5e-5, weight_decay: 0.01, betas: (0.9, 0.999), eps: 1e-8 }
    }
}

/// First/second moments keyed by parameter name.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        OptimizerState { config, step: 0, moments: BTreeMap::new() }
    }

    /// One decoupled-weight-decay Adam update of every trainable parameter
    /// at learning rate `lr`. Gradients are left as they are.
    pub fn adamw_step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.trainable && p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        self.step += 1;
        let AdamWConfig { weight_decay, betas: (b1, b2), eps, .. } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for p in params.iter_mut().filter(|p| p.trainable) {
            let g = p.grad.as_ref().expect("checked above");
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
            let decay = 1.0 - lr * weight_decay;
            for (((w, &gi), mi), vi) in
                p.value.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w *= decay;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales gradients so their global norm does not exceed `max_norm`.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::from_vec(vec![v])).unwrap();
        s
    }

    #[test]
    fn zero_grad_is_fixed_point() {
        let mut s = store(1.5);
        s.zero_grad();
        let mut opt = OptimizerState::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        for _ in 0..3 {
            opt.adamw_step(&mut s, 1e-3).unwrap();
        }
        assert_eq!(s.by_name("p").unwrap().value.item(), 1.5);
        assert_eq!(opt.step, 3);
    }

    #[test]
    fn descends_on_square() {
        let mut s = store(1.0);
        s.zero_grad();
        s.by_name_mut("p").unwrap().grad = Some(Tensor::from_vec(vec![2.0]));
        let mut opt = OptimizerState::new(AdamWConfig::default());
        opt.adamw_step(&mut s, 5e-5).unwrap();
        let p = s.by_name("p").unwrap();
        assert!(p.value.item().abs() < 1.0);
        assert_eq!(p.grad.as_ref().unwrap().item(), 2.0);
    }

    #[test]
    fn missing_grad_errors() {
        let mut s = store(1.0);
        let mut opt = OptimizerState::new(AdamWConfig::default());
        assert!(matches!(opt.adamw_step(&mut s, 1e-3), Err(Error::MissingGrad(_))));
    }

    #[test]
    fn quadratic_descends_monotonically() {
        // f(x, y) = 0.5 * (3 x^2 + y^2), minimum at the origin.
        let mut s = ParamStore::new();
        s.insert("p", Tensor::from_vec(vec![1.0, -2.0])).unwrap();
        let f = |p: &[f64]| 0.5 * (3.0 * p[0] * p[0] + p[1] * p[1]);
        let mut opt = OptimizerState::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let mut losses = vec![];
        for _ in 0..200 {
            let v = s.by_name("p").unwrap().value.data().to_vec();
            losses.push(f(&v));
            s.by_name_mut("p").unwrap().grad = Some(Tensor::from_vec(vec![3.0 * v[0], v[1]]));
            opt.adamw_step(&mut s, 1e-2).unwrap();
        }
        assert!(losses.windows(2).skip(5).all(|w| w[1] < w[0]), "{losses:?}");
    }
}
