//! Central-difference verification of reverse-mode gradients.

use std::collections::HashMap;

use super::params::ParamStore;
use super::tape::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Relative error above which a coordinate is flagged.
    pub tolerance: f64,
    /// Magnitude below which errors are measured absolutely.
    pub floor: f64,
    /// Check at most this many evenly spaced coordinates per parameter.
    pub max_coords_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { tolerance: 1e-4, floor: 1e-6, max_coords_per_param: None }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates whose relative error exceeds the tolerance.
    pub flagged: Vec<(String, usize, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }
}

fn evaluate<F>(store: &ParamStore, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store, false);
    let root = f(&mut g)?;
    let v = g.value(root);
    if v.numel() != 1 || !v.is_finite() {
        return Err(Error::NonFinite(format!("grad_check objective evaluated to {:?}", v.data())));
    }
    Ok(v.item())
}

/// Reverse-mode gradients of `f` for every trainable parameter, keyed by name.
pub fn analytic_grads<F>(store: &ParamStore, f: &mut F) -> Result<HashMap<String, Tensor>>
where
    F: FnMut(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store, true);
    let root = f(&mut g)?;
    if !g.value(root).is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let grads = g.backward(root)?;
    let mut out: HashMap<String, Tensor> = store
        .iter()
        .filter(|p| p.trainable)
        .map(|p| (p.name.clone(), Tensor::zeros(p.value.shape())))
        .collect();
    for (id, t) in grads.by_param {
        out.insert(store.get(id).name.clone(), t);
    }
    Ok(out)
}

/// Compares reverse-mode gradients of `f` against central differences with step `h`.
pub fn grad_check<F>(store: &mut ParamStore, mut f: F, h: f64, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph) -> Result<Var>,
{
    let analytic = analytic_grads(store, &mut f)?;
    compare_grads(store, &analytic, f, h, opts)
}

/// Compares supplied gradients against central differences of `f`.
pub fn compare_grads<F>(
    store: &mut ParamStore,
    analytic: &HashMap<String, Tensor>,
    mut f: F,
    h: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Config(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    let mut report = GradCheckReport::default();
    let names: Vec<String> = store.iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect();
    for name in names {
        let id = store.id(&name)?;
        let n = store.get(id).value.numel();
        let step = match opts.max_coords_per_param {
            Some(k) if k < n => n.div_ceil(k),
            _ => 1,
        };
        let a = analytic.get(&name).ok_or_else(|| Error::MissingGrad(name.clone()))?;
        for i in (0..n).step_by(step) {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let fp = evaluate(store, &mut f);
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let fm = evaluate(store, &mut f);
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (fp? - fm?) / (2.0 * h);
            let av = a.data()[i];
            let rel = (av - numeric).abs() / av.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((name.clone(), i));
                }
            }
            if rel > opts.tolerance {
                report.flagged.push((name.clone(), i, rel));
            }
        }
    }
    Ok(report)
}
