use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::tape::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter within its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named trainable tensor. Names are paths `<module>/<block>/<leaf>`.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
}

/// Named parameter tree in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad: None, trainable: true });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index.get(name).copied().ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter> {
        Ok(self.get(self.id(name)?))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        let id = self.id(name)?;
        Ok(self.get_mut(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Total scalar count over all (or only trainable) parameters.
    /// Same names in the same order with bitwise-equal values.
    pub fn same_values(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn count(&self, trainable_only: bool) -> usize {
        self.params.iter().filter(|p| p.trainable || !trainable_only).map(|p| p.value.numel()).sum()
    }

    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = pred(&p.name);
        }
    }

    /// Copy of the parameters whose names satisfy `keep`.
    pub fn subset(&self, keep: impl Fn(&str) -> bool) -> ParamStore {
        let mut out = ParamStore::new();
        for p in self.params.iter().filter(|p| keep(&p.name)) {
            out.insert(p.name.clone(), p.value.clone()).expect("names are unique");
        }
        out
    }

    /// Overwrites values of every parameter also present in `other`.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for p in other.iter() {
            if let Some(id) = self.index.get(&p.name) {
                let dst = &mut self.params[id.0];
                if dst.value.shape() != p.value.shape() {
                    return Err(Error::TreeMismatch(format!(
                        "`{}` has shape {:?} vs {:?}",
                        p.name,
                        dst.value.shape(),
                        p.value.shape()
                    )));
                }
                dst.value = p.value.clone();
                n += 1;
            }
        }
        Ok(n)
    }

    /// Resets every trainable gradient to zero.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = if p.trainable { Some(Tensor::zeros(p.value.shape())) } else { None };
        }
    }

    /// Adds `scale * g` into the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (id, g) in &grads.by_param {
            let p = &mut self.params[id.0];
            let acc = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += scale * b;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Helpers for initialising parameters into a store.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn linear_weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<String> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..fan_in * fan_out).map(|_| dist.sample(self.rng)).collect();
        self.store.insert(name, Tensor::new(vec![fan_in, fan_out], data)?)?;
        Ok(name.to_string())
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<String> {
        let dist = Normal::new(0.0, std).expect("std > 0");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(self.rng)).collect();
        self.store.insert(name, Tensor::new(shape.to_vec(), data)?)?;
        Ok(name.to_string())
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<String> {
        self.store.insert(name, Tensor::full(shape, value))?;
        Ok(name.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a/b/w", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(s.insert("a/b/w", Tensor::scalar(2.0)), Err(Error::DuplicateParam(_))));
    }

    #[test]
    fn subset_and_copy() {
        let mut s = ParamStore::new();
        s.insert("enc/w", Tensor::scalar(1.0)).unwrap();
        s.insert("pred/w", Tensor::scalar(2.0)).unwrap();
        let mut t = s.subset(|n| n.starts_with("enc/"));
        assert_eq!(t.len(), 1);
        t.by_name_mut("enc/w").unwrap().value = Tensor::scalar(5.0);
        assert_eq!(s.copy_from(&t).unwrap(), 1);
        assert_eq!(s.by_name("enc/w").unwrap().value.item(), 5.0);
    }
}
