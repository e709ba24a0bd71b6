use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named tensors keyed by module path, iterated in lexicographic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing tensor `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing tensor `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total scalar count over all tensors.
    pub fn num_elements(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Same names and extents as `other`.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.dims() == vb.dims())
    }
}

/// Normal(0, std) samples redrawn until they fall within two deviations.
pub(crate) fn trunc_normal(dims: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(dims, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

pub(crate) const INIT_STD: f64 = 0.02;

pub(crate) struct Initializer<'a, R: Rng> {
    pub params: &'a mut ParamStore,
    pub buffers: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Initializer<'_, R> {
    pub fn conv(&mut self, name: &str, out_ch: usize, in_ch: usize, k: usize, bias: bool) {
        let w = trunc_normal(&[out_ch, in_ch, k, k], INIT_STD, self.rng);
        self.params.insert(format!("{name}.weight"), w);
        if bias {
            self.params.insert(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        }
    }

    /// Weight stored `in × out`.
    pub fn linear(&mut self, name: &str, in_dim: usize, out_dim: usize) {
        let w = trunc_normal(&[in_dim, out_dim], INIT_STD, self.rng);
        self.params.insert(format!("{name}.weight"), w);
        self.params.insert(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
    }

    pub fn linear_no_bias(&mut self, name: &str, in_dim: usize, out_dim: usize) {
        let w = trunc_normal(&[in_dim, out_dim], INIT_STD, self.rng);
        self.params.insert(format!("{name}.weight"), w);
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) {
        self.params.insert(format!("{name}.gamma"), Tensor::ones(&[dim]));
        self.params.insert(format!("{name}.beta"), Tensor::zeros(&[dim]));
    }

    pub fn batch_norm(&mut self, name: &str, ch: usize) {
        self.layer_norm(name, ch);
        self.buffers.insert(format!("{name}.running_mean"), Tensor::zeros(&[ch]));
        self.buffers.insert(format!("{name}.running_var"), Tensor::ones(&[ch]));
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn trunc_normal_stays_within_two_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = trunc_normal(&[4000], 0.02, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let std = (t.data().iter().map(|v| v * v).sum::<f64>() / 4000.0).sqrt();
        // Two-sigma truncation shrinks the deviation to ~0.88 sigma.
        assert!((std - 0.0176).abs() < 0.001, "{std}");
    }

    #[test]
    fn missing_names_are_config_errors() {
        let store = ParamStore::new();
        assert!(matches!(store.get("x"), Err(Error::Config(_))));
    }
}
