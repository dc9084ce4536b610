use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use sha2::{Digest, Sha256};

use super::graph::Mat;

/// Named parameter tensors of one model, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Mat>,
    frozen: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Graphs built from a frozen store do not track parameter gradients.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Copies every tensor whose name starts with `prefix`, keeping names.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        self.subset_where(|k| k.starts_with(prefix))
    }

    pub fn subset_where(&self, keep: impl Fn(&str) -> bool) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            frozen: self.frozen,
        }
    }

    pub fn extend(&mut self, other: &ParamStore) {
        for (k, v) in other.iter() {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            h.update((t.nrows() as u64).to_le_bytes());
            h.update((t.ncols() as u64).to_le_bytes());
            for v in t.iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Xavier-uniform `[fan_in × fan_out]` weight and zero `1×fan_out` bias.
    pub fn init_linear<R: Rng>(&mut self, rng: &mut R, prefix: &str, fan_in: usize, fan_out: usize) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound));
        self.insert(format!("{prefix}.weight"), w);
        self.insert(format!("{prefix}.bias"), Array2::zeros((1, fan_out)));
    }

    pub fn init_layer_norm(&mut self, prefix: &str, dim: usize) {
        self.insert(format!("{prefix}.gamma"), Array2::ones((1, dim)));
        self.insert(format!("{prefix}.beta"), Array2::zeros((1, dim)));
    }
}
