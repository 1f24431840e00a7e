//! Named parameter storage shared by every network block.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// Parameters keyed by dotted path (`"encoder.image.stem.w"`). Iteration order
/// is lexicographic, which keeps checkpoints and optimizer updates stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Panics with the missing name; a missing parameter is a wiring bug.
    pub fn expect(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not initialised"))
    }

    pub fn expect_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not initialised"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Names under a dotted prefix.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> {
        self.tensors.keys().filter(move |k| k.starts_with(prefix))
    }

    /// Fill every tensor under `prefix` with `value`.
    pub fn fill_prefix(&mut self, prefix: &str, value: f64) {
        for (k, t) in self.tensors.iter_mut() {
            if k.starts_with(prefix) {
                t.data_mut().fill(value);
            }
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// Zero-mean normal initialisation with the given standard deviation.
    pub fn init_normal<R: Rng>(&mut self, rng: &mut R, name: impl Into<String>, shape: &[usize], std: f64) {
        let t = Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal) * std);
        self.insert(name, t);
    }

    pub fn init_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, value));
    }
}
