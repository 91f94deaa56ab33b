use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Matrix;
use crate::error::{Error, Result};

/// Named tensors in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    tensors: IndexMap<String, Matrix>,
    seed: u64,
}

impl ParameterSet {
    pub fn new(seed: u64) -> Self {
        Self {
            tensors: IndexMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Matrix::len).sum()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Result<()> {
        let name = name.into();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("parameter `{name}` is not finite")));
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::Argument(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.get_index_of(name)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    pub fn tensor(&self, idx: usize) -> &Matrix {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Matrix {
        &mut self.tensors[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Matrix::is_finite)
    }

    /// Uniform in `±1/√fan_in`.
    pub fn init_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.insert(name, Matrix::new(rows, cols, data)?)
    }
}

/// Per-parameter gradients aligned with a [`ParameterSet`]'s index order.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        Self {
            grads: params
                .tensors
                .values()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Matrix {
        &self.grads[idx]
    }

    pub fn accumulate(&mut self, idx: usize, g: &Matrix) {
        self.grads[idx].add_assign(g);
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.grads {
            g.scale_assign(c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Matrix::is_finite)
    }
}
