use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Weight initialisation schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform in ±sqrt(6 / fan_in) (He, for ReLU stacks).
    HeUniform { fan_in: usize },
    /// Uniform in ±sqrt(1 / fan_in), the usual bias default.
    BiasUniform { fan_in: usize },
}

/// Named trainable tensors, iterated in lexicographic path order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a new parameter; returns the path for later lookup.
    pub fn create(
        &mut self,
        path: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<String> {
        let path = path.into();
        if self.params.contains_key(&path) {
            return Err(Error::invalid("param_store", format!("duplicate path `{path}`")));
        }
        let n = numel(shape);
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(v) => vec![v; n],
            Init::HeUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
            Init::BiasUniform { fan_in } => {
                let bound = (1.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
        };
        self.params.insert(path.clone(), Tensor::param(data, shape)?);
        Ok(path)
    }

    pub fn insert(&mut self, path: impl Into<String>, values: Vec<f64>, shape: &[usize]) -> Result<()> {
        self.params.insert(path.into(), Tensor::param(values, shape)?);
        Ok(())
    }

    /// Register an existing tensor as-is, sharing its graph node.
    pub fn insert_tensor(&mut self, path: impl Into<String>, t: Tensor) {
        self.params.insert(path.into(), t);
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.params.get(path).ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    /// Replace the values of an existing parameter with a fresh leaf.
    pub fn set(&mut self, path: &str, values: Vec<f64>) -> Result<()> {
        let old = self.get(path)?;
        let shape = old.shape().to_vec();
        self.params.insert(path.to_string(), Tensor::param(values, &shape)?);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn zero_grads(&self) {
        self.params.values().for_each(Tensor::zero_grad);
    }

    /// Euclidean norm of the gradients of parameters whose path starts with
    /// `prefix`; parameters without a gradient count as zero.
    pub fn grad_norm(&self, prefix: &str) -> f64 {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .filter_map(|(_, t)| t.grad())
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Merge another store; paths must not collide.
    pub fn extend(&mut self, other: ParamStore) -> Result<()> {
        for (k, v) in other.params {
            if self.params.contains_key(&k) {
                return Err(Error::invalid("param_store", format!("duplicate path `{k}`")));
            }
            self.params.insert(k, v);
        }
        Ok(())
    }

    /// True when both stores hold the same paths, shapes and bit patterns.
    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape() == b.shape()
                    && a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
