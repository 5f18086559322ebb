use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named trainable tensors, kept in insertion order so that iteration (and
/// therefore optimizer updates and checkpoints) is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterRegistry {
    entries: IndexMap<String, Tensor>,
}

impl ParameterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::contract(format!("parameter `{name}` registered twice")));
        }
        self.entries.insert(name, value.with_requires_grad(true));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
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

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &[f64]) -> Result<()> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?
            .accumulate_grad(grad)
    }

    pub fn zero_grad(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }

    /// Scales every populated gradient, e.g. to average over a batch.
    pub fn scale_grads(&mut self, factor: f64) {
        for t in self.entries.values_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }
}

/// Builds parameters with seeded initialization.
pub struct ParamInit<'a> {
    pub registry: &'a mut ParameterRegistry,
    pub rng: &'a mut ChaCha8Rng,
}

impl ParamInit<'_> {
    /// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))` weight of shape `fan_in x fan_out`.
    pub fn uniform(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let values = (0..fan_in * fan_out)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        self.registry
            .insert(name, Tensor::matrix(fan_in, fan_out, values)?)
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> Result<()> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
        let values = (0..rows * cols).map(|_| dist.sample(self.rng)).collect();
        self.registry.insert(name, Tensor::matrix(rows, cols, values)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.registry.insert(name, Tensor::zeros(shape))
    }

    /// Registers `<prefix>.weight` and a zero `<prefix>.bias` and returns the layer.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        let layer = Linear::named(prefix, fan_in, fan_out);
        self.uniform(&layer.weight, fan_in, fan_out)?;
        self.zeros(&layer.bias, &[1, fan_out])?;
        Ok(layer)
    }
}

/// Affine map `x W + b` over the rows of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn named(prefix: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParameterRegistry, x: Var) -> Result<Var> {
        let w = tape.param(params, &self.weight)?;
        let b = tape.param(params, &self.bias)?;
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }
}
