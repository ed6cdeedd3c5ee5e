use rand::Rng;
use rand_distr::StandardNormal;

use super::array::Tensor;
use super::nn::NetSpec;
use super::{Tape, TensorError, Var};
use crate::rng;

/// Standard deviation of the Normal weight initializer.
pub const INIT_STD: f64 = 0.02;

/// Named parameter tensors of one network, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    /// Adds a tensor. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), TensorError> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(TensorError::Checkpoint(format!("duplicate parameter name {name}")));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Mutable access to the values; shapes cannot change through this.
    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.tensors.iter_mut().map(Tensor::data_mut)
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn to_tape(&self, tape: &mut Tape, requires_grad: bool) -> Result<Vec<Var>, TensorError> {
        self.tensors.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect()
    }

    /// Merges two sets by prefixing names, e.g. `gen.` and `critic.`.
    pub fn prefixed(&self, prefix: &str) -> ParamSet {
        ParamSet {
            names: self.names.iter().map(|n| format!("{prefix}{n}")).collect(),
            tensors: self.tensors.clone(),
        }
    }

    pub fn extend(&mut self, other: ParamSet) -> Result<(), TensorError> {
        for (n, t) in other.names.into_iter().zip(other.tensors) {
            self.insert(n, t)?;
        }
        Ok(())
    }

    /// The subset whose names start with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (n, t) in self.iter() {
            if let Some(rest) = n.strip_prefix(prefix) {
                out.names.push(rest.to_string());
                out.tensors.push(t.clone());
            }
        }
        out
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Weights ~ Normal(0, 0.02²) and zero biases, drawn from a seeded ChaCha stream.
pub fn init_params(spec: &NetSpec, seed: u64) -> Result<ParamSet, TensorError> {
    let mut rng = rng::stream(seed, rng::streams::INIT);
    let mut set = ParamSet::new();
    for (name, shape, is_bias) in spec.param_shapes()? {
        let tensor = if is_bias {
            Tensor::zeros(&shape)
        } else {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| INIT_STD * rng.sample::<f64, _>(StandardNormal)).collect();
            Tensor::new(shape, data)?
        };
        set.insert(name, tensor)?;
    }
    Ok(set)
}
