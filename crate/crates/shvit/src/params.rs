//! Named parameter collections and their traffic on and off the tape.
//!
//! Parameters live outside any [`Tape`]: each training step leases them onto
//! a fresh tape as leaves, runs forward/backward there, and harvests the leaf
//! gradients back. Entry order is insertion order everywhere (iteration,
//! leasing, checkpoints), which keeps whole runs deterministic.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, TensorId};
use crate::tensor::{Tensor, TensorResult};

pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Tape handles for one leased generation of a [`ParamSet`], aligned with its
/// entry order.
pub struct LeasedParams {
    ids: Vec<TensorId>,
    index: HashMap<String, usize>,
}

impl LeasedParams {
    pub fn id(&self, name: &str) -> TensorId {
        self.ids[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))]
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter `{name}`"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor.with_requires_grad());
    }

    /// Swaps the tensor stored under an existing name (shape may change).
    pub fn replace(&mut self, name: &str, tensor: Tensor) {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        self.tensors[i] = tensor.with_requires_grad();
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter_mut())
    }

    /// Total scalar count across all entries.
    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Copies every parameter onto `tape` as a gradient-tracked leaf.
    pub fn lease(&self, tape: &mut Tape) -> LeasedParams {
        let ids = self
            .tensors
            .iter()
            .map(|t| {
                let mut leaf = t.clone();
                leaf.zero_grad();
                tape.leaf(leaf)
            })
            .collect();
        LeasedParams {
            ids,
            index: self.index.clone(),
        }
    }

    /// Accumulates tape gradients back into the stored parameters. Leased
    /// entries that never reached the loss contribute zeros, so every
    /// parameter ends up with a populated gradient.
    pub fn harvest(&mut self, tape: &Tape, leased: &LeasedParams) {
        for (i, tensor) in self.tensors.iter_mut().enumerate() {
            match tape.grad(leased.ids[i]) {
                Some(g) => tensor.accumulate_grad(g),
                None => {
                    let zeros = vec![0.0; tensor.numel()];
                    tensor.accumulate_grad(&zeros);
                }
            }
        }
    }
}

/// Samples a tensor from N(0, std^2) truncated at two standard deviations.
pub fn trunc_normal(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> TensorResult<Tensor> {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, std).map_err(|_| crate::tensor::TensorError::InvalidValue {
        what: "trunc_normal std",
        value: std,
    })?;
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            data.push(v);
        }
    }
    Tensor::new(shape, data)
}

/// Uniform samples in `[lo, hi)`.
pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> TensorResult<Tensor> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data)
}
