//! SGD-with-momentum and Adam.
//!
//! Update rules, with gradient `g`, learning rate `lr`, decay `wd`, and the
//! parameter value `p` from before the step:
//!
//! SGD:  `v <- mu*v + g`;  `p <- p - lr*v - lr*wd*p`
//! Adam: `m <- b1*m + (1-b1)*g`;  `s <- b2*s + (1-b2)*g^2`;
//!       `p <- p - lr * (m/(1-b1^t)) / (sqrt(s/(1-b2^t)) + eps) - lr*wd*p`
//!
//! Weight decay is decoupled (applied to parameters, never mixed into the
//! gradient buffers) for both optimizers. Steps are pure arithmetic over the
//! parameter set in entry order, so identical state and gradients produce
//! bitwise-identical updates.

use std::collections::HashMap;

use crate::params::ParamSet;
use crate::tensor::{TensorError, TensorResult};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

struct Slot {
    first: Vec<f64>,
    second: Vec<f64>,
}

pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    weight_decay: f64,
    step_count: u64,
    slots: Vec<(String, Slot)>,
    slot_index: HashMap<String, usize>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            learning_rate,
            weight_decay,
            step_count: 0,
            slots: Vec::new(),
            slot_index: HashMap::new(),
        }
    }

    pub fn sgd(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::Sgd { momentum }, learning_rate, weight_decay)
    }

    pub fn adam(learning_rate: f64, weight_decay: f64) -> Self {
        Self::new(
            OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
            },
            learning_rate,
            weight_decay,
        )
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    fn slot_mut(&mut self, name: &str, len: usize) -> &mut Slot {
        if let Some(&i) = self.slot_index.get(name) {
            return &mut self.slots[i].1;
        }
        self.slot_index.insert(name.to_string(), self.slots.len());
        self.slots.push((
            name.to_string(),
            Slot {
                first: vec![0.0; len],
                second: vec![0.0; len],
            },
        ));
        &mut self.slots.last_mut().unwrap().1
    }

    /// Applies one update to every parameter. Gradients must be populated and
    /// are left untouched; the caller zeroes them when it is done.
    pub fn step(&mut self, params: &mut ParamSet) -> TensorResult<()> {
        self.step_count += 1;
        let t = self.step_count;
        let lr = self.learning_rate;
        let wd = self.weight_decay;
        let kind = self.kind;
        for i in 0..params.len() {
            let name = params.name_at(i).to_string();
            let tensor = params.tensor_at(i);
            let grad = tensor
                .grad()
                .ok_or_else(|| TensorError::MissingGradient { name: name.clone() })?
                .to_vec();
            let slot = self.slot_mut(&name, grad.len());
            let mut update = vec![0.0; grad.len()];
            match kind {
                OptimizerKind::Sgd { momentum } => {
                    for j in 0..grad.len() {
                        slot.first[j] = momentum * slot.first[j] + grad[j];
                        update[j] = lr * slot.first[j];
                    }
                }
                OptimizerKind::Adam { beta1, beta2, epsilon } => {
                    let bc1 = 1.0 - beta1.powi(t as i32);
                    let bc2 = 1.0 - beta2.powi(t as i32);
                    for j in 0..grad.len() {
                        slot.first[j] = beta1 * slot.first[j] + (1.0 - beta1) * grad[j];
                        slot.second[j] = beta2 * slot.second[j] + (1.0 - beta2) * grad[j] * grad[j];
                        let m_hat = slot.first[j] / bc1;
                        let s_hat = slot.second[j] / bc2;
                        update[j] = lr * m_hat / (s_hat.sqrt() + epsilon);
                    }
                }
            }
            let tensor = params.tensor_at_mut(i);
            let data = tensor.data_mut();
            for j in 0..data.len() {
                let decay = lr * wd * data[j];
                data[j] -= update[j] + decay;
            }
        }
        Ok(())
    }

    /// Auxiliary buffers in creation order, for checkpointing.
    pub fn slots(&self) -> impl Iterator<Item = (&str, &[f64], &[f64])> {
        self.slots
            .iter()
            .map(|(n, s)| (n.as_str(), s.first.as_slice(), s.second.as_slice()))
    }

    /// Rebuilds an optimizer from checkpointed state.
    pub fn restore(
        kind: OptimizerKind,
        learning_rate: f64,
        weight_decay: f64,
        step_count: u64,
        slots: Vec<(String, Vec<f64>, Vec<f64>)>,
    ) -> Self {
        let mut opt = Self::new(kind, learning_rate, weight_decay);
        opt.step_count = step_count;
        for (name, first, second) in slots {
            opt.slot_index.insert(name.clone(), opt.slots.len());
            opt.slots.push((name, Slot { first, second }));
        }
        opt
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(value: Vec<f64>, grad: Vec<f64>) -> ParamSet {
        let mut p = ParamSet::new();
        let mut t = Tensor::new(vec![value.len()], value).unwrap();
        t.accumulate_grad(&grad);
        p.insert("w", t);
        p
    }

    #[test]
    fn plain_sgd_subtracts_scaled_gradient() {
        let mut params = one_param(vec![1.0, -2.0], vec![0.5, 0.25]);
        let mut opt = Optimizer::sgd(0.1, 0.0, 0.0);
        opt.step(&mut params).unwrap();
        let w = params.get("w").unwrap().data();
        assert_eq!(w, &[1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25]);
        // Gradients survive the step for the caller to zero.
        assert_eq!(params.get("w").unwrap().grad().unwrap(), &[0.5, 0.25]);
    }

    #[test]
    fn adam_first_step_moves_by_lr_sign() {
        let mut params = one_param(vec![0.0, 0.0], vec![0.3, -0.7]);
        let mut opt = Optimizer::adam(0.01, 0.0);
        opt.step(&mut params).unwrap();
        let w = params.get("w").unwrap().data();
        // Bias-corrected first step: update = lr * g / (|g| + eps) ~ lr * sign(g).
        assert!((w[0] + 0.01).abs() < 1e-6);
        assert!((w[1] - 0.01).abs() < 1e-6);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn sgd_contracts_quadratic_bowl() {
        // f(w) = ||w||^2, grad = 2w, from w0 = 1.
        let mut params = one_param(vec![1.0, 1.0, 1.0], vec![0.0; 3]);
        let mut opt = Optimizer::sgd(0.1, 0.0, 0.0);
        for _ in 0..100 {
            let g: Vec<f64> = params.get("w").unwrap().data().iter().map(|w| 2.0 * w).collect();
            params.get_mut("w").unwrap().zero_grad();
            params.get_mut("w").unwrap().accumulate_grad(&g);
            opt.step(&mut params).unwrap();
        }
        let norm: f64 = params
            .get("w")
            .unwrap()
            .data()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!(norm < 1e-3, "norm after 100 steps: {norm}");
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::scalar(1.0));
        let mut opt = Optimizer::sgd(0.1, 0.0, 0.0);
        assert!(matches!(
            opt.step(&mut params),
            Err(TensorError::MissingGradient { .. })
        ));
    }

    #[test]
    fn steps_are_bitwise_deterministic() {
        let run = || {
            let mut params = one_param(vec![0.3, -0.9], vec![0.11, 0.07]);
            let mut opt = Optimizer::adam(0.005, 0.01);
            for _ in 0..5 {
                opt.step(&mut params).unwrap();
            }
            params.get("w").unwrap().data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
