//! Named learnable tensors and their optimizers.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{config, Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    velocity: Option<Vec<f32>>,
}

/// Learnable tensors in creation order, each with a unique name and an
/// SGD momentum buffer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, ParamId>,
}

/// Tape variables for every tensor of a [`ParamStore`], aligned by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// The variable bound for `id`; fails when `id` belongs to a larger store.
    pub fn var(&self, id: ParamId) -> Result<Var> {
        self.vars
            .get(id.0)
            .copied()
            .ok_or_else(|| Error::Config(format!("no weights bound for parameter #{}", id.0)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return config(format!("duplicate parameter name {name}"));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value,
            velocity: None,
        });
        Ok(id)
    }

    /// Adds a tensor drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: Shape,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let value = Tensor::from_fn(shape, |_| dist.sample(rng));
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Records every tensor on `tape`; trainable tensors become gradient
    /// leaves, frozen ones constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if trainable {
                    tape.param(e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Copies every tensor whose name exists in `other` with the same shape.
    /// Returns the number of tensors copied.
    pub fn copy_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for e in &mut self.entries {
            if let Some(id) = other.id(&e.name) {
                let src = other.get(id);
                if src.shape() == e.value.shape() {
                    e.value = src.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Replaces a tensor by name, checking the shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return config(format!(
                "parameter {name} has shape {}, got {}",
                e.value.shape(),
                value.shape()
            ));
        }
        e.value = value;
        Ok(())
    }

    /// SGD with momentum and L2 weight decay:
    /// `v = momentum * v + (g + wd * w); w -= lr * v`.
    /// Tensors without a gradient are left untouched.
    pub fn sgd_step(&mut self, bound: &Bound, grads: &Gradients, cfg: SgdConfig) {
        for (e, &var) in self.entries.iter_mut().zip(&bound.vars) {
            let Some(g) = grads.get(var) else { continue };
            let w = e.value.data_mut();
            let v = e.velocity.get_or_insert_with(|| vec![0.0; w.len()]);
            for ((wi, vi), &gi) in w.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                let d = gi + cfg.weight_decay * *wi;
                *vi = cfg.momentum * *vi + d;
                *wi -= cfg.lr * *vi;
            }
        }
    }

    /// Order-dependent checksum of all values, for reproducibility checks.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for e in &self.entries {
            for v in e.value.data() {
                for byte in v.to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u32,
    moments: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32, weight_decay: f32) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// Updates `params[i]` with `grads[i]`; all calls must pass the same
    /// number of tensors in the same order.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) {
        assert_eq!(params.len(), grads.len());
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
                .collect();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.moments.iter_mut()) {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let d = gi + self.weight_decay * *w;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * d;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * d * d;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Zero-mean Gaussian tensor.
pub fn gaussian(shape: Shape, std: f32, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}
