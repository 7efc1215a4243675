//! Reverse-mode automatic differentiation over whole tensors.
//!
//! A [`Tape`] records every primitive application in creation order, which
//! is a topological order by construction. [`Tape::backward`] walks the
//! records in reverse and accumulates gradients for every node that depends
//! on a trainable leaf.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{config, Error, Result};
use crate::kernels::{self, ConvGeom, PoolGeom, PoolMode};
use crate::tensor::{Shape, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        geom: ConvGeom,
    },
    MaxPool {
        input: usize,
        geom: PoolGeom,
        argmax: Vec<u32>,
    },
    AvgPool {
        input: usize,
        geom: PoolGeom,
    },
    Normalize {
        input: usize,
        scale: Option<usize>,
        shift: Option<usize>,
        // None when the output itself is the normalized value (no affine)
        normalized: Option<Vec<f32>>,
        inv_std: Vec<f32>,
    },
    Relu(usize),
    Add(usize, usize),
    AddN(Vec<usize>),
    Mul(usize, usize),
    WeightedSum {
        inputs: Vec<usize>,
        weights: usize,
        offset: usize,
    },
    Concat(Vec<usize>),
    Slice {
        input: usize,
        start: usize,
    },
    Shift(usize),
    GlobalAvgPool(usize),
    Linear {
        input: usize,
        weight: usize,
        bias: Option<usize>,
    },
    SoftmaxRows(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    Sum(usize),
}

/// A recorded primitive with operands given as positions on the tape; see
/// [`Tape::trace`].
#[derive(Clone, Debug, PartialEq)]
pub enum Traced {
    Leaf {
        value: Tensor,
        requires_grad: bool,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        geom: ConvGeom,
    },
    Pool {
        input: usize,
        mode: PoolMode,
        geom: PoolGeom,
    },
    Normalize {
        input: usize,
        scale: Option<usize>,
        shift: Option<usize>,
    },
    Relu(usize),
    Add(usize, usize),
    AddN(Vec<usize>),
    Mul(usize, usize),
    WeightedSum {
        inputs: Vec<usize>,
        weights: usize,
        offset: usize,
    },
    Concat(Vec<usize>),
    Slice {
        input: usize,
        start: usize,
        len: usize,
    },
    Shift(usize),
    GlobalAvgPool(usize),
    Linear {
        input: usize,
        weight: usize,
        bias: Option<usize>,
    },
    SoftmaxRows(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
    },
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    multiply_adds: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when `var`
    /// does not depend on any trainable leaf (or is not an ancestor of the loss).
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }
}

fn same_shape(a: Shape, b: Shape, what: &str) -> Result<()> {
    if a != b {
        return config(format!("{what}: shape mismatch {a} vs {b}"));
    }
    Ok(())
}

fn add_into(slot: &mut Option<Vec<f32>>, contribution: Vec<f32>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
        None => *slot = Some(contribution),
    }
}

fn add_slice_into(slot: &mut Option<Vec<f32>>, len: usize, at: usize, part: &[f32]) {
    let acc = slot.get_or_insert_with(|| vec![0.0; len]);
    acc[at..at + part.len()].iter_mut().zip(part).for_each(|(a, c)| *a += c);
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            multiply_adds: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations performed by convolutions and linear
    /// layers recorded so far.
    pub fn multiply_adds(&self) -> u64 {
        self.multiply_adds
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "variable {} does not belong to tape {}",
                v.index, self.id
            )));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, index }
    }

    fn grad_of(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Position of `v` on its tape.
    pub fn position(&self, v: Var) -> Result<usize> {
        self.check(v)
    }

    /// Every record in creation order, without cached intermediates. Leaves
    /// carry their values; other records refer to earlier positions.
    pub fn trace(&self) -> Vec<Traced> {
        self.nodes
            .iter()
            .map(|n| match &n.op {
                Op::Leaf => Traced::Leaf {
                    value: n.value.clone(),
                    requires_grad: n.requires_grad,
                },
                Op::Conv2d { input, kernel, geom } => Traced::Conv2d {
                    input: *input,
                    kernel: *kernel,
                    geom: *geom,
                },
                Op::MaxPool { input, geom, .. } => Traced::Pool {
                    input: *input,
                    mode: PoolMode::Max,
                    geom: *geom,
                },
                Op::AvgPool { input, geom } => Traced::Pool {
                    input: *input,
                    mode: PoolMode::Average,
                    geom: *geom,
                },
                Op::Normalize {
                    input, scale, shift, ..
                } => Traced::Normalize {
                    input: *input,
                    scale: *scale,
                    shift: *shift,
                },
                Op::Relu(i) => Traced::Relu(*i),
                Op::Add(a, b) => Traced::Add(*a, *b),
                Op::AddN(p) => Traced::AddN(p.clone()),
                Op::Mul(a, b) => Traced::Mul(*a, *b),
                Op::WeightedSum {
                    inputs,
                    weights,
                    offset,
                } => Traced::WeightedSum {
                    inputs: inputs.clone(),
                    weights: *weights,
                    offset: *offset,
                },
                Op::Concat(p) => Traced::Concat(p.clone()),
                Op::Slice { input, start } => Traced::Slice {
                    input: *input,
                    start: *start,
                    len: n.value.shape().channels,
                },
                Op::Shift(i) => Traced::Shift(*i),
                Op::GlobalAvgPool(i) => Traced::GlobalAvgPool(*i),
                Op::Linear { input, weight, bias } => Traced::Linear {
                    input: *input,
                    weight: *weight,
                    bias: *bias,
                },
                Op::SoftmaxRows(i) => Traced::SoftmaxRows(*i),
                Op::CrossEntropy { logits, labels, .. } => Traced::CrossEntropy {
                    logits: *logits,
                    labels: labels.clone(),
                },
                Op::Sum(i) => Traced::Sum(*i),
            })
            .collect()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// The recorded value of `v`.
    ///
    /// Panics if `v` was created on another tape.
    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.check(v).expect("variable from a different tape");
        &self.nodes[i].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.check(v).map(|i| self.nodes[i].requires_grad).unwrap_or(false)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, geom: ConvGeom) -> Result<Var> {
        let (i, k) = (self.check(input)?, self.check(kernel)?);
        let value = kernels::conv2d_forward(&self.nodes[i].value, &self.nodes[k].value, geom)?;
        let ks = self.nodes[k].value.shape();
        self.multiply_adds += (value.numel() * ks.channels * ks.plane()) as u64;
        let rg = self.grad_of(&[i, k]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input: i,
                kernel: k,
                geom,
            },
            rg,
        ))
    }

    pub fn pool2d(&mut self, input: Var, mode: PoolMode, geom: PoolGeom) -> Result<Var> {
        let i = self.check(input)?;
        let (value, argmax) = kernels::pool2d_forward(&self.nodes[i].value, mode, geom)?;
        let op = match mode {
            PoolMode::Max => Op::MaxPool { input: i, geom, argmax },
            PoolMode::Average => Op::AvgPool { input: i, geom },
        };
        let rg = self.grad_of(&[i]);
        Ok(self.push(value, op, rg))
    }

    /// Per-channel batch normalization with optional per-channel affine
    /// `scale` and `shift` of shape (1, C, 1, 1).
    pub fn normalize(&mut self, input: Var, scale: Option<Var>, shift: Option<Var>) -> Result<Var> {
        let i = self.check(input)?;
        let s = self.nodes[i].value.shape();
        let mut deps = vec![i];
        let mut check_affine = |v: Option<Var>, tape: &Tape| -> Result<Option<usize>> {
            match v {
                None => Ok(None),
                Some(v) => {
                    let j = tape.check(v)?;
                    same_shape(
                        tape.nodes[j].value.shape(),
                        Shape::new(1, s.channels, 1, 1),
                        "affine parameter",
                    )?;
                    deps.push(j);
                    Ok(Some(j))
                }
            }
        };
        let scale = check_affine(scale, self)?;
        let shift = check_affine(shift, self)?;
        let (normalized, inv_std) = kernels::normalize_forward(&self.nodes[i].value)?;
        let rg = self.grad_of(&deps);
        if scale.is_none() && shift.is_none() {
            let value = Tensor::from_parts(s, normalized);
            return Ok(self.push(
                value,
                Op::Normalize {
                    input: i,
                    scale,
                    shift,
                    normalized: None,
                    inv_std,
                },
                rg,
            ));
        }
        let plane = s.plane();
        let mut out = normalized.clone();
        for b in 0..s.batch {
            for c in 0..s.channels {
                let g = scale.map_or(1.0, |j| self.nodes[j].value.data()[c]);
                let t = shift.map_or(0.0, |j| self.nodes[j].value.data()[c]);
                let at = (b * s.channels + c) * plane;
                out[at..at + plane].iter_mut().for_each(|v| *v = *v * g + t);
            }
        }
        Ok(self.push(
            Tensor::from_parts(s, out),
            Op::Normalize {
                input: i,
                scale,
                shift,
                normalized: Some(normalized),
                inv_std,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let i = self.check(input)?;
        let x = &self.nodes[i].value;
        let value = Tensor::from_parts(x.shape(), x.data().iter().map(|v| v.max(0.0)).collect());
        let rg = self.grad_of(&[i]);
        Ok(self.push(value, Op::Relu(i), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (i, j) = (self.check(a)?, self.check(b)?);
        let (x, y) = (&self.nodes[i].value, &self.nodes[j].value);
        same_shape(x.shape(), y.shape(), "add")?;
        let value = Tensor::from_parts(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect());
        let rg = self.grad_of(&[i, j]);
        Ok(self.push(value, Op::Add(i, j), rg))
    }

    /// Sum of any number of equally shaped tensors.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return config("add_n needs at least one input");
        }
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let shape = self.nodes[idx[0]].value.shape();
        let mut out = self.nodes[idx[0]].value.data().to_vec();
        for &j in &idx[1..] {
            let v = &self.nodes[j].value;
            same_shape(shape, v.shape(), "add_n")?;
            out.iter_mut().zip(v.data()).for_each(|(o, x)| *o += x);
        }
        let rg = self.grad_of(&idx);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddN(idx), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (i, j) = (self.check(a)?, self.check(b)?);
        let (x, y) = (&self.nodes[i].value, &self.nodes[j].value);
        same_shape(x.shape(), y.shape(), "mul")?;
        let value = Tensor::from_parts(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect());
        let rg = self.grad_of(&[i, j]);
        Ok(self.push(value, Op::Mul(i, j), rg))
    }

    /// `Σ_k weights[offset + k] · inputs[k]`, with the weights read from the
    /// flat data of `weights`.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: Var, offset: usize) -> Result<Var> {
        if inputs.is_empty() {
            return config("weighted_sum needs at least one input");
        }
        let w = self.check(weights)?;
        let idx = inputs.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        if offset + idx.len() > self.nodes[w].value.numel() {
            return config("weighted_sum weight range out of bounds");
        }
        let shape = self.nodes[idx[0]].value.shape();
        let mut out = vec![0.0f32; shape.numel()];
        for (k, &j) in idx.iter().enumerate() {
            let v = &self.nodes[j].value;
            same_shape(shape, v.shape(), "weighted_sum")?;
            let wk = self.nodes[w].value.data()[offset + k];
            out.iter_mut().zip(v.data()).for_each(|(o, x)| *o += wk * x);
        }
        let mut deps = idx.clone();
        deps.push(w);
        let rg = self.grad_of(&deps);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::WeightedSum {
                inputs: idx,
                weights: w,
                offset,
            },
            rg,
        ))
    }

    /// Concatenates along the channel axis, preserving part order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return config("concat_channels needs at least one part");
        }
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let first = self.nodes[idx[0]].value.shape();
        let mut channels = 0;
        for &j in &idx {
            let s = self.nodes[j].value.shape();
            if (s.batch, s.height, s.width) != (first.batch, first.height, first.width) {
                return config(format!("concat_channels: {s} does not match {first}"));
            }
            channels += s.channels;
        }
        let shape = first.with_channels(channels);
        let mut out = Vec::with_capacity(shape.numel());
        for b in 0..first.batch {
            for &j in &idx {
                let v = &self.nodes[j].value;
                let per = v.shape().sample();
                out.extend_from_slice(&v.data()[b * per..(b + 1) * per]);
            }
        }
        let rg = self.grad_of(&idx);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(idx), rg))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let i = self.check(input)?;
        let value = self.nodes[i].value.slice_channels(start, len)?;
        let rg = self.grad_of(&[i]);
        Ok(self.push(value, Op::Slice { input: i, start }, rg))
    }

    /// Shifts every plane one pixel up and left: `y[r][c] = x[r+1][c+1]`,
    /// zero beyond the border.
    pub fn shift_spatial(&mut self, input: Var) -> Result<Var> {
        let i = self.check(input)?;
        let x = &self.nodes[i].value;
        let s = x.shape();
        let (h, w) = (s.height, s.width);
        let mut out = vec![0.0f32; s.numel()];
        for p in 0..s.batch * s.channels {
            let base = p * h * w;
            for r in 0..h.saturating_sub(1) {
                let src = &x.data()[base + (r + 1) * w + 1..base + (r + 2) * w];
                out[base + r * w..base + r * w + w - 1].copy_from_slice(src);
            }
        }
        let rg = self.grad_of(&[i]);
        Ok(self.push(Tensor::from_parts(s, out), Op::Shift(i), rg))
    }

    /// Mean over each (height, width) plane; output shape (B, C, 1, 1).
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let i = self.check(input)?;
        let x = &self.nodes[i].value;
        let s = x.shape();
        let plane = s.plane();
        let out = x
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f32>() / plane as f32)
            .collect();
        let rg = self.grad_of(&[i]);
        Ok(self.push(
            Tensor::from_parts(Shape::new(s.batch, s.channels, 1, 1), out),
            Op::GlobalAvgPool(i),
            rg,
        ))
    }

    /// Fully connected layer over flattened samples. `weight` has shape
    /// (out, in, 1, 1); `bias` has shape (1, out, 1, 1).
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let i = self.check(input)?;
        let w = self.check(weight)?;
        let bi = bias.map(|b| self.check(b)).transpose()?;
        let xs = self.nodes[i].value.shape();
        let ws = self.nodes[w].value.shape();
        let (fin, fout) = (xs.sample(), ws.batch);
        if ws.channels != fin || ws.plane() != 1 {
            return config(format!("linear: weight {ws} does not fit input {xs}"));
        }
        let mut out = vec![0.0f32; xs.batch * fout];
        if let Some(b) = bi {
            same_shape(self.nodes[b].value.shape(), Shape::new(1, fout, 1, 1), "linear bias")?;
            let bias = self.nodes[b].value.data();
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if bi.is_some() { 1.0 } else { 0.0 };
        matmul(
            xs.batch,
            fin,
            fout,
            self.nodes[i].value.data(),
            false,
            self.nodes[w].value.data(),
            true,
            beta,
            &mut out,
        );
        self.multiply_adds += (xs.batch * fin * fout) as u64;
        let mut deps = vec![i, w];
        deps.extend(bi);
        let rg = self.grad_of(&deps);
        Ok(self.push(
            Tensor::from_parts(Shape::new(xs.batch, fout, 1, 1), out),
            Op::Linear {
                input: i,
                weight: w,
                bias: bi,
            },
            rg,
        ))
    }

    /// Softmax along the width axis of every (batch, channel, row).
    pub fn softmax_rows(&mut self, input: Var) -> Result<Var> {
        let i = self.check(input)?;
        let x = &self.nodes[i].value;
        let s = x.shape();
        if s.width == 0 {
            return config("softmax over an empty row");
        }
        let mut out = vec![0.0f32; s.numel()];
        for (o, l) in out.chunks_mut(s.width).zip(x.data().chunks(s.width)) {
            kernels::softmax_row(l, o);
        }
        let rg = self.grad_of(&[i]);
        Ok(self.push(Tensor::from_parts(s, out), Op::SoftmaxRows(i), rg))
    }

    /// Mean softmax cross-entropy of logits shaped (B, K, 1, 1).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let i = self.check(logits)?;
        let x = &self.nodes[i].value;
        let s = x.shape();
        if s.plane() != 1 || labels.len() != s.batch || s.batch == 0 {
            return config(format!(
                "cross_entropy: logits {s} incompatible with {} labels",
                labels.len()
            ));
        }
        let k = s.channels;
        let mut probs = vec![0.0f32; s.numel()];
        let mut loss = 0.0f64;
        for ((row, p), &label) in x.data().chunks(k).zip(probs.chunks_mut(k)).zip(labels) {
            if label >= k {
                return config(format!("label {label} out of range for {k} classes"));
            }
            kernels::softmax_row(row, p);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max as f64 + row.iter().map(|&v| ((v - max) as f64).exp()).sum::<f64>().ln();
            loss += lse - row[label] as f64;
        }
        let value = Tensor::scalar((loss / s.batch as f64) as f32);
        let rg = self.grad_of(&[i]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits: i,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let i = self.check(input)?;
        let value = Tensor::scalar(self.nodes[i].value.sum());
        let rg = self.grad_of(&[i]);
        Ok(self.push(value, Op::Sum(i), rg))
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.check(loss)?;
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got {}",
                self.nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; root + 1];
        if self.nodes[root].requires_grad {
            grads[root] = Some(vec![1.0]);
        }
        for n in (0..=root).rev() {
            let node = &self.nodes[n];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(n);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            self.backprop_node(node, g, lower);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_parts(self.nodes[i].value.shape(), g)))
            .collect();
        Ok(Gradients { tape: self.id, grads })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, geom } => {
                let (gx, gw) = kernels::conv2d_backward(
                    val(*input),
                    val(*kernel),
                    g,
                    *geom,
                    self.wants(*input),
                    self.wants(*kernel),
                );
                if let Some(gx) = gx {
                    add_into(&mut grads[*input], gx);
                }
                if let Some(gw) = gw {
                    add_into(&mut grads[*kernel], gw);
                }
            }
            Op::MaxPool { input, argmax, .. } => {
                if self.wants(*input) {
                    let mut gx = vec![0.0f32; val(*input).numel()];
                    for (&at, &gv) in argmax.iter().zip(g) {
                        gx[at as usize] += gv;
                    }
                    add_into(&mut grads[*input], gx);
                }
            }
            Op::AvgPool { input, geom } => {
                if self.wants(*input) {
                    add_into(
                        &mut grads[*input],
                        kernels::avg_pool2d_backward(val(*input).shape(), g, *geom),
                    );
                }
            }
            Op::Normalize {
                input,
                scale,
                shift,
                normalized,
                inv_std,
            } => {
                let s = node.value.shape();
                let plane = s.plane();
                let hat: &[f32] = normalized.as_deref().unwrap_or(node.value.data());
                if let Some(j) = *scale {
                    if self.wants(j) {
                        let mut gs = vec![0.0f32; s.channels];
                        for b in 0..s.batch {
                            for (c, acc) in gs.iter_mut().enumerate() {
                                let at = (b * s.channels + c) * plane;
                                *acc += g[at..at + plane]
                                    .iter()
                                    .zip(&hat[at..at + plane])
                                    .map(|(a, h)| a * h)
                                    .sum::<f32>();
                            }
                        }
                        add_into(&mut grads[j], gs);
                    }
                }
                if let Some(j) = *shift {
                    if self.wants(j) {
                        let mut gt = vec![0.0f32; s.channels];
                        for b in 0..s.batch {
                            for (c, acc) in gt.iter_mut().enumerate() {
                                let at = (b * s.channels + c) * plane;
                                *acc += g[at..at + plane].iter().sum::<f32>();
                            }
                        }
                        add_into(&mut grads[j], gt);
                    }
                }
                if self.wants(*input) {
                    let gx = match scale {
                        None => kernels::normalize_backward(s, hat, inv_std, g),
                        Some(j) => {
                            let gamma = val(*j).data();
                            let mut gh = g.to_vec();
                            for b in 0..s.batch {
                                for (c, &gm) in gamma.iter().enumerate() {
                                    let at = (b * s.channels + c) * plane;
                                    gh[at..at + plane].iter_mut().for_each(|v| *v *= gm);
                                }
                            }
                            kernels::normalize_backward(s, hat, inv_std, &gh)
                        }
                    };
                    add_into(&mut grads[*input], gx);
                }
            }
            Op::Relu(i) => {
                if self.wants(*i) {
                    let gx = g
                        .iter()
                        .zip(val(*i).data())
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    add_into(&mut grads[*i], gx);
                }
            }
            Op::Add(a, b) => {
                for &i in [a, b] {
                    if self.wants(i) {
                        add_into(&mut grads[i], g.to_vec());
                    }
                }
            }
            Op::AddN(parts) => {
                for &i in parts {
                    if self.wants(i) {
                        add_into(&mut grads[i], g.to_vec());
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    add_into(
                        &mut grads[*a],
                        g.iter().zip(val(*b).data()).map(|(p, q)| p * q).collect(),
                    );
                }
                if self.wants(*b) {
                    add_into(
                        &mut grads[*b],
                        g.iter().zip(val(*a).data()).map(|(p, q)| p * q).collect(),
                    );
                }
            }
            Op::WeightedSum {
                inputs,
                weights,
                offset,
            } => {
                let w = val(*weights).data();
                for (k, &i) in inputs.iter().enumerate() {
                    if self.wants(i) {
                        let wk = w[offset + k];
                        add_into(&mut grads[i], g.iter().map(|v| v * wk).collect());
                    }
                }
                if self.wants(*weights) {
                    let mut gw = vec![0.0f32; w.len()];
                    for (k, &i) in inputs.iter().enumerate() {
                        gw[offset + k] = g
                            .iter()
                            .zip(val(i).data())
                            .map(|(&a, &b)| a as f64 * b as f64)
                            .sum::<f64>() as f32;
                    }
                    add_into(&mut grads[*weights], gw);
                }
            }
            Op::Concat(parts) => {
                let s = node.value.shape();
                let per_out = s.sample();
                let mut at = 0;
                for &i in parts {
                    let ps = val(i).shape();
                    let per = ps.sample();
                    if self.wants(i) {
                        let mut gx = Vec::with_capacity(ps.numel());
                        for b in 0..s.batch {
                            gx.extend_from_slice(&g[b * per_out + at..b * per_out + at + per]);
                        }
                        add_into(&mut grads[i], gx);
                    }
                    at += per;
                }
            }
            Op::Slice { input, start } => {
                if self.wants(*input) {
                    let is = val(*input).shape();
                    let s = node.value.shape();
                    let plane = s.plane();
                    let slot = &mut grads[*input];
                    for b in 0..s.batch {
                        let part = &g[b * s.sample()..(b + 1) * s.sample()];
                        add_slice_into(slot, is.numel(), (b * is.channels + start) * plane, part);
                    }
                }
            }
            Op::Shift(i) => {
                if self.wants(*i) {
                    let s = node.value.shape();
                    let (h, w) = (s.height, s.width);
                    let mut gx = vec![0.0f32; s.numel()];
                    for p in 0..s.batch * s.channels {
                        let base = p * h * w;
                        for r in 0..h.saturating_sub(1) {
                            let src = &g[base + r * w..base + r * w + w - 1];
                            gx[base + (r + 1) * w + 1..base + (r + 2) * w].copy_from_slice(src);
                        }
                    }
                    add_into(&mut grads[*i], gx);
                }
            }
            Op::GlobalAvgPool(i) => {
                if self.wants(*i) {
                    let s = val(*i).shape();
                    let plane = s.plane();
                    let mut gx = Vec::with_capacity(s.numel());
                    for &gv in g {
                        gx.extend(std::iter::repeat_n(gv / plane as f32, plane));
                    }
                    add_into(&mut grads[*i], gx);
                }
            }
            Op::Linear { input, weight, bias } => {
                let xs = val(*input).shape();
                let (n, fin) = (xs.batch, xs.sample());
                let fout = node.value.shape().channels;
                if self.wants(*input) {
                    let mut gx = vec![0.0f32; n * fin];
                    matmul(n, fout, fin, g, false, val(*weight).data(), false, 0.0, &mut gx);
                    add_into(&mut grads[*input], gx);
                }
                if self.wants(*weight) {
                    let mut gw = vec![0.0f32; fout * fin];
                    matmul(fout, n, fin, g, true, val(*input).data(), false, 0.0, &mut gw);
                    add_into(&mut grads[*weight], gw);
                }
                if let Some(b) = *bias {
                    if self.wants(b) {
                        let mut gb = vec![0.0f32; fout];
                        for row in g.chunks(fout) {
                            gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                        add_into(&mut grads[b], gb);
                    }
                }
            }
            Op::SoftmaxRows(i) => {
                if self.wants(*i) {
                    let w = node.value.shape().width;
                    let mut gx = vec![0.0f32; g.len()];
                    for ((o, p), gr) in gx.chunks_mut(w).zip(node.value.data().chunks(w)).zip(g.chunks(w)) {
                        let dot: f32 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &pv), &gv) in o.iter_mut().zip(p).zip(gr) {
                            *o = pv * (gv - dot);
                        }
                    }
                    add_into(&mut grads[*i], gx);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.wants(*logits) {
                    let k = val(*logits).shape().channels;
                    let scale = g[0] / labels.len() as f32;
                    let mut gx = probs.clone();
                    for (row, &label) in gx.chunks_mut(k).zip(labels) {
                        row[label] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= scale);
                    }
                    add_into(&mut grads[*logits], gx);
                }
            }
            Op::Sum(i) => {
                if self.wants(*i) {
                    add_into(&mut grads[*i], vec![g[0]; val(*i).numel()]);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn matmul(m: usize, k: usize, n: usize, a: &[f32], a_trans: bool, b: &[f32], b_trans: bool, beta: f32, c: &mut [f32]) {
    kernels::gemm(m, k, n, a, a_trans, b, b_trans, beta, c)
}
