//! A tiny graph description evaluated two ways: recorded on the tape in
//! 32-bit, and by naive 64-bit reference loops written from the definitions.

use nas_core::kernels::{ConvGeom, PoolGeom, PoolMode};
use nas_core::tape::Traced;
use nas_core::tensor::Shape;
use nas_core::{Result, Tape, Tensor, Var};

/// Reference value in 64-bit.
#[derive(Clone, Debug)]
pub struct T64 {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl T64 {
    pub fn zeros(shape: Shape) -> Self {
        T64 {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        T64 {
            shape: t.shape(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        let s = self.shape;
        self.data[((b * s.channels + c) * s.height + y) * s.width + x]
    }

    fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: f64) {
        let s = self.shape;
        self.data[((b * s.channels + c) * s.height + y) * s.width + x] = v;
    }
}

/// Operations refer to earlier values by index; index `i < inputs` is the
/// i-th input tensor, later indices are earlier operations.
#[derive(Clone, Debug)]
pub enum Node {
    Conv(usize, usize, ConvGeom),
    Pool(usize, PoolMode, PoolGeom),
    Normalize(usize, Option<usize>, Option<usize>),
    Relu(usize),
    Add(usize, usize),
    AddN(Vec<usize>),
    Mul(usize, usize),
    WeightedSum(Vec<usize>, usize, usize),
    Concat(Vec<usize>),
    Slice(usize, usize, usize),
    Shift(usize),
    Gap(usize),
    Linear(usize, usize, Option<usize>),
    SoftmaxRows(usize),
}

#[derive(Clone, Debug)]
pub struct Graph {
    pub inputs: Vec<Tensor>,
    pub nodes: Vec<Node>,
}

impl Graph {
    /// Records the graph on `tape` over the given input variables and
    /// returns the last value.
    pub fn record(&self, tape: &mut Tape, inputs: &[Var]) -> Result<Var> {
        let mut vals: Vec<Var> = inputs.to_vec();
        for node in &self.nodes {
            let v = match node {
                Node::Conv(x, k, g) => tape.conv2d(vals[*x], vals[*k], *g)?,
                Node::Pool(x, m, g) => tape.pool2d(vals[*x], *m, *g)?,
                Node::Normalize(x, s, t) => tape.normalize(vals[*x], s.map(|i| vals[i]), t.map(|i| vals[i]))?,
                Node::Relu(x) => tape.relu(vals[*x])?,
                Node::Add(a, b) => tape.add(vals[*a], vals[*b])?,
                Node::AddN(p) => tape.add_n(&p.iter().map(|&i| vals[i]).collect::<Vec<_>>())?,
                Node::Mul(a, b) => tape.mul(vals[*a], vals[*b])?,
                Node::WeightedSum(p, w, off) => {
                    tape.weighted_sum(&p.iter().map(|&i| vals[i]).collect::<Vec<_>>(), vals[*w], *off)?
                }
                Node::Concat(p) => tape.concat_channels(&p.iter().map(|&i| vals[i]).collect::<Vec<_>>())?,
                Node::Slice(x, start, len) => tape.slice_channels(vals[*x], *start, *len)?,
                Node::Shift(x) => tape.shift_spatial(vals[*x])?,
                Node::Gap(x) => tape.global_avg_pool(vals[*x])?,
                Node::Linear(x, w, b) => tape.linear(vals[*x], vals[*w], b.map(|i| vals[i]))?,
                Node::SoftmaxRows(x) => tape.softmax_rows(vals[*x])?,
            };
            vals.push(v);
        }
        Ok(*vals.last().expect("graph has values"))
    }

    /// Evaluates the graph with the reference loops.
    pub fn eval64(&self, inputs: &[T64]) -> T64 {
        let mut vals: Vec<T64> = inputs.to_vec();
        for node in &self.nodes {
            let v = match node {
                Node::Conv(x, k, g) => conv(&vals[*x], &vals[*k], *g),
                Node::Pool(x, m, g) => pool(&vals[*x], *m, *g),
                Node::Normalize(x, s, t) => normalize(&vals[*x], s.map(|i| &vals[i]), t.map(|i| &vals[i])),
                Node::Relu(x) => map(&vals[*x], |v| v.max(0.0)),
                Node::Add(a, b) => zip(&vals[*a], &vals[*b], |p, q| p + q),
                Node::AddN(p) => p[1..]
                    .iter()
                    .fold(vals[p[0]].clone(), |acc, &i| zip(&acc, &vals[i], |a, b| a + b)),
                Node::Mul(a, b) => zip(&vals[*a], &vals[*b], |p, q| p * q),
                Node::WeightedSum(p, w, off) => {
                    let mut acc = T64::zeros(vals[p[0]].shape);
                    for (k, &i) in p.iter().enumerate() {
                        let wk = vals[*w].data[off + k];
                        acc = zip(&acc, &vals[i], |a, b| a + wk * b);
                    }
                    acc
                }
                Node::Concat(p) => concat(&p.iter().map(|&i| &vals[i]).collect::<Vec<_>>()),
                Node::Slice(x, start, len) => slice(&vals[*x], *start, *len),
                Node::Shift(x) => shift(&vals[*x]),
                Node::Gap(x) => gap(&vals[*x]),
                Node::Linear(x, w, b) => linear(&vals[*x], &vals[*w], b.map(|i| &vals[i])),
                Node::SoftmaxRows(x) => softmax_rows(&vals[*x]),
            };
            vals.push(v);
        }
        vals.pop().expect("graph has values")
    }
}

fn map(x: &T64, f: impl Fn(f64) -> f64) -> T64 {
    T64 {
        shape: x.shape,
        data: x.data.iter().map(|&v| f(v)).collect(),
    }
}

fn zip(x: &T64, y: &T64, f: impl Fn(f64, f64) -> f64) -> T64 {
    assert_eq!(x.shape, y.shape);
    T64 {
        shape: x.shape,
        data: x.data.iter().zip(&y.data).map(|(&a, &b)| f(a, b)).collect(),
    }
}

pub fn conv(x: &T64, k: &T64, g: ConvGeom) -> T64 {
    let (xs, ks) = (x.shape, k.shape);
    let span = g.dilation * (ks.height - 1) + 1;
    let oh = (xs.height + 2 * g.padding - span) / g.stride + 1;
    let ow = (xs.width + 2 * g.padding - span) / g.stride + 1;
    let mut out = T64::zeros(Shape::new(xs.batch, ks.batch, oh, ow));
    let out_per_group = ks.batch / g.groups;
    for b in 0..xs.batch {
        for oc in 0..ks.batch {
            let group = oc / out_per_group;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..ks.channels {
                        for ky in 0..ks.height {
                            for kx in 0..ks.width {
                                let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= xs.height as isize || ix >= xs.width as isize {
                                    continue;
                                }
                                let c = group * ks.channels + ic;
                                acc += x.at(b, c, iy as usize, ix as usize) * k.at(oc, ic, ky, kx);
                            }
                        }
                    }
                    out.set(b, oc, oy, ox, acc);
                }
            }
        }
    }
    out
}

pub fn pool(x: &T64, mode: PoolMode, g: PoolGeom) -> T64 {
    let s = x.shape;
    let oh = (s.height + 2 * g.padding - g.window) / g.stride + 1;
    let ow = (s.width + 2 * g.padding - g.window) / g.stride + 1;
    let mut out = T64::zeros(Shape::new(s.batch, s.channels, oh, ow));
    for b in 0..s.batch {
        for c in 0..s.channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut seen = Vec::new();
                    for dy in 0..g.window {
                        for dx in 0..g.window {
                            let iy = (oy * g.stride + dy) as isize - g.padding as isize;
                            let ix = (ox * g.stride + dx) as isize - g.padding as isize;
                            if iy >= 0 && ix >= 0 && iy < s.height as isize && ix < s.width as isize {
                                seen.push(x.at(b, c, iy as usize, ix as usize));
                            }
                        }
                    }
                    let v = match mode {
                        PoolMode::Max => seen.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                        PoolMode::Average => seen.iter().sum::<f64>() / seen.len() as f64,
                    };
                    out.set(b, c, oy, ox, v);
                }
            }
        }
    }
    out
}

pub fn normalize(x: &T64, scale: Option<&T64>, shift: Option<&T64>) -> T64 {
    let s = x.shape;
    let mut out = T64::zeros(s);
    for c in 0..s.channels {
        let mut vals = Vec::new();
        for b in 0..s.batch {
            for y in 0..s.height {
                for xx in 0..s.width {
                    vals.push(x.at(b, c, y, xx));
                }
            }
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let denom = (var + 1e-5).sqrt();
        let gamma = scale.map_or(1.0, |t| t.data[c]);
        let beta = shift.map_or(0.0, |t| t.data[c]);
        for b in 0..s.batch {
            for y in 0..s.height {
                for xx in 0..s.width {
                    out.set(b, c, y, xx, (x.at(b, c, y, xx) - mean) / denom * gamma + beta);
                }
            }
        }
    }
    out
}

fn concat(parts: &[&T64]) -> T64 {
    let s0 = parts[0].shape;
    let channels = parts.iter().map(|p| p.shape.channels).sum();
    let mut out = T64::zeros(Shape::new(s0.batch, channels, s0.height, s0.width));
    for b in 0..s0.batch {
        let mut at = 0;
        for p in parts {
            for c in 0..p.shape.channels {
                for y in 0..s0.height {
                    for x in 0..s0.width {
                        out.set(b, at + c, y, x, p.at(b, c, y, x));
                    }
                }
            }
            at += p.shape.channels;
        }
    }
    out
}

fn slice(x: &T64, start: usize, len: usize) -> T64 {
    let s = x.shape;
    let mut out = T64::zeros(Shape::new(s.batch, len, s.height, s.width));
    for b in 0..s.batch {
        for c in 0..len {
            for y in 0..s.height {
                for xx in 0..s.width {
                    out.set(b, c, y, xx, x.at(b, start + c, y, xx));
                }
            }
        }
    }
    out
}

fn shift(x: &T64) -> T64 {
    let s = x.shape;
    let mut out = T64::zeros(s);
    for b in 0..s.batch {
        for c in 0..s.channels {
            for y in 0..s.height.saturating_sub(1) {
                for xx in 0..s.width.saturating_sub(1) {
                    out.set(b, c, y, xx, x.at(b, c, y + 1, xx + 1));
                }
            }
        }
    }
    out
}

fn gap(x: &T64) -> T64 {
    let s = x.shape;
    let mut out = T64::zeros(Shape::new(s.batch, s.channels, 1, 1));
    for b in 0..s.batch {
        for c in 0..s.channels {
            let mut acc = 0.0;
            for y in 0..s.height {
                for xx in 0..s.width {
                    acc += x.at(b, c, y, xx);
                }
            }
            out.set(b, c, 0, 0, acc / (s.height * s.width) as f64);
        }
    }
    out
}

fn linear(x: &T64, w: &T64, bias: Option<&T64>) -> T64 {
    let fin = x.shape.channels * x.shape.height * x.shape.width;
    let fout = w.shape.batch;
    let mut out = T64::zeros(Shape::new(x.shape.batch, fout, 1, 1));
    for b in 0..x.shape.batch {
        for o in 0..fout {
            let mut acc = bias.map_or(0.0, |t| t.data[o]);
            for i in 0..fin {
                acc += x.data[b * fin + i] * w.data[o * fin + i];
            }
            out.data[b * fout + o] = acc;
        }
    }
    out
}

pub fn softmax64(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn softmax_rows(x: &T64) -> T64 {
    let w = x.shape.width;
    T64 {
        shape: x.shape,
        data: x.data.chunks(w).flat_map(softmax64).collect(),
    }
}

pub fn cross_entropy64(logits: &T64, labels: &[usize]) -> f64 {
    let k = logits.shape.channels;
    let mut total = 0.0;
    for (row, &label) in logits.data.chunks(k).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    total / labels.len() as f64
}

/// Rebuilds a recorded tape as a graph. Leaves become inputs in tape order;
/// the graph ends at position `output`. A cross-entropy record at `output`
/// is dropped and its labels returned, so the graph yields the logits.
pub fn graph_from_trace(trace: &[Traced], output: usize) -> (Graph, Option<Vec<usize>>) {
    let mut inputs = Vec::new();
    let mut leaf_slot = vec![usize::MAX; trace.len()];
    for (i, t) in trace.iter().enumerate() {
        if let Traced::Leaf { value, .. } = t {
            leaf_slot[i] = inputs.len();
            inputs.push(value.clone());
        }
    }
    let mut slot = leaf_slot;
    let mut nodes = Vec::new();
    let mut labels = None;
    let mut end = output;
    if let Traced::CrossEntropy { logits, labels: l } = &trace[output] {
        labels = Some(l.clone());
        end = *logits;
    }
    for (i, t) in trace.iter().enumerate().take(end + 1) {
        let m = |j: &usize| slot[*j];
        let ms = |v: &Vec<usize>| v.iter().map(|j| slot[*j]).collect::<Vec<_>>();
        let node = match t {
            Traced::Leaf { .. } => continue,
            Traced::Conv2d { input, kernel, geom } => Node::Conv(m(input), m(kernel), *geom),
            Traced::Pool { input, mode, geom } => Node::Pool(m(input), *mode, *geom),
            Traced::Normalize { input, scale, shift } => {
                Node::Normalize(m(input), scale.as_ref().map(m), shift.as_ref().map(m))
            }
            Traced::Relu(x) => Node::Relu(m(x)),
            Traced::Add(a, b) => Node::Add(m(a), m(b)),
            Traced::AddN(p) => Node::AddN(ms(p)),
            Traced::Mul(a, b) => Node::Mul(m(a), m(b)),
            Traced::WeightedSum {
                inputs,
                weights,
                offset,
            } => Node::WeightedSum(ms(inputs), m(weights), *offset),
            Traced::Concat(p) => Node::Concat(ms(p)),
            Traced::Slice { input, start, len } => Node::Slice(m(input), *start, *len),
            Traced::Shift(x) => Node::Shift(m(x)),
            Traced::GlobalAvgPool(x) => Node::Gap(m(x)),
            Traced::Linear { input, weight, bias } => Node::Linear(m(input), m(weight), bias.as_ref().map(m)),
            Traced::SoftmaxRows(x) => Node::SoftmaxRows(m(x)),
            Traced::CrossEntropy { .. } | Traced::Sum(_) => panic!("reduction record {i} inside the graph"),
        };
        slot[i] = inputs.len() + nodes.len();
        nodes.push(node);
    }
    (Graph { inputs, nodes }, labels)
}
