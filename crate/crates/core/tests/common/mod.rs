#![allow(dead_code)]

pub mod cases;
pub mod derivation;
pub mod graph;

use graph::{cross_entropy64, Graph, T64};
use nas_core::tensor::Shape;
use nas_core::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: Shape, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
}

/// Values that are pairwise at least 0.01 apart, for kink-free max pooling.
pub fn distinct_tensor(shape: Shape, rng: &mut impl Rng) -> Tensor {
    let n = shape.numel();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_fn(shape, |i| order[i] as f32 * 0.01 - n as f32 * 0.005)
}

/// Values bounded away from zero, for kink-free ReLU.
pub fn off_zero_tensor(shape: Shape, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05f32..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// How the graph output is reduced to the scalar being differentiated.
#[derive(Clone, Debug)]
pub enum Head {
    /// `Σ output ⊙ R` with a seeded random `R`.
    Project,
    /// Mean cross-entropy of logits shaped (B, K, 1, 1).
    CrossEntropy(Vec<usize>),
}

#[derive(Clone, Copy, Debug)]
pub struct FdReport {
    /// Largest `|y32 − y64| / max(1, |y64|)` over the graph output.
    pub forward: f64,
    /// Worst per-input `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, floor)`.
    pub gradient: f64,
}

/// Per-input gradient norms below this share of the global norm are
/// compared against the share instead.
pub const GRADIENT_FLOOR: f64 = 1e-3;

/// Finite-difference settings.
#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub step: f64,
    /// Coordinates probed per input; larger inputs are sampled.
    pub max_coords: usize,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            step: FD_STEP,
            max_coords: usize::MAX,
        }
    }
}

/// Tape gradients of the headed graph against central finite differences of
/// the 64-bit reference evaluation.
pub fn fd_check(graph: &Graph, head: &Head, seed: u64) -> FdReport {
    fd_check_with(graph, head, seed, FdOptions::default())
}

/// [`fd_check`] with explicit step and coordinate sampling.
pub fn fd_check_with(graph: &Graph, head: &Head, seed: u64, opts: FdOptions) -> FdReport {
    let mut tape = Tape::new();
    let vars: Vec<Var> = graph.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let y = graph.record(&mut tape, &vars).unwrap();
    let r = random_tensor(tape.shape(y), &mut rng(seed ^ 0x5eed));
    let loss = match head {
        Head::Project => {
            let rv = tape.constant(r.clone());
            let prod = tape.mul(y, rv).unwrap();
            tape.sum(prod).unwrap()
        }
        Head::CrossEntropy(labels) => tape.cross_entropy(y, labels).unwrap(),
    };
    let grads = tape.backward(loss).unwrap();

    let r64 = T64::from_tensor(&r);
    let eval = |inputs: &[T64]| -> f64 {
        let out = graph.eval64(inputs);
        match head {
            Head::Project => out.data.iter().zip(&r64.data).map(|(a, b)| a * b).sum(),
            Head::CrossEntropy(labels) => cross_entropy64(&out, labels),
        }
    };

    let base: Vec<T64> = graph.inputs.iter().map(T64::from_tensor).collect();
    let y64 = graph.eval64(&base);
    let forward = tape
        .value(y)
        .data()
        .iter()
        .zip(&y64.data)
        .map(|(&a, &b)| (a as f64 - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max);

    let mut pick = rng(seed ^ 0xc0de);
    let mut per_input = Vec::with_capacity(vars.len());
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("gradient for every input");
        let mut work = base.clone();
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        let n = base[i].data.len();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            (0..opts.max_coords).map(|_| pick.random_range(0..n)).collect()
        };
        for e in coords {
            let orig = base[i].data[e];
            work[i].data[e] = orig + opts.step;
            let plus = eval(&work);
            work[i].data[e] = orig - opts.step;
            let minus = eval(&work);
            work[i].data[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[e] as f64;
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        per_input.push((diff.sqrt(), na.sqrt().max(nn.sqrt())));
    }
    // Inputs with a vanishing gradient are measured against a floor tied to
    // the whole gradient, since f32 accumulation noise dominates them.
    let global = per_input.iter().map(|(_, s)| s * s).sum::<f64>().sqrt();
    let floor = GRADIENT_FLOOR * global;
    let mut gradient = 0.0f64;
    for (diff, scale) in per_input {
        let scale = scale.max(floor);
        if scale > 0.0 {
            gradient = gradient.max(diff / scale);
        }
    }
    FdReport { forward, gradient }
}

/// Finite-difference check of a whole micro super-net (S6, one intermediate
/// node, 4×4 images, batch 4) under cross-entropy, with every weight, α and
/// the images trainable. The recorded tape is replayed by the reference
/// interpreter.
pub fn supernet_fd(seed: u64) -> FdReport {
    use nas_core::space::SpaceId;
    use nas_core::supernet::{SuperNet, SuperNetConfig};
    let cfg = SuperNetConfig {
        space: SpaceId::S6,
        n: 1,
        nodes: 1,
        init_channels: 2,
        num_classes: 3,
        in_channels: 2,
        sepconv_repeats: 1,
    };
    let mut r = rng(seed);
    let mut net = SuperNet::build(&cfg, &mut r).unwrap();
    // spread α so strengths are far from uniform
    for t in [nas_core::space::CellType::Normal, nas_core::space::CellType::Reduction] {
        for v in net.arch.tensor_mut(t).data_mut() {
            *v = r.random_range(-1.0f32..1.0);
        }
    }
    let images = off_zero_tensor(Shape::new(4, 2, 4, 4), &mut r);
    let labels: Vec<usize> = (0..4).map(|i| (i + seed as usize) % 3).collect();
    let mut tape = Tape::new();
    let b = net.bind(&mut tape, true, true).unwrap();
    let x = tape.param(images);
    let logits = net.forward(&mut tape, &b, x).unwrap();
    let loss = tape.cross_entropy(logits, &labels).unwrap();
    let (graph, ce) = graph::graph_from_trace(&tape.trace(), tape.position(loss).unwrap());
    let opts = FdOptions {
        step: 1e-6,
        max_coords: 6,
    };
    fd_check_with(&graph, &Head::CrossEntropy(ce.expect("cross-entropy head")), seed, opts)
}

/// Random valid genotype with strengths on the six-decimal grid.
pub fn random_genotype(r: &mut impl Rng) -> nas_core::genotype::Genotype {
    use nas_core::genotype::{is_candidate, CellGenotype, Entry, Genotype};
    use nas_core::space::{SearchSpace, SpaceId};
    let id = [SpaceId::S, SpaceId::S5, SpaceId::S6, SpaceId::S7][r.random_range(0..4)];
    let space = SearchSpace::new(id);
    let ops: Vec<_> = space
        .operations
        .iter()
        .copied()
        .filter(|&k| is_candidate(&space, k))
        .collect();
    let b = r.random_range(1..=5);
    let cell = |r: &mut dyn rand::RngCore| {
        let nodes = (0..b)
            .map(|j| {
                let node = j + 2;
                let a = r.random_range(0..node);
                let mut c = r.random_range(0..node - 1);
                if c >= a {
                    c += 1;
                }
                let mut entry = |source| Entry {
                    source,
                    op: ops[r.random_range(0..ops.len())],
                    strength: r.random_range(1u32..=1_000_000) as f32 / 1e6,
                };
                [entry(a), entry(c)]
            })
            .collect();
        CellGenotype { nodes }
    };
    let normal = cell(r);
    let reduce = cell(r);
    Genotype {
        space: id,
        normal,
        reduce,
    }
}
