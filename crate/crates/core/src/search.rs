//! First-order alternating optimization of super-net weights and
//! architecture parameters.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::time::Instant;

use crate::data::{count_correct, permutation, split, Batch, Dataset, Normalizer};
use crate::error::{config, Error, Result};
use crate::genotype::{derive_genotype, skip_fraction, Genotype};
use crate::params::{Adam, SgdConfig};
use crate::seed::stage_rng;
use crate::space::CellType;
use crate::supernet::{SuperNet, SuperNetConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial weight learning rate; decays to 0 on a cosine schedule.
    pub w_learning_rate: f32,
    pub w_momentum: f32,
    pub w_weight_decay: f32,
    pub alpha_learning_rate: f32,
    pub alpha_weight_decay: f32,
    pub alpha_beta1: f32,
    pub alpha_beta2: f32,
    /// Share of the search data used for weight steps; the rest drives α.
    pub split_fraction: f64,
    /// Record elapsed seconds in the trace; when off the column holds 0.
    pub wall_time: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 50,
            batch_size: 32,
            w_learning_rate: 0.05,
            w_momentum: 0.9,
            w_weight_decay: 3e-4,
            alpha_learning_rate: 3e-4,
            alpha_weight_decay: 1e-3,
            alpha_beta1: 0.5,
            alpha_beta2: 0.999,
            split_fraction: 0.5,
            wall_time: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return config("search epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return config("search batch_size must be at least 1");
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return config(format!("split_fraction {} must lie in (0, 1)", self.split_fraction));
        }
        let rates = [
            ("w_learning_rate", self.w_learning_rate),
            ("alpha_learning_rate", self.alpha_learning_rate),
        ];
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return config(format!("{name} must be a finite non-negative rate, got {v}"));
            }
        }
        let others = [
            ("w_momentum", self.w_momentum),
            ("w_weight_decay", self.w_weight_decay),
            ("alpha_weight_decay", self.alpha_weight_decay),
        ];
        for (name, v) in others {
            if !(v >= 0.0 && v.is_finite()) {
                return config(format!("{name} must be non-negative, got {v}"));
            }
        }
        for (name, v) in [("alpha_beta1", self.alpha_beta1), ("alpha_beta2", self.alpha_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return config(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        Ok(())
    }
}

/// `0.5 · base · (1 + cos(π · epoch / (epochs − 1)))`: the base rate at the
/// first epoch and 0 at the last. A single epoch uses the base rate.
pub fn cosine_lr(base: f32, epoch: usize, epochs: usize) -> f32 {
    if epochs <= 1 {
        return base;
    }
    let t = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
    (0.5 * base as f64 * (1.0 + (PI * t).cos())).max(0.0) as f32
}

/// Losses of one alternating step, measured before the respective update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub train_loss: f32,
    pub val_loss: f32,
    /// Correct predictions on the validation batch.
    pub val_correct: usize,
}

/// Cross-entropy of `batch` and its gradient with respect to α at the
/// current weights, as `[normal, reduce]`.
pub fn alpha_gradient(net: &SuperNet, batch: &Batch) -> Result<(f32, [Tensor; 2], usize)> {
    let mut tape = Tape::new();
    let b = net.bind(&mut tape, false, true)?;
    let x = tape.constant(batch.images.clone());
    let logits = net.forward(&mut tape, &b, x)?;
    let loss = tape.cross_entropy(logits, &batch.labels)?;
    let value = tape.value(loss).data()[0];
    let correct = count_correct(tape.value(logits), &batch.labels);
    let grads = tape.backward(loss)?;
    let grad = |t: CellType| {
        grads
            .get(b.alpha(t))
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(net.arch.tensor(t).shape()))
    };
    Ok((value, [grad(CellType::Normal), grad(CellType::Reduction)], correct))
}

fn divergence(what: &str, value: f32) -> Error {
    Error::Divergence(format!("{what} became {value}"))
}

/// One α update on `val` with the weights frozen, then one weight update on
/// `train` with α frozen.
pub fn alternating_step(
    net: &mut SuperNet,
    alpha_opt: &mut Adam,
    train: &Batch,
    val: &Batch,
    w_step: SgdConfig,
) -> Result<StepLosses> {
    if train.labels.is_empty() || val.labels.is_empty() {
        return config("alternating step needs non-empty batches");
    }
    let (val_loss, alpha_grads, val_correct) = alpha_gradient(net, val)?;
    if !val_loss.is_finite() {
        return Err(divergence("validation loss", val_loss));
    }
    let (normal, reduce) = net.arch.tensors_mut();
    alpha_opt.step(&mut [normal, reduce], &[&alpha_grads[0], &alpha_grads[1]]);
    if !net.arch.is_finite() {
        return Err(Error::Divergence("architecture parameters became non-finite".into()));
    }

    let mut tape = Tape::new();
    let b = net.bind(&mut tape, true, false)?;
    let x = tape.constant(train.images.clone());
    let logits = net.forward(&mut tape, &b, x)?;
    let loss = tape.cross_entropy(logits, &train.labels)?;
    let train_loss = tape.value(loss).data()[0];
    if !train_loss.is_finite() {
        return Err(divergence("training loss", train_loss));
    }
    let grads = tape.backward(loss)?;
    net.weights.sgd_step(&b.weights, &grads, w_step);
    Ok(StepLosses {
        train_loss,
        val_loss,
        val_correct,
    })
}

pub fn alpha_optimizer(cfg: &SearchConfig) -> Adam {
    Adam::new(
        cfg.alpha_learning_rate,
        cfg.alpha_beta1,
        cfg.alpha_beta2,
        cfg.alpha_weight_decay,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub skip_fraction: f64,
    pub seconds: f64,
}

pub const SEARCH_CSV_HEADER: &str = "epoch,train_loss,val_loss,val_acc,skip_fraction,seconds";

pub fn search_csv(trace: &[SearchRecord]) -> String {
    let mut out = format!("{SEARCH_CSV_HEADER}\n");
    for r in trace {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.epoch, r.train_loss, r.val_loss, r.val_acc, r.skip_fraction, r.seconds
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub net: SuperNet,
    pub trace: Vec<SearchRecord>,
    /// Genotype of the final α.
    pub genotype: Genotype,
    pub normalizer: Normalizer,
}

/// Runs the search on `data`. The data is split (stratified) into a weight
/// set and an α set; each epoch walks the weight set in shuffled batches and
/// pairs every batch with the next batch of the shuffled α set, wrapping
/// around. All randomness derives from `seed`.
pub fn run_search(data: &Dataset, net_cfg: &SuperNetConfig, cfg: &SearchConfig, seed: u64) -> Result<SearchOutcome> {
    cfg.validate()?;
    if data.classes < 2 {
        return config("search data needs at least two classes");
    }
    if data.classes != net_cfg.num_classes || data.channels != net_cfg.in_channels {
        return config(format!(
            "dataset has {} classes and {} channels, the super-net expects {} and {}",
            data.classes, data.channels, net_cfg.num_classes, net_cfg.in_channels
        ));
    }
    if data.len() < 2 * cfg.batch_size {
        return config(format!(
            "search needs at least {} samples (twice the batch size), got {}",
            2 * cfg.batch_size,
            data.len()
        ));
    }
    let (w_set, a_set) = split(data, cfg.split_fraction, crate::seed::derive_seed(seed, "search.split"))?;
    let normalizer = Normalizer::fit(data)?;
    let mut net = SuperNet::build(net_cfg, &mut stage_rng(seed, "search.init"))?;
    let mut order_rng = stage_rng(seed, "search.order");
    let mut alpha_opt = alpha_optimizer(cfg);
    let start = Instant::now();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let w_step = SgdConfig {
            lr: cosine_lr(cfg.w_learning_rate, epoch, cfg.epochs),
            momentum: cfg.w_momentum,
            weight_decay: cfg.w_weight_decay,
        };
        let w_order = permutation(w_set.len(), &mut order_rng);
        let a_order = permutation(a_set.len(), &mut order_rng);
        let a_batches: Vec<&[usize]> = a_order.chunks(cfg.batch_size).collect();
        let (mut train_sum, mut val_sum) = (0.0f64, 0.0f64);
        let (mut train_n, mut val_n, mut correct) = (0usize, 0usize, 0usize);
        for (step, w_idx) in w_order.chunks(cfg.batch_size).enumerate() {
            let a_idx = a_batches[step % a_batches.len()];
            let train = normalizer.batch(&w_set, w_idx)?;
            let val = normalizer.batch(&a_set, a_idx)?;
            let losses = alternating_step(&mut net, &mut alpha_opt, &train, &val, w_step).map_err(|e| match e {
                Error::Divergence(msg) => Error::Divergence(format!("epoch {epoch}, step {step}: {msg}")),
                other => other,
            })?;
            train_sum += losses.train_loss as f64 * w_idx.len() as f64;
            val_sum += losses.val_loss as f64 * a_idx.len() as f64;
            train_n += w_idx.len();
            val_n += a_idx.len();
            correct += losses.val_correct;
        }
        let genotype = derive_genotype(&net.arch, &net.space, &net.topology)?;
        trace.push(SearchRecord {
            epoch,
            train_loss: train_sum / train_n as f64,
            val_loss: val_sum / val_n as f64,
            val_acc: correct as f64 / val_n as f64,
            skip_fraction: skip_fraction(&genotype),
            seconds: if cfg.wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
    }
    let genotype = derive_genotype(&net.arch, &net.space, &net.topology)?;
    Ok(SearchOutcome {
        net,
        trace,
        genotype,
        normalizer,
    })
}
