//! The derived network: two retained entries per node, each entry an
//! operation at reduced width concatenated with a refilled identity path.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;

use crate::allocation::{allocate_network, AllocationMode, ChannelAllocation, EntryAllocation, DEFAULT_FIXED_CHANNELS};
use crate::data::{batches, count_correct, permutation, Dataset, Normalizer};
use crate::error::{config, Error, Result};
use crate::genotype::Genotype;
use crate::ops::{BlockSpec, CellInputs, Classifier, FactorizedReduce, OpBlock, Stem};
use crate::params::{Bound, ParamStore, SgdConfig};
use crate::search::cosine_lr;
use crate::space::{network_layout, CellPlan, Edge, NetworkLayout, NUM_INPUT_NODES};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AblationMode {
    /// The given allocation with refilled skips.
    #[default]
    Full,
    /// Full-width operations, no refill.
    NoSkip,
    /// The fixed-width allocation in place of the strength-proportional one.
    NoChannel,
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationMode::Full => "full",
            AblationMode::NoSkip => "no_skip",
            AblationMode::NoChannel => "no_channel",
        })
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AblationMode::Full),
            "no_skip" => Ok(AblationMode::NoSkip),
            "no_channel" => Ok(AblationMode::NoChannel),
            _ => config(format!(
                "unknown ablation mode `{s}` (expected full, no_skip or no_channel)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetConfig {
    pub n: usize,
    pub init_channels: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    pub image_size: usize,
    pub sepconv_repeats: usize,
    pub mode: AblationMode,
    /// Refill width used by [`AblationMode::NoChannel`].
    pub fixed_channels: usize,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig {
            n: 1,
            init_channels: 16,
            num_classes: 3,
            in_channels: 3,
            image_size: 16,
            sepconv_repeats: 1,
            mode: AblationMode::Full,
            fixed_channels: DEFAULT_FIXED_CHANNELS,
        }
    }
}

impl TargetConfig {
    pub fn layout(&self) -> Result<NetworkLayout> {
        network_layout(self.n, self.init_channels, self.num_classes)
    }
}

/// The allocation a network of mode `mode` actually uses.
pub fn effective_allocation(
    g: &Genotype,
    allocation: &ChannelAllocation,
    layout: &NetworkLayout,
    mode: AblationMode,
    fixed_channels: usize,
) -> Result<ChannelAllocation> {
    match mode {
        AblationMode::Full => {
            allocation.check(g, layout)?;
            Ok(allocation.clone())
        }
        AblationMode::NoSkip => allocate_network(g, layout, AllocationMode::Full),
        AblationMode::NoChannel => allocate_network(g, layout, AllocationMode::DartsS { fixed: fixed_channels }),
    }
}

#[derive(Clone, Debug)]
struct TargetEntry {
    source: usize,
    alloc: EntryAllocation,
    op: OpBlock,
    /// Strided reduction of the refilled channels on stride-2 edges.
    refill: Option<FactorizedReduce>,
}

#[derive(Clone, Debug)]
struct TargetCell {
    plan: CellPlan,
    inputs: CellInputs,
    nodes: Vec<[TargetEntry; 2]>,
}

#[derive(Clone, Debug)]
pub struct TargetNet {
    pub genotype: Genotype,
    pub allocation: ChannelAllocation,
    pub layout: NetworkLayout,
    pub weights: ParamStore,
    pub mode: AblationMode,
    in_channels: usize,
    image_size: usize,
    stem: Stem,
    cells: Vec<TargetCell>,
    classifier: Classifier,
}

impl TargetNet {
    /// Builds the network. `allocation` is used as is in full mode and
    /// replaced by the mode's own allocation otherwise. Parameter names do
    /// not depend on the allocation, so networks of different modes can
    /// share weights wherever shapes agree.
    pub fn build(g: &Genotype, allocation: &ChannelAllocation, cfg: &TargetConfig, rng: &mut impl Rng) -> Result<Self> {
        let layout = cfg.layout()?;
        if cfg.in_channels == 0 {
            return config("images need at least one channel");
        }
        if cfg.image_size < 4 || !cfg.image_size.is_multiple_of(4) {
            return config(format!(
                "image size {} must be a positive multiple of 4",
                cfg.image_size
            ));
        }
        let allocation = effective_allocation(g, allocation, &layout, cfg.mode, cfg.fixed_channels)?;
        let b = g.num_nodes();
        let mut weights = ParamStore::new();
        let stem = Stem::build(&mut weights, cfg.in_channels, cfg.init_channels, true, rng)?;
        let mut cells = Vec::with_capacity(layout.depth());
        for (i, plan) in layout.cell_plans(b).into_iter().enumerate() {
            let prefix = format!("cells.{i}");
            let inputs = CellInputs::build(&mut weights, &prefix, &plan, true, rng)?;
            let genes = g.cell(plan.cell_type);
            let mut nodes = Vec::with_capacity(b);
            for (j, pair) in genes.nodes.iter().enumerate() {
                let node = j + NUM_INPUT_NODES;
                let mut built = Vec::with_capacity(2);
                for (m, gene) in pair.iter().enumerate() {
                    let alloc = allocation.cells[i].nodes[j][m];
                    if alloc.skip_channels > plan.channels {
                        return config(format!(
                            "cell {i} node {node}: {} refill channels exceed the input width {}",
                            alloc.skip_channels, plan.channels
                        ));
                    }
                    let stride = plan.edge_stride(Edge {
                        source: gene.source,
                        target: node,
                    });
                    let entry_prefix = format!("{prefix}.node{node}.entry{m}");
                    let spec = BlockSpec {
                        in_channels: plan.channels,
                        out_channels: alloc.op_channels,
                        stride,
                        affine: true,
                        sepconv_repeats: cfg.sepconv_repeats,
                    };
                    let op = OpBlock::build(gene.op, spec, &mut weights, &format!("{entry_prefix}.{}", gene.op), rng)?;
                    let refill = if stride == 2 && alloc.skip_channels > 0 {
                        Some(FactorizedReduce::build(
                            &mut weights,
                            &format!("{entry_prefix}.refill"),
                            alloc.skip_channels,
                            alloc.skip_channels,
                            true,
                            rng,
                        )?)
                    } else {
                        None
                    };
                    built.push(TargetEntry {
                        source: gene.source,
                        alloc,
                        op,
                        refill,
                    });
                }
                let second = built.pop().expect("two entries");
                let first = built.pop().expect("two entries");
                nodes.push([first, second]);
            }
            cells.push(TargetCell { plan, inputs, nodes });
        }
        let features = b * layout.cell_channels().last().copied().unwrap_or(cfg.init_channels);
        let classifier = Classifier::build(&mut weights, features, cfg.num_classes, rng)?;
        Ok(TargetNet {
            genotype: g.clone(),
            allocation,
            layout,
            weights,
            mode: cfg.mode,
            in_channels: cfg.in_channels,
            image_size: cfg.image_size,
            stem,
            cells,
            classifier,
        })
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn num_classes(&self) -> usize {
        self.layout.num_classes
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        self.weights.bind(tape, trainable)
    }

    fn entry(&self, cell: usize, node: usize, slot: usize) -> Result<&TargetEntry> {
        node.checked_sub(NUM_INPUT_NODES)
            .and_then(|j| self.cells.get(cell)?.nodes.get(j))
            .and_then(|pair| pair.get(slot))
            .ok_or_else(|| Error::Config(format!("no entry {slot} of node {node} in cell {cell}")))
    }

    /// One retained entry applied to its (preprocessed) source state `x`:
    /// the operation's `ĉ` channels followed by the first `c̄` channels of
    /// `x`, strided through a factorized reduction on stride-2 edges.
    pub fn entry_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        cell: usize,
        node: usize,
        slot: usize,
        x: Var,
    ) -> Result<Var> {
        let e = self.entry(cell, node, slot)?;
        let y = e.op.forward(tape, x, bound)?;
        if e.alloc.skip_channels == 0 {
            return Ok(y);
        }
        let width = tape.shape(x).channels;
        if e.alloc.skip_channels > width {
            return config(format!(
                "refill of {} channels exceeds input width {width}",
                e.alloc.skip_channels
            ));
        }
        let mut r = tape.slice_channels(x, 0, e.alloc.skip_channels)?;
        if let Some(reduce) = &e.refill {
            r = reduce.forward(tape, r, bound)?;
        }
        tape.concat_channels(&[y, r])
    }

    /// Preprocessed inputs, then every node as the sum of its two entries,
    /// then the concat of the intermediate nodes.
    pub fn cell_forward(&self, tape: &mut Tape, bound: &Bound, cell: usize, s0: Var, s1: Var) -> Result<Var> {
        let c = self
            .cells
            .get(cell)
            .ok_or_else(|| Error::Config(format!("cell {cell} out of range")))?;
        let (p0, p1) = c.inputs.forward(tape, s0, s1, bound)?;
        let mut states = vec![p0, p1];
        for (j, pair) in c.nodes.iter().enumerate() {
            let node = j + NUM_INPUT_NODES;
            let a = self.entry_forward(tape, bound, cell, node, 0, states[pair[0].source])?;
            let b = self.entry_forward(tape, bound, cell, node, 1, states[pair[1].source])?;
            let sum = tape.add(a, b)?;
            if tape.shape(sum).channels != c.plan.channels {
                return Err(Error::Usage(format!(
                    "cell {cell} node {node} has {} channels, planned {}",
                    tape.shape(sum).channels,
                    c.plan.channels
                )));
            }
            states.push(sum);
        }
        tape.concat_channels(&states[NUM_INPUT_NODES..])
    }

    /// Logits shaped (batch, classes, 1, 1).
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, images: Var) -> Result<Var> {
        let s = tape.shape(images);
        if s.channels != self.in_channels {
            return config(format!(
                "expected {} image channels, got {}",
                self.in_channels, s.channels
            ));
        }
        if s.height < 4 || s.width < 4 || !s.height.is_multiple_of(4) || !s.width.is_multiple_of(4) {
            return config(format!(
                "image size {}x{} must be a positive multiple of 4",
                s.height, s.width
            ));
        }
        let stem = self.stem.forward(tape, images, bound)?;
        let (mut s0, mut s1) = (stem, stem);
        for cell in 0..self.cells.len() {
            let out = self.cell_forward(tape, bound, cell, s0, s1)?;
            s0 = s1;
            s1 = out;
        }
        self.classifier.forward(tape, s1, bound)
    }

    /// Parameter count and multiply-adds of one forward pass on a single
    /// image of the configured size.
    pub fn count_params_flops(&self) -> Result<(usize, u64)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let shape = Shape::new(1, self.in_channels, self.image_size, self.image_size);
        let x = tape.constant(Tensor::zeros(shape));
        self.forward(&mut tape, &bound, x)?;
        Ok((self.weights.numel(), tape.multiply_adds()))
    }

    pub fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        self.weights
            .iter()
            .map(|(_, n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    /// Restores every weight; each must be present with a matching shape.
    pub fn load_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let names: Vec<String> = self.weights.iter().map(|(_, n, _)| n.to_string()).collect();
        for name in names {
            let t = tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {name}")))?;
            self.weights.set(&name, t.1.clone())?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial rate of the cosine schedule.
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Record elapsed seconds in the trace; when off the column holds 0 and
    /// traces are byte-reproducible.
    pub wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 3e-4,
            wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return config("epochs and batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return config("learning_rate must be positive, momentum and weight_decay non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

fn check_dataset(net: &TargetNet, d: &Dataset) -> Result<()> {
    if d.classes != net.num_classes() {
        return config(format!(
            "dataset has {} classes, the network {}",
            d.classes,
            net.num_classes()
        ));
    }
    if d.channels != net.in_channels || d.height != net.image_size || d.width != net.image_size {
        return config(format!(
            "dataset images are {}x{}x{}, the network expects {}x{}x{}",
            d.channels, d.height, d.width, net.in_channels, net.image_size, net.image_size
        ));
    }
    if d.is_empty() {
        return config("dataset is empty");
    }
    Ok(())
}

/// Top-1 accuracy and mean cross-entropy over `d` in sequential batches.
pub fn evaluate(net: &TargetNet, d: &Dataset, norm: &Normalizer, batch_size: usize) -> Result<(f64, f64)> {
    check_dataset(net, d)?;
    let order: Vec<usize> = (0..d.len()).collect();
    let mut correct = 0;
    let mut loss_sum = 0.0f64;
    for idx in batches(&order, batch_size) {
        let batch = norm.batch(d, idx)?;
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false);
        let x = tape.constant(batch.images);
        let logits = net.forward(&mut tape, &bound, x)?;
        let loss = tape.cross_entropy(logits, &batch.labels)?;
        correct += count_correct(tape.value(logits), &batch.labels);
        loss_sum += tape.value(loss).data()[0] as f64 * idx.len() as f64;
    }
    Ok((correct as f64 / d.len() as f64, loss_sum / d.len() as f64))
}

/// SGD with momentum on a cosine schedule over shuffled batches, one
/// record per epoch. Stops with a divergence error on a non-finite loss.
pub fn train_target(
    net: &mut TargetNet,
    train: &Dataset,
    val: &Dataset,
    norm: &Normalizer,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    check_dataset(net, train)?;
    check_dataset(net, val)?;
    let start = Instant::now();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.learning_rate, epoch, cfg.epochs);
        let sgd = SgdConfig {
            lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        };
        let order = permutation(train.len(), rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (step, idx) in batches(&order, cfg.batch_size).enumerate() {
            let batch = norm.batch(train, idx)?;
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape, true);
            let x = tape.constant(batch.images);
            let logits = net.forward(&mut tape, &bound, x)?;
            let loss = tape.cross_entropy(logits, &batch.labels)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Divergence(format!(
                    "target training loss became {value} at epoch {epoch}, step {step}"
                )));
            }
            loss_sum += value as f64 * idx.len() as f64;
            correct += count_correct(tape.value(logits), &batch.labels);
            let grads = tape.backward(loss)?;
            net.weights.sgd_step(&bound, &grads, sgd);
        }
        let (val_acc, val_loss) = evaluate(net, val, norm, cfg.batch_size)?;
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_loss,
            val_acc,
            seconds: if cfg.wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
    }
    Ok(records)
}

pub const EVAL_CSV_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,seconds";

pub fn eval_csv(records: &[EpochRecord]) -> String {
    let mut out = format!("{EVAL_CSV_HEADER}\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.seconds
        );
    }
    out
}
