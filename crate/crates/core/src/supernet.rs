//! The weight-sharing search network: every candidate operation on every
//! edge, mixed by the softmax of the architecture parameters.

use rand::Rng;

use crate::error::{config, Error, Result};
use crate::ops::{BlockSpec, CellInputs, Classifier, OpBlock, Stem};
use crate::params::{gaussian, Bound, ParamStore};
use crate::space::{
    build_topology, network_layout, CellPlan, CellTopology, CellType, NetworkLayout, SearchSpace, SpaceId,
};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

pub const ALPHA_INIT_STD: f32 = 1e-3;

/// Architecture parameters: one `edges × operations` matrix per cell type,
/// stored as tensors of shape (1, 1, edges, operations).
#[derive(Clone, Debug, PartialEq)]
pub struct ArchParams {
    normal: Tensor,
    reduce: Tensor,
}

impl ArchParams {
    pub fn zeros(num_edges: usize, num_ops: usize) -> Self {
        let shape = Shape::new(1, 1, num_edges, num_ops);
        ArchParams {
            normal: Tensor::zeros(shape),
            reduce: Tensor::zeros(shape),
        }
    }

    /// Independent draws from N(0, 1e-3²).
    pub fn random(num_edges: usize, num_ops: usize, rng: &mut impl Rng) -> Self {
        let shape = Shape::new(1, 1, num_edges, num_ops);
        let normal = gaussian(shape, ALPHA_INIT_STD, rng);
        let reduce = gaussian(shape, ALPHA_INIT_STD, rng);
        ArchParams { normal, reduce }
    }

    pub fn from_tensors(normal: Tensor, reduce: Tensor) -> Result<Self> {
        let s = normal.shape();
        if s != reduce.shape() || s.batch != 1 || s.channels != 1 || s.height == 0 || s.width == 0 {
            return config(format!(
                "architecture tensors must share a (1, 1, edges, ops) shape, got {s} and {}",
                reduce.shape()
            ));
        }
        if !normal.is_finite() || !reduce.is_finite() {
            return config("architecture parameters must be finite");
        }
        Ok(ArchParams { normal, reduce })
    }

    pub fn num_edges(&self) -> usize {
        self.normal.shape().height
    }

    pub fn num_ops(&self) -> usize {
        self.normal.shape().width
    }

    pub fn tensor(&self, cell_type: CellType) -> &Tensor {
        match cell_type {
            CellType::Normal => &self.normal,
            CellType::Reduction => &self.reduce,
        }
    }

    pub fn tensor_mut(&mut self, cell_type: CellType) -> &mut Tensor {
        match cell_type {
            CellType::Normal => &mut self.normal,
            CellType::Reduction => &mut self.reduce,
        }
    }

    /// `(normal, reduce)`.
    pub fn tensors_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.normal, &mut self.reduce)
    }

    pub fn row(&self, cell_type: CellType, edge: usize) -> Result<&[f32]> {
        if edge >= self.num_edges() {
            return config(format!("edge {edge} out of range for {} edges", self.num_edges()));
        }
        let k = self.num_ops();
        Ok(&self.tensor(cell_type).data()[edge * k..(edge + 1) * k])
    }

    pub fn set_row(&mut self, cell_type: CellType, edge: usize, values: &[f32]) -> Result<()> {
        let k = self.num_ops();
        if edge >= self.num_edges() || values.len() != k {
            return config(format!("cannot set row {edge} with {} values", values.len()));
        }
        self.tensor_mut(cell_type).data_mut()[edge * k..(edge + 1) * k].copy_from_slice(values);
        Ok(())
    }

    /// Softmax of one edge's row.
    pub fn strengths(&self, cell_type: CellType, edge: usize) -> Result<Vec<f32>> {
        crate::kernels::softmax(self.row(cell_type, edge)?)
    }

    pub fn is_finite(&self) -> bool {
        self.normal.is_finite() && self.reduce.is_finite()
    }
}

/// Operation strengths of `edge` in the cell type's matrix.
pub fn strengths(arch: &ArchParams, cell_type: CellType, edge: usize) -> Result<Vec<f32>> {
    arch.strengths(cell_type, edge)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperNetConfig {
    pub space: SpaceId,
    /// Normal cells per segment; the network has `3n + 2` cells.
    pub n: usize,
    /// Intermediate nodes per cell.
    pub nodes: usize,
    pub init_channels: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    pub sepconv_repeats: usize,
}

impl Default for SuperNetConfig {
    fn default() -> Self {
        SuperNetConfig {
            space: SpaceId::S6,
            n: 1,
            nodes: 4,
            init_channels: 8,
            num_classes: 3,
            in_channels: 3,
            sepconv_repeats: 1,
        }
    }
}

#[derive(Clone, Debug)]
struct SuperCell {
    plan: CellPlan,
    inputs: CellInputs,
    /// `edges[e][k]` realizes operation `k` of the space on edge `e`.
    edges: Vec<Vec<OpBlock>>,
}

/// Tape variables of one forward pass.
#[derive(Clone, Debug)]
pub struct Bindings {
    pub weights: Bound,
    alpha: [Var; 2],
    strengths: [Var; 2],
}

impl Bindings {
    pub fn alpha(&self, cell_type: CellType) -> Var {
        self.alpha[type_slot(cell_type)]
    }

    /// Softmax rows of the cell type's α, shape (1, 1, edges, ops).
    pub fn strengths(&self, cell_type: CellType) -> Var {
        self.strengths[type_slot(cell_type)]
    }
}

fn type_slot(cell_type: CellType) -> usize {
    match cell_type {
        CellType::Normal => 0,
        CellType::Reduction => 1,
    }
}

#[derive(Clone, Debug)]
pub struct SuperNet {
    pub layout: NetworkLayout,
    pub space: SearchSpace,
    pub topology: CellTopology,
    pub arch: ArchParams,
    pub weights: ParamStore,
    in_channels: usize,
    stem: Stem,
    cells: Vec<SuperCell>,
    classifier: Classifier,
}

impl SuperNet {
    /// Builds the network with freshly initialized weights and α. Weights
    /// are drawn first, then α, both from `rng`.
    pub fn build(cfg: &SuperNetConfig, rng: &mut impl Rng) -> Result<Self> {
        let layout = network_layout(cfg.n, cfg.init_channels, cfg.num_classes)?;
        let topology = build_topology(cfg.nodes)?;
        let space = SearchSpace::new(cfg.space);
        if cfg.in_channels == 0 {
            return config("images need at least one channel");
        }
        let mut weights = ParamStore::new();
        let stem = Stem::build(&mut weights, cfg.in_channels, cfg.init_channels, false, rng)?;
        let mut cells = Vec::with_capacity(layout.depth());
        for (i, plan) in layout.cell_plans(cfg.nodes).into_iter().enumerate() {
            let prefix = format!("cells.{i}");
            let inputs = CellInputs::build(&mut weights, &prefix, &plan, false, rng)?;
            let mut edges = Vec::with_capacity(topology.edges.len());
            for (e, &edge) in topology.edges.iter().enumerate() {
                let spec = BlockSpec {
                    in_channels: plan.channels,
                    out_channels: plan.channels,
                    stride: plan.edge_stride(edge),
                    affine: false,
                    sepconv_repeats: cfg.sepconv_repeats,
                };
                let blocks = space
                    .operations
                    .iter()
                    .map(|&kind| OpBlock::build(kind, spec, &mut weights, &format!("{prefix}.edge{e}.{kind}"), rng))
                    .collect::<Result<Vec<_>>>()?;
                edges.push(blocks);
            }
            cells.push(SuperCell { plan, inputs, edges });
        }
        let features = cfg.nodes * layout.cell_channels().last().copied().unwrap_or(cfg.init_channels);
        let classifier = Classifier::build(&mut weights, features, cfg.num_classes, rng)?;
        let arch = ArchParams::random(topology.edges.len(), space.len(), rng);
        Ok(SuperNet {
            layout,
            space,
            topology,
            arch,
            weights,
            in_channels: cfg.in_channels,
            stem,
            cells,
            classifier,
        })
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cell_type(&self, cell: usize) -> CellType {
        self.cells[cell].plan.cell_type
    }

    /// Records weights and α on `tape`, each either trainable or frozen,
    /// and the per-type strengths.
    pub fn bind(&self, tape: &mut Tape, train_weights: bool, train_arch: bool) -> Result<Bindings> {
        let weights = self.weights.bind(tape, train_weights);
        let mut bind_type = |t: CellType| -> Result<(Var, Var)> {
            let value = self.arch.tensor(t).clone();
            let a = if train_arch {
                tape.param(value)
            } else {
                tape.constant(value)
            };
            Ok((a, tape.softmax_rows(a)?))
        };
        let (an, pn) = bind_type(CellType::Normal)?;
        let (ar, pr) = bind_type(CellType::Reduction)?;
        let (alpha, strengths) = ([an, ar], [pn, pr]);
        Ok(Bindings {
            weights,
            alpha,
            strengths,
        })
    }

    fn cell_ref(&self, cell: usize) -> Result<&SuperCell> {
        self.cells
            .get(cell)
            .ok_or_else(|| Error::Config(format!("cell {cell} out of range for {} cells", self.cells.len())))
    }

    /// Operation `k` of an edge alone, without its strength.
    pub fn candidate_forward(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        cell: usize,
        edge: usize,
        k: usize,
        x: Var,
    ) -> Result<Var> {
        let block = self
            .cell_ref(cell)?
            .edges
            .get(edge)
            .and_then(|blocks| blocks.get(k))
            .ok_or_else(|| Error::Config(format!("no operation {k} on edge {edge}")))?;
        block.forward(tape, x, &b.weights)
    }

    /// The two cell inputs after width-matching preprocessing.
    pub fn preprocess(&self, tape: &mut Tape, b: &Bindings, cell: usize, s0: Var, s1: Var) -> Result<(Var, Var)> {
        self.cell_ref(cell)?.inputs.forward(tape, s0, s1, &b.weights)
    }

    /// Widths and reduction flag of a cell.
    pub fn plan(&self, cell: usize) -> Result<CellPlan> {
        Ok(self.cell_ref(cell)?.plan)
    }

    /// `Σ_k p_k · o_k(x)` on one edge of one cell.
    pub fn mixed_edge_forward(&self, tape: &mut Tape, b: &Bindings, cell: usize, edge: usize, x: Var) -> Result<Var> {
        let c = self.cell_ref(cell)?;
        let blocks = c
            .edges
            .get(edge)
            .ok_or_else(|| Error::Config(format!("edge {edge} out of range")))?;
        let outputs = blocks
            .iter()
            .map(|block| block.forward(tape, x, &b.weights))
            .collect::<Result<Vec<_>>>()?;
        tape.weighted_sum(&outputs, b.strengths(c.plan.cell_type), edge * self.space.len())
    }

    /// Preprocesses the two cell inputs, sums the mixed edges into each
    /// intermediate node and concatenates the nodes.
    pub fn cell_forward(&self, tape: &mut Tape, b: &Bindings, cell: usize, s0: Var, s1: Var) -> Result<Var> {
        let (p0, p1) = self.preprocess(tape, b, cell, s0, s1)?;
        let mut states = vec![p0, p1];
        for target in self.topology.intermediate_nodes() {
            let parts = self
                .topology
                .incoming(target)
                .map(|(e, edge)| self.mixed_edge_forward(tape, b, cell, e, states[edge.source]))
                .collect::<Result<Vec<_>>>()?;
            states.push(tape.add_n(&parts)?);
        }
        tape.concat_channels(&states[2..])
    }

    /// Stem, every cell in layout order, then global pooling and the
    /// linear classifier. Returns logits shaped (batch, classes, 1, 1).
    pub fn forward(&self, tape: &mut Tape, b: &Bindings, images: Var) -> Result<Var> {
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
        let stem = self.stem.forward(tape, images, &b.weights)?;
        let (mut s0, mut s1) = (stem, stem);
        for cell in 0..self.cells.len() {
            let out = self.cell_forward(tape, b, cell, s0, s1)?;
            s0 = s1;
            s1 = out;
        }
        self.classifier.forward(tape, s1, &b.weights)
    }

    /// Named tensors for a checkpoint: α first, then every weight.
    pub fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("arch.normal".to_string(), self.arch.tensor(CellType::Normal).clone()),
            ("arch.reduce".to_string(), self.arch.tensor(CellType::Reduction).clone()),
        ];
        out.extend(self.weights.iter().map(|(_, name, t)| (name.to_string(), t.clone())));
        out
    }

    /// Restores α and weights from checkpoint tensors; every tensor of the
    /// network must be present with a matching shape.
    pub fn load_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let arch = arch_from_tensors(tensors)?;
        if arch.num_ops() != self.space.len() || arch.num_edges() != self.topology.edges.len() {
            return config(format!(
                "checkpoint has {} edges × {} operations, network expects {} × {} (space {})",
                arch.num_edges(),
                arch.num_ops(),
                self.topology.edges.len(),
                self.space.len(),
                self.space.id.name()
            ));
        }
        self.arch = arch;
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

/// Extracts α from checkpoint tensors.
pub fn arch_from_tensors(tensors: &[(String, Tensor)]) -> Result<ArchParams> {
    let find = |name: &str| {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {name}")))
    };
    ArchParams::from_tensors(find("arch.normal")?, find("arch.reduce")?)
}
