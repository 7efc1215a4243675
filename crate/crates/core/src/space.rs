//! Candidate operations, named operation spaces, the intra-cell DAG, and the
//! macro layout of stacked cells.

use std::fmt;
use std::str::FromStr;

use crate::error::{config, Error, Result};

/// A candidate operation on a cell edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OperationKind {
    SepConv3x3,
    SepConv5x5,
    DilSepConv3x3,
    DilSepConv5x5,
    MaxPool3x3,
    AvgPool3x3,
    SkipConnect,
    Zero,
}

impl OperationKind {
    pub const ALL: [OperationKind; 8] = [
        OperationKind::SepConv3x3,
        OperationKind::SepConv5x5,
        OperationKind::DilSepConv3x3,
        OperationKind::DilSepConv5x5,
        OperationKind::MaxPool3x3,
        OperationKind::AvgPool3x3,
        OperationKind::SkipConnect,
        OperationKind::Zero,
    ];

    /// True for the four separable convolutions.
    pub fn is_parametric(self) -> bool {
        matches!(
            self,
            OperationKind::SepConv3x3
                | OperationKind::SepConv5x5
                | OperationKind::DilSepConv3x3
                | OperationKind::DilSepConv5x5
        )
    }

    /// (kernel size, dilation) for convolutions.
    pub fn conv_params(self) -> Option<(usize, usize)> {
        match self {
            OperationKind::SepConv3x3 => Some((3, 1)),
            OperationKind::SepConv5x5 => Some((5, 1)),
            OperationKind::DilSepConv3x3 => Some((3, 2)),
            OperationKind::DilSepConv5x5 => Some((5, 2)),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OperationKind::SepConv3x3 => "SepConv3x3",
            OperationKind::SepConv5x5 => "SepConv5x5",
            OperationKind::DilSepConv3x3 => "DilSepConv3x3",
            OperationKind::DilSepConv5x5 => "DilSepConv5x5",
            OperationKind::MaxPool3x3 => "MaxPool3x3",
            OperationKind::AvgPool3x3 => "AvgPool3x3",
            OperationKind::SkipConnect => "SkipConnect",
            OperationKind::Zero => "Zero",
        }
    }
}

impl fmt::Display for OperationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OperationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown operation {s:?}")))
    }
}

/// Identifier of a named operation space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpaceId {
    /// All eight operations.
    S,
    /// `S` without SkipConnect.
    S5,
    /// The four separable convolutions.
    S6,
    /// `S6` plus SkipConnect.
    S7,
}

impl SpaceId {
    pub fn name(self) -> &'static str {
        match self {
            SpaceId::S => "S",
            SpaceId::S5 => "S5",
            SpaceId::S6 => "S6",
            SpaceId::S7 => "S7",
        }
    }
}

impl fmt::Display for SpaceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SpaceId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S" => Ok(SpaceId::S),
            "S5" => Ok(SpaceId::S5),
            "S6" => Ok(SpaceId::S6),
            "S7" => Ok(SpaceId::S7),
            _ => config(format!("unknown search space {s:?} (expected S, S5, S6 or S7)")),
        }
    }
}

/// An ordered list of candidate operations; the position of a kind is its
/// operation index `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchSpace {
    pub id: SpaceId,
    pub operations: Vec<OperationKind>,
}

/// The fixed, ordered operation list of a space.
pub fn ops_for_space(id: SpaceId) -> Vec<OperationKind> {
    use OperationKind::*;
    match id {
        SpaceId::S => OperationKind::ALL.to_vec(),
        SpaceId::S5 => vec![
            SepConv3x3,
            SepConv5x5,
            DilSepConv3x3,
            DilSepConv5x5,
            MaxPool3x3,
            AvgPool3x3,
            Zero,
        ],
        SpaceId::S6 => vec![SepConv3x3, SepConv5x5, DilSepConv3x3, DilSepConv5x5],
        SpaceId::S7 => vec![SepConv3x3, SepConv5x5, DilSepConv3x3, DilSepConv5x5, SkipConnect],
    }
}

impl SearchSpace {
    pub fn new(id: SpaceId) -> Self {
        SearchSpace {
            id,
            operations: ops_for_space(id),
        }
    }

    pub fn len(&self) -> usize {
        self.operations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.operations.is_empty()
    }

    pub fn index_of(&self, kind: OperationKind) -> Option<usize> {
        self.operations.iter().position(|&k| k == kind)
    }

    pub fn contains(&self, kind: OperationKind) -> bool {
        self.index_of(kind).is_some()
    }
}

/// A directed edge from node `source` to intermediate node `target`.
/// Nodes 0 and 1 are the cell inputs; intermediate nodes are `2..B+2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellTopology {
    pub num_intermediate: usize,
    pub edges: Vec<Edge>,
}

pub const NUM_INPUT_NODES: usize = 2;

/// Enumerates every edge `(i, j)`, `i < j`, into the `b` intermediate
/// nodes, ordered by target then source.
pub fn build_topology(b: usize) -> Result<CellTopology> {
    if b == 0 {
        return config("a cell needs at least one intermediate node");
    }
    let edges = (NUM_INPUT_NODES..NUM_INPUT_NODES + b)
        .flat_map(|target| (0..target).map(move |source| Edge { source, target }))
        .collect();
    Ok(CellTopology {
        num_intermediate: b,
        edges,
    })
}

impl CellTopology {
    pub fn num_nodes(&self) -> usize {
        NUM_INPUT_NODES + self.num_intermediate
    }

    pub fn intermediate_nodes(&self) -> std::ops::Range<usize> {
        NUM_INPUT_NODES..self.num_nodes()
    }

    pub fn edge_index(&self, source: usize, target: usize) -> Option<usize> {
        self.edges.iter().position(|e| e.source == source && e.target == target)
    }

    /// Indices of the edges entering `target`, ordered by source.
    pub fn incoming(&self, target: usize) -> impl Iterator<Item = (usize, Edge)> + '_ {
        self.edges
            .iter()
            .copied()
            .enumerate()
            .filter(move |(_, e)| e.target == target)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellType {
    Normal,
    Reduction,
}

impl CellType {
    pub fn name(self) -> &'static str {
        match self {
            CellType::Normal => "normal",
            CellType::Reduction => "reduce",
        }
    }
}

/// Channel widths seen by one cell of a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellPlan {
    pub cell_type: CellType,
    /// Width of every intermediate node.
    pub channels: usize,
    pub prev_prev_channels: usize,
    pub prev_channels: usize,
    /// The previous cell halved the resolution, so the older input must be
    /// reduced to match.
    pub reduction_prev: bool,
}

impl CellPlan {
    /// Edges leaving the cell inputs of a reduction cell have stride 2.
    pub fn edge_stride(&self, edge: Edge) -> usize {
        if self.cell_type == CellType::Reduction && edge.source < NUM_INPUT_NODES {
            2
        } else {
            1
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkLayout {
    pub n: usize,
    pub cells: Vec<CellType>,
    pub init_channels: usize,
    pub num_classes: usize,
}

/// `[n × Normal, Reduction, n × Normal, Reduction, n × Normal]`, depth `3n + 2`.
pub fn network_layout(n: usize, init_channels: usize, num_classes: usize) -> Result<NetworkLayout> {
    if n < 1 {
        return config("n (normal cells per segment) must be at least 1");
    }
    if init_channels == 0 || num_classes < 2 {
        return config("init_channels must be positive and num_classes at least 2");
    }
    let mut cells = Vec::with_capacity(3 * n + 2);
    for segment in 0..3 {
        if segment > 0 {
            cells.push(CellType::Reduction);
        }
        cells.extend(std::iter::repeat_n(CellType::Normal, n));
    }
    Ok(NetworkLayout {
        n,
        cells,
        init_channels,
        num_classes,
    })
}

impl NetworkLayout {
    pub fn depth(&self) -> usize {
        self.cells.len()
    }

    /// 0-based positions of the reduction cells.
    pub fn reduction_positions(&self) -> Vec<usize> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == CellType::Reduction)
            .map(|(i, _)| i)
            .collect()
    }

    /// Input and node widths of every cell for cells with `num_intermediate`
    /// nodes. The stem emits `init_channels`; a cell outputs the concat of
    /// its intermediate nodes.
    pub fn cell_plans(&self, num_intermediate: usize) -> Vec<CellPlan> {
        let mut prev_prev = self.init_channels;
        let mut prev = self.init_channels;
        let mut reduction_prev = false;
        self.cells
            .iter()
            .zip(self.cell_channels())
            .map(|(&cell_type, channels)| {
                let plan = CellPlan {
                    cell_type,
                    channels,
                    prev_prev_channels: prev_prev,
                    prev_channels: prev,
                    reduction_prev,
                };
                prev_prev = prev;
                prev = num_intermediate * channels;
                reduction_prev = cell_type == CellType::Reduction;
                plan
            })
            .collect()
    }

    /// Per-node channel width of every cell: doubles at each reduction.
    pub fn cell_channels(&self) -> Vec<usize> {
        let mut c = self.init_channels;
        self.cells
            .iter()
            .map(|t| {
                if *t == CellType::Reduction {
                    c *= 2;
                }
                c
            })
            .collect()
    }
}
