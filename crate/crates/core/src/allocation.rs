//! Splitting each retained entry's width between its operation and a
//! refilled identity path.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{config, Error, Result};
use crate::genotype::{CellGenotype, Genotype};
use crate::space::{CellType, NetworkLayout, OperationKind, NUM_INPUT_NODES};

/// Skip channels of the fixed baseline allocation.
pub const DEFAULT_FIXED_CHANNELS: usize = 8;

/// Width of one retained entry: `op_channels + skip_channels == channels`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EntryAllocation {
    pub channels: usize,
    pub op_channels: usize,
    pub skip_channels: usize,
}

impl EntryAllocation {
    pub fn full(channels: usize) -> Self {
        EntryAllocation {
            channels,
            op_channels: channels,
            skip_channels: 0,
        }
    }
}

/// Strength in millionths, the resolution of the genotype text format.
pub fn strength_micros(p: f32) -> u64 {
    ((p as f64 * 1e6).round() as u64).max(1)
}

/// Operation width `⌈(p / p_max) · C⌉`, kept within `[1, C]`.
///
/// Both strengths are first rounded to millionths, so the result depends only
/// on the strengths as written in a genotype file and the ceiling is taken
/// in exact integer arithmetic.
pub fn op_channels(p: f32, p_max: f32, channels: usize) -> usize {
    let num = strength_micros(p) * channels as u64;
    let den = strength_micros(p_max);
    (num.div_ceil(den) as usize).clamp(1, channels)
}

/// Strength-proportional allocation of one node of width `channels`.
pub fn allocate_node(strengths: [f32; 2], channels: usize) -> Result<[EntryAllocation; 2]> {
    if channels == 0 {
        return config("a node needs at least one channel");
    }
    if strengths.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
        return config(format!("strengths {strengths:?} must lie in (0, 1]"));
    }
    let p_max = strengths[0].max(strengths[1]);
    Ok(strengths.map(|p| {
        let op = op_channels(p, p_max, channels);
        EntryAllocation {
            channels,
            op_channels: op,
            skip_channels: channels - op,
        }
    }))
}

/// Adaptive allocation of a cell; `channels[j]` is the width of the cell's
/// `j`-th intermediate node.
pub fn allocate_channels(cell: &CellGenotype, channels: &[usize]) -> Result<Vec<[EntryAllocation; 2]>> {
    check_widths(cell, channels)?;
    cell.nodes
        .iter()
        .zip(channels)
        .map(|(pair, &c)| allocate_node([pair[0].strength, pair[1].strength], c))
        .collect()
}

/// Fixed allocation ignoring strengths: every entry refills
/// `min(fixed, ⌊C/2⌋)` channels.
pub fn darts_s_allocation(cell: &CellGenotype, channels: &[usize], fixed: usize) -> Result<Vec<[EntryAllocation; 2]>> {
    check_widths(cell, channels)?;
    channels
        .iter()
        .map(|&c| {
            if c < 2 {
                return config(format!("fixed allocation needs at least 2 channels, got {c}"));
            }
            let skip = fixed.min(c / 2);
            let e = EntryAllocation {
                channels: c,
                op_channels: c - skip,
                skip_channels: skip,
            };
            Ok([e, e])
        })
        .collect()
}

/// Every operation at full width with no refill.
pub fn full_width(cell: &CellGenotype, channels: &[usize]) -> Result<Vec<[EntryAllocation; 2]>> {
    check_widths(cell, channels)?;
    Ok(channels.iter().map(|&c| [EntryAllocation::full(c); 2]).collect())
}

fn check_widths(cell: &CellGenotype, channels: &[usize]) -> Result<()> {
    if cell.nodes.len() != channels.len() {
        return config(format!(
            "{} node widths given for {} nodes",
            channels.len(),
            cell.nodes.len()
        ));
    }
    if channels.contains(&0) {
        return config("node widths must be positive");
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AllocationMode {
    /// Strength-proportional widths.
    Aca,
    /// A fixed refill of `fixed` channels, capped at half the width.
    DartsS { fixed: usize },
    /// Full-width operations and no refill.
    Full,
}

impl fmt::Display for AllocationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AllocationMode::Aca => f.write_str("aca"),
            AllocationMode::DartsS { fixed } => write!(f, "darts_s fixed={fixed}"),
            AllocationMode::Full => f.write_str("full"),
        }
    }
}

impl FromStr for AllocationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        let mode = match (parts.next(), parts.next()) {
            (Some("aca"), None) => AllocationMode::Aca,
            (Some("full"), None) => AllocationMode::Full,
            (Some("darts_s"), None) => AllocationMode::DartsS {
                fixed: DEFAULT_FIXED_CHANNELS,
            },
            (Some("darts_s"), Some(f)) => {
                let fixed = f
                    .strip_prefix("fixed=")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Config(format!("bad fixed channel count `{f}`")))?;
                AllocationMode::DartsS { fixed }
            }
            _ => return config(format!("unknown allocation mode `{s}`")),
        };
        if parts.next().is_some() {
            return config(format!("unknown allocation mode `{s}`"));
        }
        Ok(mode)
    }
}

/// Allocation of every cell of a network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelAllocation {
    pub mode: AllocationMode,
    pub cells: Vec<CellAllocation>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellAllocation {
    pub cell_type: CellType,
    /// Indexed like [`CellGenotype::nodes`].
    pub nodes: Vec<[EntryAllocation; 2]>,
}

impl ChannelAllocation {
    pub fn entry(&self, cell: usize, node: usize, slot: usize) -> Option<EntryAllocation> {
        self.cells
            .get(cell)?
            .nodes
            .get(node.checked_sub(NUM_INPUT_NODES)?)
            .map(|pair| pair[slot])
    }

    /// Checks that cell types and node counts agree with `g` and `layout`.
    pub fn check(&self, g: &Genotype, layout: &NetworkLayout) -> Result<()> {
        let plans = layout.cell_plans(g.num_nodes());
        if plans.len() != self.cells.len() {
            return config(format!(
                "allocation covers {} cells, the layout has {}",
                self.cells.len(),
                plans.len()
            ));
        }
        for (i, (plan, cell)) in plans.iter().zip(&self.cells).enumerate() {
            if plan.cell_type != cell.cell_type || cell.nodes.len() != g.num_nodes() {
                return config(format!("allocation of cell {i} does not match the layout"));
            }
            for pair in &cell.nodes {
                for e in pair {
                    if e.channels != plan.channels
                        || e.op_channels + e.skip_channels != e.channels
                        || e.op_channels == 0
                    {
                        return config(format!(
                            "cell {i} allocates {}+{} of {} channels, the layout plans {}",
                            e.op_channels, e.skip_channels, e.channels, plan.channels
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Allocates every cell of `layout` for genotype `g`.
pub fn allocate_network(g: &Genotype, layout: &NetworkLayout, mode: AllocationMode) -> Result<ChannelAllocation> {
    let b = g.num_nodes();
    let mut cells = Vec::new();
    for plan in layout.cell_plans(b) {
        let cell = g.cell(plan.cell_type);
        let widths = vec![plan.channels; b];
        let nodes = match mode {
            AllocationMode::Aca => allocate_channels(cell, &widths)?,
            AllocationMode::DartsS { fixed } => darts_s_allocation(cell, &widths, fixed)?,
            AllocationMode::Full => full_width(cell, &widths)?,
        };
        cells.push(CellAllocation {
            cell_type: plan.cell_type,
            nodes,
        });
    }
    Ok(ChannelAllocation { mode, cells })
}

/// Text form: a header, the mode, then one line per retained entry of every
/// cell, carrying the entry's operation and strength for reference.
pub fn serialize_allocation(a: &ChannelAllocation, g: &Genotype) -> Result<String> {
    let mut out = String::from("allocation v1\n");
    let _ = writeln!(out, "mode {}", a.mode);
    for (i, cell) in a.cells.iter().enumerate() {
        let cg = g.cell(cell.cell_type);
        if cg.nodes.len() != cell.nodes.len() {
            return config(format!("allocation of cell {i} does not match the genotype"));
        }
        for ((node, e), alloc) in cg.entries().zip(cell.nodes.iter().flatten()) {
            let _ = writeln!(
                out,
                "cell={i} type={} node={node} src={} op={} p={} C={} op_channels={} skip_channels={}",
                cell.cell_type.name(),
                e.source,
                e.op,
                crate::genotype::format_strength(e.strength),
                alloc.channels,
                alloc.op_channels,
                alloc.skip_channels
            );
        }
    }
    Ok(out)
}

fn parse_err<T>(line: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse { line, msg: msg.into() })
}

/// Parses [`serialize_allocation`] output and checks it against `g`.
pub fn deserialize_allocation(text: &str, g: &Genotype) -> Result<ChannelAllocation> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, "allocation v1")) => {}
        Some((n, l)) => return parse_err(n, format!("expected `allocation v1`, got `{l}`")),
        None => return parse_err(1, "empty allocation file"),
    }
    let mode = match lines.next() {
        Some((n, l)) => match l.strip_prefix("mode ") {
            Some(m) => m.parse().or_else(|e: Error| parse_err(n, e.to_string()))?,
            None => return parse_err(n, format!("expected `mode <name>`, got `{l}`")),
        },
        None => return parse_err(2, "missing `mode` line"),
    };
    let mut cells: Vec<CellAllocation> = Vec::new();
    let mut flat: Vec<Vec<EntryAllocation>> = Vec::new();
    for (n, line) in lines {
        let mut fields = Vec::new();
        for (tok, key) in line.split_whitespace().zip([
            "cell",
            "type",
            "node",
            "src",
            "op",
            "p",
            "C",
            "op_channels",
            "skip_channels",
        ]) {
            match tok.strip_prefix(key).and_then(|t| t.strip_prefix('=')) {
                Some(v) => fields.push(v),
                None => return parse_err(n, format!("expected `{key}=<value>`, got `{tok}`")),
            }
        }
        if fields.len() != 9 || line.split_whitespace().count() != 9 {
            return parse_err(n, "expected nine `key=value` fields");
        }
        let num = |i: usize| -> Result<usize> {
            fields[i]
                .parse()
                .or_else(|_| parse_err(n, format!("`{}` is not a non-negative integer", fields[i])))
        };
        let (cell, node, src) = (num(0)?, num(2)?, num(3)?);
        let (c, op_c, skip_c) = (num(6)?, num(7)?, num(8)?);
        let cell_type = match fields[1] {
            "normal" => CellType::Normal,
            "reduce" => CellType::Reduction,
            other => return parse_err(n, format!("unknown cell type `{other}`")),
        };
        let op: OperationKind = fields[4].parse().or_else(|e: Error| parse_err(n, e.to_string()))?;
        if cell == cells.len() {
            cells.push(CellAllocation {
                cell_type,
                nodes: Vec::new(),
            });
            flat.push(Vec::new());
        } else if cell + 1 != cells.len() {
            return parse_err(n, format!("cell {cell} out of order"));
        }
        if cells[cell].cell_type != cell_type {
            return parse_err(n, format!("cell {cell} changes type"));
        }
        let entries = &mut flat[cell];
        let cg = g.cell(cell_type);
        let Some((g_node, g_entry)) = cg.entries().nth(entries.len()) else {
            return parse_err(n, format!("cell {cell} has more entries than the genotype"));
        };
        if g_node != node || g_entry.source != src || g_entry.op != op {
            return parse_err(
                n,
                format!(
                    "entry does not match the genotype's node={g_node} src={} op={}",
                    g_entry.source, g_entry.op
                ),
            );
        }
        if op_c == 0 || op_c + skip_c != c {
            return parse_err(
                n,
                format!("op_channels {op_c} + skip_channels {skip_c} must equal C {c} with op_channels ≥ 1"),
            );
        }
        entries.push(EntryAllocation {
            channels: c,
            op_channels: op_c,
            skip_channels: skip_c,
        });
    }
    for (i, (cell, entries)) in cells.iter_mut().zip(flat).enumerate() {
        if entries.len() != 2 * g.num_nodes() {
            return config(format!(
                "cell {i} lists {} entries, the genotype has {}",
                entries.len(),
                2 * g.num_nodes()
            ));
        }
        cell.nodes = entries.chunks(2).map(|p| [p[0], p[1]]).collect();
    }
    Ok(ChannelAllocation { mode, cells })
}
