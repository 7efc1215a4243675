//! Discrete architectures: top-2 selection from trained strengths and the
//! line-based genotype text format.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::space::{CellTopology, CellType, OperationKind, SearchSpace, SpaceId, NUM_INPUT_NODES};
use crate::supernet::ArchParams;

/// Smallest strength the text format can hold.
pub const MIN_STRENGTH: f32 = 1e-6;

/// One retained input of a node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Entry {
    pub source: usize,
    pub op: OperationKind,
    /// Softmax strength of `op` on its edge, as computed on the final α.
    pub strength: f32,
}

/// Two entries per intermediate node; `nodes[0]` is node 2.
#[derive(Clone, Debug, PartialEq)]
pub struct CellGenotype {
    pub nodes: Vec<[Entry; 2]>,
}

impl CellGenotype {
    /// `(node, entry)` pairs with node indices counted from the cell inputs.
    pub fn entries(&self) -> impl Iterator<Item = (usize, &Entry)> {
        self.nodes
            .iter()
            .enumerate()
            .flat_map(|(j, pair)| pair.iter().map(move |e| (j + NUM_INPUT_NODES, e)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Genotype {
    pub space: SpaceId,
    pub normal: CellGenotype,
    pub reduce: CellGenotype,
}

impl Genotype {
    pub fn cell(&self, cell_type: CellType) -> &CellGenotype {
        match cell_type {
            CellType::Normal => &self.normal,
            CellType::Reduction => &self.reduce,
        }
    }

    pub fn cell_mut(&mut self, cell_type: CellType) -> &mut CellGenotype {
        match cell_type {
            CellType::Normal => &mut self.normal,
            CellType::Reduction => &mut self.reduce,
        }
    }

    /// Intermediate nodes per cell.
    pub fn num_nodes(&self) -> usize {
        self.normal.nodes.len()
    }
}

/// Whether `kind` may be retained in a genotype of `space`.
pub fn is_candidate(space: &SearchSpace, kind: OperationKind) -> bool {
    kind != OperationKind::Zero && space.contains(kind)
}

/// Best candidate of one edge: highest strength, lower operation index on ties.
fn best_on_edge(space: &SearchSpace, p: &[f32]) -> Option<(usize, f32)> {
    let mut best: Option<(usize, f32)> = None;
    for (k, &pk) in p.iter().enumerate() {
        if !is_candidate(space, space.operations[k]) {
            continue;
        }
        if best.is_none_or(|(_, b)| pk > b) {
            best = Some((k, pk));
        }
    }
    best
}

fn derive_cell(arch: &ArchParams, space: &SearchSpace, topology: &CellTopology, t: CellType) -> Result<CellGenotype> {
    let mut nodes = Vec::with_capacity(topology.num_intermediate);
    for j in topology.intermediate_nodes() {
        let mut ranked = Vec::new();
        for (e, edge) in topology.incoming(j) {
            let p = arch.strengths(t, e)?;
            if let Some((k, pk)) = best_on_edge(space, &p) {
                ranked.push((pk, k, edge.source));
            }
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        if ranked.len() < 2 {
            return Err(Error::Config(format!(
                "node {j} of the {} cell has fewer than two candidate inputs",
                t.name()
            )));
        }
        let entry = |(p, k, source): (f32, usize, usize)| Entry {
            source,
            op: space.operations[k],
            strength: p,
        };
        nodes.push([entry(ranked[0]), entry(ranked[1])]);
    }
    Ok(CellGenotype { nodes })
}

/// Keeps, for every intermediate node, the two strongest inputs from
/// distinct source nodes. An edge competes with its strongest non-Zero
/// operation. Ties go to the lower operation index, then the lower source.
pub fn derive_genotype(arch: &ArchParams, space: &SearchSpace, topology: &CellTopology) -> Result<Genotype> {
    if !arch.is_finite() {
        return Err(Error::Config("architecture parameters must be finite".into()));
    }
    if arch.num_edges() != topology.edges.len() || arch.num_ops() != space.len() {
        return Err(Error::Config(format!(
            "architecture parameters are {}x{}, the space and topology need {}x{}",
            arch.num_edges(),
            arch.num_ops(),
            topology.edges.len(),
            space.len()
        )));
    }
    Ok(Genotype {
        space: space.id,
        normal: derive_cell(arch, space, topology, CellType::Normal)?,
        reduce: derive_cell(arch, space, topology, CellType::Reduction)?,
    })
}

/// Fraction of retained entries, over both cell types, that are skip connections.
pub fn skip_fraction(g: &Genotype) -> f64 {
    let all: Vec<&Entry> = g.normal.entries().chain(g.reduce.entries()).map(|(_, e)| e).collect();
    if all.is_empty() {
        return 0.0;
    }
    let skips = all.iter().filter(|e| e.op == OperationKind::SkipConnect).count();
    skips as f64 / all.len() as f64
}

/// Fixed six-decimal text of a strength; values that would print as zero are
/// written as the smallest representable strength.
pub fn format_strength(p: f32) -> String {
    format!("{:.6}", p.max(MIN_STRENGTH))
}

pub fn serialize_genotype(g: &Genotype) -> String {
    let mut out = String::new();
    out.push_str("genotype v1\n");
    let _ = writeln!(out, "space {}", g.space);
    for t in [CellType::Normal, CellType::Reduction] {
        let _ = writeln!(out, "{}:", t.name());
        for (node, e) in g.cell(t).entries() {
            let _ = writeln!(
                out,
                "node={node} src={} op={} p={}",
                e.source,
                e.op,
                format_strength(e.strength)
            );
        }
    }
    out
}

fn parse_err<T>(line: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse { line, msg: msg.into() })
}

fn field<'a>(line: usize, token: Option<&'a str>, key: &str) -> Result<&'a str> {
    match token
        .and_then(|t| t.strip_prefix(key))
        .and_then(|t| t.strip_prefix('='))
    {
        Some(v) if !v.is_empty() => Ok(v),
        _ => parse_err(line, format!("expected `{key}=<value>`")),
    }
}

fn parse_index(line: usize, v: &str, key: &str) -> Result<usize> {
    v.parse()
        .or_else(|_| parse_err(line, format!("`{key}` must be a non-negative integer, got `{v}`")))
}

struct Block {
    cell_type: CellType,
    nodes: Vec<Vec<Entry>>,
    /// Line of each node's first entry, for error reporting.
    lines: Vec<usize>,
}

fn finish_block(b: Block, end_line: usize) -> Result<CellGenotype> {
    let mut nodes = Vec::with_capacity(b.nodes.len());
    for (i, entries) in b.nodes.into_iter().enumerate() {
        if entries.len() != 2 {
            return parse_err(
                b.lines[i],
                format!(
                    "node {} of the {} cell has {} entries, expected 2",
                    i + NUM_INPUT_NODES,
                    b.cell_type.name(),
                    entries.len()
                ),
            );
        }
        nodes.push([entries[0], entries[1]]);
    }
    if nodes.is_empty() {
        return parse_err(end_line, format!("the {} cell has no nodes", b.cell_type.name()));
    }
    Ok(CellGenotype { nodes })
}

/// Parses the text written by [`serialize_genotype`]. Blank lines are
/// ignored; every other deviation is reported with its 1-based line number.
pub fn deserialize_genotype(text: &str) -> Result<Genotype> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty());
    let Some((n, header)) = lines.next() else {
        return parse_err(1, "empty genotype file");
    };
    if header.trim() != "genotype v1" {
        return parse_err(n, format!("expected `genotype v1`, got `{header}`"));
    }
    let Some((n, space_line)) = lines.next() else {
        return parse_err(n + 1, "missing `space` line");
    };
    let space_id: SpaceId = match space_line.trim().strip_prefix("space ") {
        Some(name) => name.trim().parse().or_else(|e: Error| parse_err(n, e.to_string()))?,
        None => return parse_err(n, format!("expected `space <name>`, got `{space_line}`")),
    };
    let space = SearchSpace::new(space_id);

    let mut blocks: Vec<CellGenotype> = Vec::new();
    let mut current: Option<Block> = None;
    let mut last_line = n;
    for (n, raw) in lines {
        last_line = n;
        let line = raw.trim();
        if let Some(name) = line.strip_suffix(':') {
            let expected = [CellType::Normal, CellType::Reduction]
                .get(blocks.len() + current.is_some() as usize)
                .copied();
            match expected {
                Some(t) if t.name() == name => {
                    if let Some(b) = current.take() {
                        blocks.push(finish_block(b, n)?);
                    }
                    current = Some(Block {
                        cell_type: t,
                        nodes: Vec::new(),
                        lines: Vec::new(),
                    });
                }
                Some(t) => return parse_err(n, format!("expected `{}:`, got `{line}`", t.name())),
                None => return parse_err(n, format!("unexpected block `{line}`")),
            }
            continue;
        }
        let Some(block) = current.as_mut() else {
            return parse_err(n, format!("entry before a `normal:` block: `{line}`"));
        };
        let mut tokens = line.split_whitespace();
        let node = parse_index(n, field(n, tokens.next(), "node")?, "node")?;
        let source = parse_index(n, field(n, tokens.next(), "src")?, "src")?;
        let op_name = field(n, tokens.next(), "op")?;
        let p_text = field(n, tokens.next(), "p")?;
        if let Some(extra) = tokens.next() {
            return parse_err(n, format!("unexpected trailing token `{extra}`"));
        }
        let op: OperationKind = op_name.parse().or_else(|e: Error| parse_err(n, e.to_string()))?;
        if op == OperationKind::Zero {
            return parse_err(n, "Zero cannot be a retained operation");
        }
        if !space.contains(op) {
            return parse_err(n, format!("operation {op} is not in space {space_id}"));
        }
        let strength: f32 = p_text
            .parse()
            .or_else(|_| parse_err(n, format!("strength `{p_text}` is not a number")))?;
        if !(strength > 0.0 && strength <= 1.0) {
            return parse_err(n, format!("strength {p_text} must lie in (0, 1]"));
        }
        let position = node.checked_sub(NUM_INPUT_NODES);
        let count = block.nodes.len();
        match position {
            Some(i) if i + 1 == count => {}
            Some(i) if i == count => {
                block.nodes.push(Vec::new());
                block.lines.push(n);
            }
            _ => {
                return parse_err(
                    n,
                    format!("node {node} out of order; expected node {}", count + NUM_INPUT_NODES),
                )
            }
        }
        if source >= node {
            return parse_err(n, format!("source {source} must precede node {node}"));
        }
        let entries = block.nodes.last_mut().expect("node pushed above");
        if entries.len() == 2 {
            return parse_err(n, format!("node {node} has more than two entries"));
        }
        if entries.iter().any(|e| e.source == source) {
            return parse_err(n, format!("node {node} uses source {source} twice"));
        }
        entries.push(Entry { source, op, strength });
    }
    if let Some(b) = current.take() {
        blocks.push(finish_block(b, last_line)?);
    }
    if blocks.len() != 2 {
        return parse_err(last_line, "expected both a `normal:` and a `reduce:` block");
    }
    let reduce = blocks.pop().expect("two blocks");
    let normal = blocks.pop().expect("two blocks");
    if normal.nodes.len() != reduce.nodes.len() {
        return parse_err(
            last_line,
            format!(
                "normal cell has {} nodes but reduce cell has {}",
                normal.nodes.len(),
                reduce.nodes.len()
            ),
        );
    }
    Ok(Genotype {
        space: space_id,
        normal,
        reduce,
    })
}
