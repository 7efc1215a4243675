//! Graphviz rendering of derived cells.

use std::fmt::Write as _;

use crate::allocation::ChannelAllocation;
use crate::error::{config, Result};
use crate::genotype::{format_strength, Genotype};
use crate::space::{CellType, NUM_INPUT_NODES};

fn node_name(i: usize) -> String {
    match i {
        0 => "c_k_2".into(),
        1 => "c_k_1".into(),
        _ => (i - NUM_INPUT_NODES).to_string(),
    }
}

/// One digraph for `cell_type`. Edge labels read `<op> p=<strength> c=<ĉ>/<C>`
/// using the allocation of the first cell of that type.
pub fn export_dot(g: &Genotype, a: &ChannelAllocation, cell_type: CellType) -> Result<String> {
    let cell = g.cell(cell_type);
    let Some(alloc) = a.cells.iter().find(|c| c.cell_type == cell_type) else {
        return config(format!("allocation has no {} cell", cell_type.name()));
    };
    if alloc.nodes.len() != cell.nodes.len() {
        return config("allocation does not match the genotype");
    }
    let mut out = String::new();
    let _ = writeln!(out, "digraph {} {{", cell_type.name());
    out.push_str("  rankdir=LR;\n");
    out.push_str("  node [shape=box];\n");
    for i in 0..NUM_INPUT_NODES + cell.nodes.len() {
        let _ = writeln!(out, "  \"{}\";", node_name(i));
    }
    out.push_str("  \"c_k\";\n");
    for ((node, e), al) in cell.entries().zip(alloc.nodes.iter().flatten()) {
        let _ = writeln!(
            out,
            "  \"{}\" -> \"{}\" [label=\"{} p={} c={}/{}\"];",
            node_name(e.source),
            node_name(node),
            e.op,
            format_strength(e.strength),
            al.op_channels,
            al.channels
        );
    }
    for j in 0..cell.nodes.len() {
        let _ = writeln!(out, "  \"{}\" -> \"c_k\";", node_name(j + NUM_INPUT_NODES));
    }
    out.push_str("}\n");
    Ok(out)
}
