//! Brute-force reference for genotype derivation.

use nas_core::genotype::{is_candidate, Genotype};
use nas_core::space::{CellTopology, CellType, OperationKind, SearchSpace};
use nas_core::supernet::ArchParams;
use rand::Rng;

/// Architecture parameters drawn from `U(-2, 2)`.
pub fn random_arch(topology: &CellTopology, space: &SearchSpace, r: &mut impl Rng) -> ArchParams {
    let mut a = ArchParams::zeros(topology.edges.len(), space.len());
    for t in [CellType::Normal, CellType::Reduction] {
        for v in a.tensor_mut(t).data_mut() {
            *v = r.random_range(-2.0f32..2.0);
        }
    }
    a
}

/// Exhaustive search over all distinct-source pairs and all operation
/// choices for the pair with the largest summed strength.
pub fn brute_force(
    arch: &ArchParams,
    space: &SearchSpace,
    topology: &CellTopology,
    t: CellType,
) -> Vec<Vec<(usize, OperationKind)>> {
    let mut out = Vec::new();
    for j in topology.intermediate_nodes() {
        let mut best: Option<(f64, Vec<(usize, OperationKind)>)> = None;
        let edges: Vec<_> = topology.incoming(j).collect();
        for (x, &(ea, a)) in edges.iter().enumerate() {
            for &(eb, b) in &edges[x + 1..] {
                assert_ne!(a.source, b.source);
                let pa = arch.strengths(t, ea).unwrap();
                let pb = arch.strengths(t, eb).unwrap();
                for (ka, &opa) in space.operations.iter().enumerate() {
                    for (kb, &opb) in space.operations.iter().enumerate() {
                        if !is_candidate(space, opa) || !is_candidate(space, opb) {
                            continue;
                        }
                        let sum = pa[ka] as f64 + pb[kb] as f64;
                        if best.as_ref().is_none_or(|(s, _)| sum > *s) {
                            let mut pair = vec![(a.source, opa), (b.source, opb)];
                            pair.sort();
                            best = Some((sum, pair));
                        }
                    }
                }
            }
        }
        out.push(best.unwrap().1);
    }
    out
}

pub fn selection(g: &Genotype, t: CellType) -> Vec<Vec<(usize, OperationKind)>> {
    g.cell(t)
        .nodes
        .iter()
        .map(|pair| {
            let mut v: Vec<_> = pair.iter().map(|e| (e.source, e.op)).collect();
            v.sort();
            v
        })
        .collect()
}
