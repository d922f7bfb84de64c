//! Exhaustive genotype enumeration, written without the closed form.

use std::collections::HashSet;

use factornas_core::activations::{ActivationInstance, ActivationKind};
use factornas_core::space::{RegularOpKind, SpaceConfig};

/// `(to, from, op, activation index)`
pub type Sel = (usize, usize, RegularOpKind, Option<usize>);

/// Every (op, activation) pair an edge can carry once `none` is excluded.
pub fn edge_choices(space: &SpaceConfig) -> Vec<(RegularOpKind, Option<usize>)> {
    let mut out = Vec::new();
    for &op in &space.regular_ops {
        if op == RegularOpKind::None {
            continue;
        }
        if op.is_parameterized() {
            for a in 0..space.activation_ops.len() {
                out.push((op, Some(a)));
            }
        } else {
            out.push((op, None));
        }
    }
    out
}

/// Predecessor sets of node `to` with exactly `k` members, by bitmask scan.
pub fn predecessor_sets(to: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..1 << to).filter(|m| m.count_ones() as usize == k).map(|m| (0..to).filter(|&i| m >> i & 1 == 1).collect()).collect()
}

/// All cells of one type, each as a sorted list of selections.
pub fn all_cells(space: &SpaceConfig) -> Vec<Vec<Sel>> {
    let choices = edge_choices(space);
    let mut cells: Vec<Vec<Sel>> = vec![Vec::new()];
    for j in 0..space.num_intermediate_nodes {
        let to = j + 2;
        let mut next = Vec::new();
        for cell in &cells {
            for preds in predecessor_sets(to, space.edges_selected_per_node) {
                let mut partial: Vec<Vec<Sel>> = vec![cell.clone()];
                for &from in &preds {
                    let mut grown = Vec::new();
                    for p in &partial {
                        for &(op, act) in &choices {
                            let mut q = p.clone();
                            q.push((to, from, op, act));
                            grown.push(q);
                        }
                    }
                    partial = grown;
                }
                next.extend(partial);
            }
        }
        cells = next;
    }
    cells
}

/// Distinct genotypes over all cell types; `None` once more than `limit` would be produced.
pub fn enumerate(space: &SpaceConfig, limit: usize) -> Option<usize> {
    let cells = all_cells(space);
    let mut total: Vec<Vec<Vec<Sel>>> = vec![Vec::new()];
    for _ in 0..space.cell_types {
        if total.len().checked_mul(cells.len())? > limit {
            return None;
        }
        total = total
            .iter()
            .flat_map(|g| {
                cells.iter().map(move |c| {
                    let mut h = g.clone();
                    h.push(c.clone());
                    h
                })
            })
            .collect();
    }
    let distinct: HashSet<_> = total.into_iter().collect();
    Some(distinct.len())
}

/// Every small space in a grid of shapes, registries and selection counts.
pub fn miniature_family() -> Vec<SpaceConfig> {
    use RegularOpKind::{AvgPool3x3, DilConv3x3, DilConv5x5, MaxPool3x3, SepConv3x3, SepConv5x5, SkipConnect};
    let none = RegularOpKind::None;
    let registries: [&[RegularOpKind]; 6] = [
        &[SkipConnect, none],
        &[SepConv3x3, none],
        &[SepConv3x3, MaxPool3x3, none],
        &[DilConv3x3, SkipConnect],
        &[SepConv5x5, AvgPool3x3, SkipConnect, none],
        &[SepConv3x3, DilConv5x5, MaxPool3x3, none],
    ];
    let mut out = Vec::new();
    for nodes in 1..=3 {
        for k in 1..=2 {
            for ops in registries {
                for n_acts in 1..=3 {
                    for cell_types in 1..=2 {
                        out.push(SpaceConfig {
                            num_intermediate_nodes: nodes,
                            edges_selected_per_node: k,
                            regular_ops: ops.to_vec(),
                            activation_ops: ActivationKind::ALL[..n_acts].iter().map(|&a| ActivationInstance::new(a)).collect(),
                            factorized: true,
                            cell_types,
                        });
                    }
                }
            }
        }
    }
    out
}
