//! Exhaustive scoring of every admissible cell, the reference for genotype derivation.

use factornas_core::activations::{ActivationInstance, ActivationKind};
use factornas_core::genotype::Selection;
use factornas_core::space::{RegularOpKind, SpaceConfig};
use factornas_core::supernet::{ArchParams, EdgeMode};
use rand::Rng as _;

use super::rng;
use super::space_oracle::all_cells;

pub fn space(nodes: usize, k: usize, ops: &[RegularOpKind], acts: &[ActivationKind], cell_types: usize) -> SpaceConfig {
    SpaceConfig {
        num_intermediate_nodes: nodes,
        edges_selected_per_node: k,
        regular_ops: ops.to_vec(),
        activation_ops: acts.iter().map(|&a| ActivationInstance::new(a)).collect(),
        factorized: true,
        cell_types,
    }
}

pub fn random_arch(space: &SpaceConfig, mode: &EdgeMode, seed: u64, scale: f64) -> ArchParams {
    let mut arch = ArchParams::zeros(space, mode).unwrap();
    let mut r = rng(seed);
    for store in [&mut arch.alpha, &mut arch.beta] {
        for e in store.entries_mut() {
            for v in e.value.data_mut() {
                *v = r.random_range(-scale..scale);
            }
        }
    }
    arch
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Best-scoring cell under the lexicographic score (Σ log α-weight of kept
/// ops, then Σ log β-weight of their activations), by exhaustive search.
pub fn oracle_cell(s: &SpaceConfig, arch: &ArchParams, t: usize) -> Vec<Selection> {
    let op_index = |op: RegularOpKind| s.regular_ops.iter().position(|&k| k == op).unwrap();
    let mut best: Option<((f64, f64), Vec<Selection>)> = None;
    for cell in all_cells(s) {
        let mut score = (0.0, 0.0);
        for &(to, from, op, act) in &cell {
            let e = s.edge_offset(to) + from;
            score.0 += log_softmax(arch.alpha_row(t, e))[op_index(op)];
            if let Some(a) = act {
                score.1 += log_softmax(arch.beta_row(t, e).unwrap())[a];
            }
        }
        if best.as_ref().is_none_or(|(b, _)| score.0 > b.0 + 1e-12 || ((score.0 - b.0).abs() <= 1e-12 && score.1 > b.1)) {
            let sels =
                cell.iter().map(|&(to, from, op, a)| Selection { to, from, op, activation: a.map(|a| s.activation_ops[a].kind) }).collect();
            best = Some((score, sels));
        }
    }
    let mut cell = best.unwrap().1;
    cell.sort();
    cell
}
