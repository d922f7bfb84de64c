//! Discrete architectures: derivation from (α, β), the text format and DOT export.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::activations::ActivationKind;
use crate::error::{bail, Error, Result};
use crate::graph::softmax;
use crate::rng::Rng;
use crate::space::{RegularOpKind, SpaceConfig};
use crate::supernet::{cell_type_name, ArchParams, EdgeMode};

/// One kept edge `from → to` with its operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Selection {
    pub to: usize,
    pub from: usize,
    pub op: RegularOpKind,
    /// Present exactly when `op` is parameterized.
    pub activation: Option<ActivationKind>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Genotype {
    pub nodes: usize,
    pub edges_per_node: usize,
    /// One list per cell type, sorted by target node then predecessor.
    pub cells: Vec<Vec<Selection>>,
}

fn invalid(msg: String) -> Error {
    Error::Validation(msg)
}

impl Genotype {
    /// Sorts every cell and checks the invariants.
    pub fn new(nodes: usize, edges_per_node: usize, mut cells: Vec<Vec<Selection>>) -> Result<Self> {
        for c in &mut cells {
            c.sort();
        }
        let g = Genotype { nodes, edges_per_node, cells };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 || self.edges_per_node == 0 || self.cells.is_empty() {
            return Err(invalid("empty genotype".into()));
        }
        for (t, cell) in self.cells.iter().enumerate() {
            let name = cell_type_name(self.cells.len(), t);
            for s in cell {
                if s.to < 2 || s.to >= self.nodes + 2 {
                    return Err(invalid(format!("{name}: target node {} outside 2..{}", s.to, self.nodes + 2)));
                }
                if s.from >= s.to {
                    return Err(invalid(format!("{name}: edge {} <- {} is not acyclic", s.to, s.from)));
                }
                if s.op == RegularOpKind::None {
                    return Err(invalid(format!("{name}: none selected on edge {} <- {}", s.to, s.from)));
                }
                if s.op.is_parameterized() != s.activation.is_some() {
                    return Err(invalid(format!(
                        "{name}: activation must accompany exactly the parameterized ops ({} on {} <- {})",
                        s.op, s.to, s.from
                    )));
                }
            }
            for to in 2..self.nodes + 2 {
                let preds: Vec<usize> = cell.iter().filter(|s| s.to == to).map(|s| s.from).collect();
                if preds.len() != self.edges_per_node {
                    return Err(invalid(format!("{name}: node {to} has {} inputs, expected {}", preds.len(), self.edges_per_node)));
                }
                if (1..preds.len()).any(|i| preds[..i].contains(&preds[i])) {
                    return Err(invalid(format!("{name}: node {to} repeats a predecessor")));
                }
            }
        }
        Ok(())
    }

    /// Replaces every activation with `kind`.
    pub fn with_activation(&self, kind: ActivationKind) -> Genotype {
        let mut g = self.clone();
        for s in g.cells.iter_mut().flatten() {
            if s.activation.is_some() {
                s.activation = Some(kind);
            }
        }
        g
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (t, cell) in self.cells.iter().enumerate() {
            let name = cell_type_name(self.cells.len(), t);
            for s in cell {
                let _ = write!(out, "{name} {} <- {} {}", s.to, s.from, s.op);
                if let Some(a) = s.activation {
                    let _ = write!(out, " @{a}");
                }
                out.push('\n');
            }
        }
        out
    }

    /// Parses the line format `normal 2 <- 0 sep_conv_3x3 @selu`. Blank lines
    /// and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Genotype> {
        let mut rows: Vec<(String, Selection)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: &str| Error::Input(format!("line {}: {m}: {line:?}", n + 1));
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.len() < 5 || tok.len() > 6 || tok[2] != "<-" {
                return Err(err("expected `<cell> <to> <- <from> <op> [@activation]`"));
            }
            let to = tok[1].parse::<usize>().map_err(|_| err("bad target node"))?;
            let from = tok[3].parse::<usize>().map_err(|_| err("bad predecessor"))?;
            let op = RegularOpKind::from_name(tok[4]).ok_or_else(|| err("unknown operator"))?;
            let activation = match tok.get(5) {
                Some(a) => {
                    let name = a.strip_prefix('@').ok_or_else(|| err("activation must start with @"))?;
                    Some(ActivationKind::from_name(name).ok_or_else(|| err("unknown activation"))?)
                }
                None => None,
            };
            rows.push((tok[0].to_string(), Selection { to, from, op, activation }));
        }
        if rows.is_empty() {
            bail!(Input, "empty genotype text");
        }
        let mut names: Vec<&str> = Vec::new();
        for (name, _) in &rows {
            if !names.contains(&name.as_str()) {
                names.push(name);
            }
        }
        let types = names.len();
        let mut cells = alloc::vec![Vec::new(); types];
        for (name, s) in &rows {
            let t = (0..types)
                .find(|&t| cell_type_name(types, t) == *name)
                .ok_or_else(|| Error::Input(format!("unknown cell type {name:?} for {types} cell types")))?;
            cells[t].push(*s);
        }
        let nodes = rows.iter().map(|(_, s)| s.to).max().unwrap_or(2).saturating_sub(1);
        let per_node = cells[0].iter().filter(|s| s.to == 2).count();
        Genotype::new(nodes, per_node, cells)
    }

    /// First 16 hex digits of the SHA-256 of the text form.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.to_text().as_bytes());
        let mut out = String::with_capacity(16);
        for b in &hash[..8] {
            let _ = write!(out, "{b:02x}");
        }
        out
    }

    /// One `digraph` per cell type, labelled `op [activation]`.
    pub fn to_dot(&self) -> String {
        let mut out = String::new();
        for (t, cell) in self.cells.iter().enumerate() {
            let name = cell_type_name(self.cells.len(), t);
            let label = |n: usize| match n {
                0 => "c_{k-2}".to_string(),
                1 => "c_{k-1}".to_string(),
                n => (n - 2).to_string(),
            };
            let _ = writeln!(out, "digraph {name} {{");
            out.push_str("  rankdir=LR;\n  node [shape=box];\n");
            for n in 0..self.nodes + 2 {
                let _ = writeln!(out, "  \"{}\";", label(n));
            }
            out.push_str("  \"c_{k}\";\n");
            for s in cell {
                let text = match s.activation {
                    Some(a) => format!("{} [{a}]", s.op),
                    None => s.op.to_string(),
                };
                let _ = writeln!(out, "  \"{}\" -> \"{}\" [label=\"{text}\"];", label(s.from), label(s.to));
            }
            for n in 2..self.nodes + 2 {
                let _ = writeln!(out, "  \"{}\" -> \"c_{{k}}\";", label(n));
            }
            out.push_str("}\n");
        }
        out
    }
}

/// Index of the largest value; the lowest index wins ties.
fn argmax(xs: impl Iterator<Item = (usize, f64)>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in xs {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best
}

/// A candidate on one edge: the regular op and the activation index it carries.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    op: RegularOpKind,
    activation: Option<usize>,
}

fn candidates(space: &SpaceConfig, mode: &EdgeMode) -> Vec<Candidate> {
    match mode {
        EdgeMode::Flat => space.super_ops().into_iter().map(|s| Candidate { op: s.op, activation: s.activation }).collect(),
        _ => space.regular_ops.iter().map(|&op| Candidate { op, activation: None }).collect(),
    }
}

/// Discretizes architecture weights: per node keep the edges with the largest
/// non-`none` softmax weight, then take the strongest non-`none` op on each and,
/// for parameterized ops, the strongest activation.
pub fn derive_genotype(arch: &ArchParams, space: &SpaceConfig, mode: &EdgeMode) -> Result<Genotype> {
    space.validate()?;
    let cands = candidates(space, mode);
    let edges = space.num_edges();
    if arch.alpha.len() != space.cell_types {
        bail!(Config, "{} alpha banks for {} cell types", arch.alpha.len(), space.cell_types);
    }
    let beta_width = space.activation_ops.len();
    for t in 0..space.cell_types {
        if arch.alpha.value(crate::ParamId(t)).shape() != [edges, cands.len()] {
            bail!(
                Config,
                "alpha bank {} has shape {:?}, expected [{edges}, {}]",
                t,
                arch.alpha.value(crate::ParamId(t)).shape(),
                cands.len()
            );
        }
        if *mode == EdgeMode::Factorized
            && (arch.beta.len() != space.cell_types || arch.beta.value(crate::ParamId(t)).shape() != [edges, beta_width])
        {
            bail!(Config, "beta bank {} does not match [{edges}, {beta_width}]", t);
        }
    }
    let k = space.edges_selected_per_node;
    let mut cells = Vec::with_capacity(space.cell_types);
    for t in 0..space.cell_types {
        let mut cell = Vec::new();
        for to in 2..space.num_intermediate_nodes + 2 {
            let base = space.edge_offset(to);
            let mut ranked = Vec::with_capacity(to);
            for from in 0..to {
                let w = softmax(arch.alpha_row(t, base + from))?;
                let best = argmax(w.iter().enumerate().filter(|&(i, _)| cands[i].op != RegularOpKind::None).map(|(i, &v)| (i, v)))
                    .ok_or_else(|| Error::Config("no non-none operator on an edge".into()))?;
                ranked.push((from, best));
            }
            ranked.sort_by(|a, b| b.1 .1.partial_cmp(&a.1 .1).unwrap_or(core::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
            for &(from, (i, _)) in ranked.iter().take(k) {
                let c = cands[i];
                let activation = if !c.op.is_parameterized() {
                    None
                } else {
                    Some(match mode {
                        EdgeMode::Flat => space.activation_ops[c.activation.expect("flat op carries activation")].kind,
                        EdgeMode::Fixed(inst) => inst.kind,
                        EdgeMode::Factorized => {
                            let row = arch.beta_row(t, base + from).expect("checked above");
                            let w = softmax(row)?;
                            let (j, _) = argmax(w.iter().copied().enumerate()).expect("non-empty registry");
                            space.activation_ops[j].kind
                        }
                    })
                };
                cell.push(Selection { to, from, op: c.op, activation });
            }
        }
        cells.push(cell);
    }
    Genotype::new(space.num_intermediate_nodes, k, cells)
}

/// Uniformly random genotype of the space: predecessors, op and activation
/// drawn independently per node and edge.
pub fn random_genotype(space: &SpaceConfig, rng: &mut Rng) -> Result<Genotype> {
    space.validate()?;
    let ops: Vec<RegularOpKind> = space.regular_ops.iter().copied().filter(|&k| k != RegularOpKind::None).collect();
    let k = space.edges_selected_per_node;
    let mut cells = Vec::new();
    for _ in 0..space.cell_types {
        let mut cell = Vec::new();
        for to in 2..space.num_intermediate_nodes + 2 {
            for from in sample(rng, to, k.min(to)).into_iter() {
                let op = ops[rng.random_range(0..ops.len())];
                let activation = op.is_parameterized().then(|| space.activation_ops[rng.random_range(0..space.activation_ops.len())].kind);
                cell.push(Selection { to, from, op, activation });
            }
        }
        cells.push(cell);
    }
    Genotype::new(space.num_intermediate_nodes, k, cells)
}
