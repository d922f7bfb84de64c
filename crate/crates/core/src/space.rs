//! Operator groups, the search-space description and its combinatorics.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use num_bigint::BigUint;

use crate::activations::{activation_registry, ActivationInstance, ActivationKind};
use crate::error::{bail, Result};

/// The regular operator group O₁.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RegularOpKind {
    SepConv3x3,
    SepConv5x5,
    DilConv3x3,
    DilConv5x5,
    MaxPool3x3,
    AvgPool3x3,
    SkipConnect,
    None,
}

impl RegularOpKind {
    pub const ALL: [RegularOpKind; 8] = [
        RegularOpKind::SepConv3x3,
        RegularOpKind::SepConv5x5,
        RegularOpKind::DilConv3x3,
        RegularOpKind::DilConv5x5,
        RegularOpKind::MaxPool3x3,
        RegularOpKind::AvgPool3x3,
        RegularOpKind::SkipConnect,
        RegularOpKind::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RegularOpKind::SepConv3x3 => "sep_conv_3x3",
            RegularOpKind::SepConv5x5 => "sep_conv_5x5",
            RegularOpKind::DilConv3x3 => "dil_conv_3x3",
            RegularOpKind::DilConv5x5 => "dil_conv_5x5",
            RegularOpKind::MaxPool3x3 => "max_pool_3x3",
            RegularOpKind::AvgPool3x3 => "avg_pool_3x3",
            RegularOpKind::SkipConnect => "skip_connect",
            RegularOpKind::None => "none",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// True for the four convolutions, the only ops fed by an activation.
    pub fn is_parameterized(self) -> bool {
        matches!(self, RegularOpKind::SepConv3x3 | RegularOpKind::SepConv5x5 | RegularOpKind::DilConv3x3 | RegularOpKind::DilConv5x5)
    }
}

impl fmt::Display for RegularOpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Shape of a cell search space.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceConfig {
    pub num_intermediate_nodes: usize,
    pub edges_selected_per_node: usize,
    pub regular_ops: Vec<RegularOpKind>,
    pub activation_ops: Vec<ActivationInstance>,
    pub factorized: bool,
    pub cell_types: usize,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        Self {
            num_intermediate_nodes: 4,
            edges_selected_per_node: 2,
            regular_ops: RegularOpKind::ALL.to_vec(),
            activation_ops: activation_registry(),
            factorized: true,
            cell_types: 2,
        }
    }
}

/// One element of the flat (non-factorized) candidate pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuperOp {
    pub op: RegularOpKind,
    /// Index into `activation_ops`, set exactly for parameterized ops.
    pub activation: Option<usize>,
}

/// Architectural parameter counts over all cell types.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchParamCount {
    pub alpha: usize,
    pub beta: usize,
    pub flat: usize,
}

impl SpaceConfig {
    /// The default space with a single activation, i.e. the original DARTS space.
    pub fn with_activations(kinds: &[ActivationKind]) -> Self {
        Self { activation_ops: kinds.iter().map(|&k| ActivationInstance::new(k)).collect(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_intermediate_nodes == 0 {
            bail!(Config, "num_intermediate_nodes must be at least 1");
        }
        if self.edges_selected_per_node == 0 || self.edges_selected_per_node > 2 {
            bail!(Config, "edges_selected_per_node must be 1 or 2, got {}", self.edges_selected_per_node);
        }
        if self.cell_types == 0 {
            bail!(Config, "cell_types must be at least 1");
        }
        if self.regular_ops.is_empty() {
            bail!(Config, "empty regular operator registry");
        }
        if self.activation_ops.is_empty() {
            bail!(Config, "empty activation operator registry");
        }
        for (i, k) in self.regular_ops.iter().enumerate() {
            if self.regular_ops[..i].contains(k) {
                bail!(Config, "regular operator {} listed twice", k);
            }
        }
        for (i, a) in self.activation_ops.iter().enumerate() {
            if self.activation_ops[..i].iter().any(|b| b.kind == a.kind) {
                bail!(Config, "activation {} listed twice", a.kind);
            }
        }
        if self.regular_ops.iter().all(|&k| k == RegularOpKind::None) {
            bail!(Config, "regular operator registry holds only none");
        }
        Ok(())
    }

    pub fn parameterized(&self) -> impl Iterator<Item = RegularOpKind> + '_ {
        self.regular_ops.iter().copied().filter(|k| k.is_parameterized())
    }

    pub fn non_parameterized(&self) -> impl Iterator<Item = RegularOpKind> + '_ {
        self.regular_ops.iter().copied().filter(|k| !k.is_parameterized())
    }

    pub fn has_parameterized(&self) -> bool {
        self.parameterized().next().is_some()
    }

    /// Edges `(from, to)` of one cell, ordered by target node then predecessor.
    /// Nodes 0 and 1 are the cell inputs.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (2..2 + self.num_intermediate_nodes).flat_map(|to| (0..to).map(move |from| (from, to))).collect()
    }

    pub fn num_edges(&self) -> usize {
        (0..self.num_intermediate_nodes).map(|j| j + 2).sum()
    }

    /// Index of the first edge into intermediate node `to`.
    pub fn edge_offset(&self, to: usize) -> usize {
        (2..to).sum()
    }

    /// The flat pool: regular ops in registry order, each parameterized op
    /// expanded over the activation group.
    pub fn super_ops(&self) -> Vec<SuperOp> {
        let mut out = Vec::new();
        for &op in &self.regular_ops {
            if op.is_parameterized() {
                out.extend((0..self.activation_ops.len()).map(|a| SuperOp { op, activation: Some(a) }));
            } else {
                out.push(SuperOp { op, activation: None });
            }
        }
        out
    }
}

/// Size of the flat candidate pool: `|parameterized|·|O₂| + |non-parameterized|`.
pub fn super_operator_count(cfg: &SpaceConfig) -> Result<usize> {
    cfg.validate()?;
    Ok(cfg.parameterized().count() * cfg.activation_ops.len() + cfg.non_parameterized().count())
}

pub fn arch_param_count(cfg: &SpaceConfig) -> Result<ArchParamCount> {
    let flat_per_edge = super_operator_count(cfg)?;
    let edges = cfg.num_edges() * cfg.cell_types;
    Ok(ArchParamCount { alpha: edges * cfg.regular_ops.len(), beta: edges * cfg.activation_ops.len(), flat: edges * flat_per_edge })
}

/// Distinct choices for one selected edge: the flat pool without `none`.
pub fn choices_per_edge(cfg: &SpaceConfig) -> Result<usize> {
    let pool = super_operator_count(cfg)?;
    Ok(pool - usize::from(cfg.regular_ops.contains(&RegularOpKind::None)))
}

fn binomial(n: usize, k: usize) -> BigUint {
    let mut acc = BigUint::from(1u32);
    for i in 0..k {
        acc *= n - i;
        acc /= i + 1;
    }
    acc
}

/// Number of distinct derived architectures.
pub fn space_cardinality(cfg: &SpaceConfig) -> Result<BigUint> {
    let choices = BigUint::from(choices_per_edge(cfg)?);
    let k = cfg.edges_selected_per_node;
    let mut per_cell = BigUint::from(1u32);
    for j in 0..cfg.num_intermediate_nodes {
        per_cell *= binomial(j + 2, k);
    }
    per_cell *= choices.pow((k * cfg.num_intermediate_nodes) as u32);
    Ok(per_cell.pow(cfg.cell_types as u32))
}

/// `d.dd…eN` with `digits` significant digits, rounded half up.
pub fn scientific(n: &BigUint, digits: usize) -> String {
    let digits = digits.max(1);
    let text = n.to_str_radix(10);
    if text.len() <= digits {
        let (head, tail) = text.split_at(1);
        return if tail.is_empty() { alloc::format!("{head}e0") } else { alloc::format!("{head}.{tail}e0") };
    }
    let drop = (text.len() - digits) as u32;
    let unit = BigUint::from(10u32).pow(drop);
    let mut q = n / &unit;
    let r = n % &unit;
    let mut exp = text.len() - 1;
    if r * 2u32 >= unit {
        q += 1u32;
    }
    let mut m = q.to_str_radix(10);
    if m.len() > digits {
        m.truncate(digits);
        exp += 1;
    }
    let (head, tail) = m.split_at(1);
    if tail.is_empty() {
        alloc::format!("{head}e{exp}")
    } else {
        alloc::format!("{head}.{tail}e{exp}")
    }
}
