//! The continuous relaxation: mixed edges, search cells and the super-network.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::activations::ActivationInstance;
use crate::error::{bail, Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::nn::{strided_shape, BatchNorm2d, Builder, Conv2d, FactorizedReduce, Fwd, Linear, RegularOp, ReluConvBn};
use crate::params::{Group, ParamId, ParamKey, ParamStore};
use crate::rng::{self, Rng, Stream};
use crate::space::{super_operator_count, SpaceConfig};
use crate::tensor::Tensor;

/// How the activation group enters each edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EdgeMode {
    /// α over regular ops, β over activations feeding the parameterized ops.
    Factorized,
    /// One hard-wired activation and no β.
    Fixed(ActivationInstance),
    /// One softmax over the flat pool of super-operators.
    Flat,
}

/// Name of a cell type: `normal` and `reduce` in the usual two-type space.
pub fn cell_type_name(cell_types: usize, t: usize) -> String {
    match (cell_types, t) {
        (2, 0) | (1, 0) => "normal".into(),
        (2, 1) => "reduce".into(),
        _ => format!("type{t}"),
    }
}

/// Architecture parameter banks, one `[edges, width]` tensor per cell type.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchParams {
    /// α, or the flat pool weights in [`EdgeMode::Flat`].
    pub alpha: ParamStore,
    /// β; empty unless the mode is factorized.
    pub beta: ParamStore,
}

/// Half-width of the uniform noise added to the zero initialization.
pub const ARCH_INIT_NOISE: f64 = 1e-3;

impl ArchParams {
    pub fn zeros(space: &SpaceConfig, mode: &EdgeMode) -> Result<Self> {
        space.validate()?;
        let edges = space.num_edges();
        let width = match mode {
            EdgeMode::Flat => super_operator_count(space)?,
            _ => space.regular_ops.len(),
        };
        let mut alpha = ParamStore::new();
        let mut beta = ParamStore::new();
        for t in 0..space.cell_types {
            let name = cell_type_name(space.cell_types, t);
            alpha.add(format!("alpha.{name}"), Tensor::zeros(&[edges, width]));
            if *mode == EdgeMode::Factorized {
                beta.add(format!("beta.{name}"), Tensor::zeros(&[edges, space.activation_ops.len()]));
            }
        }
        Ok(ArchParams { alpha, beta })
    }

    /// Zeros plus uniform noise, α from the alpha stream and β from the beta stream.
    pub fn init(space: &SpaceConfig, mode: &EdgeMode, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(space, mode)?;
        for (store, which) in [(&mut p.alpha, Stream::Alpha), (&mut p.beta, Stream::Beta)] {
            let mut r = rng::stream(seed, which);
            for e in store.entries_mut() {
                for v in e.value.data_mut() {
                    *v = r.random_range(-ARCH_INIT_NOISE..ARCH_INIT_NOISE);
                }
            }
        }
        Ok(p)
    }

    pub fn alpha_row(&self, cell_type: usize, edge: usize) -> &[f64] {
        row(&self.alpha, cell_type, edge)
    }

    pub fn beta_row(&self, cell_type: usize, edge: usize) -> Option<&[f64]> {
        (cell_type < self.beta.len()).then(|| row(&self.beta, cell_type, edge))
    }

    pub fn store(&self, group: Group) -> Option<&ParamStore> {
        match group {
            Group::Alpha => Some(&self.alpha),
            Group::Beta => Some(&self.beta),
            Group::Weights => None,
        }
    }
}

fn row(store: &ParamStore, t: usize, e: usize) -> &[f64] {
    let v = store.value(ParamId(t));
    let w = v.shape()[1];
    &v.data()[e * w..(e + 1) * w]
}

/// Softmaxed architecture weights of one cell type inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct ArchVars {
    pub alpha: Var,
    pub beta: Option<Var>,
}

impl ArchVars {
    /// Reads cell type `t` from `arch` and softmaxes each edge row.
    pub fn build(g: &mut Graph, arch: &ArchParams, t: usize, grad: Option<Group>) -> Result<Self> {
        let a = g.param(ParamKey { group: Group::Alpha, id: ParamId(t) }, &arch.alpha, grad == Some(Group::Alpha));
        let alpha = g.softmax_rows(a)?;
        let beta = if t < arch.beta.len() {
            let b = g.param(ParamKey { group: Group::Beta, id: ParamId(t) }, &arch.beta, grad == Some(Group::Beta));
            Some(g.softmax_rows(b)?)
        } else {
            None
        };
        Ok(ArchVars { alpha, beta })
    }
}

/// An activation used on an edge, with its coefficient if learnable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeActivation {
    pub inst: ActivationInstance,
    pub param: Option<ParamId>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EdgeKind {
    Factorized { ops: Vec<RegularOp>, acts: Vec<EdgeActivation> },
    Fixed { ops: Vec<RegularOp>, act: EdgeActivation },
    Flat { ops: Vec<(RegularOp, Option<EdgeActivation>)> },
}

/// A mixed edge `from → to` of a search cell.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedEdge {
    pub from: usize,
    pub to: usize,
    /// Row of this edge in the architecture banks.
    pub index: usize,
    pub stride: usize,
    pub kind: EdgeKind,
}

fn edge_activation(b: &mut Builder, name: String, inst: ActivationInstance) -> EdgeActivation {
    EdgeActivation { inst, param: b.activation_param(name, inst.kind) }
}

impl MixedEdge {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        name: &str,
        space: &SpaceConfig,
        mode: &EdgeMode,
        from: usize,
        to: usize,
        index: usize,
        channels: usize,
        stride: usize,
    ) -> Result<Self> {
        let regular = |b: &mut Builder| -> Result<Vec<RegularOp>> {
            space.regular_ops.iter().map(|&k| RegularOp::new(b, &format!("{name}.{k}"), k, channels, stride, false)).collect()
        };
        let kind = match mode {
            EdgeMode::Factorized => {
                let ops = regular(b)?;
                let acts = space.activation_ops.iter().map(|&inst| edge_activation(b, format!("{name}.act.{}", inst.kind), inst)).collect();
                EdgeKind::Factorized { ops, acts }
            }
            EdgeMode::Fixed(inst) => {
                let ops = regular(b)?;
                EdgeKind::Fixed { ops, act: edge_activation(b, format!("{name}.act.{}", inst.kind), *inst) }
            }
            EdgeMode::Flat => {
                let mut ops = Vec::new();
                for s in space.super_ops() {
                    let act = s.activation.map(|a| space.activation_ops[a]);
                    let label = match act {
                        Some(i) => format!("{name}.{}.{}", s.op, i.kind),
                        None => format!("{name}.{}", s.op),
                    };
                    let op = RegularOp::new(b, &label, s.op, channels, stride, false)?;
                    let act = act.map(|i| edge_activation(b, format!("{label}.act"), i));
                    ops.push((op, act));
                }
                EdgeKind::Flat { ops }
            }
        };
        Ok(MixedEdge { from, to, index, stride, kind })
    }

    fn apply(f: &mut Fwd, x: Var, a: &EdgeActivation) -> Var {
        f.activation(x, &a.inst, a.param)
    }

    pub fn forward(&self, f: &mut Fwd, x: Var, arch: &ArchVars) -> Result<Var> {
        let shape = strided_shape(f.graph.value(x).shape(), self.stride);
        let mut terms = Vec::new();
        let y = match &self.kind {
            EdgeKind::Factorized { ops, acts } => {
                let Some(beta) = arch.beta else {
                    bail!(Config, "factorized edge without activation weights");
                };
                let activated = if ops.iter().any(|o| o.kind().is_parameterized()) {
                    let units: Vec<(ActivationInstance, Option<Var>)> =
                        acts.iter().map(|a| (a.inst, a.param.map(|p| f.param(p)))).collect();
                    let offset = self.index * acts.len();
                    Some(f.graph.mixed_activation(x, beta, offset, &units, f.mode, f.rng)?)
                } else {
                    None
                };
                for (k, op) in ops.iter().enumerate() {
                    let input = match activated {
                        Some(a) if op.kind().is_parameterized() => a,
                        _ => x,
                    };
                    terms.push((k, op.forward(f, input)?));
                }
                f.graph.weighted_sum(&terms, arch.alpha, self.index * ops.len(), &shape)?
            }
            EdgeKind::Fixed { ops, act } => {
                let activated = if ops.iter().any(|o| o.kind().is_parameterized()) { Some(Self::apply(f, x, act)) } else { None };
                for (k, op) in ops.iter().enumerate() {
                    let input = match activated {
                        Some(a) if op.kind().is_parameterized() => a,
                        _ => x,
                    };
                    terms.push((k, op.forward(f, input)?));
                }
                f.graph.weighted_sum(&terms, arch.alpha, self.index * ops.len(), &shape)?
            }
            EdgeKind::Flat { ops } => {
                for (k, (op, act)) in ops.iter().enumerate() {
                    let input = match act {
                        Some(a) => Self::apply(f, x, a),
                        None => x,
                    };
                    terms.push((k, op.forward(f, input)?));
                }
                f.graph.weighted_sum(&terms, arch.alpha, self.index * ops.len(), &shape)?
            }
        };
        if !f.graph.value(y).all_finite() {
            return Err(Error::Numerical { context: format!("non-finite output on edge {}->{}", self.from, self.to) });
        }
        Ok(y)
    }
}

/// Adapts a cell input to the cell's channel count.
#[derive(Debug, Clone, PartialEq)]
pub enum CellInput {
    Conv(ReluConvBn),
    Reduce(FactorizedReduce),
}

impl CellInput {
    pub fn new(b: &mut Builder, name: &str, c_in: usize, c_out: usize, reduce: bool, affine: bool) -> Result<Self> {
        Ok(if reduce {
            CellInput::Reduce(FactorizedReduce::new(b, name, c_in, c_out, affine)?)
        } else {
            CellInput::Conv(ReluConvBn::new(b, name, c_in, c_out, 1, 1, 0, affine))
        })
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        match self {
            CellInput::Conv(c) => c.forward(f, x),
            CellInput::Reduce(r) => r.forward(f, x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchCell {
    pub reduction: bool,
    pub cell_type: usize,
    pub nodes: usize,
    pub pre0: CellInput,
    pub pre1: CellInput,
    pub edges: Vec<MixedEdge>,
}

impl SearchCell {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        name: &str,
        space: &SpaceConfig,
        mode: &EdgeMode,
        c_prev_prev: usize,
        c_prev: usize,
        channels: usize,
        reduction: bool,
        reduction_prev: bool,
    ) -> Result<Self> {
        let pre0 = CellInput::new(b, &format!("{name}.pre0"), c_prev_prev, channels, reduction_prev, false)?;
        let pre1 = CellInput::new(b, &format!("{name}.pre1"), c_prev, channels, false, false)?;
        let mut edges = Vec::new();
        for (index, (from, to)) in space.edges().into_iter().enumerate() {
            let stride = if reduction && from < 2 { 2 } else { 1 };
            let ename = format!("{name}.edge{from}_{to}");
            edges.push(MixedEdge::new(b, &ename, space, mode, from, to, index, channels, stride)?);
        }
        let cell_type = usize::from(reduction && space.cell_types > 1);
        Ok(SearchCell { reduction, cell_type, nodes: space.num_intermediate_nodes, pre0, pre1, edges })
    }

    /// All node values: the two preprocessed inputs then the intermediate nodes.
    pub fn forward_states(&self, f: &mut Fwd, s0: Var, s1: Var, arch: &ArchVars) -> Result<Vec<Var>> {
        let mut states = Vec::with_capacity(self.nodes + 2);
        states.push(self.pre0.forward(f, s0)?);
        states.push(self.pre1.forward(f, s1)?);
        let mut edges = self.edges.iter().peekable();
        for to in 2..2 + self.nodes {
            let mut flows = Vec::with_capacity(to);
            while let Some(e) = edges.next_if(|e| e.to == to) {
                flows.push(e.forward(f, states[e.from], arch)?);
            }
            states.push(f.graph.add_n(&flows)?);
        }
        Ok(states)
    }

    pub fn forward(&self, f: &mut Fwd, s0: Var, s1: Var, arch: &ArchVars) -> Result<Var> {
        let states = self.forward_states(f, s0, s1, arch)?;
        f.graph.concat_channels(&states[2..])
    }
}

/// Super-network dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuperNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub channels: usize,
    pub layers: usize,
    pub stem_multiplier: usize,
}

impl Default for SuperNetConfig {
    fn default() -> Self {
        SuperNetConfig { in_channels: 3, num_classes: 10, channels: 16, layers: 8, stem_multiplier: 3 }
    }
}

/// Indices of the reduction cells: one third and two thirds of the depth.
pub fn reduction_layers(layers: usize) -> [usize; 2] {
    [layers / 3, 2 * layers / 3]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuperNetwork {
    pub space: SpaceConfig,
    pub mode: EdgeMode,
    pub config: SuperNetConfig,
    /// ω, plus batch-norm running statistics as non-trainable buffers.
    pub weights: ParamStore,
    pub arch: ArchParams,
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    pub cells: Vec<SearchCell>,
    classifier: Linear,
}

impl SuperNetwork {
    /// Builds the network with weights drawn from the init stream and
    /// architecture parameters from the alpha and beta streams of `seed`.
    pub fn new(space: SpaceConfig, mode: EdgeMode, config: SuperNetConfig, seed: u64) -> Result<Self> {
        space.validate()?;
        if space.cell_types > 2 {
            bail!(Config, "a super-network uses at most two cell types, got {}", space.cell_types);
        }
        if config.layers == 0 || config.channels == 0 || config.num_classes < 2 || config.in_channels == 0 {
            bail!(Config, "invalid network dimensions {:?}", config);
        }
        let arch = ArchParams::init(&space, &mode, seed)?;
        let mut weights = ParamStore::new();
        let mut init = rng::stream(seed, Stream::Init);
        let mut b = Builder { store: &mut weights, rng: &mut init };
        let c = config.channels;
        let c_stem = config.stem_multiplier * c;
        let stem = Conv2d::new(&mut b, "stem.conv".into(), config.in_channels, c_stem, 3, 1, 1, 1, 1);
        let stem_bn = BatchNorm2d::new(&mut b, "stem.bn", c_stem, true);
        let (mut c_pp, mut c_p, mut c_cur) = (c_stem, c_stem, c);
        let reductions = reduction_layers(config.layers);
        let mut reduction_prev = false;
        let mut cells = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let reduction = reductions.contains(&i);
            if reduction {
                c_cur *= 2;
            }
            let cell = SearchCell::new(&mut b, &format!("cells.{i}"), &space, &mode, c_pp, c_p, c_cur, reduction, reduction_prev)?;
            cells.push(cell);
            reduction_prev = reduction;
            c_pp = c_p;
            c_p = space.num_intermediate_nodes * c_cur;
        }
        let classifier = Linear::new(&mut b, "classifier", c_p, config.num_classes);
        Ok(SuperNetwork { space, mode, config, weights, arch, stem, stem_bn, cells, classifier })
    }

    pub fn store(&self, group: Group) -> &ParamStore {
        match group {
            Group::Weights => &self.weights,
            Group::Alpha => &self.arch.alpha,
            Group::Beta => &self.arch.beta,
        }
    }

    pub fn store_mut(&mut self, group: Group) -> &mut ParamStore {
        match group {
            Group::Weights => &mut self.weights,
            Group::Alpha => &mut self.arch.alpha,
            Group::Beta => &mut self.arch.beta,
        }
    }

    /// Logits `[N, classes]`. Only the parameters of `grad` record gradients.
    pub fn forward(&mut self, g: &mut Graph, images: &Tensor, mode: Mode, rng: &mut Rng, grad: Option<Group>) -> Result<Var> {
        let [_, c, _, _] = images.dims4()?;
        if c != self.config.in_channels {
            bail!(Dimension, "images have {} channels, the stem expects {}", c, self.config.in_channels);
        }
        let arch: Vec<ArchVars> = (0..self.space.cell_types).map(|t| ArchVars::build(g, &self.arch, t, grad)).collect::<Result<_>>()?;
        let mut f = Fwd { graph: g, weights: &mut self.weights, mode, rng, weights_grad: grad == Some(Group::Weights) };
        let x = f.graph.constant(images.clone());
        let x = self.stem.forward(&mut f, x)?;
        let s = self.stem_bn.forward(&mut f, x)?;
        let (mut s0, mut s1) = (s, s);
        for cell in &self.cells {
            let out = cell.forward(&mut f, s0, s1, &arch[cell.cell_type])?;
            s0 = s1;
            s1 = out;
        }
        let pooled = f.graph.global_avg_pool(s1)?;
        self.classifier.forward(&mut f, pooled)
    }

    /// Mean cross entropy of a batch.
    pub fn loss(&mut self, g: &mut Graph, images: &Tensor, labels: &[usize], rng: &mut Rng, grad: Option<Group>) -> Result<Var> {
        let logits = self.forward(g, images, Mode::Train, rng, grad)?;
        g.cross_entropy(logits, labels, 0.0)
    }
}

/// Multiply-accumulates of one mixed-edge forward on a `[batch, channels, hw, hw]` input.
pub fn edge_macs(space: &SpaceConfig, mode: &EdgeMode, channels: usize, batch: usize, hw: usize) -> Result<u64> {
    let mut weights = ParamStore::new();
    let mut init = rng::stream(0, Stream::Init);
    let mut b = Builder { store: &mut weights, rng: &mut init };
    let edge = MixedEdge::new(&mut b, "edge", space, mode, 0, 2, 0, channels, 1)?;
    let arch = ArchParams::zeros(space, mode)?;
    let mut g = Graph::new();
    let vars = ArchVars::build(&mut g, &arch, 0, None)?;
    let before = g.macs();
    let mut r = rng::stream(0, Stream::RRelu);
    let mut f = Fwd { graph: &mut g, weights: &mut weights, mode: Mode::Train, rng: &mut r, weights_grad: false };
    let x = f.graph.constant(Tensor::full(&[batch, channels, hw, hw], 0.5));
    edge.forward(&mut f, x, &vars)?;
    Ok(g.macs() - before)
}
