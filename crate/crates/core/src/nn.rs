//! Parameterized layers and the regular operator factory, shared by the
//! super-network and the discrete network.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::activations::{ActivationInstance, ActivationKind};
use crate::error::{bail, Result};
use crate::graph::{Graph, Mode, Var};
use crate::kernels::pool::PoolKind;
use crate::params::{Group, ParamId, ParamKey, ParamStore};
use crate::rng::Rng;
use crate::space::RegularOpKind;
use crate::tensor::Tensor;

/// Everything a forward pass over network weights needs.
pub struct Fwd<'a> {
    pub graph: &'a mut Graph,
    pub weights: &'a mut ParamStore,
    pub mode: Mode,
    /// Source of RReLU slopes and drop-path masks.
    pub rng: &'a mut Rng,
    /// Whether weight leaves record gradients.
    pub weights_grad: bool,
}

impl Fwd<'_> {
    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(ParamKey { group: Group::Weights, id }, self.weights, self.weights_grad)
    }

    pub fn activation(&mut self, x: Var, inst: &ActivationInstance, param: Option<ParamId>) -> Var {
        let p = param.map(|id| self.param(id));
        self.graph.activation(x, inst, p, self.mode, self.rng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, &ActivationInstance::new(ActivationKind::Relu), None)
    }
}

/// Registers freshly initialized parameters.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
}

impl Builder<'_> {
    /// Zero-mean normal with variance `2 / fan_in`.
    pub fn conv_weight(&mut self, name: String, shape: [usize; 4]) -> ParamId {
        let fan_in = shape[1] * shape[2] * shape[3];
        let normal = Normal::new(0.0, libm::sqrt(2.0 / fan_in as f64)).expect("positive std");
        let data: Vec<f64> = (0..shape.iter().product()).map(|_| normal.sample(self.rng)).collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data).expect("data sized from shape"))
    }

    /// Uniform in `±1/√fan_in`.
    pub fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / libm::sqrt(fan_in as f64);
        let data: Vec<f64> = (0..shape.iter().product()).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data).expect("data sized from shape"))
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, value))
    }

    /// Coefficient of a learnable activation, `None` for the others.
    pub fn activation_param(&mut self, name: String, kind: ActivationKind) -> Option<ParamId> {
        kind.initial_param().map(|v| self.constant(name, &[1], v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        name: String,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        groups: usize,
    ) -> Self {
        let weight = b.conv_weight(name, [c_out, c_in / groups, kernel, kernel]);
        Conv2d { weight, stride, padding, dilation, groups }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        f.graph.conv2d(x, w, self.stride, self.padding, self.dilation, self.groups)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub affine: Option<(ParamId, ParamId)>,
}

impl BatchNorm2d {
    pub fn new(b: &mut Builder, name: &str, channels: usize, affine: bool) -> Self {
        let running_mean = b.store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        let running_var = b.store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], 1.0));
        let affine =
            affine.then(|| (b.constant(format!("{name}.weight"), &[channels], 1.0), b.constant(format!("{name}.bias"), &[channels], 0.0)));
        BatchNorm2d { running_mean, running_var, affine }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let affine = self.affine.map(|(g, b)| (f.param(g), f.param(b)));
        let mut mean = f.weights.value(self.running_mean).data().to_vec();
        let mut var = f.weights.value(self.running_var).data().to_vec();
        let y = f.graph.batch_norm(x, affine, &mut mean, &mut var, f.mode)?;
        if f.mode == Mode::Train {
            f.weights.set_value(self.running_mean, &mean)?;
            f.weights.set_value(self.running_var, &var)?;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = b.uniform(format!("{name}.weight"), &[fan_out, fan_in], fan_in);
        let bias = b.uniform(format!("{name}.bias"), &[fan_out], fan_in);
        Linear { weight, bias }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let (w, b) = (f.param(self.weight), f.param(self.bias));
        f.graph.linear(x, w, Some(b))
    }
}

/// ReLU, convolution, batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ReluConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ReluConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(b: &mut Builder, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize, affine: bool) -> Self {
        let conv = Conv2d::new(b, format!("{name}.conv"), c_in, c_out, kernel, stride, padding, 1, 1);
        ReluConvBn { conv, bn: BatchNorm2d::new(b, &format!("{name}.bn"), c_out, affine) }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let x = f.relu(x);
        let x = self.conv.forward(f, x)?;
        self.bn.forward(f, x)
    }
}

/// Halves the spatial size with two offset stride-2 1×1 convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedReduce {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub bn: BatchNorm2d,
}

impl FactorizedReduce {
    pub fn new(b: &mut Builder, name: &str, c_in: usize, c_out: usize, affine: bool) -> Result<Self> {
        if !c_out.is_multiple_of(2) {
            bail!(Config, "factorized reduction needs an even channel count, got {}", c_out);
        }
        let conv1 = Conv2d::new(b, format!("{name}.conv1"), c_in, c_out / 2, 1, 2, 0, 1, 1);
        let conv2 = Conv2d::new(b, format!("{name}.conv2"), c_in, c_out / 2, 1, 2, 1, 1, 1);
        Ok(FactorizedReduce { conv1, conv2, bn: BatchNorm2d::new(b, &format!("{name}.bn"), c_out, affine) })
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let x = f.relu(x);
        let a = self.conv1.forward(f, x)?;
        let b = self.conv2.forward(f, x)?;
        let b = f.graph.crop(b, 1, 1)?;
        let y = f.graph.concat_channels(&[a, b])?;
        self.bn.forward(f, y)
    }
}

/// Depthwise convolution, pointwise convolution, batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct DwPwBn {
    pub depthwise: Conv2d,
    pub pointwise: Conv2d,
    pub bn: BatchNorm2d,
}

impl DwPwBn {
    #[allow(clippy::too_many_arguments)]
    fn new(
        b: &mut Builder,
        name: &str,
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        affine: bool,
    ) -> Self {
        let depthwise = Conv2d::new(b, format!("{name}.dw"), channels, channels, kernel, stride, padding, dilation, channels);
        let pointwise = Conv2d::new(b, format!("{name}.pw"), channels, channels, 1, 1, 0, 1, 1);
        DwPwBn { depthwise, pointwise, bn: BatchNorm2d::new(b, &format!("{name}.bn"), channels, affine) }
    }

    fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let x = self.depthwise.forward(f, x)?;
        let x = self.pointwise.forward(f, x)?;
        self.bn.forward(f, x)
    }
}

/// A concrete regular operator. Parameterized variants expect their input to
/// be activated already; the activation is supplied by the caller.
#[derive(Debug, Clone, PartialEq)]
pub enum RegularOp {
    SepConv { kind: RegularOpKind, first: DwPwBn, second: DwPwBn },
    DilConv { kind: RegularOpKind, block: DwPwBn },
    Pool { kind: RegularOpKind, pool: PoolKind, stride: usize, bn: BatchNorm2d },
    Identity,
    Reduce(FactorizedReduce),
    Zero { stride: usize },
}

/// Output shape of a channel-preserving op with the given stride.
pub fn strided_shape(shape: &[usize], stride: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    if stride == 2 {
        s[2] = s[2].div_ceil(2);
        s[3] = s[3].div_ceil(2);
    }
    s
}

impl RegularOp {
    pub fn new(b: &mut Builder, name: &str, kind: RegularOpKind, channels: usize, stride: usize, affine: bool) -> Result<Self> {
        if channels == 0 {
            bail!(Config, "operator {} with zero channels", kind);
        }
        if stride != 1 && stride != 2 {
            bail!(Config, "operator stride must be 1 or 2, got {}", stride);
        }
        Ok(match kind {
            RegularOpKind::SepConv3x3 | RegularOpKind::SepConv5x5 => {
                let k = if kind == RegularOpKind::SepConv3x3 { 3 } else { 5 };
                let first = DwPwBn::new(b, &format!("{name}.0"), channels, k, stride, k / 2, 1, affine);
                let second = DwPwBn::new(b, &format!("{name}.1"), channels, k, 1, k / 2, 1, affine);
                RegularOp::SepConv { kind, first, second }
            }
            RegularOpKind::DilConv3x3 | RegularOpKind::DilConv5x5 => {
                let k = if kind == RegularOpKind::DilConv3x3 { 3 } else { 5 };
                RegularOp::DilConv { kind, block: DwPwBn::new(b, name, channels, k, stride, k - 1, 2, affine) }
            }
            RegularOpKind::MaxPool3x3 | RegularOpKind::AvgPool3x3 => {
                let pool = if kind == RegularOpKind::MaxPool3x3 { PoolKind::Max } else { PoolKind::Avg };
                RegularOp::Pool { kind, pool, stride, bn: BatchNorm2d::new(b, &format!("{name}.bn"), channels, affine) }
            }
            RegularOpKind::SkipConnect if stride == 1 => RegularOp::Identity,
            RegularOpKind::SkipConnect => RegularOp::Reduce(FactorizedReduce::new(b, name, channels, channels, affine)?),
            RegularOpKind::None => RegularOp::Zero { stride },
        })
    }

    pub fn kind(&self) -> RegularOpKind {
        match self {
            RegularOp::SepConv { kind, .. } | RegularOp::DilConv { kind, .. } | RegularOp::Pool { kind, .. } => *kind,
            RegularOp::Identity | RegularOp::Reduce(_) => RegularOpKind::SkipConnect,
            RegularOp::Zero { .. } => RegularOpKind::None,
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        match self {
            RegularOp::SepConv { first, second, .. } => {
                let y = first.forward(f, x)?;
                let y = f.relu(y);
                second.forward(f, y)
            }
            RegularOp::DilConv { block, .. } => block.forward(f, x),
            RegularOp::Pool { pool, stride, bn, .. } => {
                let y = f.graph.pool(x, *pool, 3, *stride, 1)?;
                bn.forward(f, y)
            }
            RegularOp::Identity => Ok(x),
            RegularOp::Reduce(r) => r.forward(f, x),
            RegularOp::Zero { stride } => {
                let shape = strided_shape(f.graph.value(x).shape(), *stride);
                Ok(f.graph.zeros(&shape))
            }
        }
    }
}
