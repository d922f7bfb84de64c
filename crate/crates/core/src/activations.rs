//! The activation-operator group: nine activations, two of them with a
//! learnable coefficient.

use alloc::vec::Vec;
use core::fmt;

use libm::exp;
use rand::Rng as _;

use crate::graph::Mode;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const SELU_LAMBDA: f64 = 1.0507009873554805;
pub const SELU_ALPHA: f64 = 1.6732632423543772;
pub const RRELU_LOWER: f64 = 1.0 / 8.0;
pub const RRELU_UPPER: f64 = 1.0 / 3.0;
pub const LEAKY_RELU_SLOPE: f64 = 0.01;
pub const PRELU_INIT: f64 = 0.25;
pub const SWISH_INIT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ActivationKind {
    Relu,
    Relu6,
    LeakyRelu,
    PRelu,
    RRelu,
    Elu,
    Celu,
    Selu,
    Swish,
}

impl ActivationKind {
    /// Registry order; β vectors align with it.
    pub const ALL: [ActivationKind; 9] = [
        ActivationKind::Relu,
        ActivationKind::Relu6,
        ActivationKind::LeakyRelu,
        ActivationKind::PRelu,
        ActivationKind::RRelu,
        ActivationKind::Elu,
        ActivationKind::Celu,
        ActivationKind::Selu,
        ActivationKind::Swish,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Relu6 => "relu6",
            ActivationKind::LeakyRelu => "leaky_relu",
            ActivationKind::PRelu => "prelu",
            ActivationKind::RRelu => "rrelu",
            ActivationKind::Elu => "elu",
            ActivationKind::Celu => "celu",
            ActivationKind::Selu => "selu",
            ActivationKind::Swish => "swish",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// PReLU owns its slope, Swish its coefficient `b`.
    pub fn is_learnable(self) -> bool {
        matches!(self, ActivationKind::PRelu | ActivationKind::Swish)
    }

    /// The fixed constant of the kind: LeakyReLU slope, ELU/CELU alpha.
    pub fn default_coeff(self) -> f64 {
        match self {
            ActivationKind::LeakyRelu => LEAKY_RELU_SLOPE,
            ActivationKind::Elu | ActivationKind::Celu => 1.0,
            _ => 0.0,
        }
    }

    pub fn initial_param(self) -> Option<f64> {
        match self {
            ActivationKind::PRelu => Some(PRELU_INIT),
            ActivationKind::Swish => Some(SWISH_INIT),
            _ => None,
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A configured activation. Learnable coefficients live in a parameter store;
/// this only carries the fixed constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationInstance {
    pub kind: ActivationKind,
    pub coeff: f64,
}

impl ActivationInstance {
    pub fn new(kind: ActivationKind) -> Self {
        ActivationInstance { kind, coeff: kind.default_coeff() }
    }

    pub fn with_coeff(kind: ActivationKind, coeff: f64) -> Self {
        ActivationInstance { kind, coeff }
    }
}

/// Prototypes for the nine activations, in registry order.
pub fn activation_registry() -> Vec<ActivationInstance> {
    ActivationKind::ALL.iter().map(|&k| ActivationInstance::new(k)).collect()
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + exp(-z))
    } else {
        let e = exp(z);
        e / (1.0 + e)
    }
}

/// Evaluates one activation at `x`. `param` is the learnable coefficient
/// (ignored by kinds without one); `slope` is the RReLU negative slope.
#[inline]
pub fn eval(kind: ActivationKind, coeff: f64, param: f64, slope: f64, x: f64) -> f64 {
    match kind {
        ActivationKind::Relu => {
            if x > 0.0 || x.is_nan() {
                x
            } else {
                0.0
            }
        }
        ActivationKind::Relu6 => x.clamp(0.0, 6.0),
        ActivationKind::LeakyRelu => {
            if x > 0.0 {
                x
            } else {
                coeff * x
            }
        }
        ActivationKind::PRelu => {
            if x > 0.0 {
                x
            } else {
                param * x
            }
        }
        ActivationKind::RRelu => {
            if x >= 0.0 {
                x
            } else {
                slope * x
            }
        }
        ActivationKind::Elu => {
            if x > 0.0 {
                x
            } else {
                coeff * (exp(x) - 1.0)
            }
        }
        ActivationKind::Celu => {
            if x > 0.0 {
                x
            } else {
                coeff * (exp(x / coeff) - 1.0)
            }
        }
        ActivationKind::Selu => {
            if x > 0.0 {
                SELU_LAMBDA * x
            } else {
                SELU_LAMBDA * SELU_ALPHA * (exp(x) - 1.0)
            }
        }
        ActivationKind::Swish => x * sigmoid(param * x),
    }
}

/// Returns `(d/dx, d/dparam)`.
#[inline]
pub fn derivative(kind: ActivationKind, coeff: f64, param: f64, slope: f64, x: f64) -> (f64, f64) {
    match kind {
        ActivationKind::Relu => (if x > 0.0 { 1.0 } else { 0.0 }, 0.0),
        ActivationKind::Relu6 => (if x > 0.0 && x < 6.0 { 1.0 } else { 0.0 }, 0.0),
        ActivationKind::LeakyRelu => (if x > 0.0 { 1.0 } else { coeff }, 0.0),
        ActivationKind::PRelu => {
            if x > 0.0 {
                (1.0, 0.0)
            } else {
                (param, x)
            }
        }
        ActivationKind::RRelu => (if x >= 0.0 { 1.0 } else { slope }, 0.0),
        ActivationKind::Elu => (if x > 0.0 { 1.0 } else { coeff * exp(x) }, 0.0),
        ActivationKind::Celu => (if x > 0.0 { 1.0 } else { exp(x / coeff) }, 0.0),
        ActivationKind::Selu => (if x > 0.0 { SELU_LAMBDA } else { SELU_LAMBDA * SELU_ALPHA * exp(x) }, 0.0),
        ActivationKind::Swish => {
            let s = sigmoid(param * x);
            let ds = s * (1.0 - s);
            (s + param * x * ds, x * x * ds)
        }
    }
}

/// Per-element RReLU slopes: uniform in `[1/8, 1/3]` in train mode, the midpoint otherwise.
pub fn rrelu_slopes(n: usize, mode: Mode, rng: &mut Rng) -> Vec<f64> {
    match mode {
        Mode::Train => (0..n).map(|_| rng.random_range(RRELU_LOWER..=RRELU_UPPER)).collect(),
        Mode::Eval => alloc::vec![rrelu_eval_slope(); n],
    }
}

pub fn rrelu_eval_slope() -> f64 {
    0.5 * (RRELU_LOWER + RRELU_UPPER)
}

/// Applies an activation outside any graph. `param` defaults to the kind's
/// initial coefficient when `None`.
pub fn activate(inst: &ActivationInstance, x: &Tensor, param: Option<f64>, mode: Mode, rng: &mut Rng) -> Tensor {
    let p = param.or(inst.kind.initial_param()).unwrap_or(0.0);
    let slopes = if inst.kind == ActivationKind::RRelu { rrelu_slopes(x.len(), mode, rng) } else { Vec::new() };
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let s = slopes.get(i).copied().unwrap_or(0.0);
        *v = eval(inst.kind, inst.coeff, p, s, *v);
    }
    out
}
