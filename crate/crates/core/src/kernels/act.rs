//! Elementwise activation loops, monomorphized per activation kind.

use alloc::vec::Vec;

use libm::exp;

use crate::activations::{self, ActivationKind, SELU_ALPHA, SELU_LAMBDA};

const fn kind_at(k: u8) -> ActivationKind {
    ActivationKind::ALL[k as usize]
}

macro_rules! dispatch {
    ($kind:expr, $f:ident($($arg:expr),*)) => {
        match $kind {
            ActivationKind::Relu => $f::<0>($($arg),*),
            ActivationKind::Relu6 => $f::<1>($($arg),*),
            ActivationKind::LeakyRelu => $f::<2>($($arg),*),
            ActivationKind::PRelu => $f::<3>($($arg),*),
            ActivationKind::RRelu => $f::<4>($($arg),*),
            ActivationKind::Elu => $f::<5>($($arg),*),
            ActivationKind::Celu => $f::<6>($($arg),*),
            ActivationKind::Selu => $f::<7>($($arg),*),
            ActivationKind::Swish => $f::<8>($($arg),*),
        }
    };
}

/// Whether the kind reads the shared `exp(x)` buffer.
pub fn uses_exp(kind: ActivationKind, coeff: f64) -> bool {
    match kind {
        ActivationKind::Elu | ActivationKind::Selu => true,
        ActivationKind::Celu => coeff == 1.0,
        _ => false,
    }
}

/// `exp(x)` for `x <= 0`, zero elsewhere.
pub fn shared_exp(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|&x| if x <= 0.0 { exp(x) } else { 0.0 }).collect()
}

/// Value, input derivative and coefficient derivative.
#[inline(always)]
fn full<const K: u8>(coeff: f64, param: f64, slope: f64, x: f64, ex: f64) -> (f64, f64, f64) {
    const LA: f64 = SELU_LAMBDA * SELU_ALPHA;
    let kind = kind_at(K);
    match kind {
        ActivationKind::Elu if x <= 0.0 => (coeff * (ex - 1.0), coeff * ex, 0.0),
        ActivationKind::Celu if x <= 0.0 && coeff == 1.0 => (ex - 1.0, ex, 0.0),
        ActivationKind::Selu if x <= 0.0 => (LA * (ex - 1.0), LA * ex, 0.0),
        _ => {
            let y = activations::eval(kind, coeff, param, slope, x);
            let (dx, dp) = activations::derivative(kind, coeff, param, slope, x);
            (y, dx, dp)
        }
    }
}

#[inline(always)]
fn value<const K: u8>(coeff: f64, param: f64, slope: f64, x: f64, ex: f64) -> f64 {
    const LA: f64 = SELU_LAMBDA * SELU_ALPHA;
    let kind = kind_at(K);
    match kind {
        ActivationKind::Elu if x <= 0.0 => coeff * (ex - 1.0),
        ActivationKind::Celu if x <= 0.0 && coeff == 1.0 => ex - 1.0,
        ActivationKind::Selu if x <= 0.0 => LA * (ex - 1.0),
        _ => activations::eval(kind, coeff, param, slope, x),
    }
}

#[inline(always)]
fn lane<const K: u8>(slopes: &[f64], ex: &[f64], i: usize) -> (f64, f64) {
    let kind = kind_at(K);
    let s = if kind == ActivationKind::RRelu { slopes[i] } else { 0.0 };
    let e = if matches!(kind, ActivationKind::Elu | ActivationKind::Celu | ActivationKind::Selu) && !ex.is_empty() { ex[i] } else { 0.0 };
    (s, e)
}

/// Activation inputs shared by every loop below.
#[derive(Clone, Copy)]
pub struct Unit<'a> {
    pub kind: ActivationKind,
    pub coeff: f64,
    pub param: f64,
    /// RReLU slopes, one per element; empty for other kinds.
    pub slopes: &'a [f64],
    /// Output of [`shared_exp`], or empty when [`uses_exp`] is false.
    pub ex: &'a [f64],
}

fn accumulate_k<const K: u8>(u: Unit, w: f64, xs: &[f64], y: &mut [f64]) {
    for (i, (o, &x)) in y.iter_mut().zip(xs).enumerate() {
        let (s, e) = lane::<K>(u.slopes, u.ex, i);
        *o += w * value::<K>(u.coeff, u.param, s, x, e);
    }
}

/// `y += w · act(x)`
pub fn accumulate(u: Unit, w: f64, xs: &[f64], y: &mut [f64]) {
    dispatch!(u.kind, accumulate_k(u, w, xs, y))
}

fn apply_k<const K: u8>(u: Unit, xs: &[f64], y: &mut [f64]) {
    for (i, (o, &x)) in y.iter_mut().zip(xs).enumerate() {
        let (s, e) = lane::<K>(u.slopes, u.ex, i);
        *o = value::<K>(u.coeff, u.param, s, x, e);
    }
}

/// `y = act(x)`
pub fn apply(u: Unit, xs: &[f64], y: &mut [f64]) {
    dispatch!(u.kind, apply_k(u, xs, y))
}

fn grad_k<const K: u8>(u: Unit, w: f64, xs: &[f64], g: &[f64], dx: Option<&mut [f64]>) -> (f64, f64) {
    let (mut gw, mut gp) = (0.0, 0.0);
    match dx {
        Some(dx) => {
            for (i, ((d, &x), &gv)) in dx.iter_mut().zip(xs).zip(g).enumerate() {
                let (s, e) = lane::<K>(u.slopes, u.ex, i);
                let (y, dy, dp) = full::<K>(u.coeff, u.param, s, x, e);
                *d += w * dy;
                gw += gv * y;
                gp += gv * dp;
            }
        }
        None => {
            for (i, (&x, &gv)) in xs.iter().zip(g).enumerate() {
                let (s, e) = lane::<K>(u.slopes, u.ex, i);
                let (y, _, dp) = full::<K>(u.coeff, u.param, s, x, e);
                gw += gv * y;
                gp += gv * dp;
            }
        }
    }
    (gw, gp)
}

/// Backward of `w · act(x)` against upstream `g`: adds `w · act'(x)` into `dx`
/// and returns `(Σ g·act(x), Σ g·∂act/∂param)`.
pub fn grad(u: Unit, w: f64, xs: &[f64], g: &[f64], dx: Option<&mut [f64]>) -> (f64, f64) {
    dispatch!(u.kind, grad_k(u, w, xs, g, dx))
}

fn input_grad_k<const K: u8>(u: Unit, xs: &[f64], g: &[f64], gx: Option<&mut [f64]>) -> f64 {
    let mut gp = 0.0;
    match gx {
        Some(gx) => {
            for (i, ((o, &x), &gv)) in gx.iter_mut().zip(xs).zip(g).enumerate() {
                let (s, e) = lane::<K>(u.slopes, u.ex, i);
                let (_, dy, dp) = full::<K>(u.coeff, u.param, s, x, e);
                *o += gv * dy;
                gp += gv * dp;
            }
        }
        None => {
            for (i, (&x, &gv)) in xs.iter().zip(g).enumerate() {
                let (s, e) = lane::<K>(u.slopes, u.ex, i);
                gp += gv * full::<K>(u.coeff, u.param, s, x, e).2;
            }
        }
    }
    gp
}

/// Backward of `act(x)`: adds `g · act'(x)` into `gx` and returns `Σ g·∂act/∂param`.
pub fn input_grad(u: Unit, xs: &[f64], g: &[f64], gx: Option<&mut [f64]>) -> f64 {
    dispatch!(u.kind, input_grad_k(u, xs, g, gx))
}
