//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in creation order, so the node list is
//! already a topological order and `backward` is a single reverse sweep.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use libm::{exp, log, sqrt};

use crate::activations::{self, ActivationInstance, ActivationKind};
use crate::error::{bail, Error, Result};
use crate::kernels::conv::{self, ConvGeometry};
use crate::kernels::pool::{self, PoolGeometry, PoolKind};
use crate::kernels::{act, axpy, dot};
use crate::params::{Group, ParamKey, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch-norm constants.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in the running-average update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy)]
struct MixUnit {
    kind: ActivationKind,
    coeff: f64,
    param: Option<Var>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Zeros,
    Param,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddN(Vec<Var>),
    Sum(Var),
    WeightedSum { terms: Vec<(usize, Var)>, weights: Var, offset: usize },
    SoftmaxRows(Var),
    Conv { x: Var, w: Var, geo: ConvGeometry },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, geo: PoolGeometry },
    BatchNorm { x: Var, affine: Option<(Var, Var)>, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Activation { x: Var, unit: MixUnit, slopes: Vec<f64> },
    MixedActivation { x: Var, weights: Var, offset: usize, units: Vec<MixUnit>, slopes: Vec<f64> },
    Concat(Vec<Var>),
    Crop { x: Var, top: usize, left: usize },
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    CrossEntropy { logits: Var, labels: Vec<usize>, smoothing: f64, probs: Vec<f64> },
    SampleScale { x: Var, scale: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Zeros => "zeros",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddN(..) => "add_n",
            Op::Sum(..) => "sum",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::SoftmaxRows(..) => "softmax",
            Op::Conv { .. } => "conv2d",
            Op::MaxPool { .. } => "max_pool",
            Op::AvgPool { .. } => "avg_pool",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Activation { .. } => "activation",
            Op::MixedActivation { .. } => "mixed_activation",
            Op::Concat(..) => "concat",
            Op::Crop { .. } => "crop",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::Linear { .. } => "linear",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SampleScale { .. } => "sample_scale",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamKey, Var>,
    macs: u64,
    nonfinite: Option<(usize, &'static str)>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<ParamKey, Var>,
}

impl Gradients {
    /// Gradient with respect to a leaf, `None` when it does not reach the loss
    /// or was created without `requires_grad`.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, key: ParamKey) -> Option<&[f64]> {
        self.params.get(&key).and_then(|&v| self.wrt(v))
    }

    /// Adds every gradient of `group` into the matching store accumulators.
    pub fn accumulate_into(&self, group: Group, store: &mut ParamStore) {
        for (key, &v) in self
            .params
            .range(ParamKey { group, id: crate::params::ParamId(0) }..=ParamKey { group, id: crate::params::ParamId(usize::MAX) })
        {
            if let Some(g) = self.wrt(v) {
                axpy(&mut store.get_mut(key.id).grad, 1.0, g);
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations performed by convolutions and linear layers so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Fails if any recorded value was non-finite (tracked in debug builds).
    pub fn check_finite(&self) -> Result<()> {
        match self.nonfinite {
            None => Ok(()),
            Some((i, name)) => Err(Error::Numerical { context: alloc::format!("non-finite value produced by {name} (node {i})") }),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        if cfg!(debug_assertions) && self.nonfinite.is_none() && !value.all_finite() {
            self.nonfinite = Some((self.nodes.len(), op.name()));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.push(Tensor::zeros(shape), Op::Zeros, false)
    }

    pub fn is_zeros(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Zeros)
    }

    /// Leaf for a stored parameter. Repeated calls with the same key in one
    /// graph return the same node, so gradients accumulate over all uses.
    pub fn param(&mut self, key: ParamKey, store: &ParamStore, requires_grad: bool) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(store.value(key.id).clone(), Op::Param, requires_grad);
        self.params.insert(key, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            bail!(Dimension, "shape mismatch {:?} vs {:?}", self.value(a).shape(), self.value(b).shape());
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let mut out = self.value(a).clone();
        axpy(out.data_mut(), 1.0, self.value(b).data());
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            bail!(Usage, "add_n needs at least one input");
        };
        let mut out = self.value(first).clone();
        for &x in &xs[1..] {
            self.same_shape(first, x)?;
            axpy(out.data_mut(), 1.0, self.value(x).data());
        }
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(out, Op::AddN(xs.to_vec()), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// `Σ_t weights[offset + index_t] · x_t`; terms pointing at zero tensors are
    /// skipped in the arithmetic.
    pub fn weighted_sum(&mut self, terms: &[(usize, Var)], weights: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let mut out = Tensor::zeros(shape);
        let wv = self.value(weights).data();
        let mut kept = Vec::with_capacity(terms.len());
        for &(idx, x) in terms {
            let Some(&w) = wv.get(offset + idx) else {
                bail!(Config, "weight index {} out of range {}", offset + idx, wv.len());
            };
            if self.value(x).shape() != shape {
                bail!(Dimension, "branch shape {:?} differs from {:?}", self.value(x).shape(), shape);
            }
            if self.is_zeros(x) {
                continue;
            }
            axpy(out.data_mut(), w, self.value(x).data());
            kept.push((idx, x));
        }
        let ng = self.ng(weights) || kept.iter().any(|&(_, x)| self.ng(x));
        Ok(self.push(out, Op::WeightedSum { terms: kept, weights, offset }, ng))
    }

    /// Softmax over the last axis (a 1-d tensor is one row), with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let cols = *t.shape().last().unwrap_or(&0);
        if t.is_empty() || cols == 0 {
            bail!(Config, "softmax of an empty vector");
        }
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::SoftmaxRows(a), ng))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize, dilation: usize, groups: usize) -> Result<Var> {
        let geo = ConvGeometry::new(self.value(x).dims4()?, self.value(w).shape(), stride, padding, dilation, groups)?;
        let y = conv::conv2d_forward(&geo, self.value(x).data(), self.value(w).data());
        self.macs += geo.macs();
        let ng = self.ng(x) || self.ng(w);
        let value = Tensor::new(geo.output_shape().to_vec(), y)?;
        Ok(self.push(value, Op::Conv { x, w, geo }, ng))
    }

    pub fn pool(&mut self, x: Var, kind: PoolKind, window: usize, stride: usize, padding: usize) -> Result<Var> {
        let geo = PoolGeometry::new(self.value(x).dims4()?, window, stride, padding)?;
        let ng = self.ng(x);
        let shape = geo.output_shape().to_vec();
        match kind {
            PoolKind::Max => {
                let (y, argmax) = pool::max_pool_forward(&geo, self.value(x).data());
                Ok(self.push(Tensor::new(shape, y)?, Op::MaxPool { x, argmax }, ng))
            }
            PoolKind::Avg => {
                let y = pool::avg_pool_forward(&geo, self.value(x).data());
                Ok(self.push(Tensor::new(shape, y)?, Op::AvgPool { x, geo }, ng))
            }
        }
    }

    /// Per-channel batch normalization of an `[N, C, H, W]` tensor.
    ///
    /// Train mode normalizes with batch statistics and folds them into the
    /// running buffers; eval mode normalizes with the running buffers.
    pub fn batch_norm(
        &mut self,
        x: Var,
        affine: Option<(Var, Var)>,
        running_mean: &mut [f64],
        running_var: &mut [f64],
        mode: Mode,
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if running_mean.len() != c || running_var.len() != c {
            bail!(Dimension, "batch norm over {} channels with {} running stats", c, running_mean.len());
        }
        let hw = h * w;
        let m = n * hw;
        if mode == Mode::Train && m <= 1 {
            return Err(Error::DegenerateBatch);
        }
        let xs = self.value(x).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += xs[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let mean = s / m as f64;
                    let mut v = 0.0;
                    for b in 0..n {
                        for &e in &xs[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                            v += (e - mean) * (e - mean);
                        }
                    }
                    let var = v / m as f64;
                    running_mean[ch] = BN_MOMENTUM * running_mean[ch] + (1.0 - BN_MOMENTUM) * mean;
                    running_var[ch] = BN_MOMENTUM * running_var[ch] + (1.0 - BN_MOMENTUM) * var * m as f64 / (m - 1) as f64;
                    (mean, var)
                }
                Mode::Eval => (running_mean[ch], running_var[ch]),
            };
            let inv = 1.0 / sqrt(var + BN_EPS);
            inv_std[ch] = inv;
            for b in 0..n {
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for (o, &e) in xhat[r.clone()].iter_mut().zip(&xs[r]) {
                    *o = (e - mean) * inv;
                }
            }
        }
        let mut y = xhat.clone();
        if let Some((gamma, beta)) = affine {
            let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
            if gv.len() != c || bv.len() != c {
                bail!(Dimension, "affine parameters must have {} entries", c);
            }
            for b in 0..n {
                for ch in 0..c {
                    for o in &mut y[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                        *o = *o * gv[ch] + bv[ch];
                    }
                }
            }
        }
        let ng = self.ng(x) || affine.is_some_and(|(g, b)| self.ng(g) || self.ng(b));
        let shape = self.value(x).shape().to_vec();
        let train = mode == Mode::Train;
        Ok(self.push(Tensor::new(shape, y)?, Op::BatchNorm { x, affine, xhat, inv_std, train }, ng))
    }

    fn scalar_of(&self, v: Option<Var>, kind: ActivationKind) -> f64 {
        match v {
            Some(v) => self.value(v).item(),
            None => kind.initial_param().unwrap_or(0.0),
        }
    }

    /// Elementwise activation. `param` is the scalar coefficient for PReLU/Swish.
    pub fn activation(&mut self, x: Var, inst: &ActivationInstance, param: Option<Var>, mode: Mode, rng: &mut Rng) -> Var {
        let unit = MixUnit { kind: inst.kind, coeff: inst.coeff, param };
        let p = self.scalar_of(param, inst.kind);
        let n = self.value(x).len();
        let slopes = if inst.kind == ActivationKind::RRelu { activations::rrelu_slopes(n, mode, rng) } else { Vec::new() };
        let xs = self.value(x).data();
        let ex = if act::uses_exp(inst.kind, inst.coeff) { act::shared_exp(xs) } else { Vec::new() };
        let u = act::Unit { kind: inst.kind, coeff: inst.coeff, param: p, slopes: &slopes, ex: &ex };
        let mut y = vec![0.0; n];
        act::apply(u, xs, &mut y);
        let out = Tensor::new(self.value(x).shape().to_vec(), y).expect("same length as input");
        let ng = self.ng(x) || param.is_some_and(|p| self.ng(p));
        self.push(out, Op::Activation { x, unit, slopes }, ng)
    }

    /// `Σ_k weights[offset + k] · act_k(x)` evaluated in a single pass.
    pub fn mixed_activation(
        &mut self,
        x: Var,
        weights: Var,
        offset: usize,
        units: &[(ActivationInstance, Option<Var>)],
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Var> {
        let wv = self.value(weights).data();
        if offset + units.len() > wv.len() {
            bail!(Config, "mixed activation with {} units but {} weights", units.len(), wv.len() - offset);
        }
        let units: Vec<MixUnit> = units.iter().map(|(i, p)| MixUnit { kind: i.kind, coeff: i.coeff, param: *p }).collect();
        let params: Vec<f64> = units.iter().map(|u| self.scalar_of(u.param, u.kind)).collect();
        let n = self.value(x).len();
        let slopes =
            if units.iter().any(|u| u.kind == ActivationKind::RRelu) { activations::rrelu_slopes(n, mode, rng) } else { Vec::new() };
        let w = &wv[offset..offset + units.len()];
        let xs = self.value(x).data();
        let ex = if units.iter().any(|u| act::uses_exp(u.kind, u.coeff)) { act::shared_exp(xs) } else { Vec::new() };
        let mut y = vec![0.0; n];
        for (k, u) in units.iter().enumerate() {
            let unit = act::Unit { kind: u.kind, coeff: u.coeff, param: params[k], slopes: &slopes, ex: &ex };
            act::accumulate(unit, w[k], xs, &mut y);
        }
        let ng = self.ng(x) || self.ng(weights) || units.iter().any(|u| u.param.is_some_and(|p| self.ng(p)));
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::new(shape, y)?, Op::MixedActivation { x, weights, offset, units, slopes }, ng))
    }

    /// Concatenates `[N, C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            bail!(Usage, "concat needs at least one input");
        };
        let [n, _, h, w] = self.value(first).dims4()?;
        let mut total_c = 0;
        for &x in xs {
            let [n2, c2, h2, w2] = self.value(x).dims4()?;
            if (n2, h2, w2) != (n, h, w) {
                bail!(Dimension, "concat of {:?} with {:?}", self.value(first).shape(), self.value(x).shape());
            }
            total_c += c2;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for &x in xs {
                let c = self.value(x).shape()[1];
                out.extend_from_slice(&self.value(x).data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(Tensor::new(vec![n, total_c, h, w], out)?, Op::Concat(xs.to_vec()), ng))
    }

    /// Drops the first `top` rows and `left` columns of every plane.
    pub fn crop(&mut self, x: Var, top: usize, left: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if top >= h || left >= w {
            bail!(Dimension, "crop ({top},{left}) removes a {h}x{w} plane entirely");
        }
        let (oh, ow) = (h - top, w - left);
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            for r in top..h {
                out.extend_from_slice(&xs[p * h * w + r * w + left..p * h * w + (r + 1) * w]);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![n, c, oh, ow], out)?, Op::Crop { x, top, left }, ng))
    }

    /// `[N, C, H, W] -> [N, C]`
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let hw = (h * w) as f64;
        let out: Vec<f64> = self.value(x).data().chunks(h * w).map(|p| p.iter().sum::<f64>() / hw).collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::GlobalAvgPool(x), ng))
    }

    /// `x [N, in] · wᵀ [in, out] + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x), self.value(w));
        let (&[n, fin], &[fout, fin2]) = (xs.shape(), ws.shape()) else {
            bail!(Dimension, "linear expects [N,in] and [out,in], got {:?} and {:?}", xs.shape(), ws.shape());
        };
        if fin != fin2 {
            bail!(Dimension, "linear input width {} vs weight width {}", fin, fin2);
        }
        let mut out = vec![0.0; n * fout];
        for i in 0..n {
            let row = &xs.data()[i * fin..(i + 1) * fin];
            for o in 0..fout {
                out[i * fout + o] = dot(row, &ws.data()[o * fin..(o + 1) * fin]);
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != fout {
                bail!(Dimension, "bias of length {} for {} outputs", bv.len(), fout);
            }
            for r in out.chunks_mut(fout) {
                axpy(r, 1.0, bv);
            }
        }
        self.macs += (n * fin * fout) as u64;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::new(vec![n, fout], out)?, Op::Linear { x, w, b }, ng))
    }

    /// Mean cross entropy of `[N, K]` logits against class indices, with
    /// optional label smoothing `ε` (target `(1-ε)·onehot + ε/K`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
        let t = self.value(logits);
        let &[n, k] = t.shape() else {
            bail!(Dimension, "cross entropy expects [N,K] logits, got {:?}", t.shape());
        };
        if labels.len() != n {
            bail!(Dimension, "{} labels for {} rows", labels.len(), n);
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            bail!(Input, "label {} out of range for {} classes", bad, k);
        }
        if !(0.0..1.0).contains(&smoothing) {
            bail!(Config, "label smoothing {} outside [0,1)", smoothing);
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(k).zip(labels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + log(row.iter().map(|&z| exp(z - m)).sum::<f64>());
            let mut l = 0.0;
            for (j, z) in row.iter_mut().enumerate() {
                let logp = *z - lse;
                let q = smoothing / k as f64 + if j == label { 1.0 - smoothing } else { 0.0 };
                l -= q * logp;
                *z = exp(logp);
            }
            loss += l;
        }
        loss /= n as f64;
        let ng = self.ng(logits);
        let labels = labels.to_vec();
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels, smoothing, probs }, ng))
    }

    /// Multiplies sample `n` of a batched tensor by `scale[n]`.
    pub fn sample_scale(&mut self, x: Var, scale: &[f64]) -> Result<Var> {
        let t = self.value(x);
        if t.shape()[0] != scale.len() {
            bail!(Dimension, "{} scales for batch of {}", scale.len(), t.shape()[0]);
        }
        let per = t.len() / scale.len();
        let mut out = t.clone();
        for (chunk, &s) in out.data_mut().chunks_mut(per).zip(scale) {
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::SampleScale { x, scale: scale.to_vec() }, ng))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            bail!(Usage, "backward needs a scalar loss, got shape {:?}", self.value(loss).shape());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn take(&self, grads: &mut [Option<Vec<f64>>], v: Var) -> Option<Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].take().unwrap_or_else(|| vec![0.0; node.value.len()]))
    }

    /// Returns a buffer obtained from `take`, merging with anything written to
    /// the same slot in between (an op may use one variable twice).
    fn put(grads: &mut [Option<Vec<f64>>], v: Var, buf: Option<Vec<f64>>) {
        if let Some(b) = buf {
            match &mut grads[v.0] {
                Some(existing) => axpy(existing, 1.0, &b),
                slot @ None => *slot = Some(b),
            }
        }
    }

    /// Adds `scale · src` into the gradient of `v`, filling an empty slot directly.
    fn add_scaled(&self, grads: &mut [Option<Vec<f64>>], v: Var, scale: f64, src: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => axpy(existing, scale, src),
            slot @ None => *slot = Some(src.iter().map(|&x| scale * x).collect()),
        }
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Zeros | Op::Param => {}
            Op::Add(a, b) => {
                self.add_scaled(grads, *a, 1.0, g);
                self.add_scaled(grads, *b, 1.0, g);
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    let mut gv = self.take(grads, v);
                    if let Some(gv) = gv.as_deref_mut() {
                        for ((o, gg), ov) in gv.iter_mut().zip(g).zip(self.value(other).data()) {
                            *o += gg * ov;
                        }
                    }
                    Self::put(grads, v, gv);
                }
            }
            Op::Scale(a, c) => self.add_scaled(grads, *a, *c, g),
            Op::AddN(xs) => {
                for &x in xs {
                    self.add_scaled(grads, x, 1.0, g);
                }
            }
            Op::Sum(a) => {
                let mut ga = self.take(grads, *a);
                if let Some(ga) = ga.as_deref_mut() {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
                Self::put(grads, *a, ga);
            }
            Op::WeightedSum { terms, weights, offset } => {
                let wv = self.value(*weights).data();
                for &(idx, x) in terms {
                    self.add_scaled(grads, x, wv[offset + idx], g);
                }
                let mut gw = self.take(grads, *weights);
                if let Some(gw) = gw.as_deref_mut() {
                    for &(idx, x) in terms {
                        gw[offset + idx] += dot(g, self.value(x).data());
                    }
                }
                Self::put(grads, *weights, gw);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = self.take(grads, *a);
                if let Some(ga) = ga.as_deref_mut() {
                    let y = node.value.data();
                    let cols = *node.value.shape().last().unwrap();
                    for ((gr, yr), orow) in g.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let s = dot(gr, yr);
                        for ((o, gv), yv) in orow.iter_mut().zip(gr).zip(yr) {
                            *o += yv * (gv - s);
                        }
                    }
                }
                Self::put(grads, *a, ga);
            }
            Op::Conv { x, w, geo } => {
                let mut gx = self.take(grads, *x);
                let mut gw = self.take(grads, *w);
                conv::conv2d_backward(geo, self.value(*x).data(), self.value(*w).data(), g, gx.as_deref_mut(), gw.as_deref_mut());
                Self::put(grads, *x, gx);
                Self::put(grads, *w, gw);
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = self.take(grads, *x);
                if let Some(gx) = gx.as_deref_mut() {
                    pool::max_pool_backward(argmax, g, gx);
                }
                Self::put(grads, *x, gx);
            }
            Op::AvgPool { x, geo } => {
                let mut gx = self.take(grads, *x);
                if let Some(gx) = gx.as_deref_mut() {
                    pool::avg_pool_backward(geo, g, gx);
                }
                Self::put(grads, *x, gx);
            }
            Op::BatchNorm { x, affine, xhat, inv_std, train } => {
                let [n, c, h, w] = node.value.dims4().expect("4-d");
                let hw = h * w;
                let m = (n * hw) as f64;
                let plane = |b: usize, ch: usize| (b * c + ch) * hw..(b * c + ch + 1) * hw;
                if let Some((gm, bt)) = affine {
                    let mut gg = self.take(grads, *gm);
                    if let Some(gg) = gg.as_deref_mut() {
                        for b in 0..n {
                            for (ch, o) in gg.iter_mut().enumerate() {
                                *o += dot(&g[plane(b, ch)], &xhat[plane(b, ch)]);
                            }
                        }
                    }
                    Self::put(grads, *gm, gg);
                    let mut gb = self.take(grads, *bt);
                    if let Some(gb) = gb.as_deref_mut() {
                        for b in 0..n {
                            for (ch, o) in gb.iter_mut().enumerate() {
                                *o += g[plane(b, ch)].iter().sum::<f64>();
                            }
                        }
                    }
                    Self::put(grads, *bt, gb);
                }
                let gamma = affine.map(|(gm, _)| self.value(gm).data());
                let mut gx = self.take(grads, *x);
                if let Some(gx) = gx.as_deref_mut() {
                    for ch in 0..c {
                        let scale = gamma.map_or(1.0, |gv| gv[ch]) * inv_std[ch];
                        if *train {
                            let mut sum_g = 0.0;
                            let mut sum_gx = 0.0;
                            for b in 0..n {
                                sum_g += g[plane(b, ch)].iter().sum::<f64>();
                                sum_gx += dot(&g[plane(b, ch)], &xhat[plane(b, ch)]);
                            }
                            let (mg, mgx) = (sum_g / m, sum_gx / m);
                            for b in 0..n {
                                let r = plane(b, ch);
                                for ((o, gv), xv) in gx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                                    *o += scale * (gv - mg - xv * mgx);
                                }
                            }
                        } else {
                            for b in 0..n {
                                axpy(&mut gx[plane(b, ch)], scale, &g[plane(b, ch)]);
                            }
                        }
                    }
                }
                Self::put(grads, *x, gx);
            }
            Op::Activation { x, unit, slopes } => {
                let p = self.scalar_of(unit.param, unit.kind);
                let xs = self.value(*x).data();
                let ex = if act::uses_exp(unit.kind, unit.coeff) { act::shared_exp(xs) } else { Vec::new() };
                let u = act::Unit { kind: unit.kind, coeff: unit.coeff, param: p, slopes, ex: &ex };
                let mut gx = self.take(grads, *x);
                let gp = act::input_grad(u, xs, g, gx.as_deref_mut());
                Self::put(grads, *x, gx);
                if let Some(pv) = unit.param {
                    let mut gpv = self.take(grads, pv);
                    if let Some(gpv) = gpv.as_deref_mut() {
                        gpv[0] += gp;
                    }
                    Self::put(grads, pv, gpv);
                }
            }
            Op::MixedActivation { x, weights, offset, units, slopes } => {
                let wv = &self.value(*weights).data()[*offset..*offset + units.len()];
                let params: Vec<f64> = units.iter().map(|u| self.scalar_of(u.param, u.kind)).collect();
                let xs = self.value(*x).data();
                let ex = if units.iter().any(|u| act::uses_exp(u.kind, u.coeff)) { act::shared_exp(xs) } else { Vec::new() };
                let mut gw = vec![0.0; units.len()];
                let mut gp = vec![0.0; units.len()];
                let mut gx = self.take(grads, *x);
                let mut dxt = gx.as_ref().map(|_| vec![0.0; xs.len()]);
                for (k, u) in units.iter().enumerate() {
                    let unit = act::Unit { kind: u.kind, coeff: u.coeff, param: params[k], slopes, ex: &ex };
                    (gw[k], gp[k]) = act::grad(unit, wv[k], xs, g, dxt.as_deref_mut());
                }
                if let (Some(gx), Some(dxt)) = (gx.as_deref_mut(), dxt) {
                    for ((o, &gv), d) in gx.iter_mut().zip(g).zip(dxt) {
                        *o += gv * d;
                    }
                }
                Self::put(grads, *x, gx);
                let mut gwv = self.take(grads, *weights);
                if let Some(gwv) = gwv.as_deref_mut() {
                    for (k, v) in gw.iter().enumerate() {
                        gwv[offset + k] += v;
                    }
                }
                Self::put(grads, *weights, gwv);
                for (k, u) in units.iter().enumerate() {
                    if let Some(pv) = u.param {
                        let mut gpv = self.take(grads, pv);
                        if let Some(gpv) = gpv.as_deref_mut() {
                            gpv[0] += wv[k] * gp[k];
                        }
                        Self::put(grads, pv, gpv);
                    }
                }
            }
            Op::Concat(xs) => {
                let [n, total_c, h, w] = node.value.dims4().expect("4-d");
                let hw = h * w;
                let mut c0 = 0;
                for &x in xs {
                    let c = self.value(x).shape()[1];
                    let mut gx = self.take(grads, x);
                    if let Some(gx) = gx.as_deref_mut() {
                        for b in 0..n {
                            let src = &g[(b * total_c + c0) * hw..(b * total_c + c0 + c) * hw];
                            axpy(&mut gx[b * c * hw..(b + 1) * c * hw], 1.0, src);
                        }
                    }
                    Self::put(grads, x, gx);
                    c0 += c;
                }
            }
            Op::Crop { x, top, left } => {
                let mut gx = self.take(grads, *x);
                if let Some(gx) = gx.as_deref_mut() {
                    let [n, c, h, w] = self.value(*x).dims4().expect("4-d");
                    let ow = w - left;
                    let mut k = 0;
                    for p in 0..n * c {
                        for r in *top..h {
                            let dst = p * h * w + r * w + left;
                            axpy(&mut gx[dst..dst + ow], 1.0, &g[k..k + ow]);
                            k += ow;
                        }
                    }
                }
                Self::put(grads, *x, gx);
            }
            Op::GlobalAvgPool(x) => {
                let mut gx = self.take(grads, *x);
                if let Some(gx) = gx.as_deref_mut() {
                    let [_, _, h, w] = self.value(*x).dims4().expect("4-d");
                    let hw = h * w;
                    for (plane, &gv) in gx.chunks_mut(hw).zip(g) {
                        plane.iter_mut().for_each(|o| *o += gv / hw as f64);
                    }
                }
                Self::put(grads, *x, gx);
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.value(*x), self.value(*w));
                let (n, fin) = (xs.shape()[0], xs.shape()[1]);
                let fout = ws.shape()[0];
                let mut gx = self.take(grads, *x);
                if let Some(gx) = gx.as_deref_mut() {
                    for i in 0..n {
                        for o in 0..fout {
                            axpy(&mut gx[i * fin..(i + 1) * fin], g[i * fout + o], &ws.data()[o * fin..(o + 1) * fin]);
                        }
                    }
                }
                Self::put(grads, *x, gx);
                let mut gw = self.take(grads, *w);
                if let Some(gw) = gw.as_deref_mut() {
                    for i in 0..n {
                        for o in 0..fout {
                            axpy(&mut gw[o * fin..(o + 1) * fin], g[i * fout + o], &xs.data()[i * fin..(i + 1) * fin]);
                        }
                    }
                }
                Self::put(grads, *w, gw);
                if let Some(bv) = b {
                    let mut gb = self.take(grads, *bv);
                    if let Some(gb) = gb.as_deref_mut() {
                        for row in g.chunks(fout) {
                            axpy(gb, 1.0, row);
                        }
                    }
                    Self::put(grads, *bv, gb);
                }
            }
            Op::CrossEntropy { logits, labels, smoothing, probs } => {
                let mut gl = self.take(grads, *logits);
                if let Some(gl) = gl.as_deref_mut() {
                    let k = self.value(*logits).shape()[1];
                    let n = labels.len() as f64;
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let q = smoothing / k as f64 + if j == label { 1.0 - smoothing } else { 0.0 };
                            gl[r * k + j] += g[0] * (probs[r * k + j] - q) / n;
                        }
                    }
                }
                Self::put(grads, *logits, gl);
            }
            Op::SampleScale { x, scale } => {
                let mut gx = self.take(grads, *x);
                if let Some(gx) = gx.as_deref_mut() {
                    let per = gx.len() / scale.len();
                    for ((o, gc), &s) in gx.chunks_mut(per).zip(g.chunks(per)).zip(scale) {
                        axpy(o, s, gc);
                    }
                }
                Self::put(grads, *x, gx);
            }
        }
    }
}

/// Softmax of a slice with max subtraction.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = exp(*v - m);
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

/// Softmax of a vector; errors on empty input.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        bail!(Config, "softmax of an empty vector");
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}
