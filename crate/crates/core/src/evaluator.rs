//! The discrete network built from a genotype and its retraining loop.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::activations::ActivationInstance;
use crate::data::{augment_batch, epoch_batches, AugmentPolicy, Dataset};
use crate::error::{bail, Error, Result};
use crate::genotype::{Genotype, Selection};
use crate::graph::{Graph, Mode, Var};
use crate::nn::{BatchNorm2d, Builder, Conv2d, Fwd, Linear, RegularOp};
use crate::optim::{cosine_lr, Optimizer};
use crate::params::{Group, ParamStore};
use crate::rng::{self, Rng, Stream};
use crate::supernet::{reduction_layers, CellInput, EdgeActivation};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub layers: usize,
    pub channels: usize,
    pub stem_multiplier: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Final drop-path probability, reached linearly over the epochs.
    pub drop_path: f64,
    pub augment: AugmentPolicy,
    pub auxiliary: bool,
    pub aux_weight: f64,
    pub label_smoothing: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            layers: 8,
            channels: 16,
            stem_multiplier: 3,
            epochs: 20,
            batch_size: 64,
            lr_max: 0.025,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 3e-4,
            grad_clip: 5.0,
            drop_path: 0.4,
            augment: AugmentPolicy::default(),
            auxiliary: true,
            aux_weight: 0.4,
            label_smoothing: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// 20 cells, 36 channels, 600 epochs.
    pub fn paper_cifar() -> Self {
        TrainConfig { layers: 20, channels: 36, epochs: 600, batch_size: 96, ..Self::default() }
    }

    /// 14 cells, 48 channels, 250 epochs with label smoothing 0.1.
    pub fn paper_imagenet() -> Self {
        TrainConfig {
            layers: 14,
            channels: 48,
            epochs: 250,
            batch_size: 128,
            lr_max: 0.1,
            label_smoothing: 0.1,
            weight_decay: 3e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.layers == 0 || self.channels == 0 {
            bail!(Config, "epochs, batch size, layers and channels must be positive");
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            bail!(Config, "drop-path probability {} outside [0,1)", self.drop_path);
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            bail!(Config, "label smoothing {} outside [0,1)", self.label_smoothing);
        }
        if self.aux_weight < 0.0 || self.grad_clip < 0.0 || self.lr_max <= 0.0 || self.lr_min < 0.0 {
            bail!(Config, "invalid optimizer settings");
        }
        Ok(())
    }
}

/// Per-sample survivor scales: 0 with probability `p`, else `1/(1-p)`.
pub fn drop_path_mask(n: usize, p: f64, rng: &mut Rng) -> Vec<f64> {
    let keep = 1.0 - p;
    (0..n).map(|_| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 }).collect()
}

fn drop_path_var(g: &mut Graph, x: Var, p: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
    if mode == Mode::Eval || p <= 0.0 {
        return Ok(x);
    }
    let n = g.value(x).shape()[0];
    let mask = drop_path_mask(n, p, rng);
    g.sample_scale(x, &mask)
}

/// Drop-path on a batched tensor; identity in eval mode or for `p = 0`.
pub fn drop_path(x: &Tensor, p: f64, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        bail!(Config, "drop-path probability {} outside [0,1)", p);
    }
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = drop_path_var(&mut g, v, p, mode, rng)?;
    Ok(g.value(y).clone())
}

#[derive(Debug, Clone, PartialEq)]
struct DiscreteEdge {
    selection: Selection,
    op: RegularOp,
    act: Option<EdgeActivation>,
}

#[derive(Debug, Clone, PartialEq)]
struct DiscreteCell {
    pre0: CellInput,
    pre1: CellInput,
    edges: Vec<DiscreteEdge>,
    nodes: usize,
}

impl DiscreteCell {
    fn forward(&self, f: &mut Fwd, s0: Var, s1: Var, drop: f64) -> Result<Var> {
        let mut states = Vec::with_capacity(self.nodes + 2);
        states.push(self.pre0.forward(f, s0)?);
        states.push(self.pre1.forward(f, s1)?);
        for to in 2..self.nodes + 2 {
            let mut flows = Vec::new();
            for e in self.edges.iter().filter(|e| e.selection.to == to) {
                let mut x = states[e.selection.from];
                if let Some(a) = &e.act {
                    x = f.activation(x, &a.inst, a.param);
                }
                let mut y = e.op.forward(f, x)?;
                if !matches!(e.op, RegularOp::Identity) {
                    y = drop_path_var(f.graph, y, drop, f.mode, f.rng)?;
                }
                flows.push(y);
            }
            states.push(f.graph.add_n(&flows)?);
        }
        f.graph.concat_channels(&states[2..])
    }
}

/// Auxiliary classifier: ReLU, 1×1 convolution, batch norm, ReLU, global pooling, linear.
#[derive(Debug, Clone, PartialEq)]
struct AuxHead {
    conv: Conv2d,
    bn: BatchNorm2d,
    linear: Linear,
}

impl AuxHead {
    fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let x = f.relu(x);
        let x = self.conv.forward(f, x)?;
        let x = self.bn.forward(f, x)?;
        let x = f.relu(x);
        let x = f.graph.global_avg_pool(x)?;
        self.linear.forward(f, x)
    }
}

/// Name prefix of the auxiliary head's parameters.
pub const AUX_PREFIX: &str = "aux.";

/// A stack of cells instantiating exactly the genotype's selections.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteNetwork {
    pub genotype: Genotype,
    pub in_channels: usize,
    pub num_classes: usize,
    pub weights: ParamStore,
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    cells: Vec<DiscreteCell>,
    aux: Option<(usize, AuxHead)>,
    classifier: Linear,
}

impl DiscreteNetwork {
    /// Weights come from the init stream of `cfg.seed`.
    pub fn new(genotype: &Genotype, in_channels: usize, num_classes: usize, cfg: &TrainConfig) -> Result<Self> {
        genotype.validate()?;
        cfg.validate()?;
        if genotype.cells.len() > 2 {
            bail!(Config, "a discrete network uses at most two cell types, got {}", genotype.cells.len());
        }
        if in_channels == 0 || num_classes < 2 {
            bail!(Config, "invalid input channels {} or classes {}", in_channels, num_classes);
        }
        let mut weights = ParamStore::new();
        let mut init = rng::stream(cfg.seed, Stream::Init);
        let mut b = Builder { store: &mut weights, rng: &mut init };
        let c = cfg.channels;
        let c_stem = cfg.stem_multiplier * c;
        let stem = Conv2d::new(&mut b, "stem.conv".into(), in_channels, c_stem, 3, 1, 1, 1, 1);
        let stem_bn = BatchNorm2d::new(&mut b, "stem.bn", c_stem, true);
        let (mut c_pp, mut c_p, mut c_cur) = (c_stem, c_stem, c);
        let reductions = reduction_layers(cfg.layers);
        let mut reduction_prev = false;
        let mut cells = Vec::with_capacity(cfg.layers);
        let mut aux = None;
        for i in 0..cfg.layers {
            let reduction = reductions.contains(&i);
            if reduction {
                c_cur *= 2;
            }
            let name = format!("cells.{i}");
            let pre0 = CellInput::new(&mut b, &format!("{name}.pre0"), c_pp, c_cur, reduction_prev, true)?;
            let pre1 = CellInput::new(&mut b, &format!("{name}.pre1"), c_p, c_cur, false, true)?;
            let t = usize::from(reduction && genotype.cells.len() > 1);
            let mut edges = Vec::new();
            for s in &genotype.cells[t] {
                let stride = if reduction && s.from < 2 { 2 } else { 1 };
                let ename = format!("{name}.edge{}_{}", s.from, s.to);
                let op = RegularOp::new(&mut b, &format!("{ename}.{}", s.op), s.op, c_cur, stride, true)?;
                let act = s
                    .activation
                    .map(|k| EdgeActivation { inst: ActivationInstance::new(k), param: b.activation_param(format!("{ename}.act.{k}"), k) });
                edges.push(DiscreteEdge { selection: *s, op, act });
            }
            cells.push(DiscreteCell { pre0, pre1, edges, nodes: genotype.nodes });
            reduction_prev = reduction;
            c_pp = c_p;
            c_p = genotype.nodes * c_cur;
            if cfg.auxiliary && i == 2 * cfg.layers / 3 {
                let conv = Conv2d::new(&mut b, format!("{AUX_PREFIX}conv"), c_p, 2 * c_p, 1, 1, 0, 1, 1);
                let bn = BatchNorm2d::new(&mut b, &format!("{AUX_PREFIX}bn"), 2 * c_p, true);
                let linear = Linear::new(&mut b, &format!("{AUX_PREFIX}classifier"), 2 * c_p, num_classes);
                aux = Some((i, AuxHead { conv, bn, linear }));
            }
        }
        let classifier = Linear::new(&mut b, "classifier", c_p, num_classes);
        Ok(DiscreteNetwork { genotype: genotype.clone(), in_channels, num_classes, weights, stem, stem_bn, cells, aux, classifier })
    }

    /// Logits, plus auxiliary logits in train mode when the head exists.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        images: &Tensor,
        mode: Mode,
        drop: f64,
        rng: &mut Rng,
        grad: bool,
    ) -> Result<(Var, Option<Var>)> {
        let [_, c, _, _] = images.dims4()?;
        if c != self.in_channels {
            bail!(Dimension, "images have {} channels, the stem expects {}", c, self.in_channels);
        }
        let mut f = Fwd { graph: g, weights: &mut self.weights, mode, rng, weights_grad: grad };
        let x = f.graph.constant(images.clone());
        let x = self.stem.forward(&mut f, x)?;
        let s = self.stem_bn.forward(&mut f, x)?;
        let (mut s0, mut s1) = (s, s);
        let mut aux_logits = None;
        for (i, cell) in self.cells.iter().enumerate() {
            let out = cell.forward(&mut f, s0, s1, drop)?;
            s0 = s1;
            s1 = out;
            if let Some((at, head)) = &self.aux {
                if *at == i && mode == Mode::Train {
                    aux_logits = Some(head.forward(&mut f, s1)?);
                }
            }
        }
        let pooled = f.graph.global_avg_pool(s1)?;
        Ok((self.classifier.forward(&mut f, pooled)?, aux_logits))
    }

    /// Trainable parameters outside the auxiliary head.
    pub fn param_count(&self) -> usize {
        self.weights.entries().iter().filter(|e| e.trainable && !e.name.starts_with(AUX_PREFIX)).map(|e| e.value.len()).sum()
    }

    /// Multiply-accumulates of one eval-mode forward on a single image.
    pub fn macs(&mut self, height: usize, width: usize) -> Result<u64> {
        let saved = self.weights.clone();
        let mut g = Graph::new();
        let mut r = rng::stream(0, Stream::RRelu);
        let x = Tensor::zeros(&[1, self.in_channels, height, width]);
        self.forward(&mut g, &x, Mode::Eval, 0.0, &mut r, false)?;
        self.weights = saved;
        Ok(g.macs())
    }
}

/// Mean loss and error rate (percent) of `net` on `data` in eval mode.
pub fn evaluate(net: &mut DiscreteNetwork, data: &Dataset, batch: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        bail!(Config, "cannot evaluate on an empty dataset");
    }
    let mut r = rng::stream(0, Stream::RRelu);
    let (mut loss, mut wrong) = (0.0, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk);
        let mut g = Graph::new();
        let (logits, _) = net.forward(&mut g, &x, Mode::Eval, 0.0, &mut r, false)?;
        let l = g.cross_entropy(logits, &y, 0.0)?;
        loss += g.value(l).item() * chunk.len() as f64;
        wrong += count_wrong(g.value(logits), &y);
    }
    Ok((loss / data.len() as f64, 100.0 * wrong as f64 / data.len() as f64))
}

fn count_wrong(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best != l
        })
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_err: f64,
    pub test_loss: f64,
    pub test_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub epochs: Vec<EpochMetrics>,
    pub final_test_error: f64,
    pub params: usize,
    /// Per image, eval mode.
    pub macs: u64,
}

/// Retraining state; one call to [`Trainer::run_epoch`] per epoch.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub net: DiscreteNetwork,
    pub optimizer: Optimizer,
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
    shuffle: Rng,
    augment: Rng,
    /// Drop-path masks and RReLU slopes.
    drop: Rng,
}

impl Trainer {
    pub fn new(genotype: &Genotype, data: &Dataset, cfg: TrainConfig) -> Result<Self> {
        let [c, _, _] = data.image_shape();
        let net = DiscreteNetwork::new(genotype, c, data.classes, &cfg)?;
        let optimizer = Optimizer::sgd(&net.weights, cfg.momentum, cfg.weight_decay);
        let s = cfg.seed;
        Ok(Trainer {
            net,
            optimizer,
            epoch: 0,
            history: Vec::new(),
            shuffle: rng::stream(s, Stream::Shuffle),
            augment: rng::stream(s, Stream::Augment),
            drop: rng::stream(s, Stream::DropPath),
            config: cfg,
        })
    }

    /// Drop-path probability for the current epoch.
    pub fn drop_prob(&self) -> f64 {
        self.config.drop_path * self.epoch as f64 / self.config.epochs as f64
    }

    /// Loss of one batch, `main + aux_weight · aux`, with gradients in the weight store.
    pub fn train_batch(&mut self, images: &Tensor, labels: &[usize]) -> Result<(f64, usize)> {
        let cfg = &self.config;
        let drop = self.drop_prob();
        let mut g = Graph::new();
        let (logits, aux) = self.net.forward(&mut g, images, Mode::Train, drop, &mut self.drop, true)?;
        let mut loss = g.cross_entropy(logits, labels, cfg.label_smoothing)?;
        if let Some(a) = aux {
            let al = g.cross_entropy(a, labels, cfg.label_smoothing)?;
            let scaled = g.scale(al, cfg.aux_weight);
            loss = g.add(loss, scaled)?;
        }
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numerical { context: format!("training loss is {value} in epoch {}", self.epoch + 1) });
        }
        let wrong = count_wrong(g.value(logits), labels);
        let grads = g.backward(loss)?;
        self.net.weights.zero_grad();
        grads.accumulate_into(Group::Weights, &mut self.net.weights);
        Ok((value, wrong))
    }

    pub fn run_epoch(&mut self, train: &Dataset, test: &Dataset) -> Result<EpochMetrics> {
        if self.epoch >= self.config.epochs {
            bail!(Usage, "training already ran its {} epochs", self.config.epochs);
        }
        let cfg = self.config.clone();
        let lr = cosine_lr(self.epoch, cfg.epochs, cfg.lr_max, cfg.lr_min)?;
        let batches = epoch_batches(train.len(), cfg.batch_size, &mut self.shuffle);
        let (mut loss, mut wrong) = (0.0, 0usize);
        for idx in &batches {
            let (x, y) = train.batch(idx);
            let x = augment_batch(&x, &cfg.augment, &mut self.augment)?;
            let (l, w) = self.train_batch(&x, &y)?;
            if cfg.grad_clip > 0.0 {
                self.net.weights.clip_grad_norm(cfg.grad_clip);
            }
            self.optimizer.step(&mut self.net.weights, lr)?;
            loss += l * idx.len() as f64;
            wrong += w;
        }
        let (test_loss, test_err) = evaluate(&mut self.net, test, cfg.batch_size)?;
        let m = EpochMetrics {
            epoch: self.epoch + 1,
            train_loss: loss / train.len() as f64,
            train_err: 100.0 * wrong as f64 / train.len() as f64,
            test_loss,
            test_err,
        };
        self.history.push(m);
        self.epoch += 1;
        Ok(m)
    }

    pub fn metrics(&mut self, height: usize, width: usize) -> Result<Metrics> {
        Ok(Metrics {
            final_test_error: self.history.last().map_or(100.0, |m| m.test_err),
            epochs: self.history.clone(),
            params: self.net.param_count(),
            macs: self.net.macs(height, width)?,
        })
    }
}

/// Trains `genotype` from scratch and reports per-epoch metrics.
pub fn retrain(
    genotype: &Genotype,
    train: &Dataset,
    test: &Dataset,
    cfg: TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<(Trainer, Metrics)> {
    if train.is_empty() || test.is_empty() {
        bail!(Config, "retraining needs non-empty training and test sets");
    }
    let mut t = Trainer::new(genotype, train, cfg)?;
    while t.epoch < t.config.epochs {
        let m = t.run_epoch(train, test)?;
        on_epoch(&m)?;
    }
    let [_, h, w] = train.image_shape();
    let metrics = t.metrics(h, w)?;
    Ok((t, metrics))
}
