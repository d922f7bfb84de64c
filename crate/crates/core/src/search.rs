//! Tri-level search: alternating first-order updates of ω, α and β.

use alloc::format;
use alloc::vec::Vec;

use libm::log;

use crate::activations::ActivationInstance;
use crate::data::{epoch_batches, Dataset};
use crate::error::{bail, Error, Result};
use crate::genotype::{derive_genotype, Genotype};
use crate::graph::{softmax, Graph, Mode};
use crate::optim::{cosine_lr, AdamConfig, Optimizer, OptimizerKind, SgdConfig};
use crate::params::{Group, ParamStore};
use crate::rng::{self, Rng, Stream};
use crate::space::{super_operator_count, SpaceConfig};
use crate::supernet::{ArchParams, EdgeMode, SuperNetConfig, SuperNetwork};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum SearchMode {
    Factorized,
    /// One hard-wired activation, no β.
    FixedActivation(ActivationInstance),
    /// Factorized, with β pinned to the supplied banks.
    FrozenBeta(ParamStore),
    /// One flat softmax over all super-operators.
    NonFactorized,
}

impl SearchMode {
    pub fn edge_mode(&self) -> EdgeMode {
        match self {
            SearchMode::Factorized | SearchMode::FrozenBeta(_) => EdgeMode::Factorized,
            SearchMode::FixedActivation(inst) => EdgeMode::Fixed(*inst),
            SearchMode::NonFactorized => EdgeMode::Flat,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SearchMode::Factorized => "factorized",
            SearchMode::FixedActivation(_) => "fixed-activation",
            SearchMode::FrozenBeta(_) => "frozen-beta",
            SearchMode::NonFactorized => "non-factorized",
        }
    }

    fn updates_beta(&self) -> bool {
        matches!(self, SearchMode::Factorized)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Fractions of the search data used for ω and for α/β.
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weights_optimizer: SgdConfig,
    pub arch_lr: f64,
    pub arch_optimizer: OptimizerKind,
    /// Global-norm clip for ω gradients; 0 disables.
    pub grad_clip: f64,
    /// Leading epochs that update ω only.
    pub warmup_epochs: usize,
    /// Draw the β update from the next validation batch instead of reusing α's.
    pub fresh_beta_batch: bool,
    pub mode: SearchMode,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 25,
            batch_size: 64,
            train_fraction: 0.5,
            val_fraction: 0.5,
            lr_max: 0.05,
            lr_min: 0.001,
            weights_optimizer: SgdConfig { momentum: 0.9, weight_decay: 3e-4 },
            arch_lr: 6e-4,
            arch_optimizer: OptimizerKind::Adam(AdamConfig { beta1: 0.5, beta2: 0.999, eps: 1e-8, weight_decay: 1e-3 }),
            grad_clip: 5.0,
            warmup_epochs: 0,
            fresh_beta_batch: false,
            mode: SearchMode::Factorized,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            bail!(Config, "search needs at least one epoch");
        }
        if self.batch_size == 0 {
            bail!(Config, "batch size must be positive");
        }
        let (a, b) = (self.train_fraction, self.val_fraction);
        if !(a > 0.0 && b > 0.0 && a + b <= 1.0 + 1e-12) {
            bail!(Config, "split fractions must be positive and sum to at most 1, got {a} and {b}");
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.arch_lr > 0.0) {
            bail!(Config, "invalid learning rates");
        }
        if self.grad_clip < 0.0 {
            bail!(Config, "gradient clip must be non-negative");
        }
        Ok(())
    }
}

/// Which split a loss is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Anything the search loop can optimize.
pub trait SearchProblem {
    type Batch;

    fn store(&self, group: Group) -> &ParamStore;
    fn store_mut(&mut self, group: Group) -> &mut ParamStore;

    /// Evaluates the loss on `batch` and writes the gradient with respect to
    /// `group` into that store (previous gradients are overwritten).
    fn loss_and_grad(&mut self, split: Split, batch: &Self::Batch, group: Group) -> Result<f64>;
}

/// Optimizer states for the three parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchState {
    pub step: u64,
    pub weights: Optimizer,
    pub alpha: Optimizer,
    pub beta: Optimizer,
}

impl SearchState {
    pub fn new<P: SearchProblem>(cfg: &SearchConfig, problem: &P) -> Self {
        SearchState {
            step: 0,
            weights: Optimizer::new(OptimizerKind::Sgd(cfg.weights_optimizer), problem.store(Group::Weights)),
            alpha: Optimizer::new(cfg.arch_optimizer, problem.store(Group::Alpha)),
            beta: Optimizer::new(cfg.arch_optimizer, problem.store(Group::Beta)),
        }
    }
}

/// Losses recorded by one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub train: f64,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
}

fn checked(loss: f64, what: &str, step: u64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numerical { context: format!("{what} loss is {loss} at step {step}") })
    }
}

fn at_step<T>(r: Result<T>, step: u64) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numerical { context } => Error::Numerical { context: format!("step {step}: {context}") },
        other => other,
    })
}

/// One iteration: ω on the training batch, then α and then β on the
/// validation batches, each seeing the parameters already updated.
#[allow(clippy::too_many_arguments)]
pub fn search_step<P: SearchProblem>(
    problem: &mut P,
    state: &mut SearchState,
    cfg: &SearchConfig,
    lr: f64,
    train: &P::Batch,
    val: &P::Batch,
    beta_val: &P::Batch,
    update_arch: bool,
) -> Result<StepLosses> {
    let t = state.step;
    let train_loss = checked(at_step(problem.loss_and_grad(Split::Train, train, Group::Weights), t)?, "training", t)?;
    let store = problem.store_mut(Group::Weights);
    if cfg.grad_clip > 0.0 {
        store.clip_grad_norm(cfg.grad_clip);
    }
    state.weights.step(store, lr)?;
    let mut out = StepLosses { train: train_loss, alpha: None, beta: None };
    if update_arch {
        let l = checked(at_step(problem.loss_and_grad(Split::Val, val, Group::Alpha), t)?, "validation", t)?;
        state.alpha.step(problem.store_mut(Group::Alpha), cfg.arch_lr)?;
        out.alpha = Some(l);
        if cfg.mode.updates_beta() {
            let l = checked(at_step(problem.loss_and_grad(Split::Val, beta_val, Group::Beta), t)?, "validation", t)?;
            state.beta.step(problem.store_mut(Group::Beta), cfg.arch_lr)?;
            out.beta = Some(l);
        }
    }
    state.step += 1;
    Ok(out)
}

/// The super-network as a search problem over image batches.
#[derive(Debug, Clone)]
pub struct SuperNetProblem {
    pub net: SuperNetwork,
    /// Source of RReLU slopes.
    pub rng: Rng,
}

impl SuperNetProblem {
    pub fn new(net: SuperNetwork, seed: u64) -> Self {
        SuperNetProblem { net, rng: rng::stream(seed, Stream::RRelu) }
    }

    /// Loss without gradients, BN running statistics untouched.
    pub fn eval_loss(&mut self, batch: &(Tensor, Vec<usize>)) -> Result<f64> {
        let mut g = Graph::new();
        let saved = self.net.weights.clone();
        let logits = self.net.forward(&mut g, &batch.0, Mode::Train, &mut self.rng, None)?;
        let l = g.cross_entropy(logits, &batch.1, 0.0)?;
        self.net.weights = saved;
        Ok(g.value(l).item())
    }
}

impl SearchProblem for SuperNetProblem {
    type Batch = (Tensor, Vec<usize>);

    fn store(&self, group: Group) -> &ParamStore {
        self.net.store(group)
    }

    fn store_mut(&mut self, group: Group) -> &mut ParamStore {
        self.net.store_mut(group)
    }

    fn loss_and_grad(&mut self, _split: Split, batch: &Self::Batch, group: Group) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.net.loss(&mut g, &batch.0, &batch.1, &mut self.rng, Some(group))?;
        let value = g.value(loss).item();
        let grads = g.backward(loss)?;
        let store = self.net.store_mut(group);
        store.zero_grad();
        grads.accumulate_into(group, store);
        Ok(value)
    }
}

/// Mean Shannon entropy (nats) of the softmax of every row of every bank.
pub fn mean_row_entropy(store: &ParamStore) -> f64 {
    let mut total = 0.0;
    let mut rows = 0usize;
    for e in store.entries() {
        let w = *e.value.shape().last().unwrap_or(&1);
        for row in e.value.data().chunks(w) {
            let p = softmax(row).expect("non-empty row");
            total -= p.iter().filter(|&&v| v > 0.0).map(|&v| v * log(v)).sum::<f64>();
            rows += 1;
        }
    }
    if rows == 0 {
        0.0
    } else {
        total / rows as f64
    }
}

/// One line of the search history.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub alpha_entropy_mean: f64,
    /// 0 when the mode has no β.
    pub beta_entropy_mean: f64,
    pub genotype: Genotype,
}

/// A search in progress: everything a checkpoint has to capture.
#[derive(Debug, Clone)]
pub struct SearchRun {
    pub config: SearchConfig,
    pub problem: SuperNetProblem,
    pub state: SearchState,
    /// Completed epochs.
    pub epoch: usize,
    pub shuffle: Rng,
    pub history: Vec<HistoryRow>,
}

impl SearchRun {
    pub fn new(space: SpaceConfig, net: SuperNetConfig, cfg: SearchConfig) -> Result<Self> {
        cfg.validate()?;
        let mut network = SuperNetwork::new(space, cfg.mode.edge_mode(), net, cfg.seed)?;
        if let SearchMode::FrozenBeta(beta) = &cfg.mode {
            let ours = &network.arch.beta;
            let fits =
                beta.len() == ours.len() && beta.entries().iter().zip(ours.entries()).all(|(a, b)| a.value.shape() == b.value.shape());
            if !fits {
                bail!(Config, "frozen beta snapshot does not match the space");
            }
            network.arch.beta = beta.clone();
        }
        let problem = SuperNetProblem::new(network, cfg.seed);
        let state = SearchState::new(&cfg, &problem);
        let shuffle = rng::stream(cfg.seed, Stream::Shuffle);
        Ok(SearchRun { config: cfg, problem, state, epoch: 0, shuffle, history: Vec::new() })
    }

    pub fn arch(&self) -> &ArchParams {
        &self.problem.net.arch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Size of the flat pool when the mode is non-factorized.
    pub fn super_operators(&self) -> Result<usize> {
        super_operator_count(&self.problem.net.space)
    }

    pub fn genotype(&self) -> Result<Genotype> {
        let net = &self.problem.net;
        derive_genotype(&net.arch, &net.space, &net.mode)
    }

    /// Runs the next epoch over shuffled batches and appends a history row.
    pub fn run_epoch(&mut self, train: &Dataset, val: &Dataset) -> Result<&HistoryRow> {
        if self.is_done() {
            bail!(Usage, "search already ran its {} epochs", self.config.epochs);
        }
        let cfg = self.config.clone();
        let lr = cosine_lr(self.epoch, cfg.epochs, cfg.lr_max, cfg.lr_min)?;
        let train_batches = epoch_batches(train.len(), cfg.batch_size, &mut self.shuffle);
        let val_batches = epoch_batches(val.len(), cfg.batch_size, &mut self.shuffle);
        let update_arch = self.epoch >= cfg.warmup_epochs;
        let (mut train_sum, mut val_sum) = (0.0, 0.0);
        for (i, idx) in train_batches.iter().enumerate() {
            let tb = train.batch(idx);
            let vb = val.batch(&val_batches[i % val_batches.len()]);
            let fresh;
            let bb = if cfg.fresh_beta_batch {
                fresh = val.batch(&val_batches[(i + 1) % val_batches.len()]);
                &fresh
            } else {
                &vb
            };
            let losses = search_step(&mut self.problem, &mut self.state, &cfg, lr, &tb, &vb, bb, update_arch)?;
            train_sum += losses.train;
            val_sum += match losses.alpha {
                Some(l) => l,
                None => self.problem.eval_loss(&vb)?,
            };
        }
        let n = train_batches.len() as f64;
        let net = &self.problem.net;
        let row = HistoryRow {
            epoch: self.epoch + 1,
            train_loss: train_sum / n,
            val_loss: val_sum / n,
            alpha_entropy_mean: mean_row_entropy(&net.arch.alpha),
            beta_entropy_mean: mean_row_entropy(&net.arch.beta),
            genotype: self.genotype()?,
        };
        self.history.push(row);
        self.epoch += 1;
        Ok(self.history.last().expect("just pushed"))
    }
}

/// Result of a finished search.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub arch: ArchParams,
    pub genotype: Genotype,
    pub history: Vec<HistoryRow>,
}

/// Runs every remaining epoch; `on_epoch` sees the run after each one.
pub fn run_search(
    run: &mut SearchRun,
    train: &Dataset,
    val: &Dataset,
    mut on_epoch: impl FnMut(&SearchRun) -> Result<()>,
) -> Result<SearchOutcome> {
    if train.is_empty() || val.is_empty() {
        bail!(Config, "search needs non-empty training and validation splits");
    }
    let [c, _, _] = train.image_shape();
    if c != run.problem.net.config.in_channels || train.classes != run.problem.net.config.num_classes {
        bail!(Config, "dataset ({} channels, {} classes) does not fit the network", c, train.classes);
    }
    while !run.is_done() {
        run.run_epoch(train, val)?;
        on_epoch(run)?;
    }
    Ok(SearchOutcome { arch: run.arch().clone(), genotype: run.genotype()?, history: run.history.clone() })
}
