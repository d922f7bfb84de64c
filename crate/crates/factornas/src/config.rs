//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use factornas_core::activations::{ActivationInstance, ActivationKind};
use factornas_core::data::{AugmentPolicy, Difficulty, SynthSpec};
use factornas_core::evaluator::TrainConfig;
use factornas_core::optim::{AdamConfig, OptimizerKind};
use factornas_core::search::SearchConfig;
use factornas_core::space::{RegularOpKind, SpaceConfig};
use factornas_core::supernet::SuperNetConfig;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synth,
    Idx,
    Cifar,
}

impl DataSource {
    pub fn name(self) -> &'static str {
        match self {
            DataSource::Synth => "synth",
            DataSource::Idx => "idx",
            DataSource::Cifar => "cifar",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Generator settings; `classes` also bounds labels of file sources (0 infers it).
    pub synth: SynthSpec,
    /// Share held out as the test set when the source has no test files.
    pub test_fraction: f64,
    /// CIFAR-10 binary directory.
    pub dir: Option<PathBuf>,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synth,
            synth: SynthSpec::default(),
            test_fraction: 0.2,
            dir: None,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeSpec {
    Factorized,
    /// The activation is `search.fixed_activation`.
    FixedActivation,
    /// β comes from the checkpoint named by `search.frozen_beta`.
    FrozenBeta,
    NonFactorized,
}

impl ModeSpec {
    pub fn name(self) -> &'static str {
        match self {
            ModeSpec::Factorized => "factorized",
            ModeSpec::FixedActivation => "fixed-activation",
            ModeSpec::FrozenBeta => "frozen-beta",
            ModeSpec::NonFactorized => "non-factorized",
        }
    }

    /// Accepts the four mode names, plus `fixed-activation:<activation>`.
    pub fn parse(s: &str) -> std::result::Result<(Self, Option<ActivationInstance>), String> {
        match s {
            "factorized" => Ok((ModeSpec::Factorized, None)),
            "non-factorized" => Ok((ModeSpec::NonFactorized, None)),
            "frozen-beta" => Ok((ModeSpec::FrozenBeta, None)),
            "fixed-activation" => Ok((ModeSpec::FixedActivation, None)),
            _ => match s.strip_prefix("fixed-activation:") {
                Some(a) => Ok((ModeSpec::FixedActivation, Some(parse_activation(a)?))),
                None => Err(format!("unknown mode `{s}` (expected factorized, non-factorized, frozen-beta or fixed-activation[:kind])")),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory; never part of the resolved text.
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub space: SpaceConfig,
    /// Channels, depth and stem of the super-network; input channels and classes come from the data.
    pub supernet: SuperNetConfig,
    pub search: SearchConfig,
    pub mode: ModeSpec,
    pub fixed_activation: ActivationInstance,
    pub frozen_beta: Option<PathBuf>,
    pub train: TrainConfig,
    /// Replaces every activation of the genotype before retraining.
    pub retrain_activation: Option<ActivationKind>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: None,
            data: DataConfig::default(),
            space: SpaceConfig::default(),
            supernet: SuperNetConfig::default(),
            search: SearchConfig::default(),
            mode: ModeSpec::Factorized,
            fixed_activation: ActivationInstance::new(ActivationKind::Relu),
            frozen_beta: None,
            train: TrainConfig::default(),
            retrain_activation: None,
        }
    }
}

fn parse_activation(s: &str) -> std::result::Result<ActivationInstance, String> {
    let (name, coeff) = match s.split_once(':') {
        Some((n, c)) => (n.trim(), Some(c.trim())),
        None => (s.trim(), None),
    };
    let kind = ActivationKind::from_name(name).ok_or_else(|| format!("unknown activation `{name}`"))?;
    match coeff {
        None => Ok(ActivationInstance::new(kind)),
        Some(c) => Ok(ActivationInstance::with_coeff(kind, num(c)?)),
    }
}

fn fmt_activation(a: &ActivationInstance) -> String {
    if a.coeff.to_bits() == a.kind.default_coeff().to_bits() {
        a.kind.name().to_string()
    } else {
        format!("{}:{}", a.kind.name(), a.coeff)
    }
}

fn num<T: FromStr>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|_| format!("cannot parse `{s}`"))
}

fn flag(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{s}`")),
    }
}

fn path(s: &str) -> Option<PathBuf> {
    (!s.is_empty()).then(|| PathBuf::from(s))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn list<T>(s: &str, f: impl Fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Vec<T>, String> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(f).collect()
}

fn adam(cfg: &SearchConfig) -> AdamConfig {
    match cfg.arch_optimizer {
        OptimizerKind::Adam(a) => a,
        OptimizerKind::Sgd(_) => AdamConfig::default(),
    }
}

impl RunConfig {
    /// Parses a config file; keys not listed here are rejected with their line number.
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        let mut schema = None;
        let mut mode_text = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| Error::Config { source_name: source_name.to_string(), line, message };
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{body}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            seen.push(key.to_string());
            match key {
                "schema_version" => {
                    let v: u32 = num(value).map_err(err)?;
                    if v != SCHEMA_VERSION {
                        return Err(err(format!("unsupported schema_version {v}, expected {SCHEMA_VERSION}")));
                    }
                    schema = Some(v);
                }
                "out" => cfg.out = path(value),
                "search.mode" => mode_text = Some((value.to_string(), line)),
                _ => cfg.set(key, value).map_err(err)?,
            }
        }
        if schema.is_none() {
            return Err(Error::Config { source_name: source_name.to_string(), line: 0, message: "missing schema_version".into() });
        }
        if let Some((m, line)) = mode_text {
            cfg.set_mode(&m).map_err(|message| Error::Config { source_name: source_name.to_string(), line, message })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set_mode(&mut self, text: &str) -> std::result::Result<(), String> {
        let (mode, act) = ModeSpec::parse(text)?;
        self.mode = mode;
        if let Some(a) = act {
            self.fixed_activation = a;
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let d = &mut self.data;
        let s = &mut self.search;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = num(v)?,
            "data.source" => {
                d.source = match v {
                    "synth" => DataSource::Synth,
                    "idx" => DataSource::Idx,
                    "cifar" => DataSource::Cifar,
                    _ => return Err(format!("unknown data source `{v}`")),
                }
            }
            "data.classes" => d.synth.classes = num(v)?,
            "data.samples" => d.synth.samples = num(v)?,
            "data.size" => d.synth.size = num(v)?,
            "data.channels" => d.synth.channels = num(v)?,
            "data.seed" => d.synth.seed = num(v)?,
            "data.difficulty" => d.synth.difficulty = Difficulty::from_name(v).ok_or(format!("unknown difficulty `{v}`"))?,
            "data.test_fraction" => d.test_fraction = num(v)?,
            "data.dir" => d.dir = path(v),
            "data.train_images" => d.train_images = path(v),
            "data.train_labels" => d.train_labels = path(v),
            "data.test_images" => d.test_images = path(v),
            "data.test_labels" => d.test_labels = path(v),
            "space.nodes" => self.space.num_intermediate_nodes = num(v)?,
            "space.edges_per_node" => self.space.edges_selected_per_node = num(v)?,
            "space.cell_types" => self.space.cell_types = num(v)?,
            "space.factorized" => self.space.factorized = flag(v)?,
            "space.regular_ops" => {
                self.space.regular_ops = list(v, |n| RegularOpKind::from_name(n).ok_or_else(|| format!("unknown operator `{n}`")))?
            }
            "space.activations" => self.space.activation_ops = list(v, parse_activation)?,
            "supernet.channels" => self.supernet.channels = num(v)?,
            "supernet.layers" => self.supernet.layers = num(v)?,
            "supernet.stem_multiplier" => self.supernet.stem_multiplier = num(v)?,
            "search.epochs" => s.epochs = num(v)?,
            "search.batch_size" => s.batch_size = num(v)?,
            "search.train_fraction" => s.train_fraction = num(v)?,
            "search.val_fraction" => s.val_fraction = num(v)?,
            "search.lr_max" => s.lr_max = num(v)?,
            "search.lr_min" => s.lr_min = num(v)?,
            "search.momentum" => s.weights_optimizer.momentum = num(v)?,
            "search.weight_decay" => s.weights_optimizer.weight_decay = num(v)?,
            "search.arch_lr" => s.arch_lr = num(v)?,
            "search.arch_beta1" | "search.arch_beta2" | "search.arch_eps" | "search.arch_weight_decay" => {
                let mut a = adam(s);
                let x: f64 = num(v)?;
                match key {
                    "search.arch_beta1" => a.beta1 = x,
                    "search.arch_beta2" => a.beta2 = x,
                    "search.arch_eps" => a.eps = x,
                    _ => a.weight_decay = x,
                }
                s.arch_optimizer = OptimizerKind::Adam(a);
            }
            "search.grad_clip" => s.grad_clip = num(v)?,
            "search.warmup_epochs" => s.warmup_epochs = num(v)?,
            "search.fresh_beta_batch" => s.fresh_beta_batch = flag(v)?,
            "search.fixed_activation" => self.fixed_activation = parse_activation(v)?,
            "search.frozen_beta" => self.frozen_beta = path(v),
            "train.layers" => t.layers = num(v)?,
            "train.channels" => t.channels = num(v)?,
            "train.stem_multiplier" => t.stem_multiplier = num(v)?,
            "train.epochs" => t.epochs = num(v)?,
            "train.batch_size" => t.batch_size = num(v)?,
            "train.lr_max" => t.lr_max = num(v)?,
            "train.lr_min" => t.lr_min = num(v)?,
            "train.momentum" => t.momentum = num(v)?,
            "train.weight_decay" => t.weight_decay = num(v)?,
            "train.grad_clip" => t.grad_clip = num(v)?,
            "train.drop_path" => t.drop_path = num(v)?,
            "train.pad_crop" => t.augment.pad_crop = num(v)?,
            "train.flip" => t.augment.flip = flag(v)?,
            "train.cutout" => t.augment.cutout = num(v)?,
            "train.auxiliary" => t.auxiliary = flag(v)?,
            "train.aux_weight" => t.aux_weight = num(v)?,
            "train.label_smoothing" => t.label_smoothing = num(v)?,
            "train.activation" => {
                self.retrain_activation = match v {
                    "" | "keep" => None,
                    _ => Some(ActivationKind::from_name(v).ok_or(format!("unknown activation `{v}`"))?),
                }
            }
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Checks every component section.
    pub fn validate(&self) -> Result<()> {
        self.space.validate()?;
        let mut search = self.search.clone();
        search.mode = factornas_core::search::SearchMode::Factorized;
        search.validate()?;
        self.train.validate()?;
        let d = &self.data;
        if !(0.0..1.0).contains(&d.test_fraction) {
            return Err(Error::Usage(format!("data.test_fraction {} outside [0,1)", d.test_fraction)));
        }
        if self.supernet.channels == 0 || self.supernet.layers < 3 || self.supernet.stem_multiplier == 0 {
            return Err(Error::Usage("supernet needs positive channels and at least 3 layers".into()));
        }
        Ok(())
    }

    /// Every key with its value, in canonical order. The output directory is left out so
    /// that the text only depends on what determines the results.
    pub fn to_text(&self) -> String {
        let d = &self.data;
        let s = &self.search;
        let t = &self.train;
        let a = adam(s);
        let sp = &self.space;
        let join = |v: Vec<String>| v.join(", ");
        let rows: Vec<(&str, String)> = vec![
            ("schema_version", SCHEMA_VERSION.to_string()),
            ("seed", self.seed.to_string()),
            ("data.source", d.source.name().into()),
            ("data.classes", d.synth.classes.to_string()),
            ("data.samples", d.synth.samples.to_string()),
            ("data.size", d.synth.size.to_string()),
            ("data.channels", d.synth.channels.to_string()),
            ("data.seed", d.synth.seed.to_string()),
            ("data.difficulty", d.synth.difficulty.name().into()),
            ("data.test_fraction", d.test_fraction.to_string()),
            ("data.dir", show_path(&d.dir)),
            ("data.train_images", show_path(&d.train_images)),
            ("data.train_labels", show_path(&d.train_labels)),
            ("data.test_images", show_path(&d.test_images)),
            ("data.test_labels", show_path(&d.test_labels)),
            ("space.nodes", sp.num_intermediate_nodes.to_string()),
            ("space.edges_per_node", sp.edges_selected_per_node.to_string()),
            ("space.cell_types", sp.cell_types.to_string()),
            ("space.factorized", sp.factorized.to_string()),
            ("space.regular_ops", join(sp.regular_ops.iter().map(|o| o.name().to_string()).collect())),
            ("space.activations", join(sp.activation_ops.iter().map(fmt_activation).collect())),
            ("supernet.channels", self.supernet.channels.to_string()),
            ("supernet.layers", self.supernet.layers.to_string()),
            ("supernet.stem_multiplier", self.supernet.stem_multiplier.to_string()),
            ("search.mode", self.mode.name().into()),
            ("search.fixed_activation", fmt_activation(&self.fixed_activation)),
            ("search.frozen_beta", show_path(&self.frozen_beta)),
            ("search.epochs", s.epochs.to_string()),
            ("search.batch_size", s.batch_size.to_string()),
            ("search.train_fraction", s.train_fraction.to_string()),
            ("search.val_fraction", s.val_fraction.to_string()),
            ("search.lr_max", s.lr_max.to_string()),
            ("search.lr_min", s.lr_min.to_string()),
            ("search.momentum", s.weights_optimizer.momentum.to_string()),
            ("search.weight_decay", s.weights_optimizer.weight_decay.to_string()),
            ("search.arch_lr", s.arch_lr.to_string()),
            ("search.arch_beta1", a.beta1.to_string()),
            ("search.arch_beta2", a.beta2.to_string()),
            ("search.arch_eps", a.eps.to_string()),
            ("search.arch_weight_decay", a.weight_decay.to_string()),
            ("search.grad_clip", s.grad_clip.to_string()),
            ("search.warmup_epochs", s.warmup_epochs.to_string()),
            ("search.fresh_beta_batch", s.fresh_beta_batch.to_string()),
            ("train.layers", t.layers.to_string()),
            ("train.channels", t.channels.to_string()),
            ("train.stem_multiplier", t.stem_multiplier.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr_max", t.lr_max.to_string()),
            ("train.lr_min", t.lr_min.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.grad_clip", t.grad_clip.to_string()),
            ("train.drop_path", t.drop_path.to_string()),
            ("train.pad_crop", t.augment.pad_crop.to_string()),
            ("train.flip", t.augment.flip.to_string()),
            ("train.cutout", t.augment.cutout.to_string()),
            ("train.auxiliary", t.auxiliary.to_string()),
            ("train.aux_weight", t.aux_weight.to_string()),
            ("train.label_smoothing", t.label_smoothing.to_string()),
            ("train.activation", self.retrain_activation.map_or("keep", |k| k.name()).into()),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// SHA-256 of the resolved text.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }

    /// Seeds of the search and of retraining follow the run seed.
    pub fn search_config(&self) -> SearchConfig {
        SearchConfig { seed: self.seed, ..self.search.clone() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn augment(&self) -> AugmentPolicy {
        self.train.augment
    }
}
