//! Subcommands.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use factornas_core::evaluator::{evaluate, retrain};
use factornas_core::genotype::{derive_genotype, Genotype};
use factornas_core::search::{run_search, SearchMode};
use factornas_core::space::{arch_param_count, scientific, space_cardinality, super_operator_count};

use crate::artifacts::{self, EvalReport, Summary};
use crate::checkpoint::{load_arch, load_model, load_search, save_model, save_search};
use crate::config::RunConfig;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::io::{self, write_atomic, RunLog};
use crate::pipeline::{load_data, load_raw, new_search_run, search_splits};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "FACTORNAS_OUT";

#[derive(Debug, Parser)]
#[command(name = "factornas", version, about = "Factorized differentiable architecture search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Run configuration (`key = value` lines)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// factorized, non-factorized, frozen-beta or fixed-activation[:kind]
    #[arg(long, global = true)]
    pub mode: Option<String>,
    /// Output directory [default: $FACTORNAS_OUT/<command>, else runs/<command>]
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Only write the log file, not standard error
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Search, writing checkpoint, history, genotype and resolved config
    Search {
        /// Continue from a search checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Derive the genotype stored in a search checkpoint
    Derive {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train a genotype from scratch
    Retrain {
        #[arg(long)]
        genotype: PathBuf,
    },
    /// Test error of a trained model
    Eval {
        #[arg(long)]
        model: PathBuf,
    },
    /// Exact size of the configured search space
    SpaceSize,
    /// Graphviz rendering of a genotype
    Render {
        #[arg(long)]
        genotype: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Search { .. } => "search",
            Command::Derive { .. } => "derive",
            Command::Retrain { .. } => "retrain",
            Command::Eval { .. } => "eval",
            Command::SpaceSize => "space-size",
            Command::Render { .. } => "render",
        }
    }
}

/// Reads `--config` (or the defaults) and applies `--seed` and `--mode`.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::parse(&io::read_text(p)?, &p.display().to_string())?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, common)?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfig, common: &Common) -> Result<()> {
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(m) = &common.mode {
        cfg.set_mode(m).map_err(Error::Usage)?;
    }
    cfg.validate()
}

fn out_dir(common: &Common, cfg_out: Option<&Path>, command: &str) -> PathBuf {
    if let Some(o) = &common.out {
        return o.clone();
    }
    if let Some(o) = cfg_out {
        return o.to_path_buf();
    }
    match std::env::var_os(OUT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(command),
        _ => PathBuf::from("runs").join(command),
    }
}

fn read_container(path: &Path) -> Result<Container> {
    Container::decode(&io::read(path)?, &path.display().to_string())
}

fn read_genotype(path: &Path) -> Result<Genotype> {
    Ok(Genotype::parse(&io::read_text(path)?)?)
}

/// Keeps an artifact error raised inside a core callback so it surfaces unchanged.
fn stash(r: Result<()>, slot: &mut Option<Error>) -> factornas_core::Result<()> {
    r.map_err(|e| {
        let msg = e.to_string();
        *slot = Some(e);
        factornas_core::Error::Usage(msg)
    })
}

fn unstash<T>(r: factornas_core::Result<T>, slot: Option<Error>) -> Result<T> {
    match (r, slot) {
        (Ok(v), _) => Ok(v),
        (Err(_), Some(e)) => Err(e),
        (Err(e), None) => Err(e.into()),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Search { resume } => cmd_search(c, resume.as_deref()),
        Command::Derive { checkpoint } => cmd_derive(c, checkpoint),
        Command::Retrain { genotype } => cmd_retrain(c, genotype),
        Command::Eval { model } => cmd_eval(c, model),
        Command::SpaceSize => cmd_space_size(c),
        Command::Render { genotype } => cmd_render(c, genotype),
    }
}

pub fn cmd_search(common: &Common, resume: Option<&Path>) -> Result<()> {
    let (cfg, resumed) = match resume {
        Some(path) => {
            if common.config.is_some() || common.seed.is_some() || common.mode.is_some() {
                return Err(Error::Usage("--resume takes the configuration from the checkpoint".into()));
            }
            let (cfg, run) = load_search(&read_container(path)?, &path.display().to_string())?;
            (cfg, Some(run))
        }
        None => (resolve_config(common)?, None),
    };
    let out = out_dir(common, cfg.out.as_deref(), "search");
    let log = RunLog::open(&out, common.quiet)?;
    write_atomic(&out.join(artifacts::CONFIG_FILE), cfg.to_text().as_bytes())?;
    let (train, _) = load_data(&cfg)?;
    let (strain, sval) = search_splits(&cfg, &train)?;
    let mut run = match resumed {
        Some(r) => r,
        None => new_search_run(&cfg, &strain)?,
    };
    let flat = match run.config.mode {
        SearchMode::NonFactorized => Some(run.super_operators()?),
        _ => None,
    };
    let counts = arch_param_count(&cfg.space)?;
    log.line(&format!(
        "search mode={} train={} val={} epochs={} alpha={} beta={} super_operators={}",
        run.config.mode.name(),
        strain.len(),
        sval.len(),
        run.config.epochs,
        counts.alpha,
        counts.beta,
        super_operator_count(&cfg.space)?
    ))?;
    let mode = run.config.mode.name();
    let write_all = |run: &factornas_core::search::SearchRun| -> Result<()> {
        write_atomic(&out.join(artifacts::CHECKPOINT_FILE), &save_search(run, &cfg).encode())?;
        write_atomic(&out.join(artifacts::HISTORY_FILE), &artifacts::history_csv(&run.history, mode, flat)?)?;
        write_atomic(&out.join(artifacts::GENOTYPE_FILE), run.genotype()?.to_text().as_bytes())
    };
    let mut failure = None;
    let outcome = run_search(&mut run, &strain, &sval, |r| {
        let h = r.history.last().expect("one row per epoch");
        let done = log
            .line(&format!(
                "epoch {} train_loss={:.4} val_loss={:.4} alpha_entropy={:.4} beta_entropy={:.4} genotype={}",
                h.epoch,
                h.train_loss,
                h.val_loss,
                h.alpha_entropy_mean,
                h.beta_entropy_mean,
                h.genotype.digest()
            ))
            .and_then(|_| write_all(r));
        stash(done, &mut failure)
    });
    let outcome = unstash(outcome, failure)?;
    write_all(&run)?;
    log.line(&format!("search done, genotype {}", outcome.genotype.digest()))?;
    Ok(())
}

pub fn cmd_derive(common: &Common, checkpoint: &Path) -> Result<()> {
    let src = checkpoint.display().to_string();
    let (cfg, arch, mode) = load_arch(&read_container(checkpoint)?, &src)?;
    let genotype = derive_genotype(&arch, &cfg.space, &mode)?;
    let out = out_dir(common, None, "derive");
    write_atomic(&out.join(artifacts::GENOTYPE_FILE), genotype.to_text().as_bytes())?;
    write_atomic(&out.join(artifacts::CONFIG_FILE), cfg.to_text().as_bytes())?;
    RunLog::open(&out, common.quiet)?.line(&format!("derived genotype {} from {src}", genotype.digest()))
}

pub fn cmd_retrain(common: &Common, genotype_path: &Path) -> Result<()> {
    let cfg = resolve_config(common)?;
    let mut genotype = read_genotype(genotype_path)?;
    if let Some(kind) = cfg.retrain_activation {
        genotype = genotype.with_activation(kind);
    }
    let out = out_dir(common, cfg.out.as_deref(), "retrain");
    let log = RunLog::open(&out, common.quiet)?;
    write_atomic(&out.join(artifacts::CONFIG_FILE), cfg.to_text().as_bytes())?;
    write_atomic(&out.join(artifacts::GENOTYPE_FILE), genotype.to_text().as_bytes())?;
    let (train, test) = load_data(&cfg)?;
    log.line(&format!("retrain genotype {} train={} test={}", genotype.digest(), train.len(), test.len()))?;
    let mut rows = Vec::new();
    let mut failure = None;
    let result = retrain(&genotype, &train, &test, cfg.train_config(), |m| {
        rows.push(*m);
        let done = log
            .line(&format!(
                "epoch {} train_loss={:.4} train_err={:.2} test_loss={:.4} test_err={:.2}",
                m.epoch, m.train_loss, m.train_err, m.test_loss, m.test_err
            ))
            .and_then(|_| write_atomic(&out.join(artifacts::METRICS_FILE), &artifacts::metrics_csv(&rows)?));
        stash(done, &mut failure)
    });
    let (trainer, metrics) = unstash(result, failure)?;
    let stats = train.standardization.clone().expect("load_data standardizes");
    write_atomic(&out.join(artifacts::MODEL_FILE), &save_model(&trainer.net, &stats, &cfg).encode())?;
    write_atomic(&out.join(artifacts::METRICS_FILE), &artifacts::metrics_csv(&metrics.epochs)?)?;
    let summary = Summary::new(&metrics, genotype.digest(), cfg.seed);
    write_atomic(&out.join(artifacts::SUMMARY_FILE), &artifacts::json(&summary))?;
    log.line(&format!(
        "retrain done: test error {:.2}%, {} parameters, {} multiply-accumulates per image",
        metrics.final_test_error, metrics.params, metrics.macs
    ))
}

pub fn cmd_eval(common: &Common, model: &Path) -> Result<()> {
    let src = model.display().to_string();
    let (embedded, mut net, stats) = load_model(&read_container(model)?, &src)?;
    let data_cfg = match &common.config {
        Some(_) => resolve_config(common)?,
        None => embedded.clone(),
    };
    let (_, mut test) = load_raw(&data_cfg)?;
    test.standardize(&stats)?;
    let (loss, err) = evaluate(&mut net, &test, embedded.train.batch_size)?;
    let report = EvalReport { genotype_digest: net.genotype.digest(), samples: test.len(), test_loss: loss, test_error: err };
    println!("test error: {err}% ({} images, loss {loss})", test.len());
    let out = out_dir(common, None, "eval");
    write_atomic(&out.join(artifacts::EVAL_FILE), &artifacts::json(&report))?;
    RunLog::open(&out, true)?.line(&format!("evaluated {src}: test error {err}%"))
}

pub fn cmd_space_size(common: &Common) -> Result<()> {
    let cfg = resolve_config(common)?;
    let n = space_cardinality(&cfg.space)?;
    let text = format!("{n} ≈ {}\n", scientific(&n, 3));
    print!("{text}");
    if let Some(o) = &common.out {
        write_atomic(&o.join(artifacts::SPACE_SIZE_FILE), text.as_bytes())?;
    }
    Ok(())
}

pub fn cmd_render(common: &Common, genotype: &Path) -> Result<()> {
    let g = read_genotype(genotype)?;
    let out = out_dir(common, None, "render");
    write_atomic(&out.join(artifacts::DOT_FILE), g.to_dot().as_bytes())
}
