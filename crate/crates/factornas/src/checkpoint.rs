//! Search checkpoints and trained models on top of [`Container`].

use factornas_core::data::Standardization;
use factornas_core::evaluator::DiscreteNetwork;
use factornas_core::genotype::Genotype;
use factornas_core::optim::Optimizer;
use factornas_core::rng::{self, RngState};
use factornas_core::search::{HistoryRow, SearchMode, SearchRun};
use factornas_core::supernet::{ArchParams, EdgeMode, SuperNetConfig};
use factornas_core::ParamStore;
use sha2::{Digest, Sha256};

use crate::config::{ModeSpec, RunConfig};
use crate::container::Container;
use crate::error::{Error, Result};

pub const SEARCH_KIND: &str = "search-checkpoint";
pub const MODEL_KIND: &str = "model";

fn bad(src: &str, msg: impl std::fmt::Display) -> Error {
    Error::Usage(format!("{src}: {msg}"))
}

fn push_store(c: &mut Container, prefix: &str, store: &ParamStore) {
    for e in store.entries() {
        c.push(format!("{prefix}/{}", e.name), e.value.shape(), e.value.data());
    }
}

/// Overwrites every entry of `store` with the array of the same name.
fn load_store(c: &Container, prefix: &str, store: &mut ParamStore, src: &str) -> Result<()> {
    let expected = c.arrays.iter().filter(|a| a.name.strip_prefix(prefix).is_some_and(|r| r.starts_with('/'))).count();
    if expected != store.len() {
        return Err(bad(src, format!("{expected} `{prefix}` arrays for {} parameters", store.len())));
    }
    for e in store.entries_mut() {
        let name = format!("{prefix}/{}", e.name);
        let a = c.array(&name).ok_or_else(|| bad(src, format!("missing array `{name}`")))?;
        if a.shape != e.value.shape() {
            return Err(bad(src, format!("array `{name}` has shape {:?}, expected {:?}", a.shape, e.value.shape())));
        }
        e.value.data_mut().copy_from_slice(&a.data);
    }
    Ok(())
}

fn push_optimizer(c: &mut Container, prefix: &str, opt: &Optimizer) {
    c.set(&format!("{prefix}.step"), opt.step.to_string());
    for (i, b) in opt.first.iter().enumerate() {
        c.push(format!("{prefix}/first/{i}"), &[b.len()], b);
    }
    for (i, b) in opt.second.iter().enumerate() {
        c.push(format!("{prefix}/second/{i}"), &[b.len()], b);
    }
}

fn load_optimizer(c: &Container, prefix: &str, opt: &mut Optimizer, src: &str) -> Result<()> {
    opt.step = parse_num(c.meta(&format!("{prefix}.step"), src)?, src)?;
    for (which, bufs) in [("first", &mut opt.first), ("second", &mut opt.second)] {
        for (i, b) in bufs.iter_mut().enumerate() {
            let name = format!("{prefix}/{which}/{i}");
            let a = c.array(&name).ok_or_else(|| bad(src, format!("missing array `{name}`")))?;
            if a.data.len() != b.len() {
                return Err(bad(src, format!("array `{name}` has {} values, expected {}", a.data.len(), b.len())));
            }
            b.copy_from_slice(&a.data);
        }
    }
    Ok(())
}

fn parse_num<T: std::str::FromStr>(s: &str, src: &str) -> Result<T> {
    s.parse().map_err(|_| bad(src, format!("cannot parse `{s}`")))
}

fn rng_text(s: &RngState) -> String {
    let seed: String = s.seed.iter().map(|b| format!("{b:02x}")).collect();
    format!("{seed} {} {}", s.stream, s.word_pos)
}

fn parse_rng(text: &str, src: &str) -> Result<RngState> {
    let parts: Vec<&str> = text.split(' ').collect();
    if parts.len() != 3 || parts[0].len() != 64 {
        return Err(bad(src, format!("malformed rng state `{text}`")));
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&parts[0][2 * i..2 * i + 2], 16).map_err(|_| bad(src, "malformed rng seed"))?;
    }
    Ok(RngState { seed, stream: parse_num(parts[1], src)?, word_pos: parse_num(parts[2], src)? })
}

fn config_of(c: &Container, src: &str) -> Result<RunConfig> {
    let text = c.meta("config", src)?;
    if Sha256::digest(text.as_bytes()).as_slice() != c.config_digest {
        return Err(bad(src, "config digest does not match the embedded config"));
    }
    RunConfig::parse(text, &format!("{src} (embedded config)"))
}

/// The search mode a config asks for; frozen β is read from the referenced checkpoint.
pub fn search_mode(cfg: &RunConfig) -> Result<SearchMode> {
    Ok(match cfg.mode {
        ModeSpec::Factorized => SearchMode::Factorized,
        ModeSpec::NonFactorized => SearchMode::NonFactorized,
        ModeSpec::FixedActivation => SearchMode::FixedActivation(cfg.fixed_activation),
        ModeSpec::FrozenBeta => {
            let path = cfg.frozen_beta.as_ref().ok_or_else(|| Error::Usage("frozen-beta mode needs search.frozen_beta".into()))?;
            let src = path.display().to_string();
            let c = Container::decode(&crate::io::read(path)?, &src)?;
            c.expect_kind(SEARCH_KIND, &src)?;
            let mut beta = ArchParams::zeros(&cfg.space, &EdgeMode::Factorized)?.beta;
            load_store(&c, "beta", &mut beta, &src)?;
            SearchMode::FrozenBeta(beta)
        }
    })
}

/// Configuration and architecture parameters of a search checkpoint.
pub fn load_arch(c: &Container, src: &str) -> Result<(RunConfig, ArchParams, EdgeMode)> {
    c.expect_kind(SEARCH_KIND, src)?;
    let cfg = config_of(c, src)?;
    let mode = match cfg.mode {
        ModeSpec::Factorized | ModeSpec::FrozenBeta => EdgeMode::Factorized,
        ModeSpec::NonFactorized => EdgeMode::Flat,
        ModeSpec::FixedActivation => EdgeMode::Fixed(cfg.fixed_activation),
    };
    let mut arch = ArchParams::zeros(&cfg.space, &mode)?;
    load_store(c, "alpha", &mut arch.alpha, src)?;
    load_store(c, "beta", &mut arch.beta, src)?;
    Ok((cfg, arch, mode))
}

/// Captures the whole search state.
pub fn save_search(run: &SearchRun, cfg: &RunConfig) -> Container {
    let text = cfg.to_text();
    let mut c = Container::new(SEARCH_KIND, Sha256::digest(text.as_bytes()).into());
    let net = &run.problem.net;
    c.set("config", text);
    c.set("mode", run.config.mode.name());
    c.set("net.in_channels", net.config.in_channels.to_string());
    c.set("net.classes", net.config.num_classes.to_string());
    c.set("epoch", run.epoch.to_string());
    c.set("step", run.state.step.to_string());
    c.set("rng.shuffle", rng_text(&rng::save(&run.shuffle)));
    c.set("rng.rrelu", rng_text(&rng::save(&run.problem.rng)));
    c.set("history.count", run.history.len().to_string());
    for (i, h) in run.history.iter().enumerate() {
        c.set(
            &format!("history.{i:05}"),
            format!("{} {} {} {} {}", h.epoch, h.train_loss, h.val_loss, h.alpha_entropy_mean, h.beta_entropy_mean),
        );
        c.set(&format!("history.{i:05}.genotype"), h.genotype.to_text());
    }
    push_store(&mut c, "weights", &net.weights);
    push_store(&mut c, "alpha", &net.arch.alpha);
    push_store(&mut c, "beta", &net.arch.beta);
    push_optimizer(&mut c, "opt.weights", &run.state.weights);
    push_optimizer(&mut c, "opt.alpha", &run.state.alpha);
    push_optimizer(&mut c, "opt.beta", &run.state.beta);
    c
}

fn parse_history(c: &Container, src: &str) -> Result<Vec<HistoryRow>> {
    let n: usize = parse_num(c.meta("history.count", src)?, src)?;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let line = c.meta(&format!("history.{i:05}"), src)?;
        let f: Vec<&str> = line.split(' ').collect();
        if f.len() != 5 {
            return Err(bad(src, format!("malformed history row `{line}`")));
        }
        rows.push(HistoryRow {
            epoch: parse_num(f[0], src)?,
            train_loss: parse_num(f[1], src)?,
            val_loss: parse_num(f[2], src)?,
            alpha_entropy_mean: parse_num(f[3], src)?,
            beta_entropy_mean: parse_num(f[4], src)?,
            genotype: Genotype::parse(c.meta(&format!("history.{i:05}.genotype"), src)?)?,
        });
    }
    Ok(rows)
}

/// Rebuilds a search so that continuing it matches an uninterrupted run bit for bit.
pub fn load_search(c: &Container, src: &str) -> Result<(RunConfig, SearchRun)> {
    c.expect_kind(SEARCH_KIND, src)?;
    let cfg = config_of(c, src)?;
    let net_cfg = SuperNetConfig {
        in_channels: parse_num(c.meta("net.in_channels", src)?, src)?,
        num_classes: parse_num(c.meta("net.classes", src)?, src)?,
        ..cfg.supernet
    };
    let mut search = cfg.search_config();
    search.mode = match cfg.mode {
        ModeSpec::FrozenBeta => {
            let mut beta = ArchParams::zeros(&cfg.space, &EdgeMode::Factorized)?.beta;
            load_store(c, "beta", &mut beta, src)?;
            SearchMode::FrozenBeta(beta)
        }
        ModeSpec::Factorized => SearchMode::Factorized,
        ModeSpec::NonFactorized => SearchMode::NonFactorized,
        ModeSpec::FixedActivation => SearchMode::FixedActivation(cfg.fixed_activation),
    };
    let mut run = SearchRun::new(cfg.space.clone(), net_cfg, search)?;
    let net = &mut run.problem.net;
    load_store(c, "weights", &mut net.weights, src)?;
    load_store(c, "alpha", &mut net.arch.alpha, src)?;
    load_store(c, "beta", &mut net.arch.beta, src)?;
    load_optimizer(c, "opt.weights", &mut run.state.weights, src)?;
    load_optimizer(c, "opt.alpha", &mut run.state.alpha, src)?;
    load_optimizer(c, "opt.beta", &mut run.state.beta, src)?;
    run.epoch = parse_num(c.meta("epoch", src)?, src)?;
    run.state.step = parse_num(c.meta("step", src)?, src)?;
    run.shuffle = rng::restore(&parse_rng(c.meta("rng.shuffle", src)?, src)?);
    run.problem.rng = rng::restore(&parse_rng(c.meta("rng.rrelu", src)?, src)?);
    run.history = parse_history(c, src)?;
    Ok((cfg, run))
}

/// A trained network with the standardization it was trained under.
pub fn save_model(net: &DiscreteNetwork, stats: &Standardization, cfg: &RunConfig) -> Container {
    let text = cfg.to_text();
    let mut c = Container::new(MODEL_KIND, Sha256::digest(text.as_bytes()).into());
    c.set("config", text);
    c.set("genotype", net.genotype.to_text());
    c.set("in_channels", net.in_channels.to_string());
    c.set("classes", net.num_classes.to_string());
    c.push("norm/mean", &[stats.mean.len()], &stats.mean);
    c.push("norm/std", &[stats.std.len()], &stats.std);
    push_store(&mut c, "weights", &net.weights);
    c
}

pub fn load_model(c: &Container, src: &str) -> Result<(RunConfig, DiscreteNetwork, Standardization)> {
    c.expect_kind(MODEL_KIND, src)?;
    let cfg = config_of(c, src)?;
    let genotype = Genotype::parse(c.meta("genotype", src)?)?;
    let in_c = parse_num(c.meta("in_channels", src)?, src)?;
    let classes = parse_num(c.meta("classes", src)?, src)?;
    let mut net = DiscreteNetwork::new(&genotype, in_c, classes, &cfg.train_config())?;
    load_store(c, "weights", &mut net.weights, src)?;
    let get = |n: &str| c.array(n).map(|a| a.data.clone()).ok_or_else(|| bad(src, format!("missing array `{n}`")));
    let stats = Standardization { mean: get("norm/mean")?, std: get("norm/std")? };
    Ok((cfg, net, stats))
}
