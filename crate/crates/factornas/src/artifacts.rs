//! Text artifacts: history and metrics CSV, JSON summaries.

use factornas_core::evaluator::{EpochMetrics, Metrics};
use factornas_core::search::HistoryRow;
use serde::Serialize;

use crate::error::{Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.fnas";
pub const HISTORY_FILE: &str = "history.csv";
pub const GENOTYPE_FILE: &str = "genotype.txt";
pub const CONFIG_FILE: &str = "config.resolved.txt";
pub const MODEL_FILE: &str = "model.fnas";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const EVAL_FILE: &str = "eval.json";
pub const DOT_FILE: &str = "genotype.dot";
pub const SPACE_SIZE_FILE: &str = "space_size.txt";

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::Io { path: "<csv>".into(), source: e.into_error() })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io { path: "<csv>".into(), source: std::io::Error::other(e) }
}

/// A `#` comment line naming the mode, then one row per epoch.
pub fn history_csv(rows: &[HistoryRow], mode: &str, super_operators: Option<usize>) -> Result<Vec<u8>> {
    let mut out = match super_operators {
        Some(n) => format!("# mode={mode} super_operators={n}\n"),
        None => format!("# mode={mode}\n"),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "train_loss", "val_loss", "alpha_entropy_mean", "beta_entropy_mean", "genotype_digest"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_loss.to_string(),
            r.alpha_entropy_mean.to_string(),
            r.beta_entropy_mean.to_string(),
            r.genotype.digest(),
        ])
        .map_err(csv_err)?;
    }
    out.push_str(&String::from_utf8(finish(w)?).expect("csv of ASCII fields"));
    Ok(out.into_bytes())
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "train_loss", "train_err", "test_loss", "test_err"]).map_err(csv_err)?;
    for m in rows {
        w.write_record([
            m.epoch.to_string(),
            m.train_loss.to_string(),
            m.train_err.to_string(),
            m.test_loss.to_string(),
            m.test_err.to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub genotype_digest: String,
    pub seed: u64,
    pub epochs: usize,
    pub final_test_error: f64,
    pub final_test_loss: f64,
    pub params: usize,
    /// Multiply-accumulates per image.
    pub macs: u64,
}

impl Summary {
    pub fn new(m: &Metrics, genotype_digest: String, seed: u64) -> Self {
        Summary {
            genotype_digest,
            seed,
            epochs: m.epochs.len(),
            final_test_error: m.final_test_error,
            final_test_loss: m.epochs.last().map_or(f64::NAN, |e| e.test_loss),
            params: m.params,
            macs: m.macs,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub genotype_digest: String,
    pub samples: usize,
    pub test_loss: f64,
    pub test_error: f64,
}

pub fn json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s.into_bytes()
}
