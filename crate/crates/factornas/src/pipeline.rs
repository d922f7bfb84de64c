//! Datasets and search runs as a config describes them.

use factornas_core::data::{split_dataset, synth_generate, Dataset};
use factornas_core::search::SearchRun;
use factornas_core::supernet::SuperNetConfig;

use crate::checkpoint::search_mode;
use crate::config::{DataSource, RunConfig};
use crate::error::{Error, Result};
use crate::formats::{load_cifar_binary, load_cifar_test, load_idx};

fn hold_out(data: &Dataset, cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let f = cfg.data.test_fraction;
    if f <= 0.0 {
        return Err(Error::Usage("data.test_fraction must be positive when the source has no test set".into()));
    }
    let (train, test) = split_dataset(data, (1.0 - f, f), cfg.data.synth.seed)?;
    Ok((train, test))
}

/// Training and test sets before standardization.
pub fn load_raw(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    let need = |p: &Option<std::path::PathBuf>, key: &str| {
        p.clone().ok_or_else(|| Error::Usage(format!("data.source = {} needs `{key}`", d.source.name())))
    };
    match d.source {
        DataSource::Synth => hold_out(&synth_generate(&d.synth)?, cfg),
        DataSource::Idx => {
            let train =
                load_idx(&need(&d.train_images, "data.train_images")?, &need(&d.train_labels, "data.train_labels")?, d.synth.classes)?;
            match (&d.test_images, &d.test_labels) {
                (Some(i), Some(l)) => Ok((train, load_idx(i, l, d.synth.classes)?)),
                _ => hold_out(&train, cfg),
            }
        }
        DataSource::Cifar => {
            let dir = need(&d.dir, "data.dir")?;
            Ok((load_cifar_binary(&dir)?, load_cifar_test(&dir)?))
        }
    }
}

/// Training and test sets, both standardized with training statistics.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (mut train, mut test) = load_raw(cfg)?;
    let stats = train.channel_stats();
    train.standardize(&stats)?;
    test.standardize(&stats)?;
    Ok((train, test))
}

/// The two search halves of the training set.
pub fn search_splits(cfg: &RunConfig, train: &Dataset) -> Result<(Dataset, Dataset)> {
    let s = &cfg.search;
    Ok(split_dataset(train, (s.train_fraction, s.val_fraction), cfg.seed)?)
}

pub fn new_search_run(cfg: &RunConfig, data: &Dataset) -> Result<SearchRun> {
    let [c, _, _] = data.image_shape();
    let net = SuperNetConfig { in_channels: c, num_classes: data.classes, ..cfg.supernet };
    let mut search = cfg.search_config();
    search.mode = search_mode(cfg)?;
    Ok(SearchRun::new(cfg.space.clone(), net, search)?)
}
