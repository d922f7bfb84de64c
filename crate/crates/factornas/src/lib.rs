//! File formats, dataset loaders and the command-line driver for `factornas-core`.

pub mod artifacts;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod container;
pub mod error;
pub mod formats;
pub mod io;
pub mod pipeline;

pub use error::{Error, Result};
