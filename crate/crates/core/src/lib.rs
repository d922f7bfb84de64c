//! Core of the factorized architecture-search engine.
//!
//! Everything here is `no_std` + `alloc`: the tensor and autodiff engine, the
//! activation and regular operator groups, the super-network, the tri-level
//! optimizer, genotype derivation and the retraining harness. File formats and
//! the command line live in the `factornas` crate.
#![no_std]
extern crate alloc;

pub mod activations;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Mode, Var};
pub use params::{Group, ParamId, ParamKey, ParamStore};
pub use tensor::Tensor;
pub mod data;
pub mod evaluator;
pub mod genotype;
pub mod nn;
pub mod optim;
pub mod search;
pub mod space;
pub mod supernet;
