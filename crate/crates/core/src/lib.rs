//! Latent-variable sequence modeling at desk scale.
//!
//! Exact and approximate marginalization over discrete latent structure,
//! stochastic-gradient estimators, pointer/copy mixtures and a small neural
//! segmental data-to-text model with constrained decoding. Everything is
//! checked against brute-force oracles and finite differences.

mod error;

pub mod cli;
pub mod dists;
pub mod estimators;
pub mod lattice;
pub mod ndgrad;
pub mod pointer;
pub mod segmodel;
pub mod trainers;

pub use error::{Error, Result};

/// Version string recorded in run manifests and checkpoints.
pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));
