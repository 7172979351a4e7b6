//! Lipschitz-constrained residual networks with deterministic l2 robustness
//! certificates.
//!
//! The crate trains LiResNet, plain ConvNet and conventional ResNet
//! classifiers with margin-based robust losses, bounds their global Lipschitz
//! constants by power iteration, and certifies predictions with an abstaining
//! `bottom` class. Independent oracles (materialized operators, attacks,
//! finite differences) live in [`oracle`].

pub mod cli;
pub mod config;
pub mod datasets;
pub mod error;
pub mod gloro;
pub mod lipschitz;
pub mod network;
pub mod oracle;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
