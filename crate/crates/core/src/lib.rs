//! Variational continual learning with Fisher-weighted mean and asymmetric
//! variance regularization, plus the baselines and harness needed to compare
//! it against VCL, EVCL, EWC and coreset methods.

pub mod bayes_mlp;
pub mod continual;
pub mod data;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod objectives;
pub mod verify;

pub use error::{Error, Result};
