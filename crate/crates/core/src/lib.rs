//! Domain generalization by aligning class-conditional posteriors across
//! source domains, with representation-alignment baselines, synthetic
//! rotated-domain suites, a hold-one-domain-out harness and invariance
//! diagnostics.

pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod losses;
pub mod models;
pub mod optim;

pub use error::{HirError, Result};
