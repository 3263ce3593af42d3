//! Multi-source domain generalization for motor-imagery EEG.
//!
//! The library learns a shared feature extractor plus per-domain branches by
//! jointly minimizing a classification loss, a marginal distribution
//! discrepancy (kernel MMD to the pooled mixture), and a conditional
//! class-geometry discrepancy across source domains. Unseen-domain trials are
//! classified by fusing branch outputs with learned domain weights.

pub mod baselines;
pub mod config;
pub mod error;
pub mod export;
pub mod formats;
pub mod linalg;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod signal;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
