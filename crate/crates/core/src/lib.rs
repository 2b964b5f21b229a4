//! Sharpness-aware minimization under label noise, at desk scale.
//!
//! The crate implements six update rules (SGD, naive SAM, per-example 1-SAM,
//! the logit-only and Jacobian-only hybrids, and explicitly regularized SGD)
//! over linear models, two-layer deep linear networks, and small ReLU MLPs,
//! with closed-form per-example gradient decompositions, the toy Gaussian
//! label-noise distribution, stratified clean/noisy metrics, and a
//! brute-force oracle suite that validates every analytic path.
//!
//! Entry points:
//! * [`synthdata`] — dataset generation, corruption, IDX/CIFAR/SNLD readers.
//! * [`models`] — forward passes, gradient decomposition, perturbation.
//! * [`optim`] — the update rules.
//! * [`metrics`] — traces, ratios, the closed-form toy accuracy, CSV.
//! * [`oracle`] — independent reference checks.
//! * [`runner`] — config-driven experiments and sweeps.

pub mod error;
pub mod math;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod runner;
pub mod runtime;
pub mod synthdata;

pub use error::{Error, Result};
