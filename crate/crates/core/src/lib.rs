//! Adversarial finetuning of adversarial-example detectors.
//!
//! The crate bundles everything needed to reproduce the detector-hardening
//! experiment at desk scale:
//!
//! * [`diff`]: `f64` tensors with a reverse-mode tape (gradients w.r.t.
//!   parameters and inputs).
//! * [`nets`]: compact CNN classifiers and sigmoid-headed detectors, plus
//!   the `RDR1` checkpoint format.
//! * [`attacks`]: L∞ PGD against the classifier and the two adaptive
//!   attacks (selective and orthogonal PGD) against classifier + detector.
//! * [`train`]: clean classifier training, PGD detector training and the
//!   adversarial detector finetuning loop.
//! * [`metrics`]: accuracy, ROC-AUC, SR@N and report rendering.
//! * [`data`]: CIFAR-10 binary loader, seeded synthetic dataset, splits.
//! * [`config`] / [`pipeline`]: the experiment runner behind the `radar` CLI.

pub mod attacks;
pub mod config;
pub mod data;
pub mod diff;
mod error;
pub mod metrics;
pub mod nets;
pub mod pipeline;
pub mod train;

pub use error::{Error, Result};
