//! A small laboratory for consistency regularization on semantic-sharing
//! pairs, built around synthetic causal-latent domain families where the
//! Bayes-optimal target loss is computable exactly.
//!
//! - [`cld_gen`]: families, domains, sampling, SS pairs and the Bayes oracle.
//! - [`model`]: MLP feature extractor plus bias-free linear head with exact gradients.
//! - [`regularizers`]: KL, JS, LM, FM, TPM, TLM, LAM and group-variance penalties.
//! - [`trainer`]: two-stream SGD, ERM / ERM+DA / CR methods, LP-FT, λ tuning.
//! - [`evaluator`]: accuracy, macro-F1, invariance score, head histograms, regret.
//! - [`experiment`]: benchmark files, run records, sweeps and reports.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cld_gen;
pub mod error;
pub mod evaluator;
pub mod experiment;
pub mod json;
pub mod linalg;
pub mod model;
pub mod regularizers;
pub mod rng;
pub mod trainer;

pub use error::{LabError, Result};
