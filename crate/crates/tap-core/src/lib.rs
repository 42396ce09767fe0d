//! Active tabular augmentation with policy-guided diffusion inpainting.
//!
//! The crate implements the full augmentation loop at desk scale: a compact
//! learner state conditions a stochastic policy over generation controls, a
//! Gaussian DDPM inpaints candidates around real anchors, hard feasibility
//! gates filter them, cross-validated plug-in utility scores admitted pools,
//! preference feedback updates the policy against a conservative reference,
//! and a windowed commitment rule with a calibrated error bar decides when a
//! pool joins the training set.
//!
//! Companion modules provide the reference injection mechanisms (global
//! sampling, random and hard inpainting, SMOTE), post-hoc diagnostics
//! (boundary/consistency scores, bucketed injection, tail risk, first-order
//! influence), bundled synthetic tasks, and the downstream evaluation
//! protocol used by the CLI.

pub mod error;
pub mod rng;
pub mod table;
pub mod encode;
pub mod nn;
pub mod diffusion;
pub mod eval;
pub mod gates;
pub mod policy;
pub mod controller;
pub mod trace;
pub mod baselines;
pub mod diagnostics;
pub mod datasets;
pub mod metrics;
pub mod config;
pub mod harness;

pub use error::{Result, TapError};
