//! Debiasing observational treatment-effect estimates with experimental data.
//!
//! The pipeline: an observational study supplies a (possibly confounded)
//! effect-gap estimate; a small randomized experiment supplies unconfounded
//! but noisy pseudo-outcomes; a multitask GP regresses the pseudo-outcomes
//! onto the gap between the two, yielding a debiased CATE posterior with
//! credible intervals and optional uniform error bands.

pub mod bounds;
pub mod data;
pub mod gp;
pub mod hardness;
pub mod kernels;
pub mod numerics;
pub mod pseudo_outcome;
pub mod runner;
pub mod simulate;
