//! Inverse-propensity pseudo-outcomes.
//!
//! For a randomized sample (x, t, y) with treatment probability pi(x), the
//! transform y~ = (t - pi(x)) / (pi(x)(1 - pi(x))) * y has conditional mean
//! equal to the CATE regardless of confounding in the outcome model, at the
//! price of a heteroscedastic, treatment-dependent error. The task
//! coefficients returned here encode exactly that error structure and are
//! what the multitask kernel consumes.

use crate::data::{DataError, Dataset, Environment, ObservationalModel, PropensityModel};
use ndarray::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PseudoError {
    #[error("ipw transform requires an experimental dataset, got {found}")]
    WrongEnvironment { found: Environment },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// One transformed sample: the pseudo-outcome and its residual against the
/// observational effect-gap estimate (the quantity the GP regresses).
#[derive(Debug, Clone)]
pub struct PseudoSample {
    pub covariates: Array1<f64>,
    pub treatment: u8,
    pub pseudo_y: f64,
    pub target_residual: f64,
}

/// IPW weight (t - pi) / (pi (1 - pi)); the pseudo-outcome is weight * y.
pub fn ipw_weight(t: u8, pi: f64) -> f64 {
    (t as f64 - pi) / (pi * (1.0 - pi))
}

/// The confound carried by each arm's pseudo-outcome mean:
/// phi(x) = (1 - pi) mu(x,1) + pi mu(x,0), so that
/// weight(t) * mu(x,t) = [mu(x,1) - mu(x,0)] + weight(t) * phi(x).
pub fn confounding_gap(pi: f64, mu0: f64, mu1: f64) -> f64 {
    (1.0 - pi) * mu1 + pi * mu0
}

/// Per-task mixing coefficients for tasks (arm 0, arm 1, effect):
/// a multiplies the shared effect process, b the confound process.
pub fn task_coefficients(pi: f64) -> (
    [f64; 3],
    [f64; 3],
) {
    let a = [1.0, 1.0, 1.0];
    let b = [ipw_weight(0, pi), ipw_weight(1, pi), 0.0];
    (a, b)
}

/// Applies the IPW transform to every experimental row and subtracts the
/// observational adjustment.
pub fn ipw_transform(
    experimental: &Dataset,
    propensity: &PropensityModel,
    omega: &ObservationalModel,
) -> Result<Vec<PseudoSample>, PseudoError> {
    if experimental.environment() != Environment::Experimental {
        return Err(PseudoError::WrongEnvironment {
            found: experimental.environment(),
        });
    }
    let mut samples = Vec::with_capacity(experimental.n());
    for i in 0..experimental.n() {
        let x = experimental.covariate_row(i);
        let t = experimental.treatments()[i];
        let pi = propensity.propensity(x)?;
        let pseudo_y = ipw_weight(t, pi) * experimental.outcomes()[i];
        let target_residual = pseudo_y - omega.predict_gap(x);
        samples.push(PseudoSample {
            covariates: x.to_owned(),
            treatment: t,
            pseudo_y,
            target_residual,
        });
    }
    Ok(samples)
}
