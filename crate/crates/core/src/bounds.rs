//! Uniform high-probability error bands for the effect estimate: on a
//! compact support box the posterior error is bounded everywhere at once by
//! B(x) = sqrt(beta(tau)) * sigma(x) + gamma(tau), where beta comes from a
//! covering argument and gamma collects the Lipschitz and
//! modulus-of-continuity slack of moving within a covering cell.

use crate::data::{
    covering_number_hypercube, log_covering_number_hypercube, DataError, ObservationalModel,
    SupportBox,
};
use crate::gp::{self, GpError, PosteriorState, Z_95};
use crate::numerics::{self, NumericsError, SpdMatrix};
use ndarray::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Seed for the fallback Lipschitz heuristic so default bands are
/// reproducible across runs.
pub const DEFAULT_L_F_SEED: u64 = 0x42_4F_55_4E_44;

#[derive(Debug, Error)]
pub enum BoundError {
    #[error("delta must lie in (0, 1), got {delta}")]
    InvalidDelta { delta: f64 },
    #[error("covering radius must be positive and finite, got {tau}")]
    InvalidTau { tau: f64 },
    #[error("query point {index} lies outside the support box")]
    QueryOutsideSupport { index: usize },
    #[error("query dimension {got} does not match the support box dimension {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error(
        "the coregionalization variant has no single effect-task kernel, so its Lipschitz \
         constants are unavailable; uniform bands apply to the naive and fixed-coefficient models"
    )]
    UnsupportedVariant,
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Inputs to [`uniform_band`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundConfig {
    /// Failure probability: the band holds everywhere with probability at
    /// least 1 - delta.
    pub delta: f64,
    /// Covering radius; `None` picks one by minimizing the mean band width
    /// over the query points.
    pub tau_radius: Option<f64>,
    /// The region the guarantee covers.
    pub support_box: SupportBox,
    /// Lipschitz constant of the target function; `None` falls back to an
    /// empirical prior-sample heuristic.
    pub l_f: Option<f64>,
}

impl BoundConfig {
    pub fn new(delta: f64, support_box: SupportBox) -> Result<Self, BoundError> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(BoundError::InvalidDelta { delta });
        }
        Ok(Self {
            delta,
            tau_radius: None,
            support_box,
            l_f: None,
        })
    }
}

/// One banded query point, serialized as the flat row `[x..., half_width]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct BandPoint {
    pub x: Vec<f64>,
    pub half_width: f64,
}

impl TryFrom<Vec<f64>> for BandPoint {
    type Error = String;

    fn try_from(row: Vec<f64>) -> Result<Self, String> {
        if row.len() < 2 {
            return Err(format!(
                "a band row needs at least one coordinate and a half-width, got {} values",
                row.len()
            ));
        }
        let (x, w) = row.split_at(row.len() - 1);
        Ok(Self {
            x: x.to_vec(),
            half_width: w[0],
        })
    }
}

impl From<BandPoint> for Vec<f64> {
    fn from(p: BandPoint) -> Vec<f64> {
        let mut row = p.x;
        row.push(p.half_width);
        row
    }
}

/// Everything needed to reconstruct and audit a uniform band.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UniformBoundReport {
    pub delta: f64,
    pub tau: f64,
    pub beta: f64,
    /// Covering number of the support box at radius tau; `None` when it
    /// overflows u64 (high dimension), in which case `log_covering` still
    /// carries the value actually used.
    pub covering: Option<u64>,
    pub log_covering: f64,
    pub l_k: f64,
    pub l_nu: f64,
    pub l_f: f64,
    pub omega_sigma: f64,
    pub gamma: f64,
    pub per_point: Vec<BandPoint>,
}

/// beta(tau) = 2 log(M(tau, X) / delta), taken in log space so enormous
/// covering numbers stay finite.
pub fn beta_value(log_covering: f64, delta: f64) -> f64 {
    2.0 * (log_covering - delta.ln())
}

/// Lipschitz bound on the posterior mean of the effect task:
/// L_k sqrt(n) ||alpha||.
pub fn posterior_mean_lipschitz(state: &PosteriorState) -> Result<f64, BoundError> {
    let model = state.model();
    let k = model
        .kernel()
        .cate_component()
        .ok_or(BoundError::UnsupportedVariant)?;
    let n = model.n() as f64;
    let alpha_norm = state.alpha().dot(state.alpha()).sqrt();
    Ok(k.lipschitz() * n.sqrt() * alpha_norm)
}

/// Modulus-of-continuity bound on the posterior standard deviation:
/// sqrt(2 tau L_k (1 + n ||(M + Sigma)^-1|| sup k)).
pub fn modulus_of_continuity(state: &PosteriorState, tau: f64) -> Result<f64, BoundError> {
    let k = state
        .model()
        .kernel()
        .cate_component()
        .ok_or(BoundError::UnsupportedVariant)?;
    modulus_from_inner(modulus_inner(state)?, k.lipschitz(), tau)
}

/// The tau-independent factor of the modulus, 1 + n ||(M + Sigma)^-1|| sup k.
/// Computed once per band because the eigensolve is the expensive part.
fn modulus_inner(state: &PosteriorState) -> Result<f64, BoundError> {
    let model = state.model();
    let k = model
        .kernel()
        .cate_component()
        .ok_or(BoundError::UnsupportedVariant)?;
    if model.n() == 0 {
        return Ok(1.0);
    }
    // the posterior spectrum clusters at the noise floor, so successive
    // power-iteration values stall below ~1e-6 relative change long
    // before the cluster direction resolves; tighter tolerances hit the
    // iteration cap without changing the value
    let lambda_min = state.factor().smallest_eigenvalue(1e-6)?;
    Ok(1.0 + model.n() as f64 * (1.0 / lambda_min) * k.eval_sq_dist(0.0))
}

fn modulus_from_inner(inner: f64, l_k: f64, tau: f64) -> Result<f64, BoundError> {
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(BoundError::InvalidTau { tau });
    }
    Ok((2.0 * tau * l_k * inner).sqrt())
}

/// Empirical stand-in for the target's Lipschitz constant: the largest
/// difference quotient seen across three prior draws on a scattered grid.
pub fn default_l_f(
    state: &PosteriorState,
    support: &SupportBox,
    seed: u64,
) -> Result<f64, BoundError> {
    let k = state
        .model()
        .kernel()
        .cate_component()
        .ok_or(BoundError::UnsupportedVariant)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = 200usize;
    let d = support.dim();
    let mut xs = Array2::zeros((m, d));
    for i in 0..m {
        for j in 0..d {
            xs[[i, j]] = rng.random_range(support.lo[j]..=support.hi[j]);
        }
    }
    let mut gram = Array2::zeros((m, m));
    for i in 0..m {
        for j in i..m {
            let v = k.eval(xs.row(i), xs.row(j));
            gram[[i, j]] = v;
            gram[[j, i]] = v;
        }
    }
    let gram = SpdMatrix::new(gram)?;
    let factor = numerics::cholesky(&gram, &numerics::default_jitter_schedule(&gram))?;
    let mut best: f64 = 0.0;
    for _ in 0..3 {
        let z: Array1<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        let f = factor.lower().dot(&z);
        for i in 0..m {
            for j in (i + 1)..m {
                let dist = (&xs.row(i) - &xs.row(j)).mapv(|v| v * v).sum().sqrt();
                if dist > 0.0 {
                    best = best.max((f[i] - f[j]).abs() / dist);
                }
            }
        }
    }
    Ok(best)
}

struct BandTerms {
    beta: f64,
    log_covering: f64,
    omega_sigma: f64,
    gamma: f64,
}

struct BandInputs {
    inner: f64,
    l_k: f64,
    l_nu: f64,
    l_f: f64,
}

fn band_terms(
    inputs: &BandInputs,
    side_lengths: &[f64],
    delta: f64,
    tau: f64,
) -> Result<BandTerms, BoundError> {
    let log_covering = log_covering_number_hypercube(side_lengths, tau)?;
    let beta = beta_value(log_covering, delta);
    let omega_sigma = modulus_from_inner(inputs.inner, inputs.l_k, tau)?;
    let gamma = (inputs.l_nu + inputs.l_f) * tau + beta.sqrt() * omega_sigma;
    Ok(BandTerms {
        beta,
        log_covering,
        omega_sigma,
        gamma,
    })
}

/// Uniform half-widths over the query points: with probability at least
/// 1 - delta, the true effect lies within B(x) of the posterior mean for
/// every x in the support box simultaneously.
pub fn uniform_band(
    state: &PosteriorState,
    obs_model: &ObservationalModel,
    cfg: &BoundConfig,
    query: &Array2<f64>,
) -> Result<UniformBoundReport, BoundError> {
    if !(cfg.delta > 0.0 && cfg.delta < 1.0) {
        return Err(BoundError::InvalidDelta { delta: cfg.delta });
    }
    let support = &cfg.support_box;
    if query.ncols() != support.dim() {
        return Err(BoundError::DimMismatch {
            expected: support.dim(),
            got: query.ncols(),
        });
    }
    for (index, x) in query.rows().into_iter().enumerate() {
        if !support.contains(x) {
            return Err(BoundError::QueryOutsideSupport { index });
        }
    }
    if let Some(tau) = cfg.tau_radius {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(BoundError::InvalidTau { tau });
        }
    }

    let k = state
        .model()
        .kernel()
        .cate_component()
        .ok_or(BoundError::UnsupportedVariant)?;
    let inputs = BandInputs {
        inner: modulus_inner(state)?,
        l_k: k.lipschitz(),
        l_nu: posterior_mean_lipschitz(state)?,
        l_f: match cfg.l_f {
            Some(v) => v,
            None => default_l_f(state, support, DEFAULT_L_F_SEED)?,
        },
    };

    let stds: Vec<f64> = gp::predict_batch(state, obs_model, query, Z_95)?
        .into_iter()
        .map(|p| p.std)
        .collect();
    let mean_std = if stds.is_empty() {
        0.0
    } else {
        stds.iter().sum::<f64>() / stds.len() as f64
    };
    let side_lengths = support.side_lengths();

    let tau = match cfg.tau_radius {
        Some(tau) => tau,
        None => {
            let diameter = support.diameter().max(f64::MIN_POSITIVE);
            let objective = |log_tau: f64| -> f64 {
                match band_terms(&inputs, &side_lengths, cfg.delta, log_tau.exp()) {
                    Ok(t) => t.beta.sqrt() * mean_std + t.gamma,
                    Err(_) => f64::INFINITY,
                }
            };
            golden_section_min(objective, (diameter / 1e3).ln(), diameter.ln()).exp()
        }
    };

    let terms = band_terms(&inputs, &side_lengths, cfg.delta, tau)?;
    let sqrt_beta = terms.beta.sqrt();
    let per_point = query
        .rows()
        .into_iter()
        .zip(&stds)
        .map(|(x, &std)| BandPoint {
            x: x.to_vec(),
            half_width: sqrt_beta * std + terms.gamma,
        })
        .collect();

    Ok(UniformBoundReport {
        delta: cfg.delta,
        tau,
        beta: terms.beta,
        covering: covering_number_hypercube(&side_lengths, tau).ok(),
        log_covering: terms.log_covering,
        l_k: inputs.l_k,
        l_nu: inputs.l_nu,
        l_f: inputs.l_f,
        omega_sigma: terms.omega_sigma,
        gamma: terms.gamma,
        per_point,
    })
}

fn golden_section_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..200 {
        if (b - a).abs() < 1e-8 {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PropensityModel;
    use crate::gp::GpModel;
    use crate::kernels::{gram_matrix, MultitaskKernel, NoiseParams, SeKernel, CATE_TASK};
    use approx::assert_abs_diff_eq;

    fn pseudo_fixed_kernel(s_k: f64, l_k: f64) -> MultitaskKernel {
        MultitaskKernel::PseudoFixed {
            k: SeKernel::new(s_k, l_k).unwrap(),
            l: SeKernel::new(0.7, 1.1).unwrap(),
            propensity: PropensityModel::constant(0.5, 0.01).unwrap(),
        }
    }

    fn toy_state(n: usize) -> PosteriorState {
        let mut xs = Array2::zeros((n, 1));
        let mut tasks = Vec::new();
        let mut y = Array1::zeros(n);
        for i in 0..n {
            xs[[i, 0]] = -1.0 + 2.0 * i as f64 / (n.max(2) - 1) as f64;
            tasks.push(i % 2);
            y[i] = (3.0 * xs[[i, 0]]).sin();
        }
        let model = GpModel::new(
            pseudo_fixed_kernel(1.0, 0.6),
            NoiseParams::new(0.4, 0.4).unwrap(),
            xs,
            tasks,
            y,
        )
        .unwrap();
        gp::posterior(&model).unwrap()
    }

    #[test]
    fn zero_targets_give_zero_mean_lipschitz() {
        let model = GpModel::new(
            pseudo_fixed_kernel(1.0, 1.0),
            NoiseParams::new(0.5, 0.5).unwrap(),
            array![[0.0], [0.5]],
            vec![0, 1],
            array![0.0, 0.0],
        )
        .unwrap();
        let state = gp::posterior(&model).unwrap();
        assert_eq!(posterior_mean_lipschitz(&state).unwrap(), 0.0);
    }

    #[test]
    fn scalar_mean_lipschitz_matches_hand_computation() {
        let model = GpModel::new(
            MultitaskKernel::Naive {
                k: SeKernel::new(1.0, 1.0).unwrap(),
            },
            NoiseParams::tied(0.5).unwrap(),
            array![[0.0]],
            vec![0],
            array![1.5],
        )
        .unwrap();
        let state = gp::posterior(&model).unwrap();
        // alpha = 1.5 / 1.25, L_k = e^{-1/2}
        let expected = (-0.5_f64).exp() * (1.5 / 1.25);
        assert_abs_diff_eq!(
            posterior_mean_lipschitz(&state).unwrap(),
            expected,
            epsilon = 1e-12
        );
    }

    #[test]
    fn mean_lipschitz_dominates_empirical_difference_quotients() {
        let state = toy_state(14);
        let bound = posterior_mean_lipschitz(&state).unwrap();
        let omega = ObservationalModel::zero();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst: f64 = 0.0;
        for _ in 0..10_000 {
            let a: Array1<f64> = array![rng.random_range(-1.0..1.0)];
            let b: Array1<f64> = array![rng.random_range(-1.0..1.0)];
            let dist = (a[0] - b[0]).abs();
            if dist < 1e-9 {
                continue;
            }
            let pa = gp::predict(&state, &omega, a.view(), Z_95).unwrap();
            let pb = gp::predict(&state, &omega, b.view(), Z_95).unwrap();
            worst = worst.max((pa.mean_gap - pb.mean_gap).abs() / dist);
        }
        assert!(worst <= bound, "empirical {worst} exceeds bound {bound}");
    }

    #[test]
    fn modulus_is_zero_at_zero_radius_and_prior_reduces_to_sqrt_term() {
        let state = toy_state(10);
        assert_eq!(modulus_of_continuity(&state, 0.0).unwrap(), 0.0);

        let empty = GpModel::new(
            pseudo_fixed_kernel(1.3, 0.8),
            NoiseParams::new(0.5, 0.5).unwrap(),
            Array2::zeros((0, 1)),
            vec![],
            Array1::zeros(0),
        )
        .unwrap();
        let prior = gp::posterior(&empty).unwrap();
        let l_k = SeKernel::new(1.3, 0.8).unwrap().lipschitz();
        let tau = 0.37;
        assert_abs_diff_eq!(
            modulus_of_continuity(&prior, tau).unwrap(),
            (2.0 * tau * l_k).sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn modulus_dominates_empirical_std_differences() {
        let state = toy_state(12);
        let tau = 0.25;
        let bound = modulus_of_continuity(&state, tau).unwrap();
        let omega = ObservationalModel::zero();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for _ in 0..3000 {
            let a = rng.random_range(-1.0..1.0);
            let shift = rng.random_range(-tau..tau);
            let b = (a + shift).clamp(-1.0, 1.0);
            let pa = gp::predict(&state, &omega, array![a].view(), Z_95).unwrap();
            let pb = gp::predict(&state, &omega, array![b].view(), Z_95).unwrap();
            worst = worst.max((pa.std - pb.std).abs());
        }
        assert!(worst <= bound, "empirical {worst} exceeds bound {bound}");
    }

    #[test]
    fn beta_formula_matches_hand_arithmetic() {
        // degenerate delta = 1 leaves 2 log M
        let m = 5.0_f64;
        assert_abs_diff_eq!(beta_value(m.ln(), 1.0), 2.0 * m.ln(), epsilon = 1e-12);
        // d=1, box length 2, tau=1 -> covering 3; delta 0.1 -> 2 log 30
        let log_cov = log_covering_number_hypercube(&[2.0], 1.0).unwrap();
        assert_abs_diff_eq!(
            beta_value(log_cov, 0.1),
            2.0 * 30.0_f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn report_carries_hand_checked_covering_and_beta() {
        let state = toy_state(8);
        let cfg = BoundConfig {
            delta: 0.1,
            tau_radius: Some(1.0),
            support_box: SupportBox::cube(-1.0, 1.0, 1).unwrap(),
            l_f: Some(2.0),
        };
        let query = array![[0.0], [0.5]];
        let report = uniform_band(&state, &ObservationalModel::zero(), &cfg, &query).unwrap();
        assert_eq!(report.covering, Some(3));
        assert_abs_diff_eq!(report.beta, 2.0 * 30.0_f64.ln(), epsilon = 1e-12);
        assert_eq!(report.per_point.len(), 2);
        for p in &report.per_point {
            assert!(p.half_width >= report.beta.sqrt() * 0.0);
        }
        // B(x) >= sqrt(beta) sigma(x) because gamma >= 0
        let preds =
            gp::predict_batch(&state, &ObservationalModel::zero(), &query, Z_95).unwrap();
        for (p, pred) in report.per_point.iter().zip(&preds) {
            assert!(p.half_width >= report.beta.sqrt() * pred.std - 1e-12);
        }
        assert!(report.gamma >= 0.0);
        assert_abs_diff_eq!(
            report.gamma,
            (report.l_nu + report.l_f) * report.tau
                + report.beta.sqrt() * report.omega_sigma,
            epsilon = 1e-12
        );
    }

    #[test]
    fn band_shrinks_as_delta_grows() {
        let state = toy_state(8);
        let query = array![[0.25]];
        let mut widths = Vec::new();
        for delta in [0.05, 0.1, 0.3] {
            let cfg = BoundConfig {
                delta,
                tau_radius: Some(0.5),
                support_box: SupportBox::cube(-1.0, 1.0, 1).unwrap(),
                l_f: Some(1.0),
            };
            let report =
                uniform_band(&state, &ObservationalModel::zero(), &cfg, &query).unwrap();
            widths.push(report.per_point[0].half_width);
        }
        assert!(widths[0] > widths[1] && widths[1] > widths[2]);
    }

    #[test]
    fn omega_contribution_scales_as_sqrt_tau() {
        let state = toy_state(10);
        let mut tau = 0.8;
        let mut ratios = Vec::new();
        for _ in 0..6 {
            let w = modulus_of_continuity(&state, tau).unwrap();
            ratios.push(w / tau.sqrt());
            tau *= 0.5;
        }
        for pair in ratios.windows(2) {
            assert_abs_diff_eq!(pair[0], pair[1], epsilon = 1e-9);
        }
    }

    #[test]
    fn out_of_support_query_is_rejected() {
        let state = toy_state(6);
        let cfg = BoundConfig {
            delta: 0.1,
            tau_radius: Some(0.5),
            support_box: SupportBox::cube(-1.0, 1.0, 1).unwrap(),
            l_f: Some(1.0),
        };
        let err = uniform_band(
            &state,
            &ObservationalModel::zero(),
            &cfg,
            &array![[0.0], [1.5]],
        )
        .unwrap_err();
        assert!(matches!(err, BoundError::QueryOutsideSupport { index: 1 }));
    }

    #[test]
    fn coregionalization_variant_is_rejected() {
        use crate::kernels::CoregMatrix;
        let model = GpModel::new(
            MultitaskKernel::LcmTrainable {
                k: SeKernel::new(1.0, 1.0).unwrap(),
                l: SeKernel::new(1.0, 1.0).unwrap(),
                a_k: CoregMatrix::identity(),
                a_l: CoregMatrix::identity(),
            },
            NoiseParams::new(0.5, 0.5).unwrap(),
            array![[0.0], [1.0]],
            vec![0, 1],
            array![0.1, -0.2],
        )
        .unwrap();
        let state = gp::posterior(&model).unwrap();
        assert!(matches!(
            posterior_mean_lipschitz(&state),
            Err(BoundError::UnsupportedVariant)
        ));
    }

    #[test]
    fn default_tau_stays_in_bracket_and_is_deterministic() {
        let state = toy_state(10);
        let cfg = BoundConfig {
            delta: 0.1,
            tau_radius: None,
            support_box: SupportBox::cube(-1.0, 1.0, 1).unwrap(),
            l_f: Some(1.5),
        };
        let query = array![[0.0], [-0.5], [0.5]];
        let r1 = uniform_band(&state, &ObservationalModel::zero(), &cfg, &query).unwrap();
        let r2 = uniform_band(&state, &ObservationalModel::zero(), &cfg, &query).unwrap();
        let diameter = 2.0;
        assert!(r1.tau >= diameter / 1e3 - 1e-12 && r1.tau <= diameter + 1e-12);
        assert_eq!(r1.tau.to_bits(), r2.tau.to_bits());
        assert_eq!(
            r1.per_point[0].half_width.to_bits(),
            r2.per_point[0].half_width.to_bits()
        );
    }

    #[test]
    fn report_round_trips_through_json_with_flat_band_rows() {
        let state = toy_state(6);
        let cfg = BoundConfig {
            delta: 0.2,
            tau_radius: Some(0.4),
            support_box: SupportBox::cube(-1.0, 1.0, 1).unwrap(),
            l_f: Some(1.0),
        };
        let report = uniform_band(
            &state,
            &ObservationalModel::zero(),
            &cfg,
            &array![[0.3]],
        )
        .unwrap();
        let json = serde_json::to_value(&report).unwrap();
        let row = json["per_point"][0].as_array().unwrap();
        assert_eq!(row.len(), 2);
        assert_abs_diff_eq!(row[0].as_f64().unwrap(), 0.3, epsilon = 1e-15);
        let back: UniformBoundReport = serde_json::from_value(json).unwrap();
        assert_eq!(back.per_point, report.per_point);
    }

    /// Bands built from the correct prior cover a prior-drawn truth on a
    /// dense grid in at least 1 - delta of replications.
    #[test]
    fn empirical_whole_function_coverage_meets_level() {
        let delta = 0.1;
        let reps = 25;
        let n = 24;
        let grid_m = 40;
        let kernel = pseudo_fixed_kernel(1.0, 0.7);
        let noise = NoiseParams::new(0.3, 0.3).unwrap();
        let omega = ObservationalModel::zero();
        let cfg = BoundConfig {
            delta,
            tau_radius: None,
            support_box: SupportBox::cube(-1.0, 1.0, 1).unwrap(),
            l_f: None,
        };
        let mut covered = 0;
        for rep in 0..reps {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + rep);
            let mut xs = Array2::zeros((n + grid_m, 1));
            let mut tasks = Vec::new();
            for i in 0..n {
                xs[[i, 0]] = rng.random_range(-1.0..1.0);
                tasks.push(i % 2);
            }
            for g in 0..grid_m {
                xs[[n + g, 0]] = -1.0 + 2.0 * g as f64 / (grid_m - 1) as f64;
                tasks.push(CATE_TASK);
            }
            let gram = gram_matrix(&kernel, &xs, &tasks, None).unwrap();
            let factor =
                numerics::cholesky(&gram, &numerics::default_jitter_schedule(&gram)).unwrap();
            let z: Array1<f64> = (0..n + grid_m).map(|_| rng.sample(StandardNormal)).collect();
            let f = factor.lower().dot(&z);
            let mut y = Array1::zeros(n);
            for i in 0..n {
                let eps: f64 = rng.sample(StandardNormal);
                y[i] = f[i] + 0.3 * eps;
            }
            let model = GpModel::new(
                kernel.clone(),
                noise.clone(),
                xs.slice(s![..n, ..]).to_owned(),
                tasks[..n].to_vec(),
                y,
            )
            .unwrap();
            let state = gp::posterior(&model).unwrap();
            let grid = xs.slice(s![n.., ..]).to_owned();
            let report = uniform_band(&state, &omega, &cfg, &grid).unwrap();
            let preds = gp::predict_batch(&state, &omega, &grid, Z_95).unwrap();
            let ok = report
                .per_point
                .iter()
                .zip(&preds)
                .enumerate()
                .all(|(g, (p, pred))| {
                    (pred.mean_gap - f[n + g]).abs() <= p.half_width
                });
            if ok {
                covered += 1;
            }
        }
        let frac = covered as f64 / reps as f64;
        assert!(
            frac >= 1.0 - delta,
            "whole-function coverage {frac} fell below {}",
            1.0 - delta
        );
    }
}
