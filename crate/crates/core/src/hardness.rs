//! An executable rendering of why observational-study validation cannot be
//! tested: spike mixtures that are statistically indistinguishable from a
//! well-behaved reference distribution yet violate any proposed effect
//! bands, and a concrete equivalence test whose power against them
//! collapses as the sample grows.
//!
//! The impossibility argument holds for every test; this module
//! demonstrates the collapse for one reasonable procedure (two one-sided
//! tests on binned pseudo-outcome means), as an illustration rather than a
//! proof artifact.

use crate::data::{DataError, Dataset, Environment, SupportBox};
use crate::pseudo_outcome::ipw_weight;
use ndarray::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HardnessError {
    #[error("invalid hardness parameters: {message}")]
    InvalidParams { message: String },
    #[error("spike region underflowed below side scale {scale:e} before reaching target mass")]
    RegionTooSmall { scale: f64 },
    #[error("bin {bin} holds only {count} points; the equivalence test needs at least {min}")]
    InsufficientData { bin: usize, count: usize, min: usize },
    #[error("power estimation needs at least {min} trials, got {got}")]
    TooFewTrials { min: usize, got: usize },
    #[error(transparent)]
    Data(#[from] DataError),
}

fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// A bounded reference distribution: uniform covariates on a box, constant
/// randomization, treatment effect linear in the first coordinate, and
/// uniform outcome noise, all scaled so |Y| never exceeds the bound.
#[derive(Debug, Clone)]
pub struct BoundedBase {
    pub support: SupportBox,
    pub propensity: f64,
    /// Hard envelope M on |Y|.
    pub outcome_bound: f64,
    /// Treatment effect at the box midpoint.
    pub cate_intercept: f64,
    /// Treatment-effect slope along the first coordinate.
    pub cate_slope: f64,
    /// Half-width of the uniform outcome noise.
    pub noise_half_width: f64,
}

impl BoundedBase {
    pub fn new(
        support: SupportBox,
        propensity: f64,
        outcome_bound: f64,
        cate_intercept: f64,
        cate_slope: f64,
        noise_half_width: f64,
    ) -> Result<Self, HardnessError> {
        if !(propensity > 0.0 && propensity < 1.0) {
            return Err(HardnessError::InvalidParams {
                message: format!("propensity must lie in (0,1), got {propensity}"),
            });
        }
        if !(outcome_bound > 0.0 && outcome_bound.is_finite()) {
            return Err(HardnessError::InvalidParams {
                message: format!("outcome bound must be positive, got {outcome_bound}"),
            });
        }
        if noise_half_width < 0.0 {
            return Err(HardnessError::InvalidParams {
                message: format!("noise half-width must be nonnegative, got {noise_half_width}"),
            });
        }
        let reach = support
            .lo
            .first()
            .zip(support.hi.first())
            .map(|(lo, hi)| lo.abs().max(hi.abs()))
            .unwrap_or(0.0);
        let sup_mean = 0.5 * (cate_intercept.abs() + cate_slope.abs() * reach);
        if sup_mean + noise_half_width > outcome_bound + 1e-12 {
            return Err(HardnessError::InvalidParams {
                message: format!(
                    "outcomes can reach {} which exceeds the bound {outcome_bound}",
                    sup_mean + noise_half_width
                ),
            });
        }
        Ok(Self {
            support,
            propensity,
            outcome_bound,
            cate_intercept,
            cate_slope,
            noise_half_width,
        })
    }

    /// The canonical demonstration design on [-1,1]: effect 0.4 M x_1,
    /// noise half-width M/2, randomization one half.
    pub fn demo(outcome_bound: f64, dim: usize) -> Result<Self, HardnessError> {
        let support = SupportBox::cube(-1.0, 1.0, dim)?;
        Self::new(
            support,
            0.5,
            outcome_bound,
            0.0,
            0.4 * outcome_bound,
            0.5 * outcome_bound,
        )
    }

    pub fn true_cate(&self, x1: f64) -> f64 {
        self.cate_intercept + self.cate_slope * x1
    }

    fn conditional_mean(&self, x1: f64, t: u8) -> f64 {
        (f64::from(t) - 0.5) * self.true_cate(x1)
    }

    fn sample_row(&self, rng: &mut ChaCha8Rng) -> (Vec<f64>, u8, f64) {
        let d = self.support.dim();
        let x: Vec<f64> = (0..d)
            .map(|j| rng.random_range(self.support.lo[j]..self.support.hi[j]))
            .collect();
        let t = u8::from(rng.random_bool(self.propensity));
        let noise = rng.random_range(-self.noise_half_width..=self.noise_half_width);
        let y = self.conditional_mean(x[0], t) + noise;
        (x, t, y)
    }

    pub fn sample_dataset(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset, HardnessError> {
        let d = self.support.dim();
        let mut xs = Array2::zeros((n, d));
        let mut ts = Vec::with_capacity(n);
        let mut ys = Array1::zeros(n);
        for i in 0..n {
            let (x, t, y) = self.sample_row(rng);
            xs.row_mut(i).assign(&Array1::from(x));
            ts.push(t);
            ys[i] = y;
        }
        Ok(Dataset::new(xs, ts, ys, Environment::Experimental)?)
    }
}

/// The dense-alternative construction: with small probability a draw comes
/// from a spike concentrated on a region of tiny base mass, where outcomes
/// sit at the envelope and the implied effect is 2M.
#[derive(Debug, Clone)]
pub struct SpikeMixture {
    pub base: BoundedBase,
    pub spike_region: SupportBox,
    /// Base-distribution mass of the spike region.
    pub spike_base_probability: f64,
    pub mix_weight: f64,
    /// The effect implied on the spike: 2M.
    pub spike_cate: f64,
    pub outcome_bound: f64,
}

impl SpikeMixture {
    fn sample_row(&self, rng: &mut ChaCha8Rng) -> (Vec<f64>, u8, f64) {
        if self.mix_weight > 0.0 && rng.random_bool(self.mix_weight) {
            let d = self.spike_region.dim();
            let x: Vec<f64> = (0..d)
                .map(|j| {
                    rng.random_range(self.spike_region.lo[j]..=self.spike_region.hi[j])
                })
                .collect();
            let t = u8::from(rng.random_bool(self.base.propensity));
            // Y | T = M (2T - 1): the pseudo-outcome equals 2M on both arms
            let y = self.outcome_bound * (2.0 * f64::from(t) - 1.0);
            (x, t, y)
        } else {
            self.base.sample_row(rng)
        }
    }

    pub fn sample_dataset(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset, HardnessError> {
        let d = self.base.support.dim();
        let mut xs = Array2::zeros((n, d));
        let mut ts = Vec::with_capacity(n);
        let mut ys = Array1::zeros(n);
        for i in 0..n {
            let (x, t, y) = self.sample_row(rng);
            xs.row_mut(i).assign(&Array1::from(x));
            ts.push(t);
            ys[i] = y;
        }
        Ok(Dataset::new(xs, ts, ys, Environment::Experimental)?)
    }

    /// Total variation between the spike component and the base: the spike's
    /// outcomes are atoms at ±M while the base outcome distribution is
    /// continuous, so the components are mutually singular.
    pub fn component_tv(&self) -> f64 {
        1.0
    }

    /// Conditional pseudo-outcome mean on the spike region under the
    /// mixture, from the proof's decomposition: the spike pulls it from the
    /// base value toward 2M.
    pub fn conditional_pseudo_mean_in_spike(&self, n: usize) -> f64 {
        let eps = self.spike_base_probability;
        let center = 0.5
            * (self.spike_region.lo[0] + self.spike_region.hi[0]);
        let base_mean = self.base.true_cate(center);
        let k = eps * (n as f64 - 1.0);
        (k * base_mean + self.spike_cate) / (k + 1.0)
    }
}

/// Shrinks a box around the support midpoint by bisection on the side scale
/// until its base mass falls to 1/n², then mixes it in with weight 1/n.
pub fn build_mixture(base: &BoundedBase, n: usize) -> Result<SpikeMixture, HardnessError> {
    if n < 2 {
        return Err(HardnessError::InvalidParams {
            message: format!("mixture needs n >= 2, got {n}"),
        });
    }
    let target = 1.0 / (n as f64 * n as f64);
    let center: Vec<f64> = base
        .support
        .lo
        .iter()
        .zip(&base.support.hi)
        .map(|(lo, hi)| 0.5 * (lo + hi))
        .collect();
    let sides = base.support.side_lengths();
    let volume: f64 = sides.iter().product();
    let region = |scale: f64| -> Result<SupportBox, HardnessError> {
        let lo: Vec<f64> = center
            .iter()
            .zip(&sides)
            .map(|(c, s)| c - 0.5 * scale * s)
            .collect();
        let hi: Vec<f64> = center
            .iter()
            .zip(&sides)
            .map(|(c, s)| c + 0.5 * scale * s)
            .collect();
        Ok(SupportBox::new(lo, hi)?)
    };
    let mass = |scale: f64| -> f64 {
        let v: f64 = sides.iter().map(|s| s * scale).product();
        v / volume
    };

    let mut lo_scale = 0.0_f64;
    let mut hi_scale = 1.0_f64;
    for _ in 0..200 {
        let mid = 0.5 * (lo_scale + hi_scale);
        if mid <= f64::MIN_POSITIVE || sides.iter().any(|s| 0.5 * mid * s == 0.0) {
            return Err(HardnessError::RegionTooSmall { scale: mid });
        }
        if mass(mid) > target {
            hi_scale = mid;
        } else {
            lo_scale = mid;
        }
    }
    let scale = if mass(lo_scale) > 0.0 && mass(lo_scale) <= target {
        lo_scale
    } else {
        // lo never moved off zero: target is below resolvable mass
        return Err(HardnessError::RegionTooSmall { scale: lo_scale });
    };
    let spike_region = region(scale)?;
    if spike_region.lo.iter().zip(&spike_region.hi).any(|(a, b)| !(b > a)) {
        // the half-width rounded away against the center coordinate
        return Err(HardnessError::RegionTooSmall { scale });
    }
    Ok(SpikeMixture {
        base: base.clone(),
        spike_region,
        spike_base_probability: mass(scale),
        mix_weight: 1.0 / n as f64,
        spike_cate: 2.0 * base.outcome_bound,
        outcome_bound: base.outcome_bound,
    })
}

/// Two one-sided tests on binned pseudo-outcome means: rejects (declares
/// the effect controlled by the bands) only when every bin's mean is
/// significantly inside both bands. Rejection under any distribution whose
/// effect leaves the bands is at most alpha, by the intersection-union
/// argument.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquivalenceTest {
    pub alpha: f64,
    pub lower_band: f64,
    pub upper_band: f64,
    pub bins: usize,
    pub min_bin_count: usize,
    pub propensity: f64,
    pub support: SupportBox,
}

impl EquivalenceTest {
    pub fn new(
        alpha: f64,
        lower_band: f64,
        upper_band: f64,
        bins: usize,
        propensity: f64,
        support: SupportBox,
    ) -> Result<Self, HardnessError> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(HardnessError::InvalidParams {
                message: format!("alpha must lie in (0,1), got {alpha}"),
            });
        }
        if !(lower_band < upper_band) {
            return Err(HardnessError::InvalidParams {
                message: format!("bands must satisfy lower < upper, got [{lower_band}, {upper_band}]"),
            });
        }
        if bins == 0 {
            return Err(HardnessError::InvalidParams {
                message: "need at least one bin".into(),
            });
        }
        if !(propensity > 0.0 && propensity < 1.0) {
            return Err(HardnessError::InvalidParams {
                message: format!("propensity must lie in (0,1), got {propensity}"),
            });
        }
        Ok(Self {
            alpha,
            lower_band,
            upper_band,
            bins,
            min_bin_count: 5,
            propensity,
            support,
        })
    }

    fn bin_of(&self, x1: f64) -> usize {
        let lo = self.support.lo[0];
        let hi = self.support.hi[0];
        let frac = ((x1 - lo) / (hi - lo)).clamp(0.0, 1.0);
        ((frac * self.bins as f64) as usize).min(self.bins - 1)
    }

    /// 1 = reject non-control (declare the bands hold), 0 = fail to reject.
    pub fn evaluate(&self, data: &Dataset) -> Result<bool, HardnessError> {
        let mut binned: Vec<Vec<f64>> = vec![Vec::new(); self.bins];
        let xs = data.covariates();
        for i in 0..data.n() {
            let pseudo = ipw_weight(data.treatments()[i], self.propensity) * data.outcomes()[i];
            binned[self.bin_of(xs[[i, 0]])].push(pseudo);
        }
        for (bin, values) in binned.iter().enumerate() {
            let n = values.len();
            if n < self.min_bin_count {
                return Err(HardnessError::InsufficientData {
                    bin,
                    count: n,
                    min: self.min_bin_count,
                });
            }
            let nf = n as f64;
            let mean = values.iter().sum::<f64>() / nf;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
            let se = (var / nf).sqrt().max(f64::MIN_POSITIVE);
            let dist = StudentsT::new(0.0, 1.0, nf - 1.0).map_err(|e| {
                HardnessError::InvalidParams {
                    message: format!("t distribution: {e}"),
                }
            })?;
            let critical = dist.inverse_cdf(1.0 - self.alpha);
            let above_lower = (mean - self.lower_band) / se >= critical;
            let below_upper = (self.upper_band - mean) / se >= critical;
            if !(above_lower && below_upper) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerEstimate {
    /// Rejection rate when sampling from the spike mixture (a violating
    /// distribution): ideally at most alpha, in practice tracking power.
    pub level_hat: f64,
    /// Rejection rate when sampling from the clean base distribution.
    pub power_hat: f64,
    pub trials: usize,
    /// Standard error of the power - level gap.
    pub mc_stderr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: usize,
    pub level_hat: f64,
    pub power_hat: f64,
    pub trials: usize,
    pub mc_stderr: f64,
}

pub const MIN_TRIALS: usize = 200;

/// Rejection rates under the base and under one mixture at sample size n.
pub fn estimate_power(
    test: &EquivalenceTest,
    base: &BoundedBase,
    mixture: &SpikeMixture,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<PowerEstimate, HardnessError> {
    if trials < MIN_TRIALS {
        return Err(HardnessError::TooFewTrials {
            min: MIN_TRIALS,
            got: trials,
        });
    }
    let results: Result<Vec<(bool, bool)>, HardnessError> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng_p = stream(seed, &format!("power-base-n{n}-trial{trial}"));
            let data_p = base.sample_dataset(n, &mut rng_p)?;
            let reject_p = test.evaluate(&data_p)?;
            let mut rng_q = stream(seed, &format!("power-mixture-n{n}-trial{trial}"));
            let data_q = mixture.sample_dataset(n, &mut rng_q)?;
            let reject_q = test.evaluate(&data_q)?;
            Ok((reject_p, reject_q))
        })
        .collect();
    let results = results?;
    let tf = trials as f64;
    let power_hat = results.iter().filter(|(p, _)| *p).count() as f64 / tf;
    let level_hat = results.iter().filter(|(_, q)| *q).count() as f64 / tf;
    let mc_stderr =
        ((power_hat * (1.0 - power_hat) + level_hat * (1.0 - level_hat)) / tf).sqrt();
    Ok(PowerEstimate {
        level_hat,
        power_hat,
        trials,
        mc_stderr,
    })
}

/// The full demonstration: at each sample size, build the matched mixture
/// and estimate both rejection rates.
pub fn power_collapse_curve(
    test: &EquivalenceTest,
    base: &BoundedBase,
    n_list: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<CurvePoint>, HardnessError> {
    let mut curve = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let mixture = build_mixture(base, n)?;
        let estimate = estimate_power(test, base, &mixture, n, trials, seed)?;
        curve.push(CurvePoint {
            n,
            level_hat: estimate.level_hat,
            power_hat: estimate.power_hat,
            trials: estimate.trials,
            mc_stderr: estimate.mc_stderr,
        });
    }
    Ok(curve)
}

/// Union-bound coupling limit on how differently any test can behave on n
/// draws from the base versus the mixture.
pub fn coupling_tv_bound(n: usize, mix_weight: f64, component_tv: f64) -> f64 {
    (n as f64 * mix_weight * component_tv).min(1.0)
}
