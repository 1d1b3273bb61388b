//! Data-generating processes for the experiments: a synthetic design with
//! uniform covariate shift and a quadratic outcome, a semi-synthetic design
//! resampling a bundled birth-cohort-style covariate table with sparse
//! linear outcomes, a robustness variant adding squared terms, and GP prior
//! sampling for the cross-environment difference.
//!
//! Every random quantity draws from its own ChaCha stream keyed by
//! (seed, purpose label), so designs that share structure produce identical
//! draws for the parts they share.

use crate::data::{DataError, Dataset, Environment, ObservationalModel, SupportBox};
use crate::kernels::{KernelError, SeKernel};
use crate::numerics::{self, NumericsError, SpdMatrix};
use ndarray::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::PathBuf;
use thiserror::Error;

/// Quasi-random points appended to the experimental draws when realizing
/// the GP truth, so it is defined across the whole observational box.
pub const GRID_FILL_POINTS: usize = 512;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {message}")]
    InvalidConfig { message: String },
    #[error("the sampling grid is empty")]
    EmptyGrid,
    #[error("grid rows {first} and {second} coincide; grid points must be distinct")]
    DuplicateGridPoint { first: usize, second: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// A named randomness stream: one purpose, one independent generator.
fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

fn first_primes(count: usize) -> Vec<u64> {
    let mut primes = Vec::with_capacity(count);
    let mut candidate: u64 = 2;
    while primes.len() < count {
        if primes.iter().all(|p| candidate % p != 0) {
            primes.push(candidate);
        }
        candidate += 1;
    }
    primes
}

/// Low-discrepancy points in a box from the additive (Weyl) recurrence with
/// irrational strides sqrt(p_j); `skip` offsets into the sequence.
pub fn weyl_points(count: usize, support: &SupportBox, skip: usize) -> Array2<f64> {
    let d = support.dim();
    let alphas: Vec<f64> = first_primes(d)
        .into_iter()
        .map(|p| (p as f64).sqrt().fract())
        .collect();
    let sides = support.side_lengths();
    let mut out = Array2::zeros((count, d));
    for i in 0..count {
        let n = (skip + i + 1) as f64;
        for j in 0..d {
            out[[i, j]] = support.lo[j] + sides[j] * (n * alphas[j]).fract();
        }
    }
    out
}

/// One realized draw from a GP prior: exact values on its grid, posterior-
/// mean interpolation elsewhere.
#[derive(Debug, Clone)]
pub struct GpSample {
    kernel: Option<SeKernel>,
    grid: Array2<f64>,
    values: Array1<f64>,
    weights: Array1<f64>,
}

impl GpSample {
    /// The identically-zero draw (degenerate prior with no output scale).
    pub fn zero(dim: usize) -> Self {
        Self {
            kernel: None,
            grid: Array2::zeros((0, dim)),
            values: Array1::zeros(0),
            weights: Array1::zeros(0),
        }
    }

    pub fn eval(&self, x: ArrayView1<'_, f64>) -> f64 {
        let Some(kernel) = &self.kernel else {
            return 0.0;
        };
        for (i, row) in self.grid.rows().into_iter().enumerate() {
            if row
                .iter()
                .zip(x.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
            {
                return self.values[i];
            }
        }
        self.grid
            .rows()
            .into_iter()
            .zip(&self.weights)
            .map(|(row, w)| kernel.eval(row, x) * w)
            .sum()
    }

    pub fn grid(&self) -> &Array2<f64> {
        &self.grid
    }
}

/// Joint Gaussian draw on the grid via Cholesky, interpolation weights via
/// the same factor. Deterministic given the seed.
pub fn sample_gp_prior(
    kernel: &SeKernel,
    grid: &Array2<f64>,
    seed: u64,
) -> Result<GpSample, SimError> {
    if grid.nrows() == 0 {
        return Err(SimError::EmptyGrid);
    }
    let m = grid.nrows();
    for i in 0..m {
        for j in (i + 1)..m {
            if grid
                .row(i)
                .iter()
                .zip(grid.row(j).iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
            {
                return Err(SimError::DuplicateGridPoint {
                    first: i,
                    second: j,
                });
            }
        }
    }
    let mut gram = Array2::zeros((m, m));
    for i in 0..m {
        for j in i..m {
            let v = kernel.eval(grid.row(i), grid.row(j));
            gram[[i, j]] = v;
            gram[[j, i]] = v;
        }
    }
    let gram = SpdMatrix::new(gram)?;
    let factor = numerics::cholesky(&gram, &numerics::default_jitter_schedule(&gram))?;
    let mut rng = stream(seed, "gp-prior-draw");
    let z: Array1<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
    let values = factor.lower().dot(&z);
    let weights = factor.solve_vec(&values.view())?;
    Ok(GpSample {
        kernel: Some(*kernel),
        grid: grid.clone(),
        values,
        weights,
    })
}

/// linear . x + quadratic . (x ⊙ x)
#[derive(Debug, Clone, PartialEq)]
pub struct PolyPart {
    pub linear: Array1<f64>,
    pub quadratic: Array1<f64>,
}

impl PolyPart {
    pub fn zeros(dim: usize) -> Self {
        Self {
            linear: Array1::zeros(dim),
            quadratic: Array1::zeros(dim),
        }
    }

    pub fn eval(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.linear.dot(&x) + self.quadratic.dot(&x.mapv(|v| v * v))
    }
}

/// The generator's own view of what it built: evaluable effect and
/// observational-gap functions plus the support geometry.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    base: PolyPart,
    gap: PolyPart,
    f0: GpSample,
    f1: GpSample,
    pub obs_box: SupportBox,
    pub exp_box: SupportBox,
}

impl GroundTruth {
    /// True treatment effect on the experimental environment.
    pub fn true_cate(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.gap.eval(x) + self.f1.eval(x) - self.f0.eval(x)
    }

    /// True observational gap E[Y|x,1,obs] - E[Y|x,0,obs].
    pub fn true_omega(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.gap.eval(x)
    }

    /// Noiseless conditional outcome means per environment.
    pub fn mean(&self, x: ArrayView1<'_, f64>, t: u8, env: Environment) -> f64 {
        let poly = self.base.eval(x) + f64::from(t) * self.gap.eval(x);
        match env {
            Environment::Observational => poly,
            Environment::Experimental => {
                poly + if t == 1 { self.f1.eval(x) } else { self.f0.eval(x) }
            }
        }
    }

    /// An observational-model oracle exposing the true gap.
    pub fn oracle_observational_model(&self) -> ObservationalModel {
        let gap = self.gap.clone();
        ObservationalModel::oracle(move |x| gap.eval(x))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CovariateSource {
    /// The vendored covariate table generated in-crate; no files needed.
    #[default]
    Bundled,
    /// A CSV with a header naming the treatment column and the two
    /// indicator columns driving experimental sampling weights; every other
    /// column is a covariate.
    Csv {
        path: PathBuf,
        treatment: String,
        smoker: String,
        male: String,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SimDesign {
    Synthetic {
        dim: usize,
        n_obs: usize,
        n_exp: usize,
    },
    Ihdp {
        #[serde(default)]
        source: CovariateSource,
        n_obs: usize,
        n_exp: usize,
        treat_p: f64,
    },
    Robustness {
        #[serde(default)]
        source: CovariateSource,
        n_obs: usize,
        n_exp: usize,
        treat_p: f64,
    },
}

impl SimDesign {
    /// The experimental randomization probability the design assigns.
    pub fn propensity(&self) -> f64 {
        match self {
            SimDesign::Synthetic { .. } => 0.5,
            SimDesign::Ihdp { treat_p, .. } | SimDesign::Robustness { treat_p, .. } => *treat_p,
        }
    }

    /// The same design with a different experimental sample size.
    pub fn with_n_exp(&self, n: usize) -> SimDesign {
        let mut design = self.clone();
        match &mut design {
            SimDesign::Synthetic { n_exp, .. }
            | SimDesign::Ihdp { n_exp, .. }
            | SimDesign::Robustness { n_exp, .. } => *n_exp = n,
        }
        design
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub design: SimDesign,
    /// Prior for the cross-environment difference f_t; `None` disables the
    /// GP shift entirely.
    pub gp_prior: Option<SeKernel>,
    pub noise_sigma0: f64,
    pub seed: u64,
    /// Seed for the sparse outcome coefficients of the resampled designs.
    /// Defaults to `seed`; replication studies pin it so every replication
    /// regresses against the same data-generating process while covariates,
    /// treatments, the GP shift, and noise are redrawn.
    #[serde(default)]
    pub coefficient_seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub observational: Dataset,
    pub experimental: Dataset,
    pub truth: GroundTruth,
}

fn validate(cfg: &SimConfig) -> Result<(), SimError> {
    let bad = |message: String| Err(SimError::InvalidConfig { message });
    if !(cfg.noise_sigma0.is_finite() && cfg.noise_sigma0 >= 0.0) {
        return bad(format!("noise_sigma0 must be finite and >= 0, got {}", cfg.noise_sigma0));
    }
    match cfg.design {
        SimDesign::Synthetic { dim, n_obs, n_exp } => {
            if dim == 0 {
                return bad("synthetic dim must be >= 1".into());
            }
            if n_obs == 0 || n_exp == 0 {
                return bad(format!("sample sizes must be >= 1, got n_obs={n_obs} n_exp={n_exp}"));
            }
        }
        SimDesign::Ihdp { n_obs, n_exp, treat_p, .. }
        | SimDesign::Robustness { n_obs, n_exp, treat_p, .. } => {
            if n_obs == 0 || n_exp == 0 {
                return bad(format!("sample sizes must be >= 1, got n_obs={n_obs} n_exp={n_exp}"));
            }
            if !(treat_p > 0.0 && treat_p < 1.0) {
                return bad(format!("treat_p must lie in (0,1), got {treat_p}"));
            }
        }
    }
    Ok(())
}

pub fn generate(cfg: &SimConfig) -> Result<SimulatedData, SimError> {
    validate(cfg)?;
    match &cfg.design {
        SimDesign::Synthetic { dim, n_obs, n_exp } => {
            generate_synthetic(cfg, *dim, *n_obs, *n_exp)
        }
        SimDesign::Ihdp {
            source,
            n_obs,
            n_exp,
            treat_p,
        } => {
            let src = resolve_source(source)?;
            resampled_design(cfg, &src, *n_obs, *n_exp, *treat_p, false)
        }
        SimDesign::Robustness {
            source,
            n_obs,
            n_exp,
            treat_p,
        } => {
            let src = resolve_source(source)?;
            resampled_design(cfg, &src, *n_obs, *n_exp, *treat_p, true)
        }
    }
}

fn dedupe_rows(xs: &Array2<f64>) -> Array2<f64> {
    let mut keep: Vec<usize> = Vec::new();
    'rows: for i in 0..xs.nrows() {
        for &k in &keep {
            if xs
                .row(i)
                .iter()
                .zip(xs.row(k).iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
            {
                continue 'rows;
            }
        }
        keep.push(i);
    }
    let mut out = Array2::zeros((keep.len(), xs.ncols()));
    for (r, &i) in keep.iter().enumerate() {
        out.row_mut(r).assign(&xs.row(i));
    }
    out
}

/// Truth grid: the experimental draws themselves plus quasi-random fill
/// over the observational box, deduplicated.
fn truth_grid(exp_x: &Array2<f64>, obs_box: &SupportBox) -> Array2<f64> {
    let fill = weyl_points(GRID_FILL_POINTS, obs_box, 0);
    let mut stacked = Array2::zeros((exp_x.nrows() + fill.nrows(), exp_x.ncols()));
    stacked
        .slice_mut(s![..exp_x.nrows(), ..])
        .assign(exp_x);
    stacked.slice_mut(s![exp_x.nrows().., ..]).assign(&fill);
    dedupe_rows(&stacked)
}

fn gp_pair(
    cfg: &SimConfig,
    grid: &Array2<f64>,
    dim: usize,
) -> Result<(GpSample, GpSample), SimError> {
    match &cfg.gp_prior {
        None => Ok((GpSample::zero(dim), GpSample::zero(dim))),
        Some(kernel) => {
            let seed0 = sub_seed(cfg.seed, "gp-arm0");
            let seed1 = sub_seed(cfg.seed, "gp-arm1");
            Ok((
                sample_gp_prior(kernel, grid, seed0)?,
                sample_gp_prior(kernel, grid, seed1)?,
            ))
        }
    }
}

fn sub_seed(seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn generate_synthetic(
    cfg: &SimConfig,
    dim: usize,
    n_obs: usize,
    n_exp: usize,
) -> Result<SimulatedData, SimError> {
    let obs_box = SupportBox::cube(-3.0, 3.0, dim)?;
    let exp_box = SupportBox::cube(-1.0, 1.0, dim)?;

    let mut rng_ox = stream(cfg.seed, "synthetic-obs-covariates");
    let mut obs_x = Array2::zeros((n_obs, dim));
    for i in 0..n_obs {
        for j in 0..dim {
            obs_x[[i, j]] = rng_ox.random_range(-3.0..3.0);
        }
    }
    let mut rng_ot = stream(cfg.seed, "synthetic-obs-treatment");
    let obs_t: Vec<u8> = (0..n_obs).map(|_| u8::from(rng_ot.random::<bool>())).collect();

    let mut rng_ex = stream(cfg.seed, "synthetic-exp-covariates");
    let mut exp_x = Array2::zeros((n_exp, dim));
    for i in 0..n_exp {
        for j in 0..dim {
            exp_x[[i, j]] = rng_ex.random_range(-1.0..1.0);
        }
    }
    let mut rng_et = stream(cfg.seed, "synthetic-exp-treatment");
    let exp_t: Vec<u8> = (0..n_exp).map(|_| u8::from(rng_et.random::<bool>())).collect();

    // outcome polynomial: unit coefficients on x and t*x, plus t * x_1^2
    let base = PolyPart {
        linear: Array1::ones(dim),
        quadratic: Array1::zeros(dim),
    };
    let mut gap_quadratic = Array1::zeros(dim);
    gap_quadratic[0] = 1.0;
    let gap = PolyPart {
        linear: Array1::ones(dim),
        quadratic: gap_quadratic,
    };

    let grid = truth_grid(&exp_x, &obs_box);
    let (f0, f1) = gp_pair(cfg, &grid, dim)?;
    let truth = GroundTruth {
        base,
        gap,
        f0,
        f1,
        obs_box,
        exp_box,
    };

    let observational = outcomes(
        cfg,
        &truth,
        obs_x,
        obs_t,
        Environment::Observational,
        "synthetic-obs-noise",
    )?;
    let experimental = outcomes(
        cfg,
        &truth,
        exp_x,
        exp_t,
        Environment::Experimental,
        "synthetic-exp-noise",
    )?;
    Ok(SimulatedData {
        observational,
        experimental,
        truth,
    })
}

fn outcomes(
    cfg: &SimConfig,
    truth: &GroundTruth,
    xs: Array2<f64>,
    ts: Vec<u8>,
    env: Environment,
    noise_label: &str,
) -> Result<Dataset, SimError> {
    let mut rng = stream(cfg.seed, noise_label);
    let n = xs.nrows();
    let mut y = Array1::zeros(n);
    for i in 0..n {
        let eps: f64 = rng.sample(StandardNormal);
        y[i] = truth.mean(xs.row(i), ts[i], env) + cfg.noise_sigma0 * eps;
    }
    Ok(Dataset::new(xs, ts, y, env)?)
}

/// A covariate table for the resampled designs: rows, their original
/// treatments, and the two indicator columns driving experimental weights.
#[derive(Debug, Clone)]
pub struct IhdpSource {
    pub data: Dataset,
    pub smoker_column: usize,
    pub male_column: usize,
}

fn resolve_source(source: &CovariateSource) -> Result<IhdpSource, SimError> {
    match source {
        CovariateSource::Bundled => Ok(ihdp_surrogate()),
        CovariateSource::Csv {
            path,
            treatment,
            smoker,
            male,
        } => load_ihdp_csv(path, treatment, smoker, male),
    }
}

pub const IHDP_SURROGATE_ROWS: usize = 985;
pub const IHDP_SURROGATE_DIM: usize = 28;
pub const IHDP_SURROGATE_CONTINUOUS: usize = 7;
/// Indicator column positions in the bundled table.
pub const IHDP_SMOKER_COLUMN: usize = 7;
pub const IHDP_MALE_COLUMN: usize = 8;

const SURROGATE_SEED: u64 = 0x4948_4450;

/// The vendored covariate table: a fixed draw mimicking the shape of the
/// infant-health cohort commonly used for semi-synthetic benchmarks —
/// 985 rows, 7 continuous columns, 21 binary columns (two of them the
/// smoker and male indicators), and a covariate-dependent treatment.
pub fn ihdp_surrogate() -> IhdpSource {
    let n = IHDP_SURROGATE_ROWS;
    let d = IHDP_SURROGATE_DIM;
    let mut rates_rng = stream(SURROGATE_SEED, "surrogate-binary-rates");
    let rates: Vec<f64> = (0..d - IHDP_SURROGATE_CONTINUOUS)
        .map(|_| rates_rng.random_range(0.15..0.65))
        .collect();

    let mut x_rng = stream(SURROGATE_SEED, "surrogate-covariates");
    let mut xs = Array2::zeros((n, d));
    for i in 0..n {
        for j in 0..IHDP_SURROGATE_CONTINUOUS {
            xs[[i, j]] = x_rng.sample::<f64, _>(StandardNormal);
        }
        for j in IHDP_SURROGATE_CONTINUOUS..d {
            let rate = rates[j - IHDP_SURROGATE_CONTINUOUS];
            xs[[i, j]] = f64::from(x_rng.random_bool(rate));
        }
    }

    // treatment leans on the first continuous column and both indicators,
    // mimicking a cohort where assignment tracks observed characteristics
    let mut t_rng = stream(SURROGATE_SEED, "surrogate-treatment");
    let ts: Vec<u8> = (0..n)
        .map(|i| {
            let logit = -0.3 + 0.5 * xs[[i, 0]] - 0.8 * xs[[i, IHDP_SMOKER_COLUMN]]
                + 0.4 * xs[[i, IHDP_MALE_COLUMN]];
            let p = 1.0 / (1.0 + (-logit).exp());
            u8::from(t_rng.random_bool(p))
        })
        .collect();

    let data = Dataset::new(xs, ts, Array1::zeros(n), Environment::Observational)
        .expect("surrogate table is well-formed by construction");
    IhdpSource {
        data,
        smoker_column: IHDP_SMOKER_COLUMN,
        male_column: IHDP_MALE_COLUMN,
    }
}

/// Loads a covariate CSV: `treatment` names the treatment column, every
/// other column is a covariate, and `smoker`/`male` name the two indicator
/// covariates.
pub fn load_ihdp_csv(
    path: &PathBuf,
    treatment: &str,
    smoker: &str,
    male: &str,
) -> Result<IhdpSource, SimError> {
    let io_err = |e: csv::Error| DataError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(io_err)?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(io_err)?
        .iter()
        .map(str::to_owned)
        .collect();
    if !headers.iter().any(|h| h == treatment) {
        return Err(SimError::Data(DataError::SchemaError {
            column: treatment.to_owned(),
        }));
    }
    let covariates: Vec<String> = headers
        .iter()
        .filter(|h| h.as_str() != treatment)
        .cloned()
        .collect();
    let position = |name: &str| -> Result<usize, SimError> {
        covariates
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| {
                SimError::Data(DataError::SchemaError {
                    column: name.to_owned(),
                })
            })
    };
    let smoker_column = position(smoker)?;
    let male_column = position(male)?;
    let schema = crate::data::CsvSchema {
        treatment: treatment.to_owned(),
        covariates,
        outcome: None,
        environment: Environment::Observational,
    };
    let data = crate::data::load_csv(path, &schema)?;
    Ok(IhdpSource {
        data,
        smoker_column,
        male_column,
    })
}

/// Experimental resampling weights: 0.8^(smoker + male).
pub fn ihdp_weights(source: &IhdpSource) -> Array1<f64> {
    let xs = source.data.covariates();
    Array1::from_iter((0..xs.nrows()).map(|i| {
        0.8_f64.powf(xs[[i, source.smoker_column]] + xs[[i, source.male_column]])
    }))
}

fn sparse_coefficients(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    // one Bernoulli and one normal per coefficient, always both consumed so
    // the stream position does not depend on the mask
    Array1::from_iter((0..dim).map(|_| {
        let keep = rng.random_bool(0.3);
        let value: f64 = rng.sample(StandardNormal);
        if keep {
            value
        } else {
            0.0
        }
    }))
}

fn resampled_design(
    cfg: &SimConfig,
    source: &IhdpSource,
    n_obs: usize,
    n_exp: usize,
    treat_p: f64,
    with_quadratic: bool,
) -> Result<SimulatedData, SimError> {
    let table = source.data.covariates();
    let rows = table.nrows();
    let dim = table.ncols();

    let coefficient_seed = cfg.coefficient_seed.unwrap_or(cfg.seed);
    let mut beta_rng = stream(coefficient_seed, "sparse-linear-coefficients");
    let beta0 = sparse_coefficients(&mut beta_rng, dim);
    let beta1 = sparse_coefficients(&mut beta_rng, dim);
    let (gamma0, gamma1) = if with_quadratic {
        let mut gamma_rng = stream(coefficient_seed, "sparse-quadratic-coefficients");
        (
            sparse_coefficients(&mut gamma_rng, dim),
            sparse_coefficients(&mut gamma_rng, dim),
        )
    } else {
        (Array1::zeros(dim), Array1::zeros(dim))
    };

    let mut rng_obs_rows = stream(cfg.seed, "resample-obs-rows");
    let mut obs_x = Array2::zeros((n_obs, dim));
    let mut obs_t = Vec::with_capacity(n_obs);
    for i in 0..n_obs {
        let r = rng_obs_rows.random_range(0..rows);
        obs_x.row_mut(i).assign(&table.row(r));
        obs_t.push(source.data.treatments()[r]);
    }

    let weights = ihdp_weights(source);
    let total: f64 = weights.sum();
    let mut rng_exp_rows = stream(cfg.seed, "resample-exp-rows");
    let mut exp_x = Array2::zeros((n_exp, dim));
    for i in 0..n_exp {
        let mut u = rng_exp_rows.random_range(0.0..total);
        let mut chosen = rows - 1;
        for (r, w) in weights.iter().enumerate() {
            if u < *w {
                chosen = r;
                break;
            }
            u -= w;
        }
        exp_x.row_mut(i).assign(&table.row(chosen));
    }
    let mut rng_exp_t = stream(cfg.seed, "resample-exp-treatment");
    let exp_t: Vec<u8> = (0..n_exp)
        .map(|_| u8::from(rng_exp_t.random_bool(treat_p)))
        .collect();

    let base = PolyPart {
        linear: beta0,
        quadratic: gamma0,
    };
    let gap = PolyPart {
        linear: beta1,
        quadratic: gamma1,
    };

    let obs_box = SupportBox::bounding(table)?;
    let exp_box = obs_box.clone();
    let grid = truth_grid(&exp_x, &obs_box);
    let (f0, f1) = gp_pair(cfg, &grid, dim)?;
    let truth = GroundTruth {
        base,
        gap,
        f0,
        f1,
        obs_box,
        exp_box,
    };

    let observational = outcomes(
        cfg,
        &truth,
        obs_x,
        obs_t,
        Environment::Observational,
        "resample-obs-noise",
    )?;
    let experimental = outcomes(
        cfg,
        &truth,
        exp_x,
        exp_t,
        Environment::Experimental,
        "resample-exp-noise",
    )?;
    Ok(SimulatedData {
        observational,
        experimental,
        truth,
    })
}
