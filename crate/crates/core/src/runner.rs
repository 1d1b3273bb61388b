//! Replication-level orchestration: simulate, transform, fit each model,
//! score against the generator's ground truth, and aggregate into the
//! tables the command line emits.

use crate::bounds::{self, BoundConfig, BoundError};
use crate::data::{
    fit_observational_ridge, DataError, ObservationalModel, PropensityModel, SupportBox,
};
use crate::gp::{
    self, FitReport, GpError, GpModel, OptimizerConfig, PosteriorState, Z_95,
};
use crate::kernels::{CoregMatrix, MultitaskKernel, NoiseParams, SeKernel};
use crate::pseudo_outcome::{ipw_transform, PseudoError, PseudoSample};
use crate::simulate::{generate, weyl_points, SimConfig, SimError, SimulatedData};
use ndarray::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("invalid experiment config: {message}")]
    InvalidConfig { message: String },
    #[error("{failed} of {total} replications failed (limit is 10%): {first_failure}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        first_failure: String,
    },
    #[error(
        "out-of-distribution sampling budget exhausted: the observational box adds almost no volume beyond the experimental box"
    )]
    EmptyOutOfDistributionGrid,
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Bound(#[from] BoundError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Pseudo(#[from] PseudoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ours,
    Naive,
    Lcm,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Ours => "ours",
            ModelKind::Naive => "naive",
            ModelKind::Lcm => "lcm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    InDistribution,
    OutOfDistribution,
}

impl GridKind {
    pub fn label(self) -> &'static str {
        match self {
            GridKind::InDistribution => "in_distribution",
            GridKind::OutOfDistribution => "out_of_distribution",
        }
    }
}

/// How the observational gap estimate is produced before debiasing.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ObsModelChoice {
    /// The generator's own gap function; for diagnostics.
    Oracle,
    /// Per-arm ridge regression on the observational sample.
    Ridge { lambda: f64 },
}

impl Default for ObsModelChoice {
    fn default() -> Self {
        ObsModelChoice::Ridge { lambda: 1e-3 }
    }
}

/// Band inputs that do not depend on the replication's geometry; the
/// support box is always the replication's observational box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BandSettings {
    pub delta: f64,
    #[serde(default)]
    pub tau_radius: Option<f64>,
    #[serde(default)]
    pub l_f: Option<f64>,
}

impl Default for BandSettings {
    fn default() -> Self {
        Self {
            delta: 0.1,
            tau_radius: None,
            l_f: None,
        }
    }
}

fn default_eval_points() -> usize {
    1000
}

fn default_replications() -> usize {
    20
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub models: Vec<ModelKind>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub bound: Option<BandSettings>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_eval_points")]
    pub eval_points: usize,
    #[serde(default)]
    pub observational: ObsModelChoice,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: ModelKind,
    pub grid: GridKind,
    pub mse: f64,
    pub mse_se: f64,
    pub coverage: f64,
    pub coverage_se: f64,
    pub width: f64,
    pub width_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
    pub replications_used: usize,
    pub replications_failed: usize,
    pub warnings: Vec<String>,
}

impl MetricsTable {
    pub fn row(&self, model: ModelKind, grid: GridKind) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.model == model && r.grid == grid)
    }

    pub fn write_csv(&self, out: impl Write) -> Result<(), RunnerError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "model",
            "grid",
            "mse",
            "mse_se",
            "coverage",
            "coverage_se",
            "width",
            "width_se",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.model.label().to_string(),
                r.grid.label().to_string(),
                r.mse.to_string(),
                r.mse_se.to_string(),
                r.coverage.to_string(),
                r.coverage_se.to_string(),
                r.width.to_string(),
                r.width_se.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Quasi-random evaluation grids: `points` rows inside the experimental
/// box, and `points` rows of the observational box with the experimental
/// box carved out. When the two boxes coincide (resampled designs draw
/// both environments from one covariate pool) there is no second region
/// and the out-of-distribution grid is `None`.
pub fn eval_grids(
    exp_box: &SupportBox,
    obs_box: &SupportBox,
    points: usize,
) -> Result<(Array2<f64>, Option<Array2<f64>>), RunnerError> {
    let in_grid = weyl_points(points, exp_box, 0);
    if exp_box == obs_box {
        return Ok((in_grid, None));
    }
    let mut rows: Vec<f64> = Vec::with_capacity(points * obs_box.dim());
    let mut kept = 0;
    let mut skip = 0;
    let chunk = points.max(64);
    let budget = 2000 * points.max(1);
    while kept < points && skip < budget {
        let candidates = weyl_points(chunk, obs_box, skip);
        skip += chunk;
        for row in candidates.rows() {
            if !exp_box.contains(row) {
                rows.extend(row.iter());
                kept += 1;
                if kept == points {
                    break;
                }
            }
        }
    }
    if kept == 0 {
        return Err(RunnerError::EmptyOutOfDistributionGrid);
    }
    let out_grid = Array2::from_shape_vec((kept, obs_box.dim()), rows)
        .expect("row-major rejection buffer");
    Ok((in_grid, Some(out_grid)))
}

fn model_skeleton(
    kind: ModelKind,
    propensity: &PropensityModel,
) -> Result<(MultitaskKernel, NoiseParams), GpError> {
    let k = SeKernel::new(1.0, 1.0)?;
    let l = SeKernel::new(1.0, 1.0)?;
    Ok(match kind {
        ModelKind::Naive => (MultitaskKernel::Naive { k }, NoiseParams::tied(0.5)?),
        ModelKind::Ours => (
            MultitaskKernel::PseudoFixed {
                k,
                l,
                propensity: propensity.clone(),
            },
            NoiseParams::new(0.5, 0.5)?,
        ),
        ModelKind::Lcm => (
            MultitaskKernel::LcmTrainable {
                k,
                l,
                a_k: CoregMatrix::identity(),
                a_l: CoregMatrix::identity(),
            },
            NoiseParams::new(0.5, 0.5)?,
        ),
    })
}

/// A model of the given kind at its placeholder hyperparameters, ready for
/// [`gp::fit`].
pub fn untrained_model(
    kind: ModelKind,
    propensity: &PropensityModel,
    samples: &[PseudoSample],
) -> Result<GpModel, GpError> {
    let (kernel, noise) = model_skeleton(kind, propensity)?;
    GpModel::from_pseudo_samples(kernel, noise, samples)
}

/// Reassembles a fitted model from stored hyperparameters and training
/// arrays (the artifact-file reload path).
pub fn rebuild_model(
    kind: ModelKind,
    propensity: &PropensityModel,
    params: &[f64],
    train_x: Array2<f64>,
    tasks: Vec<usize>,
    targets: Array1<f64>,
) -> Result<GpModel, GpError> {
    let (kernel, noise) = model_skeleton(kind, propensity)?;
    GpModel::new(kernel, noise, train_x, tasks, targets)?.with_params(params)
}

/// Fits one model kind on a replication and returns its posterior together
/// with the gap model its predictions are centered on.
pub fn fit_model(
    kind: ModelKind,
    data: &SimulatedData,
    omega: &ObservationalModel,
    propensity: &PropensityModel,
    optimizer: &OptimizerConfig,
) -> Result<(PosteriorState, ObservationalModel, FitReport), RunnerError> {
    // the naive baseline regresses raw pseudo-outcomes: no debiasing center
    let model_omega = match kind {
        ModelKind::Naive => ObservationalModel::zero(),
        _ => omega.clone(),
    };
    let samples = ipw_transform(&data.experimental, propensity, &model_omega)?;
    let init = untrained_model(kind, propensity, &samples)?;
    let (fitted, report) = gp::fit(&init, optimizer)?;
    let state = gp::posterior(&fitted)?;
    Ok((state, model_omega, report))
}

fn resolve_omega(
    choice: &ObsModelChoice,
    data: &SimulatedData,
) -> Result<ObservationalModel, RunnerError> {
    match choice {
        ObsModelChoice::Oracle => Ok(data.truth.oracle_observational_model()),
        ObsModelChoice::Ridge { lambda } => {
            Ok(fit_observational_ridge(&data.observational, *lambda)?)
        }
    }
}

fn constant_propensity(p: f64) -> Result<PropensityModel, RunnerError> {
    let delta = (0.5 * p.min(1.0 - p)).min(0.05);
    Ok(PropensityModel::constant(p, delta)?)
}

#[derive(Debug, Clone, Copy)]
struct PointMetrics {
    mse: f64,
    coverage: f64,
    width: f64,
}

fn score_grid(
    state: &PosteriorState,
    omega: &ObservationalModel,
    grid: &Array2<f64>,
    truth: &crate::simulate::GroundTruth,
) -> Result<PointMetrics, RunnerError> {
    let preds = gp::predict_batch(state, omega, grid, Z_95)?;
    let m = preds.len() as f64;
    let mut mse = 0.0;
    let mut covered = 0.0;
    let mut width = 0.0;
    for (pred, x) in preds.iter().zip(grid.rows()) {
        let tau = truth.true_cate(x);
        mse += (pred.mean_cate - tau).powi(2);
        if pred.lower <= tau && tau <= pred.upper {
            covered += 1.0;
        }
        width += pred.upper - pred.lower;
    }
    Ok(PointMetrics {
        mse: mse / m,
        coverage: covered / m,
        width: width / m,
    })
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn rep_seed(master: u64, rep: usize) -> u64 {
    master.wrapping_add((rep as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn validate_experiment(cfg: &ExperimentConfig) -> Result<Vec<ModelKind>, RunnerError> {
    if cfg.replications == 0 {
        return Err(RunnerError::InvalidConfig {
            message: "replications must be >= 1".into(),
        });
    }
    if cfg.eval_points == 0 {
        return Err(RunnerError::InvalidConfig {
            message: "eval_points must be >= 1".into(),
        });
    }
    let mut models = Vec::new();
    for &m in &cfg.models {
        if !models.contains(&m) {
            models.push(m);
        }
    }
    if models.is_empty() {
        return Err(RunnerError::InvalidConfig {
            message: "models must name at least one of ours, naive, lcm".into(),
        });
    }
    Ok(models)
}

type RepMetrics = Vec<(ModelKind, GridKind, PointMetrics)>;

fn run_replication(
    cfg: &ExperimentConfig,
    models: &[ModelKind],
    rep: usize,
) -> Result<RepMetrics, RunnerError> {
    let sim_cfg = SimConfig {
        seed: rep_seed(cfg.sim.seed, rep),
        coefficient_seed: Some(cfg.sim.coefficient_seed.unwrap_or(cfg.sim.seed)),
        ..cfg.sim.clone()
    };
    let data = generate(&sim_cfg)?;
    let (in_grid, out_grid) =
        eval_grids(&data.truth.exp_box, &data.truth.obs_box, cfg.eval_points)?;
    let omega = resolve_omega(&cfg.observational, &data)?;
    let propensity = constant_propensity(sim_cfg.design.propensity())?;
    let optimizer = OptimizerConfig {
        seed: rep_seed(cfg.optimizer.seed, rep),
        ..cfg.optimizer.clone()
    };
    let mut out = Vec::with_capacity(models.len() * 2);
    for &kind in models {
        let (state, model_omega, _) = fit_model(kind, &data, &omega, &propensity, &optimizer)?;
        out.push((
            kind,
            GridKind::InDistribution,
            score_grid(&state, &model_omega, &in_grid, &data.truth)?,
        ));
        if let Some(out_grid) = &out_grid {
            out.push((
                kind,
                GridKind::OutOfDistribution,
                score_grid(&state, &model_omega, out_grid, &data.truth)?,
            ));
        }
    }
    Ok(out)
}

/// Runs every replication (in parallel, each with a derived seed), drops
/// failed ones with a warning, and aggregates per model and grid.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsTable, RunnerError> {
    let models = validate_experiment(cfg)?;
    let mut results: Vec<(usize, Result<RepMetrics, String>)> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| {
            (
                rep,
                run_replication(cfg, &models, rep).map_err(|e| e.to_string()),
            )
        })
        .collect();
    results.sort_by_key(|(rep, _)| *rep);

    let mut warnings = Vec::new();
    let mut per_key: BTreeMap<(usize, GridKind), Vec<PointMetrics>> = BTreeMap::new();
    let mut used = 0;
    for (rep, result) in results {
        match result {
            Ok(rows) => {
                used += 1;
                for (model, grid, metrics) in rows {
                    let idx = models.iter().position(|&m| m == model).expect("known model");
                    per_key.entry((idx, grid)).or_default().push(metrics);
                }
            }
            Err(message) => warnings.push(format!("replication {rep} failed: {message}")),
        }
    }
    let failed = cfg.replications - used;
    if failed * 10 > cfg.replications {
        return Err(RunnerError::TooManyFailures {
            failed,
            total: cfg.replications,
            first_failure: warnings
                .first()
                .cloned()
                .unwrap_or_else(|| "no detail".into()),
        });
    }
    for w in &warnings {
        eprintln!("warning: {w}");
    }

    let mut rows = Vec::with_capacity(per_key.len());
    for ((idx, grid), metrics) in per_key {
        let (mse, mse_se) = mean_and_se(&metrics.iter().map(|m| m.mse).collect::<Vec<_>>());
        let (coverage, coverage_se) =
            mean_and_se(&metrics.iter().map(|m| m.coverage).collect::<Vec<_>>());
        let (width, width_se) = mean_and_se(&metrics.iter().map(|m| m.width).collect::<Vec<_>>());
        rows.push(MetricsRow {
            model: models[idx],
            grid,
            mse,
            mse_se,
            coverage,
            coverage_se,
            width,
            width_se,
        });
    }
    Ok(MetricsTable {
        rows,
        replications_used: used,
        replications_failed: failed,
        warnings,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundStudyConfig {
    pub sim: SimConfig,
    /// Experimental sample sizes swept over; each reuses the base design.
    pub sample_sizes: Vec<usize>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub band: BandSettings,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_eval_points")]
    pub eval_points: usize,
    #[serde(default)]
    pub observational: ObsModelChoice,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundStudyRow {
    pub n_exp: usize,
    /// Fraction of replications whose band held at every grid point.
    pub whole_function_coverage: f64,
    pub coverage_se: f64,
    pub width_in: f64,
    pub width_in_se: f64,
    pub width_out: f64,
    pub width_out_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundStudyTable {
    pub rows: Vec<BoundStudyRow>,
    pub replications_used: usize,
    pub replications_failed: usize,
    pub warnings: Vec<String>,
}

impl BoundStudyTable {
    pub fn write_csv(&self, out: impl Write) -> Result<(), RunnerError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "n_exp",
            "whole_function_coverage",
            "coverage_se",
            "width_in",
            "width_in_se",
            "width_out",
            "width_out_se",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.n_exp.to_string(),
                r.whole_function_coverage.to_string(),
                r.coverage_se.to_string(),
                r.width_in.to_string(),
                r.width_in_se.to_string(),
                r.width_out.to_string(),
                r.width_out_se.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

struct BoundRepOutcome {
    covered_everywhere: bool,
    width_in: f64,
    width_out: f64,
}

fn run_bound_replication(
    cfg: &BoundStudyConfig,
    n_exp: usize,
    rep: usize,
) -> Result<BoundRepOutcome, RunnerError> {
    let sim_cfg = SimConfig {
        design: cfg.sim.design.with_n_exp(n_exp),
        seed: rep_seed(cfg.sim.seed, rep),
        coefficient_seed: Some(cfg.sim.coefficient_seed.unwrap_or(cfg.sim.seed)),
        ..cfg.sim.clone()
    };
    let data = generate(&sim_cfg)?;
    let (in_grid, out_grid) =
        eval_grids(&data.truth.exp_box, &data.truth.obs_box, cfg.eval_points)?;
    let out_grid = out_grid.unwrap_or_else(|| Array2::zeros((0, in_grid.ncols())));
    let omega = resolve_omega(&cfg.observational, &data)?;
    let propensity = constant_propensity(sim_cfg.design.propensity())?;
    let optimizer = OptimizerConfig {
        seed: rep_seed(cfg.optimizer.seed, rep),
        ..cfg.optimizer.clone()
    };
    let (state, model_omega, _) =
        fit_model(ModelKind::Ours, &data, &omega, &propensity, &optimizer)?;

    let mut query = Array2::zeros((in_grid.nrows() + out_grid.nrows(), in_grid.ncols()));
    query.slice_mut(s![..in_grid.nrows(), ..]).assign(&in_grid);
    query.slice_mut(s![in_grid.nrows().., ..]).assign(&out_grid);

    let band_cfg = BoundConfig {
        delta: cfg.band.delta,
        tau_radius: cfg.band.tau_radius,
        support_box: data.truth.obs_box.clone(),
        l_f: cfg.band.l_f,
    };
    let report = bounds::uniform_band(&state, &model_omega, &band_cfg, &query)?;
    let preds = gp::predict_batch(&state, &model_omega, &query, Z_95)?;

    let mut covered_everywhere = true;
    for ((point, pred), x) in report.per_point.iter().zip(&preds).zip(query.rows()) {
        let tau = data.truth.true_cate(x);
        if (pred.mean_cate - tau).abs() > point.half_width {
            covered_everywhere = false;
            break;
        }
    }
    let widths: Vec<f64> = report.per_point.iter().map(|p| 2.0 * p.half_width).collect();
    let (in_w, out_w) = widths.split_at(in_grid.nrows());
    Ok(BoundRepOutcome {
        covered_everywhere,
        width_in: in_w.iter().sum::<f64>() / in_w.len() as f64,
        width_out: out_w.iter().sum::<f64>() / out_w.len().max(1) as f64,
    })
}

/// Sweeps the experimental sample size and records whole-function band
/// coverage and mean band widths.
pub fn run_bound_study(cfg: &BoundStudyConfig) -> Result<BoundStudyTable, RunnerError> {
    if cfg.replications == 0 {
        return Err(RunnerError::InvalidConfig {
            message: "replications must be >= 1".into(),
        });
    }
    if cfg.sample_sizes.is_empty() {
        return Err(RunnerError::InvalidConfig {
            message: "sample_sizes must name at least one experimental size".into(),
        });
    }
    let mut rows = Vec::with_capacity(cfg.sample_sizes.len());
    let mut warnings = Vec::new();
    let mut used_total = 0;
    let mut failed_total = 0;
    for &n_exp in &cfg.sample_sizes {
        let mut results: Vec<(usize, Result<BoundRepOutcome, String>)> = (0..cfg.replications)
            .into_par_iter()
            .map(|rep| {
                (
                    rep,
                    run_bound_replication(cfg, n_exp, rep).map_err(|e| e.to_string()),
                )
            })
            .collect();
        results.sort_by_key(|(rep, _)| *rep);
        let mut outcomes = Vec::new();
        for (rep, result) in results {
            match result {
                Ok(o) => outcomes.push(o),
                Err(message) => {
                    warnings.push(format!("n_exp {n_exp} replication {rep} failed: {message}"))
                }
            }
        }
        let failed = cfg.replications - outcomes.len();
        if failed * 10 > cfg.replications {
            return Err(RunnerError::TooManyFailures {
                failed,
                total: cfg.replications,
                first_failure: warnings
                    .first()
                    .cloned()
                    .unwrap_or_else(|| "no detail".into()),
            });
        }
        used_total += outcomes.len();
        failed_total += failed;
        let (coverage, coverage_se) = mean_and_se(
            &outcomes
                .iter()
                .map(|o| f64::from(u8::from(o.covered_everywhere)))
                .collect::<Vec<_>>(),
        );
        let (width_in, width_in_se) =
            mean_and_se(&outcomes.iter().map(|o| o.width_in).collect::<Vec<_>>());
        let (width_out, width_out_se) =
            mean_and_se(&outcomes.iter().map(|o| o.width_out).collect::<Vec<_>>());
        rows.push(BoundStudyRow {
            n_exp,
            whole_function_coverage: coverage,
            coverage_se,
            width_in,
            width_in_se,
            width_out,
            width_out_se,
        });
    }
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    Ok(BoundStudyTable {
        rows,
        replications_used: used_total,
        replications_failed: failed_total,
        warnings,
    })
}

/// Provenance record written beside every artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: u32,
    pub package: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
}

pub fn run_manifest(config_json: &str, seed: u64) -> RunManifest {
    let mut hasher = Sha256::new();
    hasher.update(config_json.as_bytes());
    let digest = hasher.finalize();
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    RunManifest {
        schema: 1,
        package: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: hex,
        seed,
    }
}
