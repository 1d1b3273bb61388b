//! Command-line front end: every subcommand reads one JSON config and
//! writes its outputs plus a manifest recording the config hash and seed.

use catefuse::bounds::BoundError;
use catefuse::data::{
    self, CsvSchema, Environment, ObservationalModel, PropensityModel, RidgeGapModel, SupportBox,
};
use catefuse::gp::{self, GpError, OptimizerConfig, Z_95};
use catefuse::hardness::{self, EquivalenceTest, HardnessError};
use catefuse::pseudo_outcome::{ipw_transform, PseudoError};
use catefuse::runner::{
    self, BoundStudyConfig, ExperimentConfig, ModelKind, RunnerError,
};
use catefuse::simulate::{self, weyl_points, SimConfig, SimError};
use clap::{Parser, Subcommand};
use ndarray::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "catefuse", version, about = "Debias observational effect estimates with experimental data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a simulated dataset pair and its ground-truth sidecar.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fit one model on an experimental CSV and save the artifact.
    Fit {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a saved artifact on query points.
    Predict {
        #[arg(long)]
        config: PathBuf,
    },
    /// Sweep sample sizes and report uniform-band coverage and widths.
    Bound {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run replicated model comparisons and write the metrics table.
    Experiment {
        #[arg(long)]
        config: PathBuf,
    },
    /// Demonstrate the power collapse of the band equivalence test.
    Hardness {
        #[arg(long)]
        config: PathBuf,
    },
}

enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn config(e: impl std::fmt::Display) -> Self {
        CliError::Config(e.to_string())
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<RunnerError> for CliError {
    fn from(e: RunnerError) -> Self {
        match e {
            RunnerError::InvalidConfig { .. } => CliError::config(e),
            _ => CliError::runtime(e),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidConfig { .. } => CliError::config(e),
            _ => CliError::runtime(e),
        }
    }
}

impl From<HardnessError> for CliError {
    fn from(e: HardnessError) -> Self {
        match e {
            HardnessError::InvalidParams { .. } | HardnessError::TooFewTrials { .. } => {
                CliError::config(e)
            }
            _ => CliError::runtime(e),
        }
    }
}

impl From<GpError> for CliError {
    fn from(e: GpError) -> Self {
        CliError::runtime(e)
    }
}

impl From<BoundError> for CliError {
    fn from(e: BoundError) -> Self {
        CliError::runtime(e)
    }
}

impl From<PseudoError> for CliError {
    fn from(e: PseudoError) -> Self {
        CliError::runtime(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config } => run_simulate(&config),
        Command::Fit { config } => run_fit(&config),
        Command::Predict { config } => run_predict(&config),
        Command::Bound { config } => run_bound(&config),
        Command::Experiment { config } => run_experiment_cmd(&config),
        Command::Hardness { config } => run_hardness(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(message)) => {
            eprintln!("config error: {message}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(3)
        }
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len();
    }
    text.len()
}

/// Reads and deserializes a config, returning both the value and the raw
/// text (hashed into the manifest).
fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<(T, String), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    match serde_json::from_str::<T>(&text) {
        Ok(v) => Ok((v, text)),
        Err(e) => {
            let msg = match e.classify() {
                serde_json::error::Category::Syntax | serde_json::error::Category::Eof => {
                    format!(
                        "malformed JSON in {} at byte {} (line {}, column {}): {e}",
                        path.display(),
                        byte_offset(&text, e.line(), e.column()),
                        e.line(),
                        e.column()
                    )
                }
                _ => format!("invalid config in {}: {e}", path.display()),
            };
            Err(CliError::Config(msg))
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(CliError::runtime)?;
    fs::write(path, text)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_manifest(dir: &Path, config_text: &str, seed: u64) -> Result<(), CliError> {
    write_json(&dir.join("manifest.json"), &runner::run_manifest(config_text, seed))
}

#[derive(Deserialize)]
struct SimulateJob {
    sim: SimConfig,
    output_dir: PathBuf,
    #[serde(default = "default_sidecar_points")]
    sidecar_points: usize,
}

fn default_sidecar_points() -> usize {
    512
}

#[derive(Serialize)]
struct TruthSidecar {
    obs_box: SupportBox,
    exp_box: SupportBox,
    grid: Vec<Vec<f64>>,
    tau: Vec<f64>,
}

fn run_simulate(config: &Path) -> Result<(), CliError> {
    let (job, text) = load_config::<SimulateJob>(config)?;
    let data = simulate::generate(&job.sim)?;
    ensure_dir(&job.output_dir)?;
    data::write_csv(&data.observational, &job.output_dir.join("observational.csv"))
        .map_err(CliError::runtime)?;
    data::write_csv(&data.experimental, &job.output_dir.join("experimental.csv"))
        .map_err(CliError::runtime)?;

    let grid = weyl_points(job.sidecar_points, &data.truth.obs_box, 0);
    let tau: Vec<f64> = grid.rows().into_iter().map(|x| data.truth.true_cate(x)).collect();
    let sidecar = TruthSidecar {
        obs_box: data.truth.obs_box.clone(),
        exp_box: data.truth.exp_box.clone(),
        grid: grid.rows().into_iter().map(|r| r.to_vec()).collect(),
        tau,
    };
    write_json(&job.output_dir.join("truth.json"), &sidecar)?;
    write_manifest(&job.output_dir, &text, job.sim.seed)?;
    println!(
        "wrote observational.csv, experimental.csv, truth.json to {}",
        job.output_dir.display()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ConstantPropensity {
    p: f64,
    delta: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
enum AdjustmentJob {
    /// No observational centering: the GP regresses raw pseudo-outcomes.
    Zero,
    Ridge {
        observational_csv: PathBuf,
        schema: CsvSchema,
        lambda: f64,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
enum StoredAdjustment {
    Zero,
    Ridge { model: RidgeGapModel },
}

impl StoredAdjustment {
    fn to_model(&self) -> ObservationalModel {
        match self {
            StoredAdjustment::Zero => ObservationalModel::zero(),
            StoredAdjustment::Ridge { model } => ObservationalModel::Ridge(model.clone()),
        }
    }
}

#[derive(Deserialize)]
struct FitJob {
    experimental_csv: PathBuf,
    schema: CsvSchema,
    model: ModelKind,
    propensity: ConstantPropensity,
    adjustment: AdjustmentJob,
    #[serde(default)]
    optimizer: OptimizerConfig,
    output: PathBuf,
}

/// Everything needed to reload a fitted model and predict with it.
#[derive(Serialize, Deserialize)]
struct ModelArtifact {
    kind: ModelKind,
    propensity: ConstantPropensity,
    params: Vec<f64>,
    param_names: Vec<String>,
    train_x: Vec<Vec<f64>>,
    tasks: Vec<usize>,
    targets: Vec<f64>,
    adjustment: StoredAdjustment,
    fit: gp::FitReport,
}

fn run_fit(config: &Path) -> Result<(), CliError> {
    let (job, _text) = load_config::<FitJob>(config)?;
    if job.schema.environment != Environment::Experimental {
        return Err(CliError::Config(
            "schema.environment must be experimental for the fitted sample".into(),
        ));
    }
    let experimental =
        data::load_csv(&job.experimental_csv, &job.schema).map_err(CliError::runtime)?;
    let propensity = PropensityModel::constant(job.propensity.p, job.propensity.delta)
        .map_err(CliError::config)?;

    let (omega, stored) = match &job.adjustment {
        AdjustmentJob::Zero => (ObservationalModel::zero(), StoredAdjustment::Zero),
        AdjustmentJob::Ridge {
            observational_csv,
            schema,
            lambda,
        } => {
            if schema.environment != Environment::Observational {
                return Err(CliError::Config(
                    "adjustment.schema.environment must be observational".into(),
                ));
            }
            let observational =
                data::load_csv(observational_csv, schema).map_err(CliError::runtime)?;
            let fitted = data::fit_observational_ridge(&observational, *lambda)
                .map_err(CliError::runtime)?;
            let ObservationalModel::Ridge(model) = fitted.clone() else {
                return Err(CliError::Runtime("ridge fit returned a non-ridge model".into()));
            };
            (fitted, StoredAdjustment::Ridge { model })
        }
    };

    // the naive baseline is defined on raw pseudo-outcomes
    let (omega, stored) = match job.model {
        ModelKind::Naive => (ObservationalModel::zero(), StoredAdjustment::Zero),
        _ => (omega, stored),
    };

    let samples = ipw_transform(&experimental, &propensity, &omega)?;
    let init = runner::untrained_model(job.model, &propensity, &samples)?;
    let (fitted, report) = gp::fit(&init, &job.optimizer)?;

    let artifact = ModelArtifact {
        kind: job.model,
        propensity: job.propensity,
        params: fitted.params(),
        param_names: fitted.param_names().iter().map(|s| s.to_string()).collect(),
        train_x: fitted
            .train_x()
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect(),
        tasks: fitted.train_tasks().to_vec(),
        targets: fitted.targets().to_vec(),
        adjustment: stored,
        fit: report.clone(),
    };
    if let Some(parent) = job.output.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    write_json(&job.output, &artifact)?;
    println!(
        "fit {} on {} samples: mll {:.4}, {} iterations, wrote {}",
        serde_json::to_string(&job.model).map_err(CliError::runtime)?,
        experimental.n(),
        report.mll,
        report.iterations,
        job.output.display()
    );
    Ok(())
}

#[derive(Deserialize)]
struct PredictJob {
    artifact: PathBuf,
    query_csv: PathBuf,
    /// Covariate column names, in model order; all columns when omitted.
    #[serde(default)]
    covariates: Option<Vec<String>>,
    #[serde(default = "default_z")]
    z: f64,
    output: PathBuf,
}

fn default_z() -> f64 {
    Z_95
}

fn load_query(path: &Path, covariates: &Option<Vec<String>>) -> Result<(Vec<String>, Array2<f64>), CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(CliError::runtime)?
        .iter()
        .map(|h| h.to_string())
        .collect();
    let names: Vec<String> = match covariates {
        Some(cols) => cols.clone(),
        None => headers.clone(),
    };
    let indices: Vec<usize> = names
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| CliError::Config(format!("query column `{name}` not found")))
        })
        .collect::<Result<_, _>>()?;
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(CliError::runtime)?;
        for (&col, name) in indices.iter().zip(&names) {
            let raw = record.get(col).unwrap_or_default();
            let v: f64 = raw.parse().map_err(|_| {
                CliError::Runtime(format!(
                    "row {}: cannot parse `{raw}` in column {name}",
                    i + 1
                ))
            })?;
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(CliError::Runtime(format!(
            "{} holds no data rows",
            path.display()
        )));
    }
    let grid = Array2::from_shape_vec((rows, names.len()), values).expect("row-major query");
    Ok((names, grid))
}

fn run_predict(config: &Path) -> Result<(), CliError> {
    let (job, _text) = load_config::<PredictJob>(config)?;
    let artifact_text = fs::read_to_string(&job.artifact)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", job.artifact.display())))?;
    let artifact: ModelArtifact = serde_json::from_str(&artifact_text)
        .map_err(|e| CliError::Runtime(format!("invalid artifact {}: {e}", job.artifact.display())))?;

    let propensity = PropensityModel::constant(artifact.propensity.p, artifact.propensity.delta)
        .map_err(CliError::runtime)?;
    let n = artifact.train_x.len();
    let d = artifact.train_x.first().map_or(0, |r| r.len());
    let train_x = Array2::from_shape_vec(
        (n, d),
        artifact.train_x.iter().flatten().copied().collect(),
    )
    .map_err(|e| CliError::Runtime(format!("artifact training rows are ragged: {e}")))?;
    let model = runner::rebuild_model(
        artifact.kind,
        &propensity,
        &artifact.params,
        train_x,
        artifact.tasks.clone(),
        Array1::from_vec(artifact.targets.clone()),
    )?;
    let state = gp::posterior(&model)?;
    let omega = artifact.adjustment.to_model();

    let (names, grid) = load_query(&job.query_csv, &job.covariates)?;
    if grid.ncols() != d {
        return Err(CliError::Config(format!(
            "query has {} covariates but the artifact was trained on {d}",
            grid.ncols()
        )));
    }
    let preds = gp::predict_batch(&state, &omega, &grid, job.z)?;

    if let Some(parent) = job.output.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    let mut w = csv::Writer::from_path(&job.output)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", job.output.display())))?;
    let mut header = names.clone();
    header.extend(
        ["mean_gap", "mean_cate", "std", "lower", "upper"]
            .iter()
            .map(|s| s.to_string()),
    );
    w.write_record(&header).map_err(CliError::runtime)?;
    for (row, pred) in grid.rows().into_iter().zip(&preds) {
        let mut record: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        record.push(format!("{:?}", pred.mean_gap));
        record.push(format!("{:?}", pred.mean_cate));
        record.push(format!("{:?}", pred.std));
        record.push(format!("{:?}", pred.lower));
        record.push(format!("{:?}", pred.upper));
        w.write_record(&record).map_err(CliError::runtime)?;
    }
    w.flush().map_err(CliError::runtime)?;
    println!("wrote {} predictions to {}", preds.len(), job.output.display());
    Ok(())
}

fn run_bound(config: &Path) -> Result<(), CliError> {
    let (cfg, text) = load_config::<BoundStudyConfig>(config)?;
    let table = runner::run_bound_study(&cfg)?;
    let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    ensure_dir(&dir)?;
    let path = dir.join("bound_coverage.csv");
    let file = fs::File::create(&path)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    table.write_csv(file)?;
    write_manifest(&dir, &text, cfg.sim.seed)?;
    println!(
        "wrote {} ({} replications used, {} failed)",
        path.display(),
        table.replications_used,
        table.replications_failed
    );
    Ok(())
}

fn run_experiment_cmd(config: &Path) -> Result<(), CliError> {
    let (cfg, text) = load_config::<ExperimentConfig>(config)?;
    let table = runner::run_experiment(&cfg)?;
    let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    ensure_dir(&dir)?;
    let path = dir.join("metrics.csv");
    let file = fs::File::create(&path)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    table.write_csv(file)?;
    write_manifest(&dir, &text, cfg.sim.seed)?;
    println!(
        "wrote {} ({} replications used, {} failed)",
        path.display(),
        table.replications_used,
        table.replications_failed
    );
    Ok(())
}

#[derive(Deserialize)]
struct HardnessJob {
    #[serde(default = "default_outcome_bound")]
    outcome_bound: f64,
    #[serde(default = "default_dim")]
    dim: usize,
    #[serde(default = "default_alpha")]
    alpha: f64,
    #[serde(default = "default_bins")]
    bins: usize,
    /// Band edges; defaults to ±outcome_bound/2.
    #[serde(default)]
    lower_band: Option<f64>,
    #[serde(default)]
    upper_band: Option<f64>,
    sample_sizes: Vec<usize>,
    trials: usize,
    seed: u64,
    output_dir: PathBuf,
}

fn default_outcome_bound() -> f64 {
    1.0
}

fn default_dim() -> usize {
    1
}

fn default_alpha() -> f64 {
    0.05
}

fn default_bins() -> usize {
    2
}

fn run_hardness(config: &Path) -> Result<(), CliError> {
    let (job, text) = load_config::<HardnessJob>(config)?;
    let base = hardness::BoundedBase::demo(job.outcome_bound, job.dim)?;
    let lower = job.lower_band.unwrap_or(-0.5 * job.outcome_bound);
    let upper = job.upper_band.unwrap_or(0.5 * job.outcome_bound);
    let test = EquivalenceTest::new(
        job.alpha,
        lower,
        upper,
        job.bins,
        base.propensity,
        base.support.clone(),
    )?;
    let curve =
        hardness::power_collapse_curve(&test, &base, &job.sample_sizes, job.trials, job.seed)?;
    ensure_dir(&job.output_dir)?;
    write_json(&job.output_dir.join("hardness_curve.json"), &curve)?;
    write_manifest(&job.output_dir, &text, job.seed)?;
    for point in &curve {
        println!(
            "n={:4} power={:.3} level={:.3} gap={:+.3} (se {:.4}, tv bound {:.3})",
            point.n,
            point.power_hat,
            point.level_hat,
            point.power_hat - point.level_hat,
            point.mc_stderr,
            hardness::coupling_tv_bound(point.n, 1.0 / point.n as f64, 1.0)
        );
    }
    Ok(())
}
