//! Datasets, CSV ingestion, and the two nuisance models every estimator
//! needs: the propensity score and the observational effect-gap adjustment.
//!
//! Treatments are strictly binary, covariates and outcomes strictly finite;
//! violations are reported with the offending row so bad files fail loudly
//! instead of leaking NaNs into a Gram matrix.

use crate::numerics::{self, NumericsError, SpdMatrix};
use ndarray::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv parse error at data row {row}, column `{column}`: {message}")]
    ParseError {
        row: usize,
        column: String,
        message: String,
    },
    #[error("schema error: column `{column}` not found in header")]
    SchemaError { column: String },
    #[error("data row {row}, column `{column}`: value is not finite")]
    NonFinite { row: usize, column: String },
    #[error("data row {row}: treatment value {value} is not binary")]
    NonBinaryTreatment { row: usize, value: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("array lengths disagree: {n_covariate_rows} covariate rows, {n_treatments} treatments, {n_outcomes} outcomes")]
    LengthMismatch {
        n_covariate_rows: usize,
        n_treatments: usize,
        n_outcomes: usize,
    },
    #[error("covariate dimension must be at least 1")]
    ZeroDimensional,
    #[error("overlap violated: propensity {propensity} outside ({delta}, {one_minus_delta})")]
    OverlapViolation {
        propensity: f64,
        delta: f64,
        one_minus_delta: f64,
    },
    #[error("overlap margin delta = {delta} must lie in (0, 0.5)")]
    InvalidDelta { delta: f64 },
    #[error("ridge penalty lambda = {lambda} must be finite and >= 0")]
    InvalidLambda { lambda: f64 },
    #[error("arm {arm} is degenerate: {rows} rows cannot identify {unknowns} coefficients without regularization")]
    DegenerateArm {
        arm: u8,
        rows: usize,
        unknowns: usize,
    },
    #[error("covering number exceeds u64 range")]
    Overflow,
    #[error("invalid covering-number arguments: {message}")]
    InvalidCovering { message: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Environment {
    Observational,
    Experimental,
}

impl fmt::Display for Environment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Environment::Observational => write!(f, "observational"),
            Environment::Experimental => write!(f, "experimental"),
        }
    }
}

/// A covariate/treatment/outcome triple tagged with its provenance.
#[derive(Debug, Clone)]
pub struct Dataset {
    covariates: Array2<f64>,
    treatments: Vec<u8>,
    outcomes: Array1<f64>,
    environment: Environment,
}

impl Dataset {
    pub fn new(
        covariates: Array2<f64>,
        treatments: Vec<u8>,
        outcomes: Array1<f64>,
        environment: Environment,
    ) -> Result<Self, DataError> {
        let n = covariates.nrows();
        if treatments.len() != n || outcomes.len() != n {
            return Err(DataError::LengthMismatch {
                n_covariate_rows: n,
                n_treatments: treatments.len(),
                n_outcomes: outcomes.len(),
            });
        }
        if n == 0 {
            return Err(DataError::EmptyDataset);
        }
        if covariates.ncols() == 0 {
            return Err(DataError::ZeroDimensional);
        }
        for (i, row) in covariates.rows().into_iter().enumerate() {
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(DataError::NonFinite {
                    row: i + 1,
                    column: format!("x{}", j + 1),
                });
            }
        }
        if let Some(i) = outcomes.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite {
                row: i + 1,
                column: "y".to_string(),
            });
        }
        if let Some((i, &t)) = treatments.iter().enumerate().find(|(_, &t)| t > 1) {
            return Err(DataError::NonBinaryTreatment {
                row: i + 1,
                value: t as f64,
            });
        }
        Ok(Self {
            covariates,
            treatments,
            outcomes,
            environment,
        })
    }

    pub fn n(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn dim(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn covariates(&self) -> &Array2<f64> {
        &self.covariates
    }

    pub fn covariate_row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.covariates.row(i)
    }

    pub fn treatments(&self) -> &[u8] {
        &self.treatments
    }

    pub fn outcomes(&self) -> &Array1<f64> {
        &self.outcomes
    }

    pub fn environment(&self) -> Environment {
        self.environment
    }

    /// Rows belonging to one treatment arm.
    pub fn arm_indices(&self, arm: u8) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.treatments[i] == arm).collect()
    }
}

/// Column mapping for [`load_csv`]. When `outcome` is `None` the outcome
/// vector is filled with zeros (covariate-only carrier files).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub treatment: String,
    pub covariates: Vec<String>,
    #[serde(default)]
    pub outcome: Option<String>,
    pub environment: Environment,
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| DataError::ParseError {
            row: 0,
            column: "<header>".to_string(),
            message: e.to_string(),
        })?
        .clone();
    let col_index = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::SchemaError {
                column: name.to_string(),
            })
    };

    let t_col = col_index(&schema.treatment)?;
    let x_cols: Vec<usize> = schema
        .covariates
        .iter()
        .map(|c| col_index(c))
        .collect::<Result<_, _>>()?;
    let y_col = schema.outcome.as_deref().map(col_index).transpose()?;
    if x_cols.is_empty() {
        return Err(DataError::ZeroDimensional);
    }

    let parse_cell = |row: usize, column: &str, raw: &str| -> Result<f64, DataError> {
        let v: f64 = raw.parse().map_err(|_| DataError::ParseError {
            row,
            column: column.to_string(),
            message: format!("cannot parse `{raw}` as a number"),
        })?;
        if !v.is_finite() {
            return Err(DataError::NonFinite {
                row,
                column: column.to_string(),
            });
        }
        Ok(v)
    };

    let mut covariates = Vec::new();
    let mut treatments = Vec::new();
    let mut outcomes = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| DataError::ParseError {
            row,
            column: "<record>".to_string(),
            message: e.to_string(),
        })?;
        let cell = |col: usize, name: &str| -> Result<f64, DataError> {
            let raw = record.get(col).ok_or_else(|| DataError::ParseError {
                row,
                column: name.to_string(),
                message: "missing field".to_string(),
            })?;
            parse_cell(row, name, raw)
        };
        let t_raw = cell(t_col, &schema.treatment)?;
        if t_raw != 0.0 && t_raw != 1.0 {
            return Err(DataError::NonBinaryTreatment { row, value: t_raw });
        }
        treatments.push(t_raw as u8);
        for (&col, name) in x_cols.iter().zip(&schema.covariates) {
            covariates.push(cell(col, name)?);
        }
        outcomes.push(match y_col {
            Some(col) => cell(col, schema.outcome.as_deref().unwrap())?,
            None => 0.0,
        });
    }

    let n = treatments.len();
    if n == 0 {
        return Err(DataError::EmptyDataset);
    }
    let covariates = Array2::from_shape_vec((n, x_cols.len()), covariates)
        .expect("row-major reshape of parsed cells");
    Dataset::new(
        covariates,
        treatments,
        Array1::from_vec(outcomes),
        schema.environment,
    )
}

/// Writes `t,x1..xd,y` with a header row; [`load_csv`] round-trips it.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    })?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=dataset.dim()).map(|j| format!("x{j}")));
    header.push("y".to_string());
    let write_err = |e: csv::Error| DataError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    };
    writer.write_record(&header).map_err(write_err)?;
    for i in 0..dataset.n() {
        let mut record = vec![dataset.treatments()[i].to_string()];
        record.extend(dataset.covariate_row(i).iter().map(|v| format!("{v:?}")));
        record.push(format!("{:?}", dataset.outcomes()[i]));
        writer.write_record(&record).map_err(write_err)?;
    }
    writer.flush().map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

/// The default canonical schema produced by [`write_csv`].
pub fn canonical_schema(dim: usize, environment: Environment) -> CsvSchema {
    CsvSchema {
        treatment: "t".to_string(),
        covariates: (1..=dim).map(|j| format!("x{j}")).collect(),
        outcome: Some("y".to_string()),
        environment,
    }
}

type PropensityFn = Arc<dyn Fn(ArrayView1<'_, f64>) -> f64 + Send + Sync>;

/// Treatment probability pi(x), guarded by an overlap margin delta: every
/// query must satisfy delta < pi(x) < 1 - delta.
#[derive(Clone)]
pub enum PropensityModel {
    Constant { p: f64, delta: f64 },
    Function { f: PropensityFn, delta: f64 },
}

impl fmt::Debug for PropensityModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PropensityModel::Constant { p, delta } => f
                .debug_struct("Constant")
                .field("p", p)
                .field("delta", delta)
                .finish(),
            PropensityModel::Function { delta, .. } => f
                .debug_struct("Function")
                .field("delta", delta)
                .finish_non_exhaustive(),
        }
    }
}

impl PropensityModel {
    pub fn constant(p: f64, delta: f64) -> Result<Self, DataError> {
        check_delta(delta)?;
        Ok(PropensityModel::Constant { p, delta })
    }

    pub fn function(
        f: impl Fn(ArrayView1<'_, f64>) -> f64 + Send + Sync + 'static,
        delta: f64,
    ) -> Result<Self, DataError> {
        check_delta(delta)?;
        Ok(PropensityModel::Function {
            f: Arc::new(f),
            delta,
        })
    }

    pub fn delta(&self) -> f64 {
        match self {
            PropensityModel::Constant { delta, .. } => *delta,
            PropensityModel::Function { delta, .. } => *delta,
        }
    }

    /// Evaluates pi(x), failing if the value leaves the overlap band.
    pub fn propensity(&self, x: ArrayView1<'_, f64>) -> Result<f64, DataError> {
        let (p, delta) = match self {
            PropensityModel::Constant { p, delta } => (*p, *delta),
            PropensityModel::Function { f, delta } => (f(x), *delta),
        };
        if !(p > delta && p < 1.0 - delta) {
            return Err(DataError::OverlapViolation {
                propensity: p,
                delta,
                one_minus_delta: 1.0 - delta,
            });
        }
        Ok(p)
    }
}

fn check_delta(delta: f64) -> Result<(), DataError> {
    if !(delta > 0.0 && delta < 0.5) {
        return Err(DataError::InvalidDelta { delta });
    }
    Ok(())
}

/// One fitted linear predictor: intercept + coefs . x.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearModel {
    pub intercept: f64,
    pub coefs: Vec<f64>,
}

impl LinearModel {
    pub fn predict(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.intercept
            + self
                .coefs
                .iter()
                .zip(x.iter())
                .map(|(c, v)| c * v)
                .sum::<f64>()
    }
}

/// Per-arm ridge fit of the observational outcome surface.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RidgeGapModel {
    pub arm0: LinearModel,
    pub arm1: LinearModel,
    pub lambda: f64,
}

type GapFn = Arc<dyn Fn(ArrayView1<'_, f64>) -> f64 + Send + Sync>;

/// The observational effect-gap estimate omega(x) = mu(x,1) - mu(x,0),
/// either an oracle closure or coefficients fitted by
/// [`fit_observational_ridge`].
#[derive(Clone)]
pub enum ObservationalModel {
    Oracle(GapFn),
    Ridge(RidgeGapModel),
}

impl fmt::Debug for ObservationalModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObservationalModel::Oracle(_) => f.write_str("Oracle(..)"),
            ObservationalModel::Ridge(m) => f.debug_tuple("Ridge").field(m).finish(),
        }
    }
}

impl ObservationalModel {
    pub fn oracle(f: impl Fn(ArrayView1<'_, f64>) -> f64 + Send + Sync + 'static) -> Self {
        ObservationalModel::Oracle(Arc::new(f))
    }

    /// A zero adjustment: the GP then regresses raw pseudo-outcomes.
    pub fn zero() -> Self {
        ObservationalModel::Oracle(Arc::new(|_| 0.0))
    }

    pub fn predict_gap(&self, x: ArrayView1<'_, f64>) -> f64 {
        match self {
            ObservationalModel::Oracle(f) => f(x),
            ObservationalModel::Ridge(m) => m.arm1.predict(x) - m.arm0.predict(x),
        }
    }
}

/// Fits one ridge regression per treatment arm with an unpenalized intercept
/// and returns the gap model. `lambda = 0` requires each arm to have at
/// least dim+1 rows.
pub fn fit_observational_ridge(
    dataset: &Dataset,
    lambda: f64,
) -> Result<ObservationalModel, DataError> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(DataError::InvalidLambda { lambda });
    }
    let d = dataset.dim();
    let mut arms = Vec::with_capacity(2);
    for arm in 0..2u8 {
        let rows = dataset.arm_indices(arm);
        let unknowns = d + 1;
        if rows.is_empty() || (lambda == 0.0 && rows.len() < unknowns) {
            return Err(DataError::DegenerateArm {
                arm,
                rows: rows.len(),
                unknowns,
            });
        }
        let mut design = Array2::zeros((rows.len(), unknowns));
        let mut y = Array1::zeros(rows.len());
        for (r, &i) in rows.iter().enumerate() {
            design[[r, 0]] = 1.0;
            design
                .row_mut(r)
                .slice_mut(s![1..])
                .assign(&dataset.covariate_row(i));
            y[r] = dataset.outcomes()[i];
        }
        let mut normal = design.t().dot(&design);
        for j in 1..unknowns {
            normal[[j, j]] += lambda;
        }
        let rhs = design.t().dot(&y);
        let normal = SpdMatrix::new(0.5 * (&normal + &normal.t()))?;
        // with lambda = 0 a singular system means the arm is unidentifiable,
        // so jitter must not paper over it
        let schedule = if lambda == 0.0 {
            vec![0.0]
        } else {
            numerics::default_jitter_schedule(&normal).to_vec()
        };
        let beta = match numerics::cholesky(&normal, &schedule) {
            Ok(factor) => factor.solve_vec(&rhs.view())?,
            Err(NumericsError::NotPositiveDefinite { .. }) => {
                return Err(DataError::DegenerateArm {
                    arm,
                    rows: rows.len(),
                    unknowns,
                })
            }
            Err(e) => return Err(e.into()),
        };
        arms.push(LinearModel {
            intercept: beta[0],
            coefs: beta.slice(s![1..]).to_vec(),
        });
    }
    let arm1 = arms.pop().expect("two arms fitted");
    let arm0 = arms.pop().expect("two arms fitted");
    Ok(ObservationalModel::Ridge(RidgeGapModel {
        arm0,
        arm1,
        lambda,
    }))
}

/// Number of tau-balls needed to cover a hypercube with the given side
/// lengths: prod_j ceil(1 + r_j / tau).
pub fn covering_number_hypercube(side_lengths: &[f64], tau: f64) -> Result<u64, DataError> {
    validate_covering_args(side_lengths, tau)?;
    let mut acc: u64 = 1;
    for &r in side_lengths {
        let factor = (1.0 + r / tau).ceil();
        if factor > u64::MAX as f64 {
            return Err(DataError::Overflow);
        }
        acc = acc
            .checked_mul(factor as u64)
            .ok_or(DataError::Overflow)?;
    }
    Ok(acc)
}

/// log of [`covering_number_hypercube`], immune to u64 overflow; the error
/// bound machinery only ever needs the logarithm.
pub fn log_covering_number_hypercube(side_lengths: &[f64], tau: f64) -> Result<f64, DataError> {
    validate_covering_args(side_lengths, tau)?;
    Ok(side_lengths
        .iter()
        .map(|&r| (1.0 + r / tau).ceil().ln())
        .sum())
}

fn validate_covering_args(side_lengths: &[f64], tau: f64) -> Result<(), DataError> {
    if side_lengths.is_empty() {
        return Err(DataError::InvalidCovering {
            message: "side_lengths is empty".to_string(),
        });
    }
    if let Some(&r) = side_lengths.iter().find(|r| !r.is_finite() || **r < 0.0) {
        return Err(DataError::InvalidCovering {
            message: format!("side length {r} must be finite and >= 0"),
        });
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(DataError::InvalidCovering {
            message: format!("tau = {tau} must be finite and > 0"),
        });
    }
    Ok(())
}

/// An axis-aligned box, the support description used by simulators, grids,
/// and the uniform-bound covering argument.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl SupportBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, DataError> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(DataError::InvalidCovering {
                message: format!(
                    "box bounds disagree: {} lower vs {} upper",
                    lo.len(),
                    hi.len()
                ),
            });
        }
        for (a, b) in lo.iter().zip(&hi) {
            if !a.is_finite() || !b.is_finite() || a > b {
                return Err(DataError::InvalidCovering {
                    message: format!("invalid box interval [{a}, {b}]"),
                });
            }
        }
        Ok(Self { lo, hi })
    }

    /// The cube [lo, hi]^dim.
    pub fn cube(lo: f64, hi: f64, dim: usize) -> Result<Self, DataError> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    /// Tight bounding box of a set of points (rows).
    pub fn bounding(points: &Array2<f64>) -> Result<Self, DataError> {
        if points.nrows() == 0 {
            return Err(DataError::EmptyDataset);
        }
        let d = points.ncols();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for row in points.rows() {
            for j in 0..d {
                lo[j] = lo[j].min(row[j]);
                hi[j] = hi[j].max(row[j]);
            }
        }
        Self::new(lo, hi)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn side_lengths(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).collect()
    }

    /// Euclidean diameter.
    pub fn diameter(&self) -> f64 {
        self.side_lengths().iter().map(|r| r * r).sum::<f64>().sqrt()
    }

    pub fn contains(&self, x: ArrayView1<'_, f64>) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (a, b))| *v >= *a && *v <= *b)
    }
}

/// Per-column z-scoring parameters; constant columns are left unscaled.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardization {
    pub fn fit(covariates: &Array2<f64>) -> Self {
        let n = covariates.nrows().max(1) as f64;
        let d = covariates.ncols();
        let mut means = vec![0.0; d];
        let mut stds = vec![0.0; d];
        for j in 0..d {
            let col = covariates.column(j);
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            means[j] = mean;
            stds[j] = if var.sqrt() > 0.0 { var.sqrt() } else { 1.0 };
        }
        Self { means, stds }
    }

    pub fn apply(&self, covariates: &Array2<f64>) -> Array2<f64> {
        let mut out = covariates.clone();
        for j in 0..self.means.len() {
            let (m, s) = (self.means[j], self.stds[j]);
            out.column_mut(j).mapv_inplace(|v| (v - m) / s);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::io::Write;

    fn temp_csv(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn schema(d: usize) -> CsvSchema {
        canonical_schema(d, Environment::Experimental)
    }

    #[test]
    fn load_csv_parses_small_file() {
        let f = temp_csv("t,x1,x2,y\n1,0.5,-1.0,2.5\n0,0.0,3.25,-1.0\n1,2.0,0.125,0.0\n");
        let ds = load_csv(f.path(), &schema(2)).unwrap();
        assert_eq!(ds.n(), 3);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.treatments(), &[1, 0, 1]);
        assert_eq!(ds.covariates()[[1, 1]], 3.25);
        assert_eq!(ds.outcomes()[0], 2.5);
        assert_eq!(ds.environment(), Environment::Experimental);
    }

    #[test]
    fn load_csv_reports_nonbinary_treatment_row() {
        let f = temp_csv("t,x1,y\n0,1.0,1.0\n1,1.0,1.0\n2,1.0,1.0\n");
        match load_csv(f.path(), &schema(1)).unwrap_err() {
            DataError::NonBinaryTreatment { row, value } => {
                assert_eq!(row, 3);
                assert_eq!(value, 2.0);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn load_csv_reports_missing_column() {
        let f = temp_csv("t,x1,y\n0,1.0,1.0\n");
        match load_csv(f.path(), &schema(2)).unwrap_err() {
            DataError::SchemaError { column } => assert_eq!(column, "x2"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn load_csv_rejects_missing_and_nonfinite_cells() {
        let f = temp_csv("t,x1,y\n0,,1.0\n");
        assert!(matches!(
            load_csv(f.path(), &schema(1)).unwrap_err(),
            DataError::ParseError { row: 1, .. }
        ));
        let f = temp_csv("t,x1,y\n0,1.0,1.0\n1,NaN,2.0\n");
        match load_csv(f.path(), &schema(1)).unwrap_err() {
            DataError::NonFinite { row, column } => {
                assert_eq!(row, 2);
                assert_eq!(column, "x1");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = Dataset::new(
            array![[0.1, -2.0], [3.5, 0.7], [1e-12, 9.25]],
            vec![1, 0, 1],
            array![0.25, -1.5, 3.0e10],
            Environment::Observational,
        )
        .unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_csv(&ds, f.path()).unwrap();
        let back = load_csv(
            f.path(),
            &canonical_schema(2, Environment::Observational),
        )
        .unwrap();
        assert_eq!(back.covariates(), ds.covariates());
        assert_eq!(back.outcomes(), ds.outcomes());
        assert_eq!(back.treatments(), ds.treatments());
    }

    #[test]
    fn propensity_overlap_guard_fires_exactly_outside_band() {
        let ok = PropensityModel::constant(0.5, 0.05).unwrap();
        assert_eq!(ok.propensity(array![0.0].view()).unwrap(), 0.5);
        let boundary = PropensityModel::constant(0.05, 0.05).unwrap();
        assert!(matches!(
            boundary.propensity(array![0.0].view()),
            Err(DataError::OverlapViolation { .. })
        ));
        let inside = PropensityModel::constant(0.0500001, 0.05).unwrap();
        assert!(inside.propensity(array![0.0].view()).is_ok());
        assert!(PropensityModel::constant(0.5, 0.0).is_err());
        assert!(PropensityModel::constant(0.5, 0.5).is_err());
    }

    #[test]
    fn function_propensity_evaluates_pointwise() {
        let m = PropensityModel::function(|x: ArrayView1<'_, f64>| 0.25 + 0.1 * x[0], 0.05)
            .unwrap();
        assert_abs_diff_eq!(m.propensity(array![1.0].view()).unwrap(), 0.35);
        assert!(m.propensity(array![10.0].view()).is_err());
    }

    #[test]
    fn ridge_fit_matches_hand_solved_system() {
        // arm 1: x = 0,1,2 / y = 1,2,3; arm 0: same x, y = 0.
        // lambda = 1 with a free intercept gives intercept 4/3, slope 2/3.
        let ds = Dataset::new(
            array![[0.0], [1.0], [2.0], [0.0], [1.0], [2.0]],
            vec![1, 1, 1, 0, 0, 0],
            array![1.0, 2.0, 3.0, 0.0, 0.0, 0.0],
            Environment::Observational,
        )
        .unwrap();
        let model = fit_observational_ridge(&ds, 1.0).unwrap();
        let ObservationalModel::Ridge(m) = &model else {
            panic!("expected ridge variant")
        };
        assert_abs_diff_eq!(m.arm1.intercept, 4.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.arm1.coefs[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.arm0.intercept, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(model.predict_gap(array![1.0].view()), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn unregularized_fit_recovers_exact_line() {
        let ds = Dataset::new(
            array![[0.0], [1.0], [2.0], [0.0], [1.0]],
            vec![1, 1, 1, 0, 0],
            array![1.0, 2.0, 3.0, 5.0, 5.0],
            Environment::Observational,
        )
        .unwrap();
        let model = fit_observational_ridge(&ds, 0.0).unwrap();
        assert_abs_diff_eq!(
            model.predict_gap(array![3.0].view()),
            (1.0 + 3.0) - 5.0,
            epsilon = 1e-10
        );
    }

    #[test]
    fn degenerate_arm_is_reported() {
        let ds = Dataset::new(
            array![[0.0], [1.0], [2.0]],
            vec![1, 1, 1],
            array![1.0, 2.0, 3.0],
            Environment::Observational,
        )
        .unwrap();
        match fit_observational_ridge(&ds, 0.5).unwrap_err() {
            DataError::DegenerateArm { arm: 0, rows: 0, .. } => {}
            other => panic!("unexpected error {other:?}"),
        }
        // two distinct rows cannot identify intercept+slope without a penalty
        let thin = Dataset::new(
            array![[0.0], [0.0], [1.0], [2.0]],
            vec![0, 0, 1, 1],
            array![1.0, 1.0, 2.0, 3.0],
            Environment::Observational,
        )
        .unwrap();
        assert!(matches!(
            fit_observational_ridge(&thin, 0.0).unwrap_err(),
            DataError::DegenerateArm { arm: 0, .. }
        ));
    }

    #[test]
    fn covering_number_known_values() {
        assert_eq!(covering_number_hypercube(&[2.0], 1.0).unwrap(), 3);
        assert_eq!(covering_number_hypercube(&[2.0, 2.0], 1.0).unwrap(), 9);
        assert_eq!(covering_number_hypercube(&[0.0], 1.0).unwrap(), 1);
        assert_eq!(covering_number_hypercube(&[3.0], 1e12).unwrap(), 2);
        assert!(matches!(
            covering_number_hypercube(&[1.0; 64], 1e-3).unwrap_err(),
            DataError::Overflow
        ));
        assert!(covering_number_hypercube(&[1.0], 0.0).is_err());
    }

    #[test]
    fn log_covering_matches_integer_covering_when_representable() {
        let sides = [2.0, 5.0, 0.5];
        let n = covering_number_hypercube(&sides, 0.25).unwrap();
        let log_n = log_covering_number_hypercube(&sides, 0.25).unwrap();
        assert_abs_diff_eq!(log_n, (n as f64).ln(), epsilon = 1e-12);
        // and it stays finite where the integer form overflows
        assert!(log_covering_number_hypercube(&[1.0; 64], 1e-3).unwrap().is_finite());
    }

    #[test]
    fn support_box_operations() {
        let b = SupportBox::new(vec![-3.0, 0.0], vec![3.0, 1.0]).unwrap();
        assert_eq!(b.side_lengths(), vec![6.0, 1.0]);
        assert_abs_diff_eq!(b.diameter(), 37.0_f64.sqrt(), epsilon = 1e-14);
        assert!(b.contains(array![0.0, 0.5].view()));
        assert!(b.contains(array![3.0, 1.0].view()));
        assert!(!b.contains(array![3.0001, 0.5].view()));
        assert!(SupportBox::new(vec![1.0], vec![0.0]).is_err());

        let pts = array![[0.0, 5.0], [-2.0, 7.0], [1.0, 6.0]];
        let bb = SupportBox::bounding(&pts).unwrap();
        assert_eq!(bb.lo, vec![-2.0, 5.0]);
        assert_eq!(bb.hi, vec![1.0, 7.0]);
    }

    #[test]
    fn standardization_zscores_and_skips_constant_columns() {
        let x = array![[1.0, 7.0], [3.0, 7.0], [5.0, 7.0]];
        let s = Standardization::fit(&x);
        let z = s.apply(&x);
        assert_abs_diff_eq!(z.column(0).sum(), 0.0, epsilon = 1e-12);
        let var: f64 = z.column(0).iter().map(|v| v * v).sum::<f64>() / 3.0;
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-12);
        assert_eq!(z[[0, 1]], 0.0);
        assert_eq!(s.stds[1], 1.0);
    }

    #[test]
    fn dataset_validation_rejects_bad_shapes() {
        assert!(matches!(
            Dataset::new(
                array![[1.0], [2.0]],
                vec![0],
                array![0.0, 1.0],
                Environment::Experimental
            ),
            Err(DataError::LengthMismatch { .. })
        ));
        assert!(matches!(
            Dataset::new(
                Array2::zeros((0, 2)),
                vec![],
                Array1::zeros(0),
                Environment::Experimental
            ),
            Err(DataError::EmptyDataset)
        ));
    }
}
