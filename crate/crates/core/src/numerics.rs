//! Dense symmetric positive-definite linear algebra.
//!
//! Everything downstream (marginal likelihoods, posteriors, error bounds)
//! funnels through one Cholesky factorization per Gram matrix. This module
//! owns the jitter policy, the solve/log-det/inverse plumbing around the
//! factor, and the deterministic power-iteration norm estimates. LAPACK via
//! OpenBLAS does the O(n^3) work.

use ndarray::prelude::*;
use ndarray_linalg::cholesky::{CholeskyFactorized, CholeskyInto, InverseC, UPLO};
use ndarray_linalg::triangular::{Diag, SolveTriangular};
use thiserror::Error;

/// Relative tolerance for the symmetry check on construction.
const SYMMETRY_RTOL: f64 = 1e-12;

/// Iteration cap shared by both power-iteration routines.
const POWER_ITER_CAP: usize = 10_000;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix entry ({i},{j}) is not finite")]
    NonFinite { i: usize, j: usize },
    #[error("asymmetry at ({i},{j}): |a_ij - a_ji| = {diff:e} exceeds relative tolerance {tol:e}")]
    NotSymmetric { i: usize, j: usize, diff: f64, tol: f64 },
    #[error("matrix of dim {dim} is not positive definite even with jitter {max_jitter:e}")]
    NotPositiveDefinite { dim: usize, max_jitter: f64 },
    #[error("dimension mismatch: operator has dim {expected}, operand has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{what} did not converge within {iters} iterations (tol {tol:e})")]
    NoConvergence {
        what: &'static str,
        iters: usize,
        tol: f64,
    },
}

/// A square matrix validated to be symmetric (PD-ness is only established by
/// [`cholesky`], which is the sole way to unlock solves).
#[derive(Debug, Clone)]
pub struct SpdMatrix {
    entries: Array2<f64>,
}

impl SpdMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self, NumericsError> {
        let (rows, cols) = entries.dim();
        if rows != cols {
            return Err(NumericsError::NotSquare { rows, cols });
        }
        for ((i, j), &v) in entries.indexed_iter() {
            if !v.is_finite() {
                return Err(NumericsError::NonFinite { i, j });
            }
        }
        for i in 0..rows {
            for j in (i + 1)..cols {
                let (a, b) = (entries[[i, j]], entries[[j, i]]);
                let diff = (a - b).abs();
                let tol = SYMMETRY_RTOL * a.abs().max(b.abs()).max(1.0);
                if diff > tol {
                    return Err(NumericsError::NotSymmetric { i, j, diff, tol });
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn mean_diagonal(&self) -> f64 {
        let n = self.dim();
        if n == 0 {
            return 0.0;
        }
        self.entries.diag().sum() / n as f64
    }
}

/// Default jitter ladder, scaled by the mean diagonal of the target matrix.
pub fn default_jitter_schedule(m: &SpdMatrix) -> [f64; 5] {
    let scale = m.mean_diagonal().abs();
    [
        0.0,
        1e-10 * scale,
        1e-8 * scale,
        1e-6 * scale,
        1e-4 * scale,
    ]
}

/// Lower-triangular Cholesky factor of an SPD matrix plus the diagonal jitter
/// that was needed to obtain it.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    lower: Array2<f64>,
    jitter: f64,
}

/// Factors `m + jitter*I`, walking `schedule` in order until LAPACK accepts
/// the matrix. An empty schedule is treated as `[0.0]`.
pub fn cholesky(m: &SpdMatrix, schedule: &[f64]) -> Result<CholeskyFactor, NumericsError> {
    let n = m.dim();
    if n == 0 {
        return Ok(CholeskyFactor {
            lower: Array2::zeros((0, 0)),
            jitter: 0.0,
        });
    }
    let fallback = [0.0];
    let schedule = if schedule.is_empty() {
        &fallback[..]
    } else {
        schedule
    };
    let mut last_jitter = 0.0;
    for &jitter in schedule {
        last_jitter = jitter;
        let mut work = m.entries.clone();
        if jitter != 0.0 {
            work.diag_mut().mapv_inplace(|d| d + jitter);
        }
        if let Ok(lower) = work.cholesky_into(UPLO::Lower) {
            if lower.diag().iter().all(|d| d.is_finite() && *d > 0.0) {
                return Ok(CholeskyFactor { lower, jitter });
            }
        }
    }
    Err(NumericsError::NotPositiveDefinite {
        dim: n,
        max_jitter: last_jitter,
    })
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn lower(&self) -> &Array2<f64> {
        &self.lower
    }

    /// log det(L L^T) = 2 * sum_i log L_ii. Empty factor gives 0.
    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diag().iter().map(|d| d.ln()).sum::<f64>()
    }

    fn check_dim(&self, got: usize) -> Result<(), NumericsError> {
        if got != self.dim() {
            return Err(NumericsError::DimensionMismatch {
                expected: self.dim(),
                got,
            });
        }
        Ok(())
    }

    /// Solves (L L^T) x = b.
    pub fn solve_vec(&self, b: &ArrayView1<f64>) -> Result<Array1<f64>, NumericsError> {
        self.check_dim(b.len())?;
        if self.dim() == 0 {
            return Ok(Array1::zeros(0));
        }
        let half = self.half_solve_vec(b)?;
        let full = self
            .lower
            .t()
            .solve_triangular(UPLO::Upper, Diag::NonUnit, &half)
            .expect("triangular backsolve cannot fail on a finite factor");
        Ok(full)
    }

    /// Solves (L L^T) X = B column-wise in one LAPACK call pair.
    pub fn solve_mat(&self, b: &ArrayView2<f64>) -> Result<Array2<f64>, NumericsError> {
        self.check_dim(b.nrows())?;
        if self.dim() == 0 {
            return Ok(Array2::zeros((0, b.ncols())));
        }
        let half = self.half_solve_mat(b)?;
        let full = self
            .lower
            .t()
            .solve_triangular(UPLO::Upper, Diag::NonUnit, &half)
            .expect("triangular backsolve cannot fail on a finite factor");
        Ok(full)
    }

    /// Solves L w = b (one triangular solve; `w^T w` is the variance downdate).
    pub fn half_solve_vec(&self, b: &ArrayView1<f64>) -> Result<Array1<f64>, NumericsError> {
        self.check_dim(b.len())?;
        if self.dim() == 0 {
            return Ok(Array1::zeros(0));
        }
        let b = b.to_owned();
        Ok(self
            .lower
            .solve_triangular(UPLO::Lower, Diag::NonUnit, &b)
            .expect("triangular solve cannot fail on a finite factor"))
    }

    /// Solves L W = B.
    pub fn half_solve_mat(&self, b: &ArrayView2<f64>) -> Result<Array2<f64>, NumericsError> {
        self.check_dim(b.nrows())?;
        if self.dim() == 0 {
            return Ok(Array2::zeros((0, b.ncols())));
        }
        let b = b.to_owned();
        Ok(self
            .lower
            .solve_triangular(UPLO::Lower, Diag::NonUnit, &b)
            .expect("triangular solve cannot fail on a finite factor"))
    }

    /// Full inverse (L L^T)^-1 via LAPACK dpotri on the stored factor.
    /// O(n^3) — reserved for gradient trace terms.
    pub fn inverse(&self) -> Result<Array2<f64>, NumericsError> {
        let n = self.dim();
        if n == 0 {
            return Ok(Array2::zeros((0, 0)));
        }
        let factorized = CholeskyFactorized {
            factor: self.lower.clone(),
            uplo: UPLO::Lower,
        };
        let raw = factorized.invc().map_err(|_| NumericsError::NoConvergence {
            what: "factorized inverse",
            iters: 0,
            tol: 0.0,
        })?;
        // dpotri fills one triangle; mirror to full symmetric storage
        let sym = 0.5 * (&raw + &raw.t());
        Ok(sym)
    }

    /// Smallest eigenvalue of L L^T by inverse power iteration reusing the
    /// factor. Deterministic all-ones start.
    pub fn smallest_eigenvalue(&self, tol: f64) -> Result<f64, NumericsError> {
        let n = self.dim();
        if n == 0 {
            return Ok(f64::INFINITY);
        }
        let mut v = Array1::from_elem(n, 1.0 / (n as f64).sqrt());
        let mut mu_prev = f64::INFINITY;
        for _ in 0..POWER_ITER_CAP {
            let y = self.solve_vec(&v.view())?;
            let mu = y.dot(&y).sqrt();
            if mu == 0.0 {
                return Ok(f64::INFINITY);
            }
            v = y / mu;
            if (mu - mu_prev).abs() <= tol * mu.abs() {
                return Ok(1.0 / mu);
            }
            mu_prev = mu;
        }
        Err(NumericsError::NoConvergence {
            what: "inverse power iteration",
            iters: POWER_ITER_CAP,
            tol,
        })
    }
}

/// Largest eigenvalue (= spectral norm for symmetric input) by power
/// iteration with a deterministic all-ones start vector.
pub fn spectral_norm(m: &SpdMatrix, tol: f64) -> Result<f64, NumericsError> {
    let n = m.dim();
    if n == 0 {
        return Ok(0.0);
    }
    let mut v = Array1::from_elem(n, 1.0 / (n as f64).sqrt());
    let mut lambda_prev = f64::INFINITY;
    for _ in 0..POWER_ITER_CAP {
        let w = m.entries.dot(&v);
        let lambda = w.dot(&w).sqrt();
        if lambda == 0.0 {
            return Ok(0.0);
        }
        v = w / lambda;
        if (lambda - lambda_prev).abs() <= tol * lambda.abs() {
            return Ok(lambda);
        }
        lambda_prev = lambda;
    }
    Err(NumericsError::NoConvergence {
        what: "power iteration",
        iters: POWER_ITER_CAP,
        tol,
    })
}
