//! Squared-exponential base kernels and the three multitask constructions
//! used by the estimators.
//!
//! Tasks are indexed 0 (arm 0 pseudo-outcome), 1 (arm 1 pseudo-outcome) and
//! 2 (the treatment effect itself, a noiseless prediction-only task). Every
//! multitask kernel decomposes entrywise as
//!   K[(x,t),(x',t')] = Ck(t,x; t',x') * k(x,x') + Cl(...) * l(x,x'),
//! with the mixing coefficients Ck/Cl determined by the variant: fixed task
//! constants for the naive GP, inverse-propensity coefficients for the
//! effect/confound decomposition, and free PSD 2x2 matrices for the
//! coregionalization baseline.

use crate::data::{DataError, PropensityModel};
use crate::numerics::SpdMatrix;
use crate::pseudo_outcome::ipw_weight;
use ndarray::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ARM0_TASK: usize = 0;
pub const ARM1_TASK: usize = 1;
pub const CATE_TASK: usize = 2;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("kernel parameter {name} = {value} must be finite and > 0")]
    InvalidParam { name: &'static str, value: f64 },
    #[error("task index {task} is not one of 0, 1, 2")]
    InvalidTask { task: usize },
    #[error("coregionalization matrix is not positive definite: {detail}")]
    NotPsd { detail: String },
    #[error("points and tasks disagree: {points} rows vs {tasks} tasks")]
    PointTaskMismatch { points: usize, tasks: usize },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Squared-exponential kernel k(x,x') = s^2 exp(-||x-x'||^2 / (2 l^2)),
/// parameterized on the natural scale (s = output scale, so k(x,x) = s^2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeKernel {
    output_scale: f64,
    lengthscale: f64,
}

impl SeKernel {
    pub fn new(output_scale: f64, lengthscale: f64) -> Result<Self, KernelError> {
        if !(output_scale.is_finite() && output_scale > 0.0) {
            return Err(KernelError::InvalidParam {
                name: "output_scale",
                value: output_scale,
            });
        }
        if !(lengthscale.is_finite() && lengthscale > 0.0) {
            return Err(KernelError::InvalidParam {
                name: "lengthscale",
                value: lengthscale,
            });
        }
        Ok(Self {
            output_scale,
            lengthscale,
        })
    }

    pub fn output_scale(&self) -> f64 {
        self.output_scale
    }

    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }

    pub fn eval(&self, x: ArrayView1<'_, f64>, x2: ArrayView1<'_, f64>) -> f64 {
        self.eval_sq_dist(sq_dist(x, x2))
    }

    pub fn eval_sq_dist(&self, r2: f64) -> f64 {
        let l2 = self.lengthscale * self.lengthscale;
        self.output_scale * self.output_scale * (-r2 / (2.0 * l2)).exp()
    }

    /// Lipschitz constant of x -> k(x, x0): s^2 e^{-1/2} / l, attained at
    /// distance l.
    pub fn lipschitz(&self) -> f64 {
        self.output_scale * self.output_scale * (-0.5_f64).exp() / self.lengthscale
    }
}

pub fn sq_dist(x: ArrayView1<'_, f64>, x2: ArrayView1<'_, f64>) -> f64 {
    x.iter()
        .zip(x2.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// Per-arm observation noise standard deviations (the effect task is
/// noiseless by construction).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    sigma0: f64,
    sigma1: f64,
}

impl NoiseParams {
    pub fn new(sigma0: f64, sigma1: f64) -> Result<Self, KernelError> {
        for (name, value) in [("sigma0", sigma0), ("sigma1", sigma1)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(KernelError::InvalidParam { name, value });
            }
        }
        Ok(Self { sigma0, sigma1 })
    }

    pub fn tied(sigma: f64) -> Result<Self, KernelError> {
        Self::new(sigma, sigma)
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    pub fn sigma1(&self) -> f64 {
        self.sigma1
    }

    /// Noise variance contributed by a training row of the given task.
    pub fn variance(&self, task: usize) -> f64 {
        match task {
            ARM0_TASK => self.sigma0 * self.sigma0,
            ARM1_TASK => self.sigma1 * self.sigma1,
            _ => 0.0,
        }
    }
}

/// Free symmetric PSD 2x2 task-mixing matrix, stored as a log-Cholesky
/// factor L = [[e^u00, 0], [l10, e^u11]] so that A = L L^T stays positive
/// definite under unconstrained optimization. Serialized as the natural
/// matrix entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CoregRepr", into = "CoregRepr")]
pub struct CoregMatrix {
    pub log_l00: f64,
    pub l10: f64,
    pub log_l11: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct CoregRepr {
    a00: f64,
    a01: f64,
    a11: f64,
}

impl TryFrom<CoregRepr> for CoregMatrix {
    type Error = KernelError;

    fn try_from(r: CoregRepr) -> Result<Self, KernelError> {
        CoregMatrix::from_matrix(r.a00, r.a01, r.a11)
    }
}

impl From<CoregMatrix> for CoregRepr {
    fn from(m: CoregMatrix) -> Self {
        let a = m.matrix();
        CoregRepr {
            a00: a[0][0],
            a01: a[0][1],
            a11: a[1][1],
        }
    }
}

impl CoregMatrix {
    pub fn identity() -> Self {
        Self {
            log_l00: 0.0,
            l10: 0.0,
            log_l11: 0.0,
        }
    }

    /// Factors [[a00, a01], [a01, a11]]; fails unless strictly positive
    /// definite.
    pub fn from_matrix(a00: f64, a01: f64, a11: f64) -> Result<Self, KernelError> {
        if !(a00 > 0.0) {
            return Err(KernelError::NotPsd {
                detail: format!("leading entry {a00} <= 0"),
            });
        }
        let l00 = a00.sqrt();
        let l10 = a01 / l00;
        let rem = a11 - l10 * l10;
        if !(rem > 0.0) {
            return Err(KernelError::NotPsd {
                detail: format!("Schur complement {rem} <= 0"),
            });
        }
        Ok(Self {
            log_l00: l00.ln(),
            l10,
            log_l11: rem.sqrt().ln(),
        })
    }

    pub fn matrix(&self) -> [[f64; 2]; 2] {
        let l00 = self.log_l00.exp();
        let l11 = self.log_l11.exp();
        let a00 = l00 * l00;
        let a01 = l00 * self.l10;
        let a11 = self.l10 * self.l10 + l11 * l11;
        [[a00, a01], [a01, a11]]
    }

    pub fn entry(&self, t: usize, t2: usize) -> f64 {
        self.matrix()[t][t2]
    }

    /// dA[t,t2]/dp for p in {log_l00, l10, log_l11} (indices 0, 1, 2).
    pub(crate) fn d_entry(&self, t: usize, t2: usize, param: usize) -> f64 {
        let l00 = self.log_l00.exp();
        let l11 = self.log_l11.exp();
        let d = match param {
            0 => [[2.0 * l00 * l00, l00 * self.l10], [l00 * self.l10, 0.0]],
            1 => [[0.0, l00], [l00, 2.0 * self.l10]],
            2 => [[0.0, 0.0], [0.0, 2.0 * l11 * l11]],
            _ => unreachable!("coregionalization matrices have 3 parameters"),
        };
        d[t][t2]
    }
}

/// The three task-kernel constructions.
#[derive(Debug, Clone)]
pub enum MultitaskKernel {
    /// One shared function for every task: plain GP regression on the
    /// pseudo-outcomes.
    Naive { k: SeKernel },
    /// Effect process scaled by a = (1,1,1) plus confound process scaled by
    /// the fixed inverse-propensity coefficients b(x) = (-1/(1-pi), 1/pi, 0).
    PseudoFixed {
        k: SeKernel,
        l: SeKernel,
        propensity: PropensityModel,
    },
    /// Linear model of coregionalization with free PSD mixing matrices; the
    /// effect task is the sum of the two arm tasks.
    LcmTrainable {
        k: SeKernel,
        l: SeKernel,
        a_k: CoregMatrix,
        a_l: CoregMatrix,
    },
}

fn check_task(task: usize) -> Result<(), KernelError> {
    if task > CATE_TASK {
        return Err(KernelError::InvalidTask { task });
    }
    Ok(())
}

/// Mixing coefficient of a coregionalization matrix extended to the effect
/// task by summing arm contributions.
fn lcm_coef(m: &CoregMatrix, t: usize, t2: usize) -> f64 {
    let col = |t2: usize| -> [f64; 2] { [m.entry(0, t2), m.entry(1, t2)] };
    match (t, t2) {
        (CATE_TASK, CATE_TASK) => {
            m.entry(0, 0) + m.entry(0, 1) + m.entry(1, 0) + m.entry(1, 1)
        }
        (CATE_TASK, arm) => col(arm)[0] + col(arm)[1],
        (arm, CATE_TASK) => col(arm)[0] + col(arm)[1],
        (arm, arm2) => m.entry(arm, arm2),
    }
}

impl MultitaskKernel {
    /// Covariance between (x, task) and (x2, task2).
    pub fn eval(
        &self,
        x: ArrayView1<'_, f64>,
        task: usize,
        x2: ArrayView1<'_, f64>,
        task2: usize,
    ) -> Result<f64, KernelError> {
        check_task(task)?;
        check_task(task2)?;
        match self {
            MultitaskKernel::Naive { k } => Ok(k.eval(x, x2)),
            MultitaskKernel::PseudoFixed { k, l, propensity } => {
                let b = |x: ArrayView1<'_, f64>, t: usize| -> Result<f64, KernelError> {
                    if t == CATE_TASK {
                        Ok(0.0)
                    } else {
                        Ok(ipw_weight(t as u8, propensity.propensity(x)?))
                    }
                };
                Ok(k.eval(x, x2) + b(x, task)? * b(x2, task2)? * l.eval(x, x2))
            }
            MultitaskKernel::LcmTrainable { k, l, a_k, a_l } => Ok(lcm_coef(a_k, task, task2)
                * k.eval(x, x2)
                + lcm_coef(a_l, task, task2) * l.eval(x, x2)),
        }
    }

    /// The base kernel governing the effect task alone, when one exists.
    /// The coregionalization variant mixes both base kernels into the effect
    /// task, so it has none.
    pub fn cate_component(&self) -> Option<&SeKernel> {
        match self {
            MultitaskKernel::Naive { k } => Some(k),
            MultitaskKernel::PseudoFixed { k, .. } => Some(k),
            MultitaskKernel::LcmTrainable { .. } => None,
        }
    }

    pub fn base_kernels(&self) -> (&SeKernel, Option<&SeKernel>) {
        match self {
            MultitaskKernel::Naive { k } => (k, None),
            MultitaskKernel::PseudoFixed { k, l, .. } => (k, Some(l)),
            MultitaskKernel::LcmTrainable { k, l, .. } => (k, Some(l)),
        }
    }

    /// Pairwise mixing coefficient matrices (Ck, Cl) for a fixed point/task
    /// list, shared by the Gram builder and the optimizer's cached path.
    pub(crate) fn mixing_coefficients(
        &self,
        xs: &Array2<f64>,
        tasks: &[usize],
    ) -> Result<(Array2<f64>, Array2<f64>), KernelError> {
        let n = xs.nrows();
        if tasks.len() != n {
            return Err(KernelError::PointTaskMismatch {
                points: n,
                tasks: tasks.len(),
            });
        }
        for &t in tasks {
            check_task(t)?;
        }
        match self {
            MultitaskKernel::Naive { .. } => Ok((Array2::ones((n, n)), Array2::zeros((n, n)))),
            MultitaskKernel::PseudoFixed { propensity, .. } => {
                let mut b = Array1::zeros(n);
                for i in 0..n {
                    if tasks[i] != CATE_TASK {
                        b[i] = ipw_weight(tasks[i] as u8, propensity.propensity(xs.row(i))?);
                    }
                }
                let mut cl = Array2::zeros((n, n));
                for i in 0..n {
                    for j in 0..n {
                        cl[[i, j]] = b[i] * b[j];
                    }
                }
                Ok((Array2::ones((n, n)), cl))
            }
            MultitaskKernel::LcmTrainable { a_k, a_l, .. } => {
                let mut ck = Array2::zeros((n, n));
                let mut cl = Array2::zeros((n, n));
                for i in 0..n {
                    for j in 0..n {
                        ck[[i, j]] = lcm_coef(a_k, tasks[i], tasks[j]);
                        cl[[i, j]] = lcm_coef(a_l, tasks[i], tasks[j]);
                    }
                }
                Ok((ck, cl))
            }
        }
    }

    /// Per-training-point mixing coefficients against a query on the effect
    /// task (Ck_i, Cl_i).
    pub(crate) fn cate_cross_mixing(
        &self,
        xs: &Array2<f64>,
        tasks: &[usize],
    ) -> Result<(Array1<f64>, Array1<f64>), KernelError> {
        let n = xs.nrows();
        if tasks.len() != n {
            return Err(KernelError::PointTaskMismatch {
                points: n,
                tasks: tasks.len(),
            });
        }
        for &t in tasks {
            check_task(t)?;
        }
        match self {
            MultitaskKernel::Naive { .. } => Ok((Array1::ones(n), Array1::zeros(n))),
            MultitaskKernel::PseudoFixed { .. } => Ok((Array1::ones(n), Array1::zeros(n))),
            MultitaskKernel::LcmTrainable { a_k, a_l, .. } => {
                let ck: Array1<f64> = tasks
                    .iter()
                    .map(|&t| lcm_coef(a_k, CATE_TASK, t))
                    .collect();
                let cl: Array1<f64> = tasks
                    .iter()
                    .map(|&t| lcm_coef(a_l, CATE_TASK, t))
                    .collect();
                Ok((ck, cl))
            }
        }
    }

    /// Mixing coefficients of the effect task against itself (prior term).
    pub(crate) fn cate_prior_mixing(&self) -> (f64, f64) {
        match self {
            MultitaskKernel::Naive { .. } => (1.0, 0.0),
            MultitaskKernel::PseudoFixed { .. } => (1.0, 0.0),
            MultitaskKernel::LcmTrainable { a_k, a_l, .. } => (
                lcm_coef(a_k, CATE_TASK, CATE_TASK),
                lcm_coef(a_l, CATE_TASK, CATE_TASK),
            ),
        }
    }
}

/// Builds the full task Gram matrix, adding per-arm noise variances on the
/// diagonal for training rows when `noise` is given. Effect-task rows never
/// receive noise.
pub fn gram_matrix(
    kernel: &MultitaskKernel,
    xs: &Array2<f64>,
    tasks: &[usize],
    noise: Option<&NoiseParams>,
) -> Result<SpdMatrix, KernelError> {
    let n = xs.nrows();
    let (ck, cl) = kernel.mixing_coefficients(xs, tasks)?;
    let (k, l) = kernel.base_kernels();
    let mut gram = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let r2 = sq_dist(xs.row(i), xs.row(j));
            let mut v = ck[[i, j]] * k.eval_sq_dist(r2);
            if let Some(l) = l {
                v += cl[[i, j]] * l.eval_sq_dist(r2);
            }
            gram[[i, j]] = v;
            gram[[j, i]] = v;
        }
    }
    if let Some(noise) = noise {
        for i in 0..n {
            gram[[i, i]] += noise.variance(tasks[i]);
        }
    }
    Ok(SpdMatrix::new(gram).expect("gram built symmetric"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pseudo_fixed(pi: f64, sk: f64, sl: f64) -> MultitaskKernel {
        MultitaskKernel::PseudoFixed {
            k: SeKernel::new(sk, 1.0).unwrap(),
            l: SeKernel::new(sl, 1.5).unwrap(),
            propensity: PropensityModel::constant(pi, 0.01).unwrap(),
        }
    }

    #[test]
    fn se_kernel_known_values() {
        let k = SeKernel::new(1.5, 2.0).unwrap();
        assert_abs_diff_eq!(k.eval_sq_dist(0.0), 2.25, epsilon = 1e-15);
        assert_abs_diff_eq!(
            k.eval_sq_dist(4.0),
            1.3646939843534252,
            epsilon = 1e-13
        );
        let x = array![1.0, 2.0];
        let y = array![3.0, 2.0];
        assert_abs_diff_eq!(k.eval(x.view(), y.view()), 1.3646939843534252, epsilon = 1e-13);
    }

    #[test]
    fn se_kernel_rejects_bad_params() {
        assert!(SeKernel::new(0.0, 1.0).is_err());
        assert!(SeKernel::new(1.0, -1.0).is_err());
        assert!(SeKernel::new(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn lipschitz_constant_known_value_and_dominance() {
        let k = SeKernel::new(1.0, 2.0).unwrap();
        assert_abs_diff_eq!(k.lipschitz(), 0.3032653298563167, epsilon = 1e-15);
        let origin = array![0.0];
        let mut steepest: f64 = 0.0;
        for i in 0..400 {
            let a = -4.0 + 0.02 * i as f64;
            let b = a + 0.02;
            let xa = array![a];
            let xb = array![b];
            let slope =
                (k.eval(xa.view(), origin.view()) - k.eval(xb.view(), origin.view())).abs() / 0.02;
            steepest = steepest.max(slope);
        }
        assert!(steepest <= k.lipschitz() + 1e-12);
        assert!(steepest > 0.9 * k.lipschitz());
    }

    #[test]
    fn pseudo_fixed_task_values_at_half_propensity() {
        let kernel = pseudo_fixed(0.5, 1.0, 0.7);
        let x = array![0.5];
        // b = (-2, 2): same point, tasks (0,1) give k - 4 l
        let got = kernel.eval(x.view(), ARM0_TASK, x.view(), ARM1_TASK).unwrap();
        assert_abs_diff_eq!(got, 1.0 - 4.0 * 0.49, epsilon = 1e-14);
        // diagonal of arm 1: k + 4 l
        let got = kernel.eval(x.view(), ARM1_TASK, x.view(), ARM1_TASK).unwrap();
        assert_abs_diff_eq!(got, 1.0 + 4.0 * 0.49, epsilon = 1e-14);
    }

    #[test]
    fn effect_task_cross_covariance_is_base_kernel_alone() {
        let kernel = pseudo_fixed(0.3, 1.2, 0.9);
        let x = array![0.0];
        let y = array![1.0];
        let MultitaskKernel::PseudoFixed { k, .. } = &kernel else {
            unreachable!()
        };
        for t in [ARM0_TASK, ARM1_TASK, CATE_TASK] {
            let got = kernel.eval(x.view(), t, y.view(), CATE_TASK).unwrap();
            assert_abs_diff_eq!(got, k.eval(x.view(), y.view()), epsilon = 1e-14);
        }
    }

    #[test]
    fn invalid_task_is_rejected() {
        let kernel = pseudo_fixed(0.5, 1.0, 1.0);
        let x = array![0.0];
        assert!(matches!(
            kernel.eval(x.view(), 3, x.view(), 0),
            Err(KernelError::InvalidTask { task: 3 })
        ));
    }

    #[test]
    fn coregionalization_factorization_round_trips() {
        let m = CoregMatrix::from_matrix(2.0, -0.6, 1.3).unwrap();
        let a = m.matrix();
        assert_abs_diff_eq!(a[0][0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a[0][1], -0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(a[1][1], 1.3, epsilon = 1e-12);
        assert!(CoregMatrix::from_matrix(1.0, 2.0, 1.0).is_err());
        assert!(CoregMatrix::from_matrix(-1.0, 0.0, 1.0).is_err());

        let id = CoregMatrix::identity().matrix();
        assert_eq!(id, [[1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn coregionalization_derivatives_match_finite_differences() {
        let m = CoregMatrix {
            log_l00: 0.3,
            l10: -0.8,
            log_l11: -0.2,
        };
        let h = 1e-6;
        for param in 0..3 {
            let mut plus = m;
            let mut minus = m;
            match param {
                0 => {
                    plus.log_l00 += h;
                    minus.log_l00 -= h;
                }
                1 => {
                    plus.l10 += h;
                    minus.l10 -= h;
                }
                _ => {
                    plus.log_l11 += h;
                    minus.log_l11 -= h;
                }
            }
            for t in 0..2 {
                for t2 in 0..2 {
                    let fd = (plus.entry(t, t2) - minus.entry(t, t2)) / (2.0 * h);
                    assert_abs_diff_eq!(m.d_entry(t, t2, param), fd, epsilon = 1e-8);
                }
            }
        }
    }

    #[test]
    fn lcm_with_rank_one_matrices_matches_fixed_construction_on_arm_block() {
        let pi = 0.5;
        let k = SeKernel::new(1.1, 0.8).unwrap();
        let l = SeKernel::new(0.6, 1.7).unwrap();
        let fixed = MultitaskKernel::PseudoFixed {
            k,
            l,
            propensity: PropensityModel::constant(pi, 0.01).unwrap(),
        };
        // a a^T = ones, b b^T for b = (-2, 2); log-Cholesky cannot hit rank
        // one exactly so the trailing pivot is pushed to 1e-8
        let tiny = 1e-8_f64;
        let a_k = CoregMatrix {
            log_l00: 0.0,
            l10: 1.0,
            log_l11: tiny.ln(),
        };
        let a_l = CoregMatrix {
            log_l00: 2.0_f64.ln(),
            l10: -2.0,
            log_l11: tiny.ln(),
        };
        let lcm = MultitaskKernel::LcmTrainable { k, l, a_k, a_l };
        let xs = [array![0.2], array![-1.4], array![0.9]];
        for xi in &xs {
            for xj in &xs {
                for t in 0..2 {
                    for t2 in 0..2 {
                        let want = fixed.eval(xi.view(), t, xj.view(), t2).unwrap();
                        let got = lcm.eval(xi.view(), t, xj.view(), t2).unwrap();
                        assert_abs_diff_eq!(got, want, epsilon = 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn lcm_effect_task_sums_arm_tasks() {
        let k = SeKernel::new(1.0, 1.0).unwrap();
        let l = SeKernel::new(2.0, 1.0).unwrap();
        let kernel = MultitaskKernel::LcmTrainable {
            k,
            l,
            a_k: CoregMatrix::identity(),
            a_l: CoregMatrix::identity(),
        };
        let x = array![0.0];
        // cov(f0 + f1, f0) = A[0,0] + A[1,0] = 1 for both components
        let got = kernel.eval(x.view(), CATE_TASK, x.view(), ARM0_TASK).unwrap();
        assert_abs_diff_eq!(got, 1.0 + 4.0, epsilon = 1e-14);
        // var(f0 + f1) = sum of all entries = 2 per component
        let got = kernel.eval(x.view(), CATE_TASK, x.view(), CATE_TASK).unwrap();
        assert_abs_diff_eq!(got, 2.0 * (1.0 + 4.0), epsilon = 1e-14);
    }

    #[test]
    fn gram_matches_pairwise_eval_and_noise_placement() {
        let kernel = pseudo_fixed(0.3, 1.0, 0.8);
        let xs = array![[0.1], [1.2], [-0.4]];
        let tasks = vec![ARM0_TASK, ARM1_TASK, CATE_TASK];
        let noise = NoiseParams::new(0.5, 0.25).unwrap();
        let gram = gram_matrix(&kernel, &xs, &tasks, Some(&noise)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut want = kernel
                    .eval(xs.row(i), tasks[i], xs.row(j), tasks[j])
                    .unwrap();
                if i == j {
                    want += noise.variance(tasks[i]);
                }
                assert_abs_diff_eq!(gram.entries()[[i, j]], want, epsilon = 1e-13);
            }
        }
        // effect-task row got no noise
        let bare = gram_matrix(&kernel, &xs, &tasks, None).unwrap();
        assert_abs_diff_eq!(
            gram.entries()[[2, 2]],
            bare.entries()[[2, 2]],
            epsilon = 1e-14
        );
    }

    #[test]
    fn serialization_uses_natural_scale() {
        let k = SeKernel::new(1.5, 0.25).unwrap();
        let json = serde_json::to_string(&k).unwrap();
        assert!(json.contains("\"output_scale\":1.5"));
        assert!(json.contains("\"lengthscale\":0.25"));
        let back: SeKernel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, k);

        let m = CoregMatrix::from_matrix(2.0, 0.5, 1.0).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("a00"));
        let back: CoregMatrix = serde_json::from_str(&json).unwrap();
        let (a, b) = (m.matrix(), back.matrix());
        for t in 0..2 {
            for t2 in 0..2 {
                assert_abs_diff_eq!(a[t][t2], b[t][t2], epsilon = 1e-12);
            }
        }
        assert!(serde_json::from_str::<CoregMatrix>(
            "{\"a00\":1.0,\"a01\":2.0,\"a11\":1.0}"
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn gram_with_noise_is_positive_definite(
            seed_pts in proptest::collection::vec((-2.0..2.0f64, 0usize..3), 2..10),
            variant in 0usize..3,
        ) {
            let n = seed_pts.len();
            let mut xs = Array2::zeros((n, 1));
            let mut tasks = Vec::with_capacity(n);
            for (i, (x, t)) in seed_pts.iter().enumerate() {
                xs[[i, 0]] = *x;
                tasks.push(*t);
            }
            let k = SeKernel::new(1.0, 0.9).unwrap();
            let l = SeKernel::new(0.7, 1.3).unwrap();
            let kernel = match variant {
                0 => MultitaskKernel::Naive { k },
                1 => MultitaskKernel::PseudoFixed {
                    k,
                    l,
                    propensity: PropensityModel::constant(0.4, 0.01).unwrap(),
                },
                _ => MultitaskKernel::LcmTrainable {
                    k,
                    l,
                    a_k: CoregMatrix::from_matrix(1.0, 0.3, 0.8).unwrap(),
                    a_l: CoregMatrix::from_matrix(0.5, -0.1, 0.9).unwrap(),
                },
            };
            let noise = NoiseParams::new(0.3, 0.4).unwrap();
            let gram = gram_matrix(&kernel, &xs, &tasks, Some(&noise)).unwrap();
            let schedule = numerics::default_jitter_schedule(&gram);
            prop_assert!(numerics::cholesky(&gram, &schedule).is_ok());
        }
    }
}
