//! Multitask GP regression on pseudo-outcome residuals: closed-form
//! posterior for the effect task, marginal likelihood with analytic
//! gradients, and a restarted gradient-ascent fitter.
//!
//! Training rows live on the arm tasks (0/1) and carry per-arm noise; the
//! effect task is noiseless and only ever queried. All hyperparameters are
//! optimized in log space (the coregionalization off-diagonals stay raw, as
//! they are already unconstrained).

use crate::data::ObservationalModel;
use crate::kernels::{
    gram_matrix, sq_dist, CoregMatrix, KernelError, MultitaskKernel, NoiseParams, SeKernel,
    ARM1_TASK, CATE_TASK,
};
use crate::numerics::{self, CholeskyFactor, NumericsError, SpdMatrix};
use crate::pseudo_outcome::PseudoSample;
use ndarray::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Two-sided 95% standard-normal quantile used for credible intervals.
pub const Z_95: f64 = 1.959964;

/// Negative posterior variances in [-NEGATIVE_VARIANCE_TOL, 0) are treated
/// as round-off and clamped to zero; anything more negative is an error.
pub const NEGATIVE_VARIANCE_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum GpError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("training arrays disagree: {xs} rows, {tasks} tasks, {targets} targets")]
    ShapeMismatch {
        xs: usize,
        tasks: usize,
        targets: usize,
    },
    #[error("training rows must live on arm tasks 0/1, found task {task} at row {row}")]
    NonArmTrainingTask { task: usize, row: usize },
    #[error("target at row {row} is not finite")]
    NonFiniteTarget { row: usize },
    #[error("query dimension {got} does not match training dimension {expected}")]
    QueryDimMismatch { expected: usize, got: usize },
    #[error("hyperparameter vector has length {got}, variant expects {expected}")]
    ParamLenMismatch { expected: usize, got: usize },
    #[error("fitting requires at least 2 training rows, got {n}")]
    TooFewPoints { n: usize },
    #[error("posterior variance {value:e} at query {index} is below the round-off tolerance")]
    NegativeVariance { value: f64, index: usize },
    #[error("all {attempted} optimizer restarts failed to produce a finite marginal likelihood")]
    AllRestartsFailed { attempted: usize },
}

/// A multitask GP over pseudo-outcome residuals.
#[derive(Debug, Clone)]
pub struct GpModel {
    kernel: MultitaskKernel,
    noise: NoiseParams,
    train_x: Array2<f64>,
    train_tasks: Vec<usize>,
    targets: Array1<f64>,
}

impl GpModel {
    pub fn new(
        kernel: MultitaskKernel,
        noise: NoiseParams,
        train_x: Array2<f64>,
        train_tasks: Vec<usize>,
        targets: Array1<f64>,
    ) -> Result<Self, GpError> {
        if train_tasks.len() != train_x.nrows() || targets.len() != train_x.nrows() {
            return Err(GpError::ShapeMismatch {
                xs: train_x.nrows(),
                tasks: train_tasks.len(),
                targets: targets.len(),
            });
        }
        if let Some((row, &task)) = train_tasks
            .iter()
            .enumerate()
            .find(|(_, &t)| t > ARM1_TASK)
        {
            return Err(GpError::NonArmTrainingTask { task, row });
        }
        if let Some(row) = targets.iter().position(|v| !v.is_finite()) {
            return Err(GpError::NonFiniteTarget { row });
        }
        Ok(Self {
            kernel,
            noise,
            train_x,
            train_tasks,
            targets,
        })
    }

    /// Builds training arrays from transformed experimental samples: the
    /// sample's arm is its task, the residual its target.
    pub fn from_pseudo_samples(
        kernel: MultitaskKernel,
        noise: NoiseParams,
        samples: &[PseudoSample],
    ) -> Result<Self, GpError> {
        let n = samples.len();
        let d = samples.first().map_or(1, |s| s.covariates.len());
        let mut xs = Array2::zeros((n, d));
        let mut tasks = Vec::with_capacity(n);
        let mut targets = Array1::zeros(n);
        for (i, s) in samples.iter().enumerate() {
            xs.row_mut(i).assign(&s.covariates);
            tasks.push(s.treatment as usize);
            targets[i] = s.target_residual;
        }
        Self::new(kernel, noise, xs, tasks, targets)
    }

    pub fn n(&self) -> usize {
        self.train_x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.train_x.ncols()
    }

    pub fn kernel(&self) -> &MultitaskKernel {
        &self.kernel
    }

    pub fn noise(&self) -> &NoiseParams {
        &self.noise
    }

    pub fn train_x(&self) -> &Array2<f64> {
        &self.train_x
    }

    pub fn train_tasks(&self) -> &[usize] {
        &self.train_tasks
    }

    pub fn targets(&self) -> &Array1<f64> {
        &self.targets
    }

    /// Free hyperparameters in optimizer coordinates. Order:
    /// naive [ln sk, ln lk, ln sigma];
    /// effect/confound [ln sk, ln lk, ln sl, ln ll, ln s0, ln s1];
    /// coregionalization [ln sk, ln lk, ln sl, ln ll, ak(3), al(3), ln s0, ln s1].
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::new();
        let (k, l) = self.kernel.base_kernels();
        p.push(k.output_scale().ln());
        p.push(k.lengthscale().ln());
        if let Some(l) = l {
            p.push(l.output_scale().ln());
            p.push(l.lengthscale().ln());
        }
        if let MultitaskKernel::LcmTrainable { a_k, a_l, .. } = &self.kernel {
            p.extend([a_k.log_l00, a_k.l10, a_k.log_l11]);
            p.extend([a_l.log_l00, a_l.l10, a_l.log_l11]);
        }
        match self.kernel {
            MultitaskKernel::Naive { .. } => p.push(self.noise.sigma0().ln()),
            _ => {
                p.push(self.noise.sigma0().ln());
                p.push(self.noise.sigma1().ln());
            }
        }
        p
    }

    pub fn param_names(&self) -> Vec<&'static str> {
        match self.kernel {
            MultitaskKernel::Naive { .. } => vec!["ln_sk", "ln_lk", "ln_sigma"],
            MultitaskKernel::PseudoFixed { .. } => {
                vec!["ln_sk", "ln_lk", "ln_sl", "ln_ll", "ln_sigma0", "ln_sigma1"]
            }
            MultitaskKernel::LcmTrainable { .. } => vec![
                "ln_sk",
                "ln_lk",
                "ln_sl",
                "ln_ll",
                "ak_log_l00",
                "ak_l10",
                "ak_log_l11",
                "al_log_l00",
                "al_l10",
                "al_log_l11",
                "ln_sigma0",
                "ln_sigma1",
            ],
        }
    }

    /// Same data and variant, new hyperparameters.
    pub fn with_params(&self, params: &[f64]) -> Result<Self, GpError> {
        let expected = self.params().len();
        if params.len() != expected {
            return Err(GpError::ParamLenMismatch {
                expected,
                got: params.len(),
            });
        }
        let se = |s: f64, l: f64| SeKernel::new(s.exp(), l.exp());
        let (kernel, noise) = match &self.kernel {
            MultitaskKernel::Naive { .. } => (
                MultitaskKernel::Naive {
                    k: se(params[0], params[1])?,
                },
                NoiseParams::tied(params[2].exp())?,
            ),
            MultitaskKernel::PseudoFixed { propensity, .. } => (
                MultitaskKernel::PseudoFixed {
                    k: se(params[0], params[1])?,
                    l: se(params[2], params[3])?,
                    propensity: propensity.clone(),
                },
                NoiseParams::new(params[4].exp(), params[5].exp())?,
            ),
            MultitaskKernel::LcmTrainable { .. } => (
                MultitaskKernel::LcmTrainable {
                    k: se(params[0], params[1])?,
                    l: se(params[2], params[3])?,
                    a_k: CoregMatrix {
                        log_l00: params[4],
                        l10: params[5],
                        log_l11: params[6],
                    },
                    a_l: CoregMatrix {
                        log_l00: params[7],
                        l10: params[8],
                        log_l11: params[9],
                    },
                },
                NoiseParams::new(params[10].exp(), params[11].exp())?,
            ),
        };
        for &p in params {
            if !p.is_finite() {
                return Err(GpError::Kernel(KernelError::InvalidParam {
                    name: "hyperparameter",
                    value: p,
                }));
            }
        }
        Ok(Self {
            kernel,
            noise,
            train_x: self.train_x.clone(),
            train_tasks: self.train_tasks.clone(),
            targets: self.targets.clone(),
        })
    }

    pub fn log_marginal_likelihood(&self) -> Result<f64, GpError> {
        let ws = Workspace::new(self)?;
        Ok(ws.mll(self)?.0)
    }

    /// MLL and its gradient with respect to [`Self::params`].
    pub fn mll_gradient(&self) -> Result<(f64, Vec<f64>), GpError> {
        let ws = Workspace::new(self)?;
        ws.mll_gradient(self)
    }
}

/// Per-fit cache: pairwise squared distances never change, and for the
/// fixed-coefficient variants neither do the task mixing matrices.
struct Workspace {
    r2: Array2<f64>,
    fixed_mixing: Option<(Array2<f64>, Array2<f64>)>,
}

impl Workspace {
    fn new(model: &GpModel) -> Result<Self, GpError> {
        let n = model.n();
        let xs = &model.train_x;
        let mut r2 = Array2::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                let d = sq_dist(xs.row(i), xs.row(j));
                r2[[i, j]] = d;
                r2[[j, i]] = d;
            }
        }
        let fixed_mixing = match &model.kernel {
            MultitaskKernel::LcmTrainable { .. } => None,
            k => Some(k.mixing_coefficients(xs, &model.train_tasks)?),
        };
        Ok(Self { r2, fixed_mixing })
    }

    /// Base kernel matrices for the current hyperparameters.
    fn base_matrices(&self, model: &GpModel) -> (Array2<f64>, Option<Array2<f64>>) {
        let (k, l) = model.kernel.base_kernels();
        let kk = self.r2.mapv(|r2| k.eval_sq_dist(r2));
        let kl = l.map(|l| self.r2.mapv(|r2| l.eval_sq_dist(r2)));
        (kk, kl)
    }

    fn mixing(&self, model: &GpModel) -> Result<(Array2<f64>, Array2<f64>), GpError> {
        match &self.fixed_mixing {
            Some(m) => Ok(m.clone()),
            None => Ok(model
                .kernel
                .mixing_coefficients(&model.train_x, &model.train_tasks)?),
        }
    }

    fn gram(
        &self,
        model: &GpModel,
        parts: &GramParts,
    ) -> Result<(SpdMatrix, CholeskyFactor), GpError> {
        let n = model.n();
        let mut gram = &parts.ck * &parts.kk;
        if let Some(kl) = &parts.kl {
            gram = gram + &parts.cl * kl;
        }
        for i in 0..n {
            gram[[i, i]] += model.noise.variance(model.train_tasks[i]);
        }
        let gram = SpdMatrix::new(gram)?;
        let factor = numerics::cholesky(&gram, &numerics::default_jitter_schedule(&gram))?;
        Ok((gram, factor))
    }

    fn parts(&self, model: &GpModel) -> Result<GramParts, GpError> {
        let (kk, kl) = self.base_matrices(model);
        let (ck, cl) = self.mixing(model)?;
        Ok(GramParts { kk, kl, ck, cl })
    }

    fn mll(&self, model: &GpModel) -> Result<(f64, CholeskyFactor, Array1<f64>), GpError> {
        let parts = self.parts(model)?;
        let (_, factor) = self.gram(model, &parts)?;
        let alpha = factor.solve_vec(&model.targets.view())?;
        let n = model.n() as f64;
        let mll = -0.5 * model.targets.dot(&alpha)
            - 0.5 * factor.log_det()
            - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
        Ok((mll, factor, alpha))
    }

    fn mll_gradient(&self, model: &GpModel) -> Result<(f64, Vec<f64>), GpError> {
        let parts = self.parts(model)?;
        let (_, factor) = self.gram(model, &parts)?;
        let alpha = factor.solve_vec(&model.targets.view())?;
        let n = model.n();
        let mll = -0.5 * model.targets.dot(&alpha)
            - 0.5 * factor.log_det()
            - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

        // S = alpha alpha^T - K^-1; dMLL/dp = 0.5 tr(S dK/dp)
        let kinv = factor.inverse()?;
        let mut s = -kinv;
        for i in 0..n {
            for j in 0..n {
                s[[i, j]] += alpha[i] * alpha[j];
            }
        }

        let (k, l) = model.kernel.base_kernels();
        let half_trace = |dk: &Array2<f64>| -> f64 { 0.5 * (&s * dk).sum() };
        // elementwise contraction against ck*kk and its lengthscale-weighted
        // variant; avoids materializing one scratch matrix per parameter
        let weighted = |c: &Array2<f64>, base: &Array2<f64>, w: Option<f64>| -> f64 {
            let mut acc = 0.0;
            match w {
                // d/d ln s: 2 * c * base
                None => {
                    for i in 0..n {
                        for j in 0..n {
                            acc += s[[i, j]] * c[[i, j]] * base[[i, j]];
                        }
                    }
                    acc
                }
                // d/d ln l: c * base * r2 / l^2
                Some(l2) => {
                    for i in 0..n {
                        for j in 0..n {
                            acc += s[[i, j]] * c[[i, j]] * base[[i, j]] * self.r2[[i, j]] / l2;
                        }
                    }
                    0.5 * acc
                }
            }
        };

        let mut grad = Vec::with_capacity(model.params().len());
        grad.push(weighted(&parts.ck, &parts.kk, None));
        grad.push(weighted(
            &parts.ck,
            &parts.kk,
            Some(k.lengthscale() * k.lengthscale()),
        ));
        if let (Some(l), Some(kl)) = (l, &parts.kl) {
            grad.push(weighted(&parts.cl, kl, None));
            grad.push(weighted(&parts.cl, kl, Some(l.lengthscale() * l.lengthscale())));
        }

        if let MultitaskKernel::LcmTrainable { a_k, a_l, .. } = &model.kernel {
            let kl = parts.kl.as_ref().expect("lcm has two base kernels");
            for (m, base) in [(a_k, &parts.kk), (a_l, kl)] {
                for param in 0..3 {
                    let mut dk = Array2::zeros((n, n));
                    for i in 0..n {
                        for j in 0..n {
                            dk[[i, j]] = m.d_entry(
                                model.train_tasks[i],
                                model.train_tasks[j],
                                param,
                            ) * base[[i, j]];
                        }
                    }
                    grad.push(half_trace(&dk));
                }
            }
        }

        // noise: dK/d ln sigma_t = diag(2 sigma_t^2 on rows of task t)
        match model.kernel {
            MultitaskKernel::Naive { .. } => {
                let v = model.noise.sigma0() * model.noise.sigma0();
                let trace: f64 = (0..n).map(|i| s[[i, i]]).sum();
                grad.push(v * trace);
            }
            _ => {
                for task in 0..2usize {
                    let v = model.noise.variance(task);
                    let trace: f64 = (0..n)
                        .filter(|&i| model.train_tasks[i] == task)
                        .map(|i| s[[i, i]])
                        .sum();
                    grad.push(v * trace);
                }
            }
        }

        Ok((mll, grad))
    }
}

struct GramParts {
    kk: Array2<f64>,
    kl: Option<Array2<f64>>,
    ck: Array2<f64>,
    cl: Array2<f64>,
}

/// Plain gradient ascent with step halving on any rejected move.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub step_size: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Additional random restarts after the median-heuristic start.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            step_size: 0.1,
            max_iters: 500,
            grad_tol: 1e-4,
            restarts: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub mll: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub winning_restart: usize,
    pub restarts_attempted: usize,
    pub restarts_failed: usize,
    pub converged: bool,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Median of the positive pairwise training distances (the classic
/// lengthscale initialization); 1.0 when no positive distance exists.
fn median_pairwise_distance(ws: &Workspace) -> f64 {
    let n = ws.r2.nrows();
    let mut dists: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            if ws.r2[[i, j]] > 0.0 {
                dists.push(ws.r2[[i, j]].sqrt());
            }
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|a, b| a.total_cmp(b));
    dists[dists.len() / 2]
}

fn heuristic_init(model: &GpModel, ws: &Workspace) -> Vec<f64> {
    let n = model.n() as f64;
    let mean = model.targets.sum() / n;
    let std = (model.targets.mapv(|y| (y - mean).powi(2)).sum() / n)
        .sqrt()
        .max(1e-3);
    let ln_scale = std.ln();
    let ln_len = median_pairwise_distance(ws).ln();
    let ln_sigma = (0.5 * std).max(1e-3).ln();
    match model.kernel {
        MultitaskKernel::Naive { .. } => vec![ln_scale, ln_len, ln_sigma],
        MultitaskKernel::PseudoFixed { .. } => {
            vec![ln_scale, ln_len, ln_scale, ln_len, ln_sigma, ln_sigma]
        }
        MultitaskKernel::LcmTrainable { .. } => vec![
            ln_scale, ln_len, ln_scale, ln_len, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, ln_sigma, ln_sigma,
        ],
    }
}

/// Maximizes the marginal likelihood over the variant's free
/// hyperparameters. Restart 0 starts from the median-distance heuristic,
/// further restarts from uniform [-1, 1] draws in optimizer coordinates;
/// the best final MLL wins.
pub fn fit(model: &GpModel, config: &OptimizerConfig) -> Result<(GpModel, FitReport), GpError> {
    if model.n() < 2 {
        return Err(GpError::TooFewPoints { n: model.n() });
    }
    let ws = Workspace::new(model)?;
    let n_params = model.params().len();
    let attempted = config.restarts + 1;
    let mut best: Option<(f64, Vec<f64>, FitReport)> = None;
    let mut failed = 0usize;

    for restart in 0..attempted {
        let init = if restart == 0 {
            heuristic_init(model, &ws)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(
                config
                    .seed
                    .wrapping_add(restart as u64)
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            (0..n_params).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        match ascend(model, &ws, init, config) {
            Ok((mll, params, iterations, grad_norm, converged)) => {
                let report = FitReport {
                    mll,
                    grad_norm,
                    iterations,
                    winning_restart: restart,
                    restarts_attempted: attempted,
                    restarts_failed: 0,
                    converged,
                };
                if best.as_ref().is_none_or(|(b, _, _)| mll > *b) {
                    best = Some((mll, params, report));
                }
            }
            Err(_) => failed += 1,
        }
    }

    match best {
        Some((_, params, mut report)) => {
            report.restarts_failed = failed;
            let fitted = model.with_params(&params)?;
            Ok((fitted, report))
        }
        None => Err(GpError::AllRestartsFailed { attempted }),
    }
}

#[allow(clippy::type_complexity)]
fn ascend(
    model: &GpModel,
    ws: &Workspace,
    init: Vec<f64>,
    config: &OptimizerConfig,
) -> Result<(f64, Vec<f64>, usize, f64, bool), GpError> {
    let mut params = init;
    let mut current = model.with_params(&params)?;
    let (mut mll, mut grad) = ws.mll_gradient(&current)?;
    if !mll.is_finite() {
        return Err(GpError::AllRestartsFailed { attempted: 1 });
    }
    let mut iterations = 0;
    let mut converged = false;
    while iterations < config.max_iters {
        if inf_norm(&grad) <= config.grad_tol {
            converged = true;
            break;
        }
        let mut step = config.step_size;
        let mut accepted = false;
        while step >= 1e-12 * config.step_size {
            let cand_params: Vec<f64> =
                params.iter().zip(&grad).map(|(p, g)| p + step * g).collect();
            if let Ok(cand) = model.with_params(&cand_params) {
                if let Ok((cand_mll, cand_factor, cand_alpha)) = ws.mll(&cand) {
                    let _ = (cand_factor, cand_alpha);
                    if cand_mll.is_finite() && cand_mll > mll {
                        params = cand_params;
                        current = cand;
                        mll = cand_mll;
                        accepted = true;
                        break;
                    }
                }
            }
            step *= 0.5;
        }
        iterations += 1;
        if !accepted {
            // no ascent left at line-search resolution
            break;
        }
        let (new_mll, new_grad) = ws.mll_gradient(&current)?;
        mll = new_mll;
        grad = new_grad;
    }
    if inf_norm(&grad) <= config.grad_tol {
        converged = true;
    }
    Ok((mll, params, iterations, inf_norm(&grad), converged))
}

/// Cached posterior: Cholesky factor of the training Gram plus the weight
/// vector alpha = (M + Sigma)^-1 y.
#[derive(Debug, Clone)]
pub struct PosteriorState {
    model: GpModel,
    factor: CholeskyFactor,
    alpha: Array1<f64>,
}

pub fn posterior(model: &GpModel) -> Result<PosteriorState, GpError> {
    let gram = gram_matrix(
        &model.kernel,
        &model.train_x,
        &model.train_tasks,
        Some(&model.noise),
    )?;
    let factor = numerics::cholesky(&gram, &numerics::default_jitter_schedule(&gram))?;
    let alpha = factor.solve_vec(&model.targets.view())?;
    Ok(PosteriorState {
        model: model.clone(),
        factor,
        alpha,
    })
}

impl PosteriorState {
    pub fn model(&self) -> &GpModel {
        &self.model
    }

    pub fn factor(&self) -> &CholeskyFactor {
        &self.factor
    }

    pub fn alpha(&self) -> &Array1<f64> {
        &self.alpha
    }

    /// Cross-covariance vector between the training rows and a query on the
    /// effect task.
    pub fn cate_cross_vector(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>, GpError> {
        let model = &self.model;
        let n = model.n();
        let (ck, cl) = model
            .kernel
            .cate_cross_mixing(&model.train_x, &model.train_tasks)?;
        let (k, l) = model.kernel.base_kernels();
        let mut v = Array1::zeros(n);
        for i in 0..n {
            let r2 = sq_dist(model.train_x.row(i), x);
            let mut val = ck[i] * k.eval_sq_dist(r2);
            if let Some(l) = l {
                val += cl[i] * l.eval_sq_dist(r2);
            }
            v[i] = val;
        }
        Ok(v)
    }

    /// Prior variance of the effect task at any point.
    pub fn cate_prior_variance(&self) -> f64 {
        let (pk, pl) = self.model.kernel.cate_prior_mixing();
        let (k, l) = self.model.kernel.base_kernels();
        let mut v = pk * k.eval_sq_dist(0.0);
        if let Some(l) = l {
            v += pl * l.eval_sq_dist(0.0);
        }
        v
    }
}

/// Posterior CATE summary at one query point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CatePrediction {
    /// Posterior mean of the debiasing adjustment (the effect-task GP).
    pub mean_gap: f64,
    /// Observational gap estimate plus the adjustment.
    pub mean_cate: f64,
    pub std: f64,
    pub lower: f64,
    pub upper: f64,
}

pub fn predict(
    state: &PosteriorState,
    omega: &ObservationalModel,
    x: ArrayView1<'_, f64>,
    z: f64,
) -> Result<CatePrediction, GpError> {
    let preds = predict_batch(
        state,
        omega,
        &x.insert_axis(Axis(0)).to_owned(),
        z,
    )?;
    Ok(preds.into_iter().next().expect("one query row"))
}

/// Batched prediction: one triangular solve for the whole query block.
pub fn predict_batch(
    state: &PosteriorState,
    omega: &ObservationalModel,
    xs: &Array2<f64>,
    z: f64,
) -> Result<Vec<CatePrediction>, GpError> {
    let model = &state.model;
    if xs.ncols() != model.dim() {
        return Err(GpError::QueryDimMismatch {
            expected: model.dim(),
            got: xs.ncols(),
        });
    }
    let n = model.n();
    let m = xs.nrows();
    let prior = state.cate_prior_variance();

    let mut cross = Array2::zeros((n, m));
    for (q, x) in xs.rows().into_iter().enumerate() {
        let v = state.cate_cross_vector(x)?;
        cross.column_mut(q).assign(&v);
    }
    let means = cross.t().dot(&state.alpha);
    let downdate: Array1<f64> = if n == 0 {
        Array1::zeros(m)
    } else {
        let w = state.factor.half_solve_mat(&cross.view())?;
        w.map_axis(Axis(0), |col| col.dot(&col))
    };

    let mut out = Vec::with_capacity(m);
    for q in 0..m {
        let mut var = prior - downdate[q];
        if var < 0.0 {
            if var >= -NEGATIVE_VARIANCE_TOL {
                var = 0.0;
            } else {
                return Err(GpError::NegativeVariance {
                    value: var,
                    index: q,
                });
            }
        }
        let std = var.sqrt();
        let mean_gap = means[q];
        let mean_cate = omega.predict_gap(xs.row(q)) + mean_gap;
        out.push(CatePrediction {
            mean_gap,
            mean_cate,
            std,
            lower: mean_cate - z * std,
            upper: mean_cate + z * std,
        });
    }
    Ok(out)
}

/// CATE-task posterior covariance between two query points (needed by the
/// uniform-bound modulus argument).
pub fn posterior_covariance(
    state: &PosteriorState,
    x: ArrayView1<'_, f64>,
    x2: ArrayView1<'_, f64>,
) -> Result<f64, GpError> {
    let model = &state.model;
    let prior = model
        .kernel
        .eval(x, CATE_TASK, x2, CATE_TASK)?;
    if model.n() == 0 {
        return Ok(prior);
    }
    let kx = state.cate_cross_vector(x)?;
    let kx2 = state.cate_cross_vector(x2)?;
    let solved = state.factor.solve_vec(&kx2.view())?;
    Ok(prior - kx.dot(&solved))
}
