//! Sparse EM for the measurement-error VAR.
//!
//! Each iteration runs the Kalman smoother at the current parameters (E-step), solves the
//! row-wise Dantzig program on the smoothed lag moments for `A`, and refreshes both noise
//! variances in closed form. The tolerance `tau` is either fixed or chosen once by a
//! temporal cross-validation and then held for every iteration of the final fit.
//!
//! The same loop with the unpenalized closed-form update ([`mstep_exact`]) gives the
//! classical EM baseline ([`standard_em`]).

use std::str::FromStr;

use log::{debug, warn};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::dantzig::{dantzig_matrix, DantzigProblem};
use crate::error::{Error, Result};
use crate::kalman::{log_likelihood, smooth_with_likelihood, spd_factor, SmoothedMoments};
use crate::model::{stationary_covariance, Dataset, ModelParams};

/// Lower bound applied to both variance updates.
pub const VARIANCE_FLOOR: f64 = 1e-12;
/// Number of times the initial tolerance is doubled after an infeasible program.
pub const INIT_TAU_DOUBLINGS: usize = 8;
/// Fractions of the series used as the CV test block (earliest) and training block (latest).
pub const CV_TEST_FRACTION: f64 = 0.25;
pub const CV_TRAIN_FRACTION: f64 = 0.6;

/// How the three parameter changes are combined in the stopping test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopRule {
    /// Stop when the smallest change is below `stop_tol`.
    Min,
    /// Stop when every change is below `stop_tol`.
    Max,
}

/// Units of the Dantzig tolerance. The constraint is on covariances, so a tolerance that
/// should not depend on the scale of `y` has to carry the scale of the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TauScale {
    /// Tolerances are used as given.
    Absolute,
    /// Tolerances are multiplied by the mean squared observation `||Y||_F^2 / (pT)`.
    ObservedVariance,
}

/// Form of the innovation-variance update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceRule {
    /// Stationary point of `Q` in `sigma_eta^2` at the new `A`:
    /// `sum E||x_{t+1} - A x_t||^2 / (p(T-1))`.
    QDerivative,
    /// `sum {tr E_{t+1,t+1} - tr(A E_{t,t+1})} / (p(T-1))`, which agrees with
    /// `QDerivative` when `A` solves the unpenalized normal equations.
    Simplified,
}

/// How the Dantzig tolerance is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauChoice {
    Fixed(f64),
    /// Cross-validate over `cv_grid`.
    Auto,
}

impl FromStr for TauChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(TauChoice::Auto);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| Error::Parse(format!("tau must be a number or \"auto\", got {s:?}")))?;
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::InvalidInput(format!("tau must be >= 0, got {v}")));
        }
        Ok(TauChoice::Fixed(v))
    }
}

/// Ten multipliers log-spaced on `[0.1, 10]`.
pub fn default_cv_grid() -> Vec<f64> {
    (0..10).map(|k| 10f64.powf(-1.0 + 2.0 * k as f64 / 9.0)).collect()
}

/// The rate `sqrt(log p / T)` that tolerance multipliers are applied to.
pub fn tau_rate(p: usize, t: usize) -> f64 {
    ((p as f64).ln() / t as f64).sqrt()
}

/// Absolute tolerance that a multiplier `c` is applied to: [`tau_rate`], times the mean
/// squared observation under [`TauScale::ObservedVariance`].
pub fn tau_unit(data: &Dataset, scale: TauScale) -> f64 {
    let rate = tau_rate(data.dim(), data.len());
    match scale {
        TauScale::Absolute => rate,
        TauScale::ObservedVariance => {
            rate * data.y.norm_squared() / (data.len() * data.dim()) as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub tau: TauChoice,
    pub max_iters: usize,
    pub stop_tol: f64,
    /// Multipliers `c` on [`tau_rate`].
    pub cv_grid: Vec<f64>,
    pub stop_rule: StopRule,
    pub tau_scale: TauScale,
    pub variance_rule: VarianceRule,
    /// Recorded for provenance; the fit itself is deterministic.
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            tau: TauChoice::Auto,
            max_iters: 50,
            stop_tol: 1e-3,
            cv_grid: default_cv_grid(),
            stop_rule: StopRule::Min,
            tau_scale: TauScale::ObservedVariance,
            variance_rule: VarianceRule::QDerivative,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn with_tau(tau: f64) -> Self {
        Self {
            tau: TauChoice::Fixed(tau),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidInput("max_iters must be positive".into()));
        }
        if !(self.stop_tol.is_finite() && self.stop_tol >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "stop_tol must be finite and >= 0, got {}",
                self.stop_tol
            )));
        }
        if let TauChoice::Fixed(t) = self.tau {
            if !(t.is_finite() && t >= 0.0) {
                return Err(Error::InvalidInput(format!("tau must be >= 0, got {t}")));
            }
        }
        if self.tau == TauChoice::Auto && self.cv_grid.is_empty() {
            return Err(Error::InvalidInput("cv_grid must be non-empty when tau is auto".into()));
        }
        if let Some(c) = self.cv_grid.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
            return Err(Error::InvalidInput(format!("cv_grid entries must be > 0, got {c}")));
        }
        Ok(())
    }
}

/// Held-out error of one grid point; `error` is `None` when the fit failed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvPoint {
    pub multiplier: f64,
    pub tau: f64,
    pub error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvReport {
    pub points: Vec<CvPoint>,
    pub selected_tau: f64,
    pub selected_multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood of the parameters entering each iteration (the first entry is the
    /// initializer).
    pub loglik_trace: Vec<f64>,
    /// Per iteration: `||A_k - A_{k-1}||_F`, `|sigma_eta,k - sigma_eta,k-1|`,
    /// `|sigma_eps,k - sigma_eps,k-1|`.
    pub param_deltas: Vec<[f64; 3]>,
    pub selected_tau: f64,
    /// Number of variance updates that hit [`VARIANCE_FLOOR`].
    pub clamp_warnings: usize,
    pub cv: Option<CvReport>,
    pub seed: u64,
}

/// Result of the closed-form variance step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceUpdate {
    pub sigma_eta_sq: f64,
    pub sigma_eps_sq: f64,
    /// How many of the two values were raised to the floor.
    pub clamped: usize,
}

/// Observed-data lag moments `(T-1)^{-1} sum y_t y_t^T` and `(T-1)^{-1} sum y_t y_{t+1}^T`.
pub fn observed_moments(data: &Dataset) -> (DMatrix<f64>, DMatrix<f64>) {
    let t_len = data.len();
    let head = data.y.rows(0, t_len - 1);
    let tail = data.y.rows(1, t_len - 1);
    let n = (t_len - 1) as f64;
    (head.transpose() * head / n, head.transpose() * tail / n)
}

/// `sum_t ||y_{t+1} - A y_t||^2 / (p (T-1))`.
pub fn one_step_error(data: &Dataset, a: &DMatrix<f64>) -> f64 {
    let t_len = data.len();
    let head = data.y.rows(0, t_len - 1);
    let tail = data.y.rows(1, t_len - 1);
    let resid = tail - head * a.transpose();
    resid.norm_squared() / (data.dim() * (t_len - 1)) as f64
}

/// Dantzig fit on the observed series, ignoring measurement error. The tolerance starts at
/// `tau` and is doubled after each infeasible attempt.
pub fn naive_dantzig(data: &Dataset, tau: f64) -> Result<DMatrix<f64>> {
    check_length(data, 3)?;
    let (g0, g1) = observed_moments(data);
    let mut tau = tau;
    let mut last = None;
    for attempt in 0..=INIT_TAU_DOUBLINGS {
        match DantzigProblem::new(g0.clone(), g1.clone(), tau).and_then(|pr| dantzig_matrix(&pr)) {
            Ok(a) => return Ok(a),
            Err(e @ Error::Infeasible { .. }) => {
                debug!("naive fit infeasible at tau = {tau:e} (attempt {attempt})");
                last = Some(e);
                tau *= 2.0;
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Starting values: naive Dantzig at `tau = tau_unit(data, ObservedVariance)` and an even
/// split of the one-step residual variance between the two noise sources.
pub fn initialize(data: &Dataset) -> Result<ModelParams> {
    initialize_scaled(data, TauScale::ObservedVariance)
}

/// [`initialize`] with an explicit tolerance unit.
pub fn initialize_scaled(data: &Dataset, scale: TauScale) -> Result<ModelParams> {
    check_length(data, 3)?;
    let a0 = naive_dantzig(data, tau_unit(data, scale))?;
    let v = one_step_error(data, &a0);
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::Numerical(format!(
            "degenerate series: one-step residual variance is {v}"
        )));
    }
    ModelParams::new(a0, v / 2.0, v / 2.0)
}

/// Closed-form variance step given the smoothed moments and the new transition matrix.
pub fn update_variances(
    moments: &SmoothedMoments,
    data: &Dataset,
    a_new: &DMatrix<f64>,
    rule: VarianceRule,
) -> Result<VarianceUpdate> {
    let (t_len, p) = (data.len(), data.dim());
    if moments.len() != t_len || moments.dim() != p || a_new.shape() != (p, p) {
        return Err(Error::Dimension(format!(
            "moments {}x{}, data {t_len}x{p}, A {:?}",
            moments.len(),
            moments.dim(),
            a_new.shape()
        )));
    }
    let mut eta = 0.0;
    for t in 0..t_len - 1 {
        let lag = (a_new * &moments.cross[t]).trace();
        eta += moments.second[t + 1].trace()
            - match rule {
                VarianceRule::QDerivative => {
                    2.0 * lag - (a_new * &moments.second[t] * a_new.transpose()).trace()
                }
                VarianceRule::Simplified => lag,
            };
    }
    let eta = eta / (p * (t_len - 1)) as f64;
    let mut eps = 0.0;
    for t in 0..t_len {
        let y = data.y.row(t);
        eps += y.dot(&y) - 2.0 * y.dot(&moments.mean.row(t)) + moments.second[t].trace();
    }
    let eps = eps / (p * t_len) as f64;
    let mut clamped = 0;
    let mut floor = |v: f64, name: &str| {
        if v < VARIANCE_FLOOR {
            warn!("{name} update {v:e} clamped to {VARIANCE_FLOOR:e}");
            clamped += 1;
            VARIANCE_FLOOR
        } else {
            v
        }
    };
    let sigma_eta_sq = floor(eta, "sigma_eta^2");
    let sigma_eps_sq = floor(eps, "sigma_eps^2");
    Ok(VarianceUpdate {
        sigma_eta_sq,
        sigma_eps_sq,
        clamped,
    })
}

/// Unpenalized M-step `(sum E_{t,t+1})^T (sum E_{t,t})^{-1}` over `t = 1..T-1`.
pub fn mstep_exact(moments: &SmoothedMoments) -> Result<DMatrix<f64>> {
    let (g0, g1) = moments.lag_averages();
    let g0 = (&g0 + g0.transpose()) * 0.5;
    let chol = g0
        .cholesky()
        .ok_or_else(|| Error::Singular("sum of smoothed second moments".into()))?;
    Ok(chol.solve(&g1).transpose())
}

/// Sums of the smoothed moments entering the complete-data log-likelihood.
struct QSums {
    first: DMatrix<f64>,
    // sum_{t<T} E_tt, sum_{t>1} E_tt, sum_{t<T} E_{t,t+1}
    s00: DMatrix<f64>,
    s11: DMatrix<f64>,
    s01: DMatrix<f64>,
    // sum_t (y'y - 2 y'E_t + tr E_tt)
    obs: f64,
    p: usize,
    t_len: usize,
}

impl QSums {
    fn new(moments: &SmoothedMoments, data: &Dataset) -> Self {
        let (t_len, p) = (data.len(), data.dim());
        let mut s00 = DMatrix::zeros(p, p);
        let mut s01 = DMatrix::zeros(p, p);
        for t in 0..t_len - 1 {
            s00 += &moments.second[t];
            s01 += &moments.cross[t];
        }
        let s11 = &s00 - &moments.second[0] + &moments.second[t_len - 1];
        let obs = (0..t_len)
            .map(|t| {
                let y = data.y.row(t);
                y.dot(&y) - 2.0 * y.dot(&moments.mean.row(t)) + moments.second[t].trace()
            })
            .sum();
        Self {
            first: moments.second[0].clone(),
            s00,
            s11,
            s01,
            obs,
            p,
            t_len,
        }
    }

    fn eval(&self, params: &ModelParams) -> Result<f64> {
        let (p, n) = (self.p as f64, self.t_len as f64);
        let a = &params.a;
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let sigma_x = stationary_covariance(params)?;
        let chol = spd_factor(&sigma_x)?;
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let prior = -0.5 * (p * ln2pi + logdet + chol.solve(&self.first).trace());
        let resid = self.s11.trace() - 2.0 * (a * &self.s01).trace()
            + (a * &self.s00 * a.transpose()).trace();
        let trans = -0.5
            * (p * (n - 1.0) * (ln2pi + params.sigma_eta_sq.ln()) + resid / params.sigma_eta_sq);
        let obs = -0.5 * (p * n * (ln2pi + params.sigma_eps_sq.ln()) + self.obs / params.sigma_eps_sq);
        Ok(prior + trans + obs)
    }
}

/// Expected complete-data log-likelihood `Q(params | moments)`, including the stationary
/// law of `x_1`. `Err` when `params` has no stationary law.
pub fn q_function(moments: &SmoothedMoments, data: &Dataset, params: &ModelParams) -> Result<f64> {
    if moments.len() != data.len() || moments.dim() != data.dim() || params.dim() != data.dim() {
        return Err(Error::Dimension("moments, data and parameters disagree".into()));
    }
    QSums::new(moments, data).eval(params)
}

/// Halvings tried before the classical update is abandoned for an iteration.
const MAX_BACKTRACKS: usize = 30;

#[derive(Debug, Clone, Copy)]
enum MStep {
    Dantzig(f64),
    /// Closed-form update, accepted only if it does not decrease `Q`; otherwise the step
    /// towards it is halved.
    Exact,
}

fn check_length(data: &Dataset, min: usize) -> Result<()> {
    if data.len() < min {
        return Err(Error::InvalidInput(format!(
            "series needs at least {min} time points, got {}",
            data.len()
        )));
    }
    Ok(())
}

fn interpolate(from: &ModelParams, to: &ModelParams, step: f64) -> Result<ModelParams> {
    ModelParams::new(
        &from.a + (&to.a - &from.a) * step,
        from.sigma_eta_sq + (to.sigma_eta_sq - from.sigma_eta_sq) * step,
        from.sigma_eps_sq + (to.sigma_eps_sq - from.sigma_eps_sq) * step,
    )
}

/// Moves from `current` towards `proposal` by the largest step in `1, 1/2, 1/4, ...` that
/// does not decrease `Q`. Returns `current` if no such step is found.
fn safeguard(
    moments: &SmoothedMoments,
    data: &Dataset,
    current: &ModelParams,
    proposal: ModelParams,
) -> Result<ModelParams> {
    let sums = QSums::new(moments, data);
    let base = sums.eval(current)?;
    let mut step = 1.0;
    for _ in 0..=MAX_BACKTRACKS {
        let cand = if step == 1.0 {
            proposal.clone()
        } else {
            interpolate(current, &proposal, step)?
        };
        if let Ok(q) = sums.eval(&cand) {
            if q >= base {
                return Ok(cand);
            }
        }
        step *= 0.5;
    }
    debug!("no ascent step found; keeping the current parameters");
    Ok(current.clone())
}

fn run_em(
    data: &Dataset,
    init: ModelParams,
    mstep: MStep,
    config: &EmConfig,
) -> Result<(ModelParams, EmDiagnostics)> {
    let mut params = init;
    let mut diag = EmDiagnostics {
        iterations: 0,
        converged: false,
        loglik_trace: Vec::new(),
        param_deltas: Vec::new(),
        selected_tau: match mstep {
            MStep::Dantzig(t) => t,
            MStep::Exact => 0.0,
        },
        clamp_warnings: 0,
        cv: None,
        seed: config.seed,
    };
    for k in 1..=config.max_iters {
        let (moments, ll) =
            smooth_with_likelihood(data, &params).map_err(|e| e.at_iteration(k))?;
        if !moments.is_finite() || !ll.is_finite() {
            log::error!(
                "non-finite E-step at iteration {k}: loglik = {ll}, sigma_eta^2 = {:e}, \
                 sigma_eps^2 = {:e}, max|A| = {:e}",
                params.sigma_eta_sq,
                params.sigma_eps_sq,
                params.a.amax()
            );
            return Err(Error::Numerical("non-finite smoothed moments".into()).at_iteration(k));
        }
        diag.loglik_trace.push(ll);
        let mut step = || -> Result<ModelParams> {
            let a_new = match mstep {
                MStep::Dantzig(tau) => {
                    let (g0, g1) = moments.lag_averages();
                    dantzig_matrix(&DantzigProblem::new(g0, g1, tau)?)?
                }
                MStep::Exact => mstep_exact(&moments)?,
            };
            let var = update_variances(&moments, data, &a_new, config.variance_rule)?;
            diag.clamp_warnings += var.clamped;
            let next = ModelParams::new(a_new, var.sigma_eta_sq, var.sigma_eps_sq)?;
            match mstep {
                MStep::Dantzig(_) => Ok(next),
                MStep::Exact => safeguard(&moments, data, &params, next),
            }
        };
        let next = step().map_err(|e| e.at_iteration(k))?;
        let delta = [
            (&next.a - &params.a).norm(),
            (next.sigma_eta_sq.sqrt() - params.sigma_eta_sq.sqrt()).abs(),
            (next.sigma_eps_sq.sqrt() - params.sigma_eps_sq.sqrt()).abs(),
        ];
        debug!("iteration {k}: loglik {ll:.6}, deltas {delta:?}");
        diag.param_deltas.push(delta);
        diag.iterations = k;
        params = next;
        let change = match config.stop_rule {
            StopRule::Min => delta.iter().cloned().fold(f64::INFINITY, f64::min),
            StopRule::Max => delta.iter().cloned().fold(0.0, f64::max),
        };
        if change <= config.stop_tol {
            diag.converged = true;
            break;
        }
    }
    Ok((params, diag))
}

/// Sparse EM with a fixed absolute tolerance, started from [`initialize_scaled`].
pub fn em_fit_with_tau(
    data: &Dataset,
    tau: f64,
    config: &EmConfig,
) -> Result<(ModelParams, EmDiagnostics)> {
    check_length(data, 3)?;
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(Error::InvalidInput(format!("tau must be >= 0, got {tau}")));
    }
    let init = initialize_scaled(data, config.tau_scale)?;
    run_em(data, init, MStep::Dantzig(tau), config)
}

/// Sparse EM. A fixed `tau` is used as the absolute Dantzig tolerance; with
/// `TauChoice::Auto` the tolerance is cross-validated first and the CV table is attached
/// to the diagnostics.
pub fn em_fit(data: &Dataset, config: &EmConfig) -> Result<(ModelParams, EmDiagnostics)> {
    config.validate()?;
    match config.tau {
        TauChoice::Fixed(tau) => em_fit_with_tau(data, tau, config),
        TauChoice::Auto => {
            let cv = cross_validate_tau(data, config)?;
            let (params, mut diag) = em_fit_with_tau(data, cv.selected_tau, config)?;
            diag.cv = Some(cv);
            Ok((params, diag))
        }
    }
}

/// Classical EM, started from [`initialize_scaled`]. The transition update is
/// [`mstep_exact`]; because that update ignores the dependence of the stationary law of
/// `x_1` on the parameters, each step is checked against the full `Q` and shortened if it
/// would decrease it, which keeps the likelihood non-decreasing.
pub fn standard_em(data: &Dataset, config: &EmConfig) -> Result<(ModelParams, EmDiagnostics)> {
    config.validate()?;
    check_length(data, 3)?;
    let init = initialize_scaled(data, config.tau_scale)?;
    standard_em_from(data, init, config)
}

/// Classical EM from given starting values.
pub fn standard_em_from(
    data: &Dataset,
    init: ModelParams,
    config: &EmConfig,
) -> Result<(ModelParams, EmDiagnostics)> {
    config.validate()?;
    check_length(data, 3)?;
    run_em(data, init, MStep::Exact, config)
}

/// `(test, train)` blocks of the temporal split: the earliest quarter and the latest 60%.
pub fn cv_split(data: &Dataset) -> Result<(Dataset, Dataset)> {
    let t_len = data.len();
    let n_test = (CV_TEST_FRACTION * t_len as f64).floor() as usize;
    let n_train = (CV_TRAIN_FRACTION * t_len as f64).floor() as usize;
    if n_test < 3 || n_train < 3 {
        return Err(Error::InvalidInput(format!(
            "series of length {t_len} is too short for cross-validation"
        )));
    }
    Ok((data.segment(0, n_test)?, data.segment(t_len - n_train, t_len)?))
}

/// Chooses `tau` from `c * tau_unit(data)`, `c` in `config.cv_grid`, by one-step-ahead
/// prediction error on the earliest block of a fit to the latest block. Ties go to the
/// larger tolerance.
pub fn cross_validate_tau(data: &Dataset, config: &EmConfig) -> Result<CvReport> {
    config.validate()?;
    if config.cv_grid.is_empty() {
        return Err(Error::InvalidInput("cv_grid is empty".into()));
    }
    let (test, train) = cv_split(data)?;
    let rate = tau_unit(data, config.tau_scale);
    let points: Vec<CvPoint> = config
        .cv_grid
        .par_iter()
        .map(|&c| {
            let tau = c * rate;
            let error = match em_fit_with_tau(&train, tau, config) {
                Ok((fit, _)) => Some(one_step_error(&test, &fit.a)),
                Err(e) => {
                    warn!("cross-validation point c = {c} (tau = {tau:e}) failed: {e}");
                    None
                }
            };
            CvPoint {
                multiplier: c,
                tau,
                error,
            }
        })
        .collect();
    let mut best: Option<&CvPoint> = None;
    for pt in &points {
        let Some(err) = pt.error else { continue };
        if !err.is_finite() {
            continue;
        }
        best = match best {
            None => Some(pt),
            Some(b) => {
                let b_err = b.error.unwrap_or(f64::INFINITY);
                if err < b_err || (err == b_err && pt.tau > b.tau) {
                    Some(pt)
                } else {
                    Some(b)
                }
            }
        };
    }
    let best = best.ok_or_else(|| {
        Error::Numerical("every cross-validation grid point failed".into())
    })?;
    Ok(CvReport {
        selected_tau: best.tau,
        selected_multiplier: best.multiplier,
        points,
    })
}

/// Log-likelihood of the fitted parameters, when the stationary prior exists.
pub fn final_log_likelihood(data: &Dataset, params: &ModelParams) -> Option<f64> {
    log_likelihood(data, params).ok()
}
