//! Monte Carlo studies: estimation error of the three estimators, size and power of the
//! global test, and FDP/TPR of the multiple-testing procedure.
//!
//! Replicate `r` of scenario `s` uses the seed `derive_seed(config.seed, &[s, r])` for both
//! the transition matrix and the data, so a new `A` is drawn for every replicate and a
//! study with more replicates extends (rather than reshuffles) a smaller one. Replicates
//! run in parallel; results are gathered in replicate order and reduced sequentially, so
//! reports do not depend on the number of worker threads.

use std::fmt;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{em_fit, initialize_scaled, standard_em, EmConfig, TauChoice};
use crate::error::{Error, Result};
use crate::inference::{fdr_select, global_test, test_matrix};
use crate::model::{Dataset, HypothesisSpec, ModelParams};
use crate::rng::derive_seed;
use crate::simulate::{simulate, NetworkKind, NetworkSpec, SimConfig};

/// Largest fraction of failed replicates for which a scenario still reports a value.
pub const MAX_FAIL_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    SparseEm,
    StandardEm,
    NaiveDantzig,
}

impl Estimator {
    pub const ALL: [Estimator; 3] = [Estimator::SparseEm, Estimator::StandardEm, Estimator::NaiveDantzig];

    pub fn as_str(&self) -> &'static str {
        match self {
            Estimator::SparseEm => "sparse_em",
            Estimator::StandardEm => "standard_em",
            Estimator::NaiveDantzig => "naive_dantzig",
        }
    }
}

/// How the parameters entering the test statistics are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// Sparse EM with cross-validated tolerance.
    #[default]
    Full,
    /// The true parameters (no estimation).
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: NetworkKind,
    pub p: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub sigma_eps: f64,
    pub sigma_eta: f64,
    pub target_spectral_norm: f64,
}

impl Scenario {
    pub fn sim_config(&self, seed: u64) -> SimConfig {
        SimConfig {
            network: NetworkSpec {
                kind: self.kind,
                p: self.p,
                target_spectral_norm: self.target_spectral_norm,
                seed,
            },
            t: self.t,
            sigma_eta: self.sigma_eta,
            sigma_eps: self.sigma_eps,
            burn_in: 0,
            seed,
        }
    }
}

/// EM settings exposed to study files; anything omitted keeps the [`EmConfig`] default.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmOptions {
    #[serde(default)]
    pub max_iters: Option<usize>,
    #[serde(default)]
    pub stop_tol: Option<f64>,
    #[serde(default)]
    pub cv_grid: Option<Vec<f64>>,
    /// Fixed absolute tolerance instead of cross-validation.
    #[serde(default)]
    pub tau: Option<f64>,
}

impl EmOptions {
    pub fn to_config(&self) -> EmConfig {
        let mut c = EmConfig::default();
        if let Some(v) = self.max_iters {
            c.max_iters = v;
        }
        if let Some(v) = self.stop_tol {
            c.stop_tol = v;
        }
        if let Some(v) = &self.cv_grid {
            c.cv_grid = v.clone();
        }
        if let Some(v) = self.tau {
            c.tau = TauChoice::Fixed(v);
        }
        c
    }
}

fn default_estimators() -> Vec<Estimator> {
    Estimator::ALL.to_vec()
}

fn default_alpha() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub scenarios: Vec<Scenario>,
    pub n_replicates: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_alpha")]
    pub beta: f64,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Estimator>,
    pub seed: u64,
    #[serde(default)]
    pub pipeline: Pipeline,
    #[serde(default)]
    pub em: EmOptions,
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenarios.is_empty() {
            return Err(Error::InvalidInput("study has no scenarios".into()));
        }
        if self.n_replicates == 0 {
            return Err(Error::InvalidInput("n_replicates must be >= 1".into()));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidInput(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidInput("no estimators requested".into()));
        }
        for (k, s) in self.scenarios.iter().enumerate() {
            s.sim_config(0)
                .validate()
                .map_err(|e| Error::InvalidInput(format!("scenario {k}: {e}")))?;
        }
        self.em.to_config().validate()
    }
}

/// One line of a report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub scenario: usize,
    pub kind: NetworkKind,
    pub p: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub sigma_eps: f64,
    pub sigma_eta: f64,
    pub target_spectral_norm: f64,
    pub metric: String,
    /// `NaN` when more than [`MAX_FAIL_FRACTION`] of the replicates failed.
    pub mean: f64,
    /// Sample standard deviation over `sqrt(n_ok)`.
    pub se: f64,
    pub n_ok: usize,
    pub n_fail: usize,
}

impl ReportRow {
    pub fn failed(&self) -> bool {
        self.n_fail as f64 > MAX_FAIL_FRACTION * (self.n_ok + self.n_fail) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct StudyReport {
    pub rows: Vec<ReportRow>,
}

impl StudyReport {
    pub const COLUMNS: [&'static str; 12] = [
        "scenario",
        "kind",
        "p",
        "T",
        "sigma_eps",
        "sigma_eta",
        "target_spectral_norm",
        "metric",
        "mean",
        "se",
        "n_ok",
        "n_fail",
    ];

    pub fn get(&self, scenario: usize, metric: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.scenario == scenario && r.metric == metric)
    }

    /// CSV with a header line; reals in `{:.16e}`.
    pub fn to_csv(&self) -> String {
        let mut out = Self::COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.16e},{:.16e},{:.16e},{},{:.16e},{:.16e},{},{}\n",
                r.scenario,
                r.kind.as_str(),
                r.p,
                r.t,
                r.sigma_eps,
                r.sigma_eta,
                r.target_spectral_norm,
                r.metric,
                r.mean,
                r.se,
                r.n_ok,
                r.n_fail
            ));
        }
        out
    }
}

impl fmt::Display for StudyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rows {
            writeln!(
                f,
                "[{}] {} p={} T={} eps={} eta={}: {:<24} {:>10.5} (se {:.5}, ok {}, fail {})",
                r.scenario,
                r.kind.as_str(),
                r.p,
                r.t,
                r.sigma_eps,
                r.sigma_eta,
                r.metric,
                r.mean,
                r.se,
                r.n_ok,
                r.n_fail
            )?;
        }
        Ok(())
    }
}

/// Pairwise summation.
fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let (a, b) = v.split_at(v.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// Mean and standard error of the successful values.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(values) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
    let sd = (pairwise_sum(&dev) / (n - 1) as f64).sqrt();
    (mean, sd / (n as f64).sqrt())
}

/// Seed of replicate `rep` of scenario `scenario`.
pub fn replicate_seed(seed: u64, scenario: usize, rep: usize) -> u64 {
    derive_seed(seed, &[scenario as u64, rep as u64])
}

fn row(index: usize, s: &Scenario, metric: &str, outcomes: &[Option<f64>]) -> ReportRow {
    let ok: Vec<f64> = outcomes.iter().flatten().copied().collect();
    let mut r = ReportRow {
        scenario: index,
        kind: s.kind,
        p: s.p,
        t: s.t,
        sigma_eps: s.sigma_eps,
        sigma_eta: s.sigma_eta,
        target_spectral_norm: s.target_spectral_norm,
        metric: metric.to_string(),
        mean: f64::NAN,
        se: f64::NAN,
        n_ok: ok.len(),
        n_fail: outcomes.len() - ok.len(),
    };
    if r.failed() {
        log::error!(
            "scenario {index}, {metric}: {} of {} replicates failed",
            r.n_fail,
            outcomes.len()
        );
    } else {
        (r.mean, r.se) = mean_se(&ok);
    }
    r
}

/// Runs `f` on every replicate of every scenario and collects the named outcomes.
fn run_replicates<F>(config: &StudyConfig, metrics: &[String], f: F) -> Result<StudyReport>
where
    F: Fn(&Scenario, &ModelParams, &Dataset) -> Vec<Option<f64>> + Sync,
{
    config.validate()?;
    let mut report = StudyReport::default();
    for (k, scenario) in config.scenarios.iter().enumerate() {
        let per_rep: Vec<Vec<Option<f64>>> = (0..config.n_replicates)
            .into_par_iter()
            .map(|rep| {
                let seed = replicate_seed(config.seed, k, rep);
                match simulate(&scenario.sim_config(seed)) {
                    Ok((truth, data)) => f(scenario, &truth, &data),
                    Err(e) => {
                        log::warn!("scenario {k}, replicate {rep}: simulation failed: {e}");
                        vec![None; metrics.len()]
                    }
                }
            })
            .collect();
        for (m, name) in metrics.iter().enumerate() {
            let outcomes: Vec<Option<f64>> = per_rep.iter().map(|v| v[m]).collect();
            report.rows.push(row(k, scenario, name, &outcomes));
        }
    }
    Ok(report)
}

fn ok_or_warn<T>(what: &str, r: Result<T>) -> Option<T> {
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("{what} failed: {e}");
            None
        }
    }
}

/// Fits `estimator` to `data`.
pub fn fit_estimator(estimator: Estimator, data: &Dataset, em: &EmConfig) -> Result<DMatrix<f64>> {
    match estimator {
        Estimator::SparseEm => em_fit(data, em).map(|(p, _)| p.a),
        Estimator::StandardEm => standard_em(data, em).map(|(p, _)| p.a),
        Estimator::NaiveDantzig => initialize_scaled(data, em.tau_scale).map(|p| p.a),
    }
}

/// Metric name of the Frobenius error of `estimator`.
pub fn error_metric(estimator: Estimator) -> String {
    format!("frobenius_error_{}", estimator.as_str())
}

/// Mean and SE of `||A_hat - A||_F` for each requested estimator.
pub fn run_estimation_study(config: &StudyConfig) -> Result<StudyReport> {
    let em = config.em.to_config();
    let metrics: Vec<String> = config.estimators.iter().map(|e| error_metric(*e)).collect();
    run_replicates(config, &metrics, |_, truth, data| {
        config
            .estimators
            .iter()
            .map(|&est| {
                ok_or_warn(est.as_str(), fit_estimator(est, data, &em))
                    .map(|a| (&a - &truth.a).norm())
            })
            .collect()
    })
}

pub const SIZE: &str = "size";
pub const POWER: &str = "power";
pub const FDP: &str = "fdp";
pub const TPR: &str = "tpr";

/// Outcomes of the inference procedures on one replicate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceOutcome {
    /// Global test of `A0 = A` (true null) rejected.
    pub size_reject: bool,
    /// Global test of `A0 = 0` rejected.
    pub power_reject: bool,
    pub fdp: f64,
    /// One when `A` has no nonzero entry.
    pub tpr: f64,
}

/// Runs both tests on one dataset with the given parameter values.
pub fn inference_outcome(
    data: &Dataset,
    params: &ModelParams,
    truth: &ModelParams,
    alpha: f64,
    beta: f64,
) -> Result<InferenceOutcome> {
    let p = data.dim();
    let tm_null = test_matrix(data, params, &truth.a)?;
    let size = global_test(&tm_null, &HypothesisSpec::all_pairs_against(truth.a.clone())?, alpha)?;
    let tm_zero = test_matrix(data, params, &DMatrix::zeros(p, p))?;
    let all = HypothesisSpec::all_zero(p);
    let power = global_test(&tm_zero, &all, alpha)?;
    let fdr = fdr_select(&tm_zero, &all, beta)?;
    let n_true = truth.a.iter().filter(|v| **v != 0.0).count();
    let tp = fdr
        .rejections
        .iter()
        .filter(|&&(i, j)| truth.a[(i, j)] != 0.0)
        .count();
    let fp = fdr.rejections.len() - tp;
    Ok(InferenceOutcome {
        size_reject: size.reject,
        power_reject: power.reject,
        fdp: fp as f64 / fdr.rejections.len().max(1) as f64,
        tpr: if n_true == 0 { 1.0 } else { tp as f64 / n_true as f64 },
    })
}

fn pipeline_params(config: &StudyConfig, em: &EmConfig, truth: &ModelParams, data: &Dataset) -> Result<ModelParams> {
    match config.pipeline {
        Pipeline::Full => em_fit(data, em).map(|(p, _)| p),
        Pipeline::Oracle => Ok(truth.clone()),
    }
}

/// Size, power, mean FDP and mean TPR from a single fit per replicate.
pub fn run_inference_study(config: &StudyConfig) -> Result<StudyReport> {
    let em = config.em.to_config();
    let metrics: Vec<String> = [SIZE, POWER, FDP, TPR].iter().map(|s| s.to_string()).collect();
    run_replicates(config, &metrics, |_, truth, data| {
        let outcome = pipeline_params(config, &em, truth, data)
            .and_then(|params| inference_outcome(data, &params, truth, config.alpha, config.beta));
        match ok_or_warn("inference replicate", outcome) {
            Some(o) => vec![
                Some(o.size_reject as u8 as f64),
                Some(o.power_reject as u8 as f64),
                Some(o.fdp),
                Some(o.tpr),
            ],
            None => vec![None; 4],
        }
    })
}

fn keep_metrics(report: StudyReport, metrics: &[&str]) -> StudyReport {
    StudyReport {
        rows: report
            .rows
            .into_iter()
            .filter(|r| metrics.contains(&r.metric.as_str()))
            .collect(),
    }
}

/// Empirical size (`A0 = A`) and power (`A0 = 0`) of the global test.
pub fn run_global_study(config: &StudyConfig) -> Result<StudyReport> {
    run_inference_study(config).map(|r| keep_metrics(r, &[SIZE, POWER]))
}

/// Mean FDP and TPR of the multiple-testing procedure with `A0 = 0` over all pairs.
pub fn run_fdr_study(config: &StudyConfig) -> Result<StudyReport> {
    run_inference_study(config).map(|r| keep_metrics(r, &[FDP, TPR]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyKind {
    Estimation,
    Global,
    Fdr,
    Inference,
}

impl std::str::FromStr for StudyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "estimation" => Ok(StudyKind::Estimation),
            "global" => Ok(StudyKind::Global),
            "fdr" => Ok(StudyKind::Fdr),
            "inference" => Ok(StudyKind::Inference),
            other => Err(Error::InvalidInput(format!("unknown study '{other}'"))),
        }
    }
}

pub fn run_study(kind: StudyKind, config: &StudyConfig) -> Result<StudyReport> {
    match kind {
        StudyKind::Estimation => run_estimation_study(config),
        StudyKind::Global => run_global_study(config),
        StudyKind::Fdr => run_fdr_study(config),
        StudyKind::Inference => run_inference_study(config),
    }
}
