//! Command-line interface.
//!
//! Exit status is 0 on success, 1 for usage errors (bad flags, unreadable or malformed
//! input) and 2 when a numerical routine fails; in the error cases a JSON object
//! `{"error": kind, "message": text}` is written to standard error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::json;

use crate::em::{default_cv_grid, em_fit, EmConfig, EmDiagnostics, TauChoice};
use crate::error::{Error, Result};
use crate::experiments::{run_study, StudyConfig, StudyKind};
use crate::inference::{fdr_select, global_test, test_matrix};
use crate::io::{self, ParamsFile, SCHEMA_VERSION};
use crate::model::{Dataset, HypothesisSpec, ModelParams};
use crate::simulate::{simulate, NetworkKind, NetworkSpec, SimConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "varme", version, about = "Sparse EM and simultaneous inference for noisy VAR(1) series")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "VARME_THREADS")]
    pub threads: Option<usize>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, env = "VARME_LOG_LEVEL", default_value = "warn")]
    pub log_level: log::LevelFilter,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a transition matrix and a series from it.
    Simulate(SimulateArgs),
    /// Fit the model to a series by sparse EM.
    Fit(FitArgs),
    /// Global test of A = A0 over an index set.
    TestGlobal(GlobalArgs),
    /// Multiple testing of A_ij = A0_ij with false discovery rate control.
    TestFdr(FdrArgs),
    /// Run a Monte Carlo study.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub kind: NetworkKind,
    #[arg(long)]
    pub p: usize,
    #[arg(long = "T")]
    pub t: usize,
    /// Spectral norm of the transition matrix, in (0, 1).
    #[arg(long)]
    pub snorm: f64,
    #[arg(long)]
    pub sigma_eps: f64,
    #[arg(long)]
    pub sigma_eta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Start from zero and discard this many steps instead of drawing x_1 from the
    /// stationary law.
    #[arg(long, default_value_t = 0)]
    pub burn_in: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Observations, T rows by p columns.
    #[arg(long)]
    pub y: PathBuf,
    /// Dantzig tolerance: a number >= 0, or `auto` for cross-validation.
    #[arg(long, default_value = "auto")]
    pub tau: TauChoice,
    /// `default` or a comma-separated list of multipliers.
    #[arg(long, default_value = "default")]
    pub cv_grid: String,
    #[arg(long, default_value_t = 50)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub stop_tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TestInputs {
    #[arg(long)]
    pub y: PathBuf,
    /// Fitted parameters (JSON).
    #[arg(long)]
    pub theta: PathBuf,
    /// Null matrix; zero when omitted.
    #[arg(long)]
    pub a0: Option<PathBuf>,
    /// 0/1 matrix selecting the tested entries; all entries when omitted.
    #[arg(long)]
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    #[command(flatten)]
    pub inputs: TestInputs,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Also write the result JSON to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FdrArgs {
    #[command(flatten)]
    pub inputs: TestInputs,
    #[arg(long, default_value_t = 0.05)]
    pub beta: f64,
    /// Directory for fdr.json and rejections.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// estimation, global, fdr or inference (global and fdr together).
    #[arg(long)]
    pub study: StudyKind,
    /// Study description (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Report CSV.
    #[arg(long)]
    pub out: PathBuf,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })
}

fn check_level(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        return Err(usage(format!("{name} must lie in (0, 1), got {v}")));
    }
    Ok(())
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    if s == "default" {
        return Ok(default_cv_grid());
    }
    s.split(',')
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|_| usage(format!("cv-grid entry '{}' is not a number", f.trim())))
        })
        .collect()
}

fn read_series(path: &Path) -> Result<Dataset> {
    Dataset::new(io::read_matrix(path)?)
}

#[derive(Serialize)]
struct SimulationRecord<'a> {
    #[serde(flatten)]
    params: ParamsFile,
    simulation: &'a SimConfig,
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let config = SimConfig {
        network: NetworkSpec {
            kind: args.kind,
            p: args.p,
            target_spectral_norm: args.snorm,
            seed: args.seed,
        },
        t: args.t,
        sigma_eta: args.sigma_eta,
        sigma_eps: args.sigma_eps,
        burn_in: args.burn_in,
        seed: args.seed,
    };
    config.validate()?;
    let (params, data) = simulate(&config)?;
    create_dir(&args.out)?;
    io::write_matrix(&args.out.join("y.csv"), &data.y)?;
    if let Some(x) = &data.x {
        io::write_matrix(&args.out.join("x.csv"), x)?;
    }
    io::write_matrix(&args.out.join("A.csv"), &params.a)?;
    let record = SimulationRecord {
        params: ParamsFile::referencing(&params, "A.csv"),
        simulation: &config,
    };
    io::write_json(&args.out.join("params.json"), &record)
}

#[derive(Serialize)]
struct DiagnosticsFile<'a> {
    schema_version: u32,
    #[serde(flatten)]
    diagnostics: &'a EmDiagnostics,
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let config = EmConfig {
        tau: args.tau,
        max_iters: args.max_iters,
        stop_tol: args.stop_tol,
        cv_grid: parse_grid(&args.cv_grid)?,
        seed: args.seed,
        ..EmConfig::default()
    };
    config.validate()?;
    let data = read_series(&args.y)?;
    let (params, diagnostics) = em_fit(&data, &config)?;
    create_dir(&args.out)?;
    io::write_params(&args.out.join("theta_hat.json"), &params)?;
    io::write_matrix(&args.out.join("A_hat.csv"), &params.a)?;
    io::write_json(
        &args.out.join("diagnostics.json"),
        &DiagnosticsFile {
            schema_version: SCHEMA_VERSION,
            diagnostics: &diagnostics,
        },
    )
}

fn load_test_inputs(inputs: &TestInputs) -> Result<(Dataset, ModelParams, HypothesisSpec)> {
    let data = read_series(&inputs.y)?;
    let params = io::read_params(&inputs.theta)?;
    let p = data.dim();
    if params.dim() != p {
        return Err(Error::Dimension(format!(
            "series has {p} coordinates but the parameters have {}",
            params.dim()
        )));
    }
    let a0 = match &inputs.a0 {
        Some(path) => io::read_matrix(path)?,
        None => DMatrix::zeros(p, p),
    };
    if a0.shape() != (p, p) {
        return Err(Error::Dimension(format!("A0 is {:?}, expected {p}x{p}", a0.shape())));
    }
    let spec = match &inputs.mask {
        Some(path) => HypothesisSpec::with_mask(a0, &io::read_matrix(path)?)?,
        None => HypothesisSpec::all_pairs_against(a0)?,
    };
    Ok((data, params, spec))
}

fn cmd_test_global(args: &GlobalArgs) -> Result<()> {
    check_level("alpha", args.alpha)?;
    let (data, params, spec) = load_test_inputs(&args.inputs)?;
    let tm = test_matrix(&data, &params, &spec.a0)?;
    let result = global_test(&tm, &spec, args.alpha)?;
    let out = json!({
        "schema_version": SCHEMA_VERSION,
        "G_S": result.g_s,
        "threshold": result.threshold,
        "p_value": result.p_value,
        "reject": result.reject,
        "alpha": result.alpha,
    });
    let text = io::to_json_pretty(&out)?;
    if let Some(path) = &args.out {
        io::write_atomic(path, text.as_bytes())?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_test_fdr(args: &FdrArgs) -> Result<()> {
    check_level("beta", args.beta)?;
    let (data, params, spec) = load_test_inputs(&args.inputs)?;
    let tm = test_matrix(&data, &params, &spec.a0)?;
    let result = fdr_select(&tm, &spec, args.beta)?;
    let out = json!({
        "schema_version": SCHEMA_VERSION,
        "t_hat": result.t_hat,
        "n_rejections": result.rejections.len(),
        "beta": result.beta,
    });
    let text = io::to_json_pretty(&out)?;
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        let mut csv = String::new();
        for &(i, j) in &result.rejections {
            csv.push_str(&format!("{i},{j},{:.16e}\n", tm.h[(i, j)]));
        }
        io::write_atomic(&dir.join("rejections.csv"), csv.as_bytes())?;
        io::write_atomic(&dir.join("fdr.json"), text.as_bytes())?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_experiment(args: &ExperimentArgs) -> Result<()> {
    let config: StudyConfig = io::read_json(&args.config)?;
    let report = run_study(args.study, &config)?;
    log::info!("study finished:\n{report}");
    io::write_atomic(&args.out, report.to_csv().as_bytes())
}

fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::TestGlobal(a) => cmd_test_global(a),
        Command::TestFdr(a) => cmd_test_fdr(a),
        Command::Experiment(a) => cmd_experiment(a),
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidInput(_) => "invalid_input",
        Error::Dimension(_) => "dimension",
        Error::NonStationary { .. } => "non_stationary",
        Error::Infeasible { .. } => "infeasible",
        Error::LpCertificate { .. } => "lp_certificate",
        Error::Singular(_) => "singular",
        Error::Numerical(_) => "numerical",
        Error::Em { source, .. } => error_kind(source),
        Error::Io { .. } => "io",
        Error::Parse(_) => "parse",
    }
}

fn report_error(e: &Error) -> i32 {
    let body = json!({ "error": error_kind(e), "message": e.to_string() });
    eprintln!("{body}");
    if e.is_usage() {
        EXIT_USAGE
    } else {
        EXIT_NUMERICAL
    }
}

/// Parses `args` (including the program name) and runs the command; returns the exit
/// status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .try_init();
    if let Some(n) = cli.threads {
        if n == 0 {
            return report_error(&usage("--threads must be positive"));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    match dispatch(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => report_error(&e),
    }
}
