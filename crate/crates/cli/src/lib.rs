//! `polyport` command-line front-end.
//!
//! Exit codes: 0 tight solve, 2 optimal but not certified tight, 1 solver
//! failure, 64 malformed configuration or usage, 66 unreadable input data.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use polyport::data::{self, Reference};
use polyport::portfolio::{build_analytic_normal_loss, build_sample_loss, NormalModel, ReturnSamples};
use polyport::psaa::{self, PsaaResult};
use polyport::Error;

pub mod config;

use config::{RunConfig, Source};

pub const EXIT_TIGHT: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_NOT_TIGHT: i32 = 2;
pub const EXIT_CONFIG: i32 = 64;
pub const EXIT_DATA: i32 = 66;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("input data: {0}")]
    Unreadable(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Unreadable(_) => EXIT_DATA,
            CliError::Failed(_) => EXIT_FAILURE,
        }
    }
}

fn data_error(path: &Path, e: Error) -> CliError {
    CliError::Unreadable(format!("{}: {e}", path.display()))
}

fn write_error(path: Option<&Path>, e: impl std::fmt::Display) -> CliError {
    let target = path.map_or_else(|| "stdout".to_owned(), |p| p.display().to_string());
    CliError::Failed(format!("writing {target}: {e}"))
}

#[derive(Debug, Parser)]
#[command(name = "polyport", version, about = "Polynomial portfolio optimization with moment relaxations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one portfolio problem and write a JSON result document.
    Solve { config: PathBuf },
    /// Run a Monte Carlo convergence study and write a CSV table.
    Study { config: PathBuf },
    /// Convert a price table to returns, plus long-format scatter data.
    Ingest {
        prices: PathBuf,
        returns: PathBuf,
        /// Scatter output; defaults to `<returns stem>_scatter.csv`.
        #[arg(long)]
        scatter: Option<PathBuf>,
    },
}

/// Parses `args` (program name first) and runs the command.
pub fn run_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_TIGHT };
        }
    };
    let outcome = match &cli.command {
        Command::Solve { config } => cmd_solve(config),
        Command::Study { config } => cmd_study(config),
        Command::Ingest { prices, returns, scatter } => cmd_ingest(prices, returns, scatter.as_deref()),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("polyport: {e}");
            e.exit_code()
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AttemptRecord {
    pub epsilon: f64,
    pub status: &'static str,
    pub objective: f64,
    pub iterations: usize,
}

/// JSON result of `solve`. Every field is written on every run.
#[derive(Debug, Clone, Serialize)]
pub struct ResultDocument {
    /// `tight`, `not_tight` or `failed`.
    pub status: &'static str,
    pub solver_status: &'static str,
    pub message: Option<String>,
    pub assets: Vec<String>,
    pub n_samples: Option<usize>,
    pub degree: usize,
    pub lambda: Vec<f64>,
    pub short_selling: bool,
    pub x_star: Option<Vec<f64>>,
    pub objective_fn: Option<f64>,
    pub epsilon_used: f64,
    pub rank_ratio: Option<f64>,
    pub tight: bool,
    pub relaxation_value: Option<f64>,
    pub duality_gap: Option<f64>,
    pub primal_residual: Option<f64>,
    pub dual_residual: Option<f64>,
    pub iterations: usize,
    pub attempts: Vec<AttemptRecord>,
    pub wall_time_s: f64,
}

struct Problem {
    assets: Vec<String>,
    n_samples: Option<usize>,
    f: polyport::polynomials::Polynomial,
}

fn asset_names(cfg: &RunConfig, found: Option<&[String]>, n: usize) -> Result<Vec<String>, CliError> {
    let names = match (&cfg.assets, found) {
        (Some(a), _) => a.clone(),
        (None, Some(f)) => f.to_vec(),
        (None, None) => (1..=n).map(|i| format!("S{i}")).collect(),
    };
    if names.len() != n {
        return Err(CliError::Config(format!(
            "assets: {} names given for {n} assets",
            names.len()
        )));
    }
    Ok(names)
}

fn sample_problem(cfg: &RunConfig, samples: ReturnSamples, found: Option<&[String]>) -> Result<Problem, CliError> {
    let pref = cfg.preference()?;
    let assets = asset_names(cfg, found, samples.assets())?;
    let f = build_sample_loss(&samples, &pref).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(Problem {
        assets,
        n_samples: Some(samples.len()),
        f,
    })
}

fn load_problem(cfg: &RunConfig) -> Result<Problem, CliError> {
    match &cfg.source {
        Source::CsvPrices(path) => {
            let series = data::read_prices(path).map_err(|e| data_error(path, e))?;
            let returns = data::prices_to_returns(&series).map_err(|e| data_error(path, e))?;
            sample_problem(cfg, returns, Some(series.assets()))
        }
        Source::CsvReturns(path) => {
            let series = data::read_returns(path).map_err(|e| data_error(path, e))?;
            sample_problem(cfg, series.samples, Some(&series.assets))
        }
        Source::Normal(s) => {
            let model = cfg.model()?;
            let samples = data::sample_normal(&model, s.n_samples, s.seed)
                .map_err(|e| CliError::Config(format!("source.normal: {e}")))?;
            sample_problem(cfg, samples, None)
        }
        Source::AnalyticNormal(_) => {
            let model: NormalModel = cfg.model()?;
            let f = build_analytic_normal_loss(&model, &cfg.preference()?)
                .map_err(|e| CliError::Config(format!("source.analytic_normal: {e}")))?;
            Ok(Problem {
                assets: asset_names(cfg, None, model.assets())?,
                n_samples: None,
                f,
            })
        }
    }
}

fn attempts(res: &PsaaResult) -> Vec<AttemptRecord> {
    res.history
        .iter()
        .map(|a| AttemptRecord {
            epsilon: a.epsilon,
            status: a.status.as_str(),
            objective: a.objective,
            iterations: a.iterations,
        })
        .collect()
}

/// Solves the configured problem and builds the result document.
pub fn solve_document(cfg: &RunConfig) -> Result<ResultDocument, CliError> {
    let psaa_cfg = cfg.psaa()?;
    let problem = load_problem(cfg)?;
    let start = Instant::now();
    let outcome = psaa::run(&problem.f, &psaa_cfg);
    let wall_time_s = start.elapsed().as_secs_f64();
    let base = ResultDocument {
        status: "failed",
        solver_status: "",
        message: None,
        assets: problem.assets,
        n_samples: problem.n_samples,
        degree: cfg.lambda.len(),
        lambda: cfg.lambda.clone(),
        short_selling: cfg.short_selling,
        x_star: None,
        objective_fn: None,
        epsilon_used: cfg.epsilon0,
        rank_ratio: None,
        tight: false,
        relaxation_value: None,
        duality_gap: None,
        primal_residual: None,
        dual_residual: None,
        iterations: 0,
        attempts: Vec::new(),
        wall_time_s,
    };
    Ok(match outcome {
        Ok(res) => ResultDocument {
            status: if res.tight { "tight" } else { "not_tight" },
            solver_status: res.solution.status.as_str(),
            x_star: Some(res.x_star.clone()),
            objective_fn: Some(res.objective_fn),
            epsilon_used: res.epsilon_used,
            rank_ratio: Some(res.rank_ratio),
            tight: res.tight,
            relaxation_value: Some(res.relaxation_value),
            duality_gap: Some(res.solution.gap),
            primal_residual: Some(res.solution.primal_residual),
            dual_residual: Some(res.solution.dual_residual),
            iterations: res.solution.iterations,
            attempts: attempts(&res),
            ..base
        },
        Err(Error::DoublingExhausted { attempts, status, epsilon }) => ResultDocument {
            solver_status: status.as_str(),
            message: Some(format!(
                "no optimal relaxation after {attempts} attempt(s), last eps = {epsilon}"
            )),
            epsilon_used: epsilon,
            ..base
        },
        Err(e) => ResultDocument {
            message: Some(e.to_string()),
            ..base
        },
    })
}

fn fmt_point(x: &[f64]) -> String {
    let parts: Vec<String> = x.iter().map(|v| format!("{v:.4}")).collect();
    format!("({})", parts.join(", "))
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| write_error(Some(p), e))?)),
        None => Box::new(io::stdout().lock()),
    })
}

pub fn cmd_solve(config: &Path) -> Result<i32, CliError> {
    let cfg = RunConfig::load(config)?;
    let doc = solve_document(&cfg)?;
    let out = cfg.output.as_deref();
    let mut w = open_output(out)?;
    serde_json::to_writer_pretty(&mut w, &doc).map_err(|e| write_error(out, e))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| write_error(out, e))?;

    match (&doc.x_star, doc.objective_fn) {
        (Some(x), Some(f)) => eprintln!(
            "x* = {}  f_N = {f:.4}  eps = {}  {} (rank ratio {:.1e})",
            fmt_point(x),
            doc.epsilon_used,
            if doc.tight { "tight" } else { "NOT tight" },
            doc.rank_ratio.unwrap_or(f64::NAN),
        ),
        _ => eprintln!("failed: {}", doc.message.as_deref().unwrap_or("unknown error")),
    }
    Ok(match doc.status {
        "tight" => EXIT_TIGHT,
        "not_tight" => EXIT_NOT_TIGHT,
        _ => EXIT_FAILURE,
    })
}

pub fn cmd_study(config: &Path) -> Result<i32, CliError> {
    let cfg = RunConfig::load(config)?;
    let study = cfg
        .study
        .as_ref()
        .ok_or_else(|| CliError::Config("study: missing `study` section".into()))?;
    let plan = cfg.plan(study)?;
    let model = cfg.model()?;
    let pref = cfg.preference()?;
    let psaa_cfg = cfg.psaa()?;
    let ref_cfg = psaa::PsaaConfig {
        epsilon0: study.reference_epsilon,
        ..psaa_cfg
    };
    let reference: Reference = data::analytic_reference(&model, &pref, &ref_cfg)
        .map_err(|e| CliError::Failed(format!("reference solve: {e}")))?;
    let report = data::convergence_study(&model, &pref, &reference, &plan, &psaa_cfg)
        .map_err(|e| CliError::Failed(e.to_string()))?;
    let out = cfg.output.as_deref();
    let mut w = open_output(out)?;
    report.write_csv(&mut w).map_err(|e| write_error(out, e))?;
    w.flush().map_err(|e| write_error(out, e))?;

    eprintln!("reference x* = {}  f = {:.4}", fmt_point(&reference.x), reference.value);
    for n in &plan.sample_sizes {
        let failed = report.cells.iter().filter(|c| c.n_samples == *n && c.error.is_some()).count();
        eprintln!(
            "N = {n:>7}  median distance {:.4}  median |gap| {:.4}  failed {failed}",
            report.median_distance(*n).unwrap_or(f64::NAN),
            report.median_abs_gap(*n).unwrap_or(f64::NAN),
        );
    }
    Ok(EXIT_TIGHT)
}

fn default_scatter_path(returns: &Path) -> PathBuf {
    let stem = returns.file_stem().map_or_else(|| "returns".into(), |s| s.to_string_lossy().into_owned());
    returns.with_file_name(format!("{stem}_scatter.csv"))
}

pub fn cmd_ingest(prices: &Path, returns: &Path, scatter: Option<&Path>) -> Result<i32, CliError> {
    let series = data::read_prices(prices).map_err(|e| data_error(prices, e))?;
    let r = data::prices_to_returns(&series).map_err(|e| data_error(prices, e))?;
    let file = File::create(returns).map_err(|e| write_error(Some(returns), e))?;
    data::write_returns(BufWriter::new(file), &series, &r).map_err(|e| write_error(Some(returns), e))?;
    let scatter = scatter.map_or_else(|| default_scatter_path(returns), Path::to_path_buf);
    let file = File::create(&scatter).map_err(|e| write_error(Some(&scatter), e))?;
    data::write_scatter(BufWriter::new(file), series.assets(), &r).map_err(|e| write_error(Some(&scatter), e))?;
    eprintln!(
        "{} return rows for {} assets -> {}, {}",
        r.len(),
        r.assets(),
        returns.display(),
        scatter.display()
    );
    Ok(EXIT_TIGHT)
}
