//! JSON run configuration.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use polyport::conic::SolverSettings;
use polyport::data::StudyPlan;
use polyport::portfolio::{NormalModel, RiskPreference};
use polyport::psaa::PsaaConfig;

use crate::CliError;

fn default_epsilon0() -> f64 {
    0.01
}

fn default_rank_tol() -> f64 {
    1e-6
}

fn default_max_doublings() -> usize {
    20
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Asset names; taken from the file header for CSV sources when absent.
    #[serde(default)]
    pub assets: Option<Vec<String>>,
    /// Must equal `lambda.len()` when given.
    #[serde(default)]
    pub degree: Option<usize>,
    pub lambda: Vec<f64>,
    #[serde(default = "default_epsilon0")]
    pub epsilon0: f64,
    #[serde(default)]
    pub short_selling: bool,
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
    #[serde(default = "default_max_doublings")]
    pub max_doublings: usize,
    #[serde(default)]
    pub solver: SolverConfig,
    pub source: Source,
    /// Result file; stdout when absent.
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub study: Option<StudyConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub gap_tol: f64,
    pub feas_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let s = SolverSettings::default();
        SolverConfig {
            gap_tol: s.gap_tol,
            feas_tol: s.feas_tol,
            max_iter: s.max_iter,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Source {
    CsvPrices(PathBuf),
    CsvReturns(PathBuf),
    Normal(NormalSource),
    /// Exact expected loss of a normal model, no sampling.
    AnalyticNormal(ModelSpec),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalSource {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub n_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub sample_sizes: Vec<usize>,
    pub replications: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// Penalty of the analytic reference solve.
    #[serde(default)]
    pub reference_epsilon: f64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Unreadable(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Makes relative paths relative to the directory holding the config.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.source {
            Source::CsvPrices(p) | Source::CsvReturns(p) => fix(p),
            Source::Normal(_) | Source::AnalyticNormal(_) => {}
        }
        if let Some(p) = &mut self.output {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.preference()?;
        if let Some(d) = self.degree {
            if d != self.lambda.len() {
                return Err(CliError::Config(format!(
                    "degree: {d} does not match the {} entries of lambda",
                    self.lambda.len()
                )));
            }
        }
        self.psaa()?;
        match &self.source {
            Source::Normal(s) => {
                NormalModel::from_rows(s.mean.clone(), &s.covariance)
                    .map_err(|e| CliError::Config(format!("source.normal: {e}")))?;
                if s.n_samples == 0 {
                    return Err(CliError::Config("source.normal.n_samples: must be at least 1".into()));
                }
            }
            Source::AnalyticNormal(m) => {
                NormalModel::from_rows(m.mean.clone(), &m.covariance)
                    .map_err(|e| CliError::Config(format!("source.analytic_normal: {e}")))?;
            }
            Source::CsvPrices(_) | Source::CsvReturns(_) => {}
        }
        if let Some(s) = &self.study {
            self.plan(s)?;
        }
        Ok(())
    }

    pub fn preference(&self) -> Result<RiskPreference, CliError> {
        RiskPreference::new(self.lambda.clone()).map_err(|e| CliError::Config(format!("lambda: {e}")))
    }

    pub fn psaa(&self) -> Result<PsaaConfig, CliError> {
        let cfg = PsaaConfig {
            epsilon0: self.epsilon0,
            max_doublings: self.max_doublings,
            rank_tol: self.rank_tol,
            short_selling: self.short_selling,
            solver: SolverSettings {
                gap_tol: self.solver.gap_tol,
                feas_tol: self.solver.feas_tol,
                max_iter: self.solver.max_iter,
            },
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// The normal model behind a `normal` or `analytic_normal` source.
    pub fn model(&self) -> Result<NormalModel, CliError> {
        let (mean, cov) = match &self.source {
            Source::Normal(s) => (&s.mean, &s.covariance),
            Source::AnalyticNormal(m) => (&m.mean, &m.covariance),
            _ => {
                return Err(CliError::Config(
                    "source: a study needs a `normal` or `analytic_normal` model".into(),
                ))
            }
        };
        NormalModel::from_rows(mean.clone(), cov).map_err(|e| CliError::Config(format!("source: {e}")))
    }

    pub fn plan(&self, s: &StudyConfig) -> Result<StudyPlan, CliError> {
        let plan = StudyPlan {
            sample_sizes: s.sample_sizes.clone(),
            replications: s.replications,
            base_seed: s.base_seed,
        };
        plan.validate().map_err(|e| CliError::Config(format!("study: {e}")))?;
        if !(s.reference_epsilon >= 0.0 && s.reference_epsilon.is_finite()) {
            return Err(CliError::Config("study.reference_epsilon: must be >= 0".into()));
        }
        Ok(plan)
    }
}
