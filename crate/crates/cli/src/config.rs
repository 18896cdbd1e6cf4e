//! Experiment configuration: which pair to build and which tasks to run on it.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dbpairs::pairs::Family;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    ValidatePair,
    ModelParams,
    VBeta,
    Dichotomy,
    GreensChain,
    ResidualCheck,
    TransformTrace,
}

impl Task {
    pub const ALL: [Task; 7] = [
        Task::ValidatePair,
        Task::ModelParams,
        Task::VBeta,
        Task::Dichotomy,
        Task::GreensChain,
        Task::ResidualCheck,
        Task::TransformTrace,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::ValidatePair => "validate-pair",
            Task::ModelParams => "model-params",
            Task::VBeta => "v-beta",
            Task::Dichotomy => "dichotomy",
            Task::GreensChain => "greens-chain",
            Task::ResidualCheck => "residual-check",
            Task::TransformTrace => "transform-trace",
        }
    }

    pub fn summary(self) -> &'static str {
        match self {
            Task::ValidatePair => "Checks DV = I, D phi0 = 0, orthonormality of the eigenbasis and quasi-nilpotence proxies.",
            Task::ModelParams => "Estimates alpha and tau(E) from the growth of |phi(±iy)|.",
            Task::VBeta => "Builds V_beta = V + <., x_beta> phi0 and checks its symbol and right-inverse property.",
            Task::Dichotomy => "Probes invariant subspaces of V_beta at the extremes and at the centre of the beta range.",
            Task::GreensChain => "Checks the M_c chain of the Green's operator of a singular Hamiltonian.",
            Task::ResidualCheck => "Graph norms and finite-order membership D^j x in M for a constructed x.",
            Task::TransformTrace => "Samples W f on a real lambda grid and checks W V* = L there.",
        }
    }

    pub fn options(self) -> &'static [&'static str] {
        match self {
            Task::ValidatePair => &[],
            Task::ModelParams => &["y_max"],
            Task::VBeta => &["beta", "y_max", "lambda_min", "lambda_max", "trace_points"],
            Task::Dichotomy => &["beta", "y_max"],
            Task::GreensChain => &[],
            Task::ResidualCheck => &["residual_order"],
            Task::TransformTrace => &["lambda_min", "lambda_max", "trace_points"],
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Pair parameters; unused fields are ignored by families that do not need them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairConfig {
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub n: Option<usize>,
    /// Classical: keep eigenpairs with |k| ≤ k_max.
    pub k_max: Option<usize>,
    /// Potential samples `[{"t": .., "q": ..}, ..]` (Schrödinger, removable).
    pub q_file: Option<PathBuf>,
    /// Boundary angle at a (Schrödinger).
    pub alpha: Option<f64>,
    /// Hamiltonian records (canonical); `H = I/2` on (0, ell) when absent.
    pub h_file: Option<PathBuf>,
    pub ell: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskOptions {
    #[serde(default)]
    pub y_max: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default = "default_lambda_min")]
    pub lambda_min: f64,
    #[serde(default = "default_lambda_max")]
    pub lambda_max: f64,
    #[serde(default = "default_trace_points")]
    pub trace_points: usize,
    #[serde(default = "default_residual_order")]
    pub residual_order: usize,
}

fn default_lambda_min() -> f64 {
    -20.0
}

fn default_lambda_max() -> f64 {
    20.0
}

fn default_trace_points() -> usize {
    81
}

fn default_residual_order() -> usize {
    2
}

impl Default for TaskOptions {
    fn default() -> Self {
        Self {
            y_max: None,
            beta: None,
            lambda_min: default_lambda_min(),
            lambda_max: default_lambda_max(),
            trace_points: default_trace_points(),
            residual_order: default_residual_order(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub family: Family,
    #[serde(default)]
    pub pair: PairConfig,
    pub tasks: Vec<Task>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub options: TaskOptions,
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).context("malformed config")?;
        cfg.validate_shape()?;
        Ok(cfg)
    }

    /// Parses the file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_json_str(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        resolve(&mut cfg.pair.q_file);
        resolve(&mut cfg.pair.h_file);
        resolve(&mut cfg.output_dir);
        for file in [&cfg.pair.q_file, &cfg.pair.h_file].into_iter().flatten() {
            if !file.is_file() {
                bail!("referenced file {} does not exist", file.display());
            }
        }
        Ok(cfg)
    }

    fn validate_shape(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!("unsupported schema_version {} (expected {SCHEMA_VERSION})", self.schema_version);
        }
        if self.tasks.is_empty() {
            bail!("tasks must be non-empty");
        }
        if let Some(n) = self.pair.n {
            if n < 8 {
                bail!("pair.n must be at least 8, got {n}");
            }
        }
        let o = &self.options;
        if !(o.lambda_min < o.lambda_max) || o.trace_points < 2 {
            bail!("trace grid needs lambda_min < lambda_max and at least 2 points");
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}
