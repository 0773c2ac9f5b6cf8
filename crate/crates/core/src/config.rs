//! Experiment configuration: TOML parsing, defaults and validation.
//!
//! Validation collects every problem before reporting, so one rejected
//! config yields one complete error list.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::AlgorithmKind;

pub const OUTPUT_ROOT_ENV: &str = "OPSIM_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub problems: Vec<String>,
}

impl ConfigError {
    pub fn single(problem: impl Into<String>) -> Self {
        Self { problems: vec![problem.into()] }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, p) in self.problems.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "  - {p}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Libsvm,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    NetworkSize,
    Density,
    StochasticFraction,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::NetworkSize => "network_size",
            SweepAxis::Density => "density",
            SweepAxis::StochasticFraction => "stochastic_fraction",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s.trim().replace('-', "_").as_str() {
            "network_size" | "size" => Ok(SweepAxis::NetworkSize),
            "density" => Ok(SweepAxis::Density),
            "stochastic_fraction" | "stochastic" => Ok(SweepAxis::StochasticFraction),
            other => Err(ConfigError::single(format!(
                "unknown sweep axis `{other}` (expected network_size, density or stochastic_fraction)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub output_dir: PathBuf,
    pub rounds: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub algorithms: Vec<AlgorithmKind>,
    /// Rounds between model snapshots; 0 picks the size-based default.
    #[serde(default)]
    pub snapshot_stride: usize,
    /// Also write per-node stream files and trajectory CSVs.
    #[serde(default)]
    pub export_streams: bool,
    #[serde(default)]
    pub export_trajectories: bool,
    #[serde(default = "default_threads")]
    pub threads: usize,
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

fn default_threads() -> usize {
    0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub source: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_column: Option<String>,
    #[serde(default = "default_max_samples")]
    pub max_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_samples() -> usize {
    100_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    #[serde(default = "default_fraction")]
    pub stochastic_fraction: f64,
    #[serde(default = "default_cluster_iters")]
    pub cluster_iters: usize,
}

fn default_fraction() -> f64 {
    1.0
}

fn default_cluster_iters() -> usize {
    50
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { stochastic_fraction: default_fraction(), cluster_iters: default_cluster_iters() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySection {
    pub nodes: usize,
    #[serde(default)]
    pub max_extra_out_degree: usize,
    /// Fixed graph seed; by default each run seed draws its own graph.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Row-stochastic matrix file used instead of a generated graph.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Stop tolerance of the comparator solver on the mean-gradient norm.
    #[serde(default = "default_comparator_tol")]
    pub comparator_tol: f64,
}

fn default_lambda() -> f64 {
    1e-4
}

fn default_comparator_tol() -> f64 {
    1e-9
}

impl Default for LossSection {
    fn default() -> Self {
        Self { lambda: default_lambda(), comparator_tol: default_comparator_tol() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    /// Per-algorithm overrides of `value`, keyed by algorithm name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_algorithm: BTreeMap<AlgorithmKind, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub grid: Vec<f64>,
    /// Use the theory-balanced step size computed from data bounds.
    #[serde(default)]
    pub theoretical: bool,
    /// Assumed domain size `R` for the theoretical step size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    /// After tuning, launch the full run with the winners.
    #[serde(default = "default_true")]
    pub launch: bool,
}

fn default_true() -> bool {
    true
}

impl Default for GammaSection {
    fn default() -> Self {
        Self {
            value: None,
            per_algorithm: BTreeMap::new(),
            grid: Vec::new(),
            theoretical: false,
            radius: None,
            launch: true,
        }
    }
}

/// Tuning grid used when `gamma.grid` is empty: `{1, 2, 5} x 10^k`, `k = -3..=0`.
pub const DEFAULT_GAMMA_GRID: [f64; 12] = [0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0];

impl GammaSection {
    pub fn tuning_grid(&self) -> Vec<f64> {
        if self.grid.is_empty() {
            DEFAULT_GAMMA_GRID.to_vec()
        } else {
            self.grid.clone()
        }
    }

    /// True when some algorithm has no fixed or theoretical step size.
    pub fn needs_tuning(&self, algorithms: &[AlgorithmKind]) -> bool {
        self.value.is_none() && !self.theoretical && algorithms.iter().any(|a| !self.per_algorithm.contains_key(a))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub network_size: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub density: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stochastic_fraction: Vec<f64>,
}

impl SweepSection {
    pub fn values(&self, axis: SweepAxis) -> Vec<f64> {
        match axis {
            SweepAxis::NetworkSize => self.network_size.iter().map(|&v| v as f64).collect(),
            SweepAxis::Density => self.density.clone(),
            SweepAxis::StochasticFraction => self.stochastic_fraction.clone(),
        }
    }
}

/// A fully resolved experiment. Serializing it yields a config that
/// reproduces the same runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub split: SplitSection,
    pub topology: TopologySection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub gamma: GammaSection,
    #[serde(default)]
    pub sweep: SweepSection,
    /// Present in manifests; ignored when a manifest is re-run.
    #[serde(default, skip_serializing)]
    pub manifest: Option<toml::Value>,
    #[serde(default, skip_serializing)]
    pub runs: Option<toml::Value>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ConfigError::single(e.to_string().trim_end().to_owned()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config; relative data and matrix paths are
    /// resolved against the config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::single(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.dataset.path.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.topology.matrix_path.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                problems.push(msg);
            }
        };
        let e = &self.experiment;
        check(!e.name.trim().is_empty(), "experiment.name must not be empty".into());
        check(e.rounds >= 1, "experiment.rounds must be at least 1".into());
        check(!e.seeds.is_empty(), "experiment.seeds must list at least one seed".into());
        check(!e.algorithms.is_empty(), "experiment.algorithms must list at least one algorithm".into());
        let mut algos = e.algorithms.clone();
        algos.sort();
        algos.dedup();
        check(algos.len() == e.algorithms.len(), "experiment.algorithms contains duplicates".into());
        let mut seeds = e.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        check(seeds.len() == e.seeds.len(), "experiment.seeds contains duplicates".into());

        let d = &self.dataset;
        match d.source {
            DataSource::Synthetic => {
                check(d.samples.is_some_and(|s| s >= 2), "dataset.samples (>= 2) is required for synthetic data".into());
                check(d.dim.is_some_and(|s| s >= 1), "dataset.dim (>= 1) is required for synthetic data".into());
            }
            DataSource::Libsvm => check(d.path.is_some(), "dataset.path is required for libsvm data".into()),
            DataSource::Csv => {
                check(d.path.is_some(), "dataset.path is required for csv data".into());
                check(d.label_column.is_some(), "dataset.label_column is required for csv data".into());
            }
        }
        check(d.max_samples >= 1, "dataset.max_samples must be at least 1".into());

        let f = self.split.stochastic_fraction;
        check((0.0..=1.0).contains(&f), format!("split.stochastic_fraction {f} outside [0, 1]"));
        check(self.topology.nodes >= 1, "topology.nodes must be at least 1".into());
        let lambda = self.loss.lambda;
        check(lambda > 0.0 && lambda.is_finite(), format!("loss.lambda {lambda} must be positive"));
        let tol = self.loss.comparator_tol;
        check(tol > 0.0 && tol.is_finite(), format!("loss.comparator_tol {tol} must be positive"));

        let g = &self.gamma;
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if let Some(v) = g.value {
            check(positive(v), format!("gamma.value {v} must be positive"));
        }
        for (a, &v) in &g.per_algorithm {
            check(positive(v), format!("gamma.per_algorithm.{a} = {v} must be positive"));
        }
        for &v in &g.grid {
            check(positive(v), format!("gamma.grid value {v} must be positive"));
        }
        if g.theoretical {
            check(g.radius.is_some_and(positive), "gamma.radius (> 0) is required with theoretical = true".into());
        }
        for &v in &self.sweep.network_size {
            check(v >= 1, "sweep.network_size values must be at least 1".into());
        }
        for &v in &self.sweep.density {
            check(v > 0.0 && v <= 1.0, format!("sweep.density value {v} outside (0, 1]"));
        }
        for &v in &self.sweep.stochastic_fraction {
            check((0.0..=1.0).contains(&v), format!("sweep.stochastic_fraction value {v} outside [0, 1]"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { problems })
        }
    }

    /// Step size of `algorithm` when set directly (not tuned, not theoretical).
    pub fn fixed_gamma(&self, algorithm: AlgorithmKind) -> Option<f64> {
        self.gamma.per_algorithm.get(&algorithm).copied().or(self.gamma.value)
    }

    /// Canonical TOML of the resolved config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// SHA-256 of the canonical TOML, ignoring where outputs go.
    pub fn fingerprint(&self) -> String {
        let mut canonical = self.clone();
        canonical.experiment.output_dir = PathBuf::new();
        hex::encode(Sha256::digest(canonical.to_toml().as_bytes()))
    }

    /// `output_dir`, placed under the environment's output root when it is
    /// relative and the root is set.
    pub fn resolved_output_dir(&self) -> PathBuf {
        let dir = &self.experiment.output_dir;
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
            _ => dir.clone(),
        }
    }
}
