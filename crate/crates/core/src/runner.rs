//! Config-driven orchestration: runs, sweeps, step-size tuning and the
//! backward-product diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ConfigError, DataSource, ExperimentConfig, SweepAxis};
use crate::data::{load_csv_capped, load_libsvm_capped, split_and_stream, synthetic_dataset, Dataset, Provenance, SplitSpec, StreamPartition};
use crate::engine::{run, AlgorithmKind, RunConfig};
use crate::error::{Error, Result};
use crate::graph::{generate_topology, is_strongly_connected, mutual_subgraph, DirectedGraph, TopologySpec};
use crate::loss::{estimate_bounds_grouped, solve_comparator_weighted, theoretical_gamma, LossSpec, ModelVector, Sample};
use crate::metrics::{MetricsSeries, METRICS_HEADER};
use crate::mixing::{
    backward_product_diagnostics, build_doubly_stochastic, build_row_stochastic, fully_connected_matrix, theory_constants,
    MixingMatrix,
};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const TUNING_FILE: &str = "tuning.csv";
/// Largest network `diagnose` multiplies densely.
pub const DIAGNOSE_MAX_NODES: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum RunnerError {
    #[error("configuration rejected:\n{0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Runtime(#[from] Error),
}

impl RunnerError {
    /// 2 for rejected configs, 1 for failures during a run.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::Config(_) => 2,
            RunnerError::Runtime(_) => 1,
        }
    }
}

pub type RunnerResult<T> = std::result::Result<T, RunnerError>;

/// One (algorithm, seed) run as recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub algorithm: AlgorithmKind,
    pub seed: u64,
    pub gamma: f64,
    pub rounds: usize,
    pub nodes: usize,
    pub topology_seed: u64,
    pub matrix_kind: String,
    /// Edges added to the mutual subgraph to reconnect it (DOL_SYMM only).
    pub augmented_edges: usize,
    pub metrics_file: String,
    pub final_avg_loss: f64,
    pub final_cum_regret: f64,
    pub final_consensus_error: f64,
    pub comparator: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub output_dir: PathBuf,
    pub fingerprint: String,
    pub records: Vec<RunRecord>,
    pub series: Vec<MetricsSeries>,
}

impl RunOutput {
    pub fn series_for(&self, algorithm: AlgorithmKind) -> impl Iterator<Item = &MetricsSeries> {
        self.series.iter().filter(move |s| s.algorithm == algorithm)
    }

    /// Final average loss of `algorithm`, averaged over seeds.
    pub fn mean_final_avg_loss(&self, algorithm: AlgorithmKind) -> Option<f64> {
        let values: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.algorithm == algorithm)
            .map(|r| r.final_avg_loss)
            .collect();
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Writes `bytes` to a temporary file beside `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Arc<Dataset>> {
    let d = &cfg.dataset;
    let cap = Some(d.max_samples);
    let ds = match d.source {
        DataSource::Synthetic => synthetic_dataset(
            d.samples.expect("validated").min(d.max_samples),
            d.dim.expect("validated"),
            d.seed,
        ),
        DataSource::Libsvm => load_libsvm_capped(d.path.as_ref().expect("validated"), cap)?,
        DataSource::Csv => load_csv_capped(
            d.path.as_ref().expect("validated"),
            d.label_column.as_deref().expect("validated"),
            cap,
        )?,
    };
    info!("dataset {}: {} samples, d = {}", ds.name, ds.len(), ds.d);
    Ok(Arc::new(ds))
}

/// Mutual subgraph with Metropolis weights. When the mutual graph is not
/// strongly connected, both directions of the base cycle are added first.
/// Returns the matrix and the number of added edges.
pub fn dol_symm_matrix(g: &DirectedGraph) -> Result<(MixingMatrix, usize)> {
    let mut mutual = mutual_subgraph(g);
    let mut added = 0;
    if !is_strongly_connected(&mutual) {
        let n = g.node_count();
        added = mutual.add_edges((0..n).flat_map(|i| [(i, (i + 1) % n), ((i + 1) % n, i)]));
        warn!("mutual subgraph is disconnected; symmetrized the base cycle ({added} edges added)");
    }
    Ok((build_doubly_stochastic(&mutual)?, added))
}

/// Everything shared by the algorithms of one seed.
struct SeedContext {
    seed: u64,
    topology_seed: u64,
    graph: DirectedGraph,
    base_matrix: MixingMatrix,
    partition: StreamPartition,
    comparator: Option<ModelVector>,
}

fn prepare_seed(
    cfg: &ExperimentConfig,
    ds: &Arc<Dataset>,
    seed: u64,
    rounds: usize,
    with_comparator: bool,
) -> Result<SeedContext> {
    let n = cfg.topology.nodes;
    let topology_seed = cfg.topology.seed.unwrap_or(seed);
    let (graph, base_matrix) = match &cfg.topology.matrix_path {
        Some(path) => {
            let w = MixingMatrix::load(path)?;
            if w.dim() != n {
                return Err(Error::DimensionMismatch { expected: n, found: w.dim() });
            }
            (w.support_graph(), w)
        }
        None => {
            let g = generate_topology(&TopologySpec {
                n,
                max_extra_out_degree: cfg.topology.max_extra_out_degree,
                seed: topology_seed,
            });
            let w = build_row_stochastic(&g)?;
            (g, w)
        }
    };
    let split = SplitSpec {
        stochastic_fraction: cfg.split.stochastic_fraction,
        n,
        seed,
        cluster_iters: cfg.split.cluster_iters,
    };
    let partition = split_and_stream(Arc::clone(ds), &split, rounds)?;
    let comparator = if with_comparator {
        Some(stream_comparator(&partition, rounds, &loss_spec(cfg), cfg.loss.comparator_tol)?)
    } else {
        None
    };
    Ok(SeedContext { seed, topology_seed, graph, base_matrix, partition, comparator })
}

/// Comparator over every sample delivered in the first `rounds` rounds.
/// Repeated draws become sample weights; `mean_tol` bounds the gradient
/// norm of the per-sample mean objective.
pub fn stream_comparator(partition: &StreamPartition, rounds: usize, spec: &LossSpec, mean_tol: f64) -> Result<ModelVector> {
    let samples = &partition.dataset().samples;
    let mut counts = vec![0usize; samples.len()];
    for i in 0..partition.node_count() {
        for e in &partition.stream(i)[..rounds] {
            counts[e.index] += 1;
        }
    }
    let weighted: Vec<(&Sample, f64)> = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(k, &c)| (&samples[k], c as f64))
        .collect();
    let total = (partition.node_count() * rounds) as f64;
    solve_comparator_weighted(&weighted, spec, mean_tol * total, ModelVector::zeros(partition.dim()))
}

fn loss_spec(cfg: &ExperimentConfig) -> LossSpec {
    LossSpec { lambda: cfg.loss.lambda }
}

fn matrix_for(algorithm: AlgorithmKind, ctx: &SeedContext) -> Result<(MixingMatrix, usize)> {
    let n = ctx.graph.node_count();
    Ok(match algorithm {
        AlgorithmKind::Ops | AlgorithmKind::DolAsymm => (ctx.base_matrix.clone(), 0),
        AlgorithmKind::DolSymm => dol_symm_matrix(&ctx.graph)?,
        AlgorithmKind::Col => (fully_connected_matrix(n), 0),
        AlgorithmKind::LocalOgd => (MixingMatrix::identity(n), 0),
    })
}

/// Theory-balanced step size with `sigma` taken over each node's
/// stochastic draws (whole streams when no round is stochastic).
fn theoretical_gamma_for(cfg: &ExperimentConfig, ctx: &SeedContext, rounds: usize) -> Result<f64> {
    let p = &ctx.partition;
    let group = |only_stochastic: bool| -> Vec<Vec<&Sample>> {
        (0..p.node_count())
            .map(|i| {
                p.stream(i)[..rounds]
                    .iter()
                    .filter(|e| !only_stochastic || e.provenance == Provenance::Stochastic)
                    .map(|e| &p.dataset().samples[e.index])
                    .collect()
            })
            .collect()
    };
    let mut groups = group(true);
    if groups.iter().all(Vec::is_empty) {
        groups = group(false);
    }
    let radius = cfg.gamma.radius.expect("validated");
    let b = estimate_bounds_grouped(&groups, &loss_spec(cfg), radius)?;
    let c = theory_constants(p.node_count())?;
    Ok(theoretical_gamma(p.node_count(), rounds, &b, &c))
}

fn gamma_for(cfg: &ExperimentConfig, algorithm: AlgorithmKind, ctx: &SeedContext, rounds: usize) -> RunnerResult<f64> {
    if let Some(&g) = cfg.gamma.per_algorithm.get(&algorithm) {
        return Ok(g);
    }
    if cfg.gamma.theoretical {
        return Ok(theoretical_gamma_for(cfg, ctx, rounds)?);
    }
    cfg.gamma.value.ok_or_else(|| {
        RunnerError::Config(ConfigError::single(format!(
            "no step size for {algorithm}: set gamma.value or run `tune` on the grid"
        )))
    })
}

fn run_dir_file(dir: &Path, name: String) -> PathBuf {
    dir.join(name)
}

struct JobResult {
    record: RunRecord,
    series: MetricsSeries,
}

fn run_job(
    cfg: &ExperimentConfig,
    ctx: &SeedContext,
    algorithm: AlgorithmKind,
    rounds: usize,
    out_dir: Option<&Path>,
    fingerprint: &str,
) -> RunnerResult<JobResult> {
    let gamma = gamma_for(cfg, algorithm, ctx, rounds)?;
    let (matrix, augmented_edges) = matrix_for(algorithm, ctx)?;
    let matrix_kind = matrix.kind().as_str().to_owned();
    let run_cfg = RunConfig {
        algorithm,
        gamma,
        rounds,
        matrix,
        loss: loss_spec(cfg),
        seed: ctx.seed,
        snapshot_stride: (cfg.experiment.snapshot_stride > 0).then_some(cfg.experiment.snapshot_stride),
    };
    let traj = run(&run_cfg, &ctx.partition)?;
    let zero;
    let comparator = match &ctx.comparator {
        Some(c) => c,
        None => {
            zero = ModelVector::zeros(ctx.partition.dim());
            &zero
        }
    };
    let series = MetricsSeries::compute(&traj, comparator, &run_cfg.loss, &ctx.partition, ctx.seed, fingerprint)?;
    let metrics_file = format!("{}_seed{}.csv", algorithm, ctx.seed);
    if let Some(dir) = out_dir {
        write_atomic(&run_dir_file(dir, metrics_file.clone()), series.to_csv_string().as_bytes())?;
        if cfg.experiment.export_trajectories {
            let mut buf = Vec::new();
            traj.write_csv(&mut buf)?;
            write_atomic(&run_dir_file(dir, format!("{}_seed{}_trajectory.csv", algorithm, ctx.seed)), &buf)?;
            let mut buf = Vec::new();
            traj.write_snapshots(&mut buf)?;
            write_atomic(&run_dir_file(dir, format!("{}_seed{}.snap", algorithm, ctx.seed)), &buf)?;
        }
    }
    let last = series.final_row().copied();
    let record = RunRecord {
        algorithm,
        seed: ctx.seed,
        gamma,
        rounds,
        nodes: ctx.partition.node_count(),
        topology_seed: ctx.topology_seed,
        matrix_kind,
        augmented_edges,
        metrics_file,
        final_avg_loss: last.map_or(f64::NAN, |r| r.avg_loss),
        final_cum_regret: last.map_or(f64::NAN, |r| r.cum_regret),
        final_consensus_error: last.map_or(f64::NAN, |r| r.consensus_error),
        comparator: comparator.0.clone(),
    };
    info!("{algorithm} seed {}: final average loss {}", ctx.seed, record.final_avg_loss);
    Ok(JobResult { record, series })
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Runs every (algorithm, seed) pair for `rounds` rounds. With `out_dir`
/// set, writes metrics CSVs and the manifest there.
fn execute_inner(
    cfg: &ExperimentConfig,
    ds: &Arc<Dataset>,
    rounds: usize,
    out_dir: Option<&Path>,
    with_comparator: bool,
) -> RunnerResult<(Vec<RunRecord>, Vec<MetricsSeries>)> {
    let fingerprint = cfg.fingerprint();
    let per_seed: Vec<RunnerResult<Vec<JobResult>>> = cfg
        .experiment
        .seeds
        .par_iter()
        .map(|&seed| {
            let ctx = prepare_seed(cfg, ds, seed, rounds, with_comparator)?;
            if let Some(dir) = out_dir.filter(|_| cfg.experiment.export_streams) {
                ctx.partition.export_csv(dir.join("streams").join(format!("seed{seed}")))?;
            }
            cfg.experiment
                .algorithms
                .par_iter()
                .map(|&a| run_job(cfg, &ctx, a, rounds, out_dir, &fingerprint))
                .collect()
        })
        .collect();
    let mut records = Vec::new();
    let mut series = Vec::new();
    for jobs in per_seed {
        for job in jobs? {
            records.push(job.record);
            series.push(job.series);
        }
    }
    Ok((records, series))
}

#[derive(Serialize)]
struct ManifestMeta<'a> {
    fingerprint: &'a str,
    tool: &'static str,
    version: &'static str,
}

/// Resolved config, fingerprint and per-run records as TOML. The result is
/// itself a valid config reproducing the runs.
pub fn manifest_toml(cfg: &ExperimentConfig, fingerprint: &str, records: &[RunRecord]) -> Result<String> {
    let mut table = toml::Table::try_from(cfg).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let meta = ManifestMeta { fingerprint, tool: env!("CARGO_PKG_NAME"), version: env!("CARGO_PKG_VERSION") };
    table.insert("manifest".into(), toml::Value::try_from(meta).map_err(|e| Error::InvalidInput(e.to_string()))?);
    table.insert("runs".into(), toml::Value::try_from(records).map_err(|e| Error::InvalidInput(e.to_string()))?);
    toml::to_string(&table).map_err(|e| Error::InvalidInput(e.to_string()))
}

/// Runs a validated config and writes metrics plus manifest to its output
/// directory.
pub fn execute(cfg: &ExperimentConfig) -> RunnerResult<RunOutput> {
    execute_in(cfg, &cfg.resolved_output_dir())
}

pub fn execute_in(cfg: &ExperimentConfig, output_dir: &Path) -> RunnerResult<RunOutput> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    std::fs::create_dir_all(output_dir).map_err(Error::from)?;
    let rounds = cfg.experiment.rounds;
    let (records, series) = with_pool(cfg.experiment.threads, || {
        execute_inner(cfg, &ds, rounds, Some(output_dir), true)
    })??;
    let fingerprint = cfg.fingerprint();
    let manifest = manifest_toml(cfg, &fingerprint, &records)?;
    write_atomic(&output_dir.join(MANIFEST_FILE), manifest.as_bytes())?;
    Ok(RunOutput { config: cfg.clone(), output_dir: output_dir.to_path_buf(), fingerprint, records, series })
}

fn format_axis_value(axis: SweepAxis, v: f64) -> String {
    match axis {
        SweepAxis::NetworkSize => format!("{}", v as usize),
        _ => format!("{v}"),
    }
}

/// Config for one point of a sweep.
pub fn sweep_point(cfg: &ExperimentConfig, axis: SweepAxis, value: f64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.sweep = Default::default();
    let label = format_axis_value(axis, value);
    c.experiment.name = format!("{}-{}-{}", cfg.experiment.name, axis.as_str(), label);
    c.experiment.output_dir = cfg.experiment.output_dir.join(format!("{}_{}", axis.as_str(), label));
    match axis {
        SweepAxis::NetworkSize => c.topology.nodes = value as usize,
        SweepAxis::Density => {
            c.topology.max_extra_out_degree = (value * c.topology.nodes as f64).round() as usize;
        }
        SweepAxis::StochasticFraction => c.split.stochastic_fraction = value,
    }
    c
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub axis: SweepAxis,
    pub points: Vec<(f64, RunOutput)>,
    pub combined_csv: PathBuf,
}

/// Runs the config once per axis value, with shared seeds, and writes a
/// combined `sweep_<axis>.csv` keyed by axis value.
pub fn execute_sweep(cfg: &ExperimentConfig, axis: SweepAxis) -> RunnerResult<SweepOutput> {
    cfg.validate()?;
    let values = cfg.sweep.values(axis);
    if values.is_empty() {
        return Err(ConfigError::single(format!("sweep.{} lists no values", axis.as_str())).into());
    }
    let base = cfg.resolved_output_dir();
    let mut points = Vec::with_capacity(values.len());
    for &v in &values {
        let point = sweep_point(cfg, axis, v);
        let dir = base.join(format!("{}_{}", axis.as_str(), format_axis_value(axis, v)));
        info!("sweep {} = {}", axis.as_str(), format_axis_value(axis, v));
        points.push((v, execute_in(&point, &dir)?));
    }
    let mut buf = Vec::new();
    writeln!(buf, "axis,value,{METRICS_HEADER}").map_err(Error::from)?;
    for (v, out) in &points {
        for s in &out.series {
            let mut rows = Vec::new();
            s.write_rows(&mut rows)?;
            for line in String::from_utf8(rows).expect("ascii").lines() {
                writeln!(buf, "{},{},{}", axis.as_str(), format_axis_value(axis, *v), line).map_err(Error::from)?;
            }
        }
    }
    let combined_csv = base.join(format!("sweep_{}.csv", axis.as_str()));
    write_atomic(&combined_csv, &buf)?;
    Ok(SweepOutput { axis, points, combined_csv })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneRow {
    pub algorithm: AlgorithmKind,
    pub gamma: f64,
    /// Final average loss at the tuning horizon, one per seed.
    pub per_seed: Vec<f64>,
    pub mean_avg_loss: f64,
    pub selected: bool,
}

#[derive(Debug, Clone)]
pub struct TuneOutput {
    pub horizon: usize,
    pub rows: Vec<TuneRow>,
    pub winners: BTreeMap<AlgorithmKind, f64>,
    pub full_run: Option<RunOutput>,
}

/// Short-horizon (T/10) grid search per algorithm. The winner minimizes the
/// seed-mean average loss; ties go to the smaller step size.
pub fn execute_tune(cfg: &ExperimentConfig) -> RunnerResult<TuneOutput> {
    cfg.validate()?;
    let mut grid = cfg.gamma.tuning_grid();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let horizon = (cfg.experiment.rounds / 10).max(1);
    let ds = load_dataset(cfg)?;

    let mut rows = Vec::new();
    for &gamma in &grid {
        let mut probe = cfg.clone();
        probe.gamma.per_algorithm = cfg.experiment.algorithms.iter().map(|&a| (a, gamma)).collect();
        probe.gamma.theoretical = false;
        let (records, _) = with_pool(cfg.experiment.threads, || execute_inner(&probe, &ds, horizon, None, false))??;
        for &a in &cfg.experiment.algorithms {
            let per_seed: Vec<f64> = records.iter().filter(|r| r.algorithm == a).map(|r| r.final_avg_loss).collect();
            let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
            rows.push(TuneRow { algorithm: a, gamma, per_seed, mean_avg_loss: mean, selected: false });
        }
    }
    let mut winners = BTreeMap::new();
    for &a in &cfg.experiment.algorithms {
        // Grid is ascending, so strict improvement keeps the smaller gamma on ties.
        let best = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.algorithm == a)
            .fold(None::<(usize, f64)>, |best, (i, r)| match best {
                Some((_, v)) if r.mean_avg_loss.partial_cmp(&v) != Some(std::cmp::Ordering::Less) => best,
                _ => Some((i, r.mean_avg_loss)),
            })
            .expect("grid is non-empty");
        rows[best.0].selected = true;
        winners.insert(a, rows[best.0].gamma);
    }

    let out_dir = cfg.resolved_output_dir();
    let mut buf = String::from("algo,gamma,horizon,mean_avg_loss,selected\n");
    for r in &rows {
        writeln!(buf, "{},{},{},{},{}", r.algorithm, r.gamma, horizon, r.mean_avg_loss, r.selected).expect("string write");
    }
    write_atomic(&out_dir.join(TUNING_FILE), buf.as_bytes())?;

    let full_run = if cfg.gamma.launch {
        let mut full = cfg.clone();
        full.gamma.per_algorithm = winners.clone();
        full.gamma.theoretical = false;
        Some(execute_in(&full, &out_dir)?)
    } else {
        None
    };
    Ok(TuneOutput { horizon, rows, winners, full_run })
}

/// What `diagnose` analyses: a matrix/adjacency file or an inline
/// `n=..,bound=..,seed=..` topology.
pub fn diagnose_matrix(spec: &str) -> RunnerResult<MixingMatrix> {
    let path = Path::new(spec);
    if path.exists() {
        let text = std::fs::read_to_string(path).map_err(Error::from)?;
        return match MixingMatrix::parse_text(&text) {
            Ok(w) => Ok(w),
            Err(matrix_err) => match DirectedGraph::parse_adjacency_text(&text) {
                Ok(g) => Ok(build_row_stochastic(&g)?),
                Err(_) => Err(ConfigError::single(format!(
                    "{spec}: neither a mixing matrix nor an adjacency list ({matrix_err})"
                ))
                .into()),
            },
        };
    }
    let mut n = None;
    let mut bound = 0;
    let mut seed = 0;
    let mut problems = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let Some((key, value)) = part.split_once('=') else {
            problems.push(format!("`{part}` is not key=value"));
            continue;
        };
        let parsed = value.trim().parse::<u64>();
        match (key.trim(), parsed) {
            ("n", Ok(v)) => n = Some(v as usize),
            ("bound", Ok(v)) => bound = v as usize,
            ("seed", Ok(v)) => seed = v,
            (k, Ok(_)) => problems.push(format!("unknown key `{k}`")),
            (k, Err(_)) => problems.push(format!("`{k}` needs a non-negative integer")),
        }
    }
    match n {
        Some(n) if n >= 1 && problems.is_empty() => {
            let g = generate_topology(&TopologySpec { n, max_extra_out_degree: bound, seed });
            Ok(build_row_stochastic(&g)?)
        }
        _ => {
            if n.is_none_or(|n| n == 0) {
                problems.push(format!("`{spec}` is not a file and has no n >= 1"));
            }
            Err(ConfigError { problems }.into())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnoseReport {
    pub text: String,
    /// 0 all bounds hold, 1 a lemma bound failed, 2 a precondition failed.
    pub exit_code: i32,
}

/// Tabulates backward-product concentration against the lemma bounds.
pub fn diagnose(w: &MixingMatrix, horizon: usize) -> RunnerResult<DiagnoseReport> {
    let n = w.dim();
    if n > DIAGNOSE_MAX_NODES {
        return Err(ConfigError::single(format!("diagnose supports n <= {DIAGNOSE_MAX_NODES}, got {n}")).into());
    }
    if horizon == 0 {
        return Err(ConfigError::single("horizon must be at least 1").into());
    }
    let mut text = String::new();
    let mut preconditions = Vec::new();
    if !w.has_positive_diagonal() {
        preconditions.push("some diagonal entry is zero (every node must keep a self-loop)");
    }
    if !is_strongly_connected(&w.support_graph()) {
        preconditions.push("the communication graph is not strongly connected");
    }
    let constants = theory_constants(n).ok();
    let diag = backward_product_diagnostics(w, horizon);
    let delta_min = constants.map(|c| c.delta_min);
    let _ = writeln!(
        text,
        "n = {n}, horizon = {horizon}, delta_min = {}",
        delta_min.map_or("vacuous".to_owned(), |d| format!("{d:e}"))
    );
    let _ = writeln!(text, "lag\tmax_deviation\tbound\tmin_column_sum");
    let mut violations = Vec::new();
    for lag in 1..=horizon {
        let dev = diag.max_deviation_per_lag[lag - 1];
        let col = diag.min_column_sum_per_lag[lag - 1];
        let bound = constants.map(|c| c.concentration_bound(lag)).filter(|&b| b < 1.0);
        let bound_text = match bound {
            Some(b) => {
                if dev > b * (1.0 + 1e-12) {
                    violations.push(format!("lag {lag}: deviation {dev:e} exceeds bound {b:e}"));
                }
                format!("{b:e}")
            }
            None => "vacuous".to_owned(),
        };
        if let Some(d) = delta_min {
            if col < d * (1.0 - 1e-12) {
                violations.push(format!("lag {lag}: min column sum {col:e} below delta_min {d:e}"));
            }
        }
        let _ = writeln!(text, "{lag}\t{dev:e}\t{bound_text}\t{col:e}");
    }
    let exit_code = if !preconditions.is_empty() {
        for p in &preconditions {
            let _ = writeln!(text, "precondition violated: {p}");
        }
        let _ = writeln!(text, "lemma bounds do not apply; deviations above are not lemma failures");
        2
    } else if !violations.is_empty() {
        for v in &violations {
            let _ = writeln!(text, "VIOLATION {v}");
        }
        1
    } else {
        let _ = writeln!(text, "all bounds hold");
        0
    };
    Ok(DiagnoseReport { text, exit_code })
}

fn report(err: &RunnerError) -> i32 {
    eprintln!("error: {err}");
    err.exit_code()
}

fn load_config(path: &Path, output_dir: Option<&Path>) -> RunnerResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(dir) = output_dir {
        cfg.experiment.output_dir = dir.to_path_buf();
    }
    Ok(cfg)
}

pub fn cmd_run(path: &Path, output_dir: Option<&Path>) -> i32 {
    let result = load_config(path, output_dir).and_then(|mut cfg| {
        if cfg.gamma.needs_tuning(&cfg.experiment.algorithms) {
            // No fixed step size: tune on the grid, then run with the winners.
            cfg.gamma.launch = true;
            return Ok(execute_tune(&cfg)?.full_run.expect("launch is set"));
        }
        execute(&cfg)
    });
    match result {
        Ok(out) => {
            println!("{} runs written to {}", out.records.len(), out.output_dir.display());
            0
        }
        Err(e) => report(&e),
    }
}

pub fn cmd_sweep(path: &Path, axis: &str, output_dir: Option<&Path>) -> i32 {
    let result = axis
        .parse::<SweepAxis>()
        .map_err(RunnerError::from)
        .and_then(|axis| execute_sweep(&load_config(path, output_dir)?, axis));
    match result {
        Ok(out) => {
            println!("{} sweep points written to {}", out.points.len(), out.combined_csv.display());
            0
        }
        Err(e) => report(&e),
    }
}

pub fn cmd_tune(path: &Path, output_dir: Option<&Path>) -> i32 {
    match load_config(path, output_dir).and_then(|cfg| execute_tune(&cfg)) {
        Ok(out) => {
            for (a, g) in &out.winners {
                println!("{a}\t{g}");
            }
            0
        }
        Err(e) => report(&e),
    }
}

pub fn cmd_diagnose(spec: &str, horizon: usize) -> i32 {
    match diagnose_matrix(spec).and_then(|w| diagnose(&w, horizon)) {
        Ok(r) => {
            print!("{}", r.text);
            r.exit_code
        }
        Err(e) => report(&e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dol_symm_augments_disconnected_mutual_graph() {
        // One-way ring: the mutual subgraph keeps only self-loops.
        let g = DirectedGraph::from_edges(4, (0..4).flat_map(|i| [(i, i), (i, (i + 1) % 4)])).unwrap();
        let (w, added) = dol_symm_matrix(&g).unwrap();
        assert_eq!(added, 8);
        assert!(is_strongly_connected(&w.support_graph()));
        assert!(w.is_symmetric(0.0));
    }

    #[test]
    fn dol_symm_keeps_connected_mutual_graph() {
        let g = DirectedGraph::from_edges(3, (0..3).flat_map(|i| [(i, i), (i, (i + 1) % 3), ((i + 1) % 3, i)])).unwrap();
        let (_, added) = dol_symm_matrix(&g).unwrap();
        assert_eq!(added, 0);
    }

    #[test]
    fn diagnose_trivial_and_cycle() {
        let r = diagnose(&diagnose_matrix("n=1").unwrap(), 5).unwrap();
        assert_eq!(r.exit_code, 0, "{}", r.text);
        let r = diagnose(&diagnose_matrix("n=3,bound=0").unwrap(), 50).unwrap();
        assert_eq!(r.exit_code, 0, "{}", r.text);
        assert_eq!(r.text.lines().count(), 2 + 50 + 1);
    }

    #[test]
    fn diagnose_flags_missing_self_loops_as_precondition() {
        let w = MixingMatrix::from_dense(2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let r = diagnose(&w, 10).unwrap();
        assert_eq!(r.exit_code, 2);
        assert!(r.text.contains("precondition violated"));
    }

    #[test]
    fn diagnose_rejects_large_and_malformed_specs() {
        let w = MixingMatrix::identity(65);
        assert_eq!(diagnose(&w, 1).unwrap_err().exit_code(), 2);
        assert_eq!(diagnose_matrix("n=x").unwrap_err().exit_code(), 2);
        assert_eq!(diagnose_matrix("bound=3").unwrap_err().exit_code(), 2);
    }
}
