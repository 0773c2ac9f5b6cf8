//! Synchronous round-based execution of push-sum online learning and the
//! decentralized / centralized / local baselines.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::StreamPartition;
use crate::error::{Error, Result};
use crate::loss::{gradient_into, loss, LossSpec, ModelVector, Sample};
use crate::mixing::{fully_connected_matrix, MatrixKind, MixingMatrix};

/// Node count above which per-node gradients are evaluated on the rayon pool.
const PARALLEL_NODES: usize = 32;

/// Accumulated floats below which every round is snapshotted.
pub const FULL_SNAPSHOT_LIMIT: usize = 1_000_000;

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"OPSSNAP1";

#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub z: ModelVector,
    pub omega: f64,
    pub x: ModelVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AlgorithmKind {
    Ops,
    DolSymm,
    DolAsymm,
    Col,
    LocalOgd,
}

impl AlgorithmKind {
    pub const ALL: [AlgorithmKind; 5] = [
        AlgorithmKind::Ops,
        AlgorithmKind::DolSymm,
        AlgorithmKind::DolAsymm,
        AlgorithmKind::Col,
        AlgorithmKind::LocalOgd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AlgorithmKind::Ops => "OPS",
            AlgorithmKind::DolSymm => "DOL_SYMM",
            AlgorithmKind::DolAsymm => "DOL_ASYMM",
            AlgorithmKind::Col => "COL",
            AlgorithmKind::LocalOgd => "LOCAL_OGD",
        }
    }
}

impl fmt::Display for AlgorithmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlgorithmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        AlgorithmKind::ALL
            .into_iter()
            .find(|a| a.as_str() == norm)
            .ok_or_else(|| Error::InvalidInput(format!("unknown algorithm `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub algorithm: AlgorithmKind,
    pub gamma: f64,
    pub rounds: usize,
    /// Ignored by COL and LOCAL_OGD, which use the uniform and identity
    /// matrices; only its dimension is checked.
    pub matrix: MixingMatrix,
    pub loss: LossSpec,
    pub seed: u64,
    /// Rounds between model snapshots; `None` picks [`default_snapshot_stride`].
    pub snapshot_stride: Option<usize>,
}

/// Every round while `n d (T+1)` stays within [`FULL_SNAPSHOT_LIMIT`], else
/// every `ceil(T/1000)` rounds.
pub fn default_snapshot_stride(n: usize, d: usize, rounds: usize) -> usize {
    if n * d * (rounds + 1) <= FULL_SNAPSHOT_LIMIT {
        1
    } else {
        rounds.div_ceil(1000).max(1)
    }
}

pub fn init_states(n: usize, d: usize) -> Vec<NodeState> {
    assert!(n >= 1 && d >= 1, "init_states needs n, d >= 1");
    (0..n)
        .map(|_| NodeState { z: ModelVector::zeros(d), omega: 1.0, x: ModelVector::zeros(d) })
        .collect()
}

fn check_shapes(states: &[NodeState], w: &MixingMatrix, grads: &[ModelVector]) -> Result<usize> {
    let n = states.len();
    if w.dim() != n {
        return Err(Error::DimensionMismatch { expected: n, found: w.dim() });
    }
    if grads.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: grads.len() });
    }
    let d = states.first().map_or(0, |s| s.z.dim());
    for v in states.iter().flat_map(|s| [&s.z, &s.x]).chain(grads) {
        if v.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, found: v.dim() });
        }
    }
    Ok(d)
}

/// `out_i = sum_k W_ki v_k`, ascending `k`.
fn mix(in_weights: &[Vec<(usize, f64)>], vectors: &[Vec<f64>], d: usize) -> Vec<Vec<f64>> {
    in_weights
        .iter()
        .map(|incoming| {
            let mut acc = vec![0.0; d];
            for &(k, w) in incoming {
                for (a, v) in acc.iter_mut().zip(&vectors[k]) {
                    *a += w * v;
                }
            }
            acc
        })
        .collect()
}

fn ops_step_with(
    states: &[NodeState],
    in_weights: &[Vec<(usize, f64)>],
    gamma: f64,
    grads: &[ModelVector],
    d: usize,
) -> Result<Vec<NodeState>> {
    let half: Vec<Vec<f64>> = states
        .iter()
        .zip(grads)
        .map(|(s, g)| s.z.iter().zip(g.iter()).map(|(z, g)| z - gamma * g).collect())
        .collect();
    let z_next = mix(in_weights, &half, d);
    z_next
        .into_iter()
        .zip(in_weights)
        .enumerate()
        .map(|(i, (z, incoming))| {
            let omega: f64 = incoming.iter().map(|&(k, w)| w * states[k].omega).sum();
            if omega <= 0.0 || !omega.is_finite() {
                return Err(Error::NonPositiveOmega { node: i, omega });
            }
            let x = z.iter().map(|v| v / omega).collect();
            Ok(NodeState { z: ModelVector(z), omega, x: ModelVector(x) })
        })
        .collect()
}

fn dol_step_with(
    states: &[NodeState],
    in_weights: &[Vec<(usize, f64)>],
    gamma: f64,
    grads: &[ModelVector],
    d: usize,
) -> Vec<NodeState> {
    let stepped: Vec<Vec<f64>> = states
        .iter()
        .zip(grads)
        .map(|(s, g)| s.x.iter().zip(g.iter()).map(|(x, g)| x - gamma * g).collect())
        .collect();
    mix(in_weights, &stepped, d)
        .into_iter()
        .map(|x| NodeState { z: ModelVector(x.clone()), omega: 1.0, x: ModelVector(x) })
        .collect()
}

/// Push-sum update with externally supplied gradients (one per node,
/// evaluated at `x`).
pub fn ops_step(states: &[NodeState], w: &MixingMatrix, gamma: f64, grads: &[ModelVector]) -> Result<Vec<NodeState>> {
    let d = check_shapes(states, w, grads)?;
    ops_step_with(states, &w.in_weights(), gamma, grads, d)
}

/// Plain weighted averaging of `x - gamma g`. With `naive = false` the
/// matrix must be doubly stochastic.
pub fn dol_step(
    states: &[NodeState],
    w: &MixingMatrix,
    gamma: f64,
    grads: &[ModelVector],
    naive: bool,
) -> Result<Vec<NodeState>> {
    let d = check_shapes(states, w, grads)?;
    if !naive && w.kind() != MatrixKind::DoublyStochastic {
        return Err(Error::MatrixKindMismatch {
            algorithm: AlgorithmKind::DolSymm.as_str(),
            expected: MatrixKind::DoublyStochastic.as_str(),
        });
    }
    Ok(dol_step_with(states, &w.in_weights(), gamma, grads, d))
}

/// Per-node gradients at `x`, in node order.
pub fn compute_gradients(states: &[NodeState], samples: &[&Sample], spec: &LossSpec) -> Result<Vec<ModelVector>> {
    Ok(losses_and_gradients(states, samples, spec)?.1)
}

fn losses_and_gradients(
    states: &[NodeState],
    samples: &[&Sample],
    spec: &LossSpec,
) -> Result<(Vec<f64>, Vec<ModelVector>)> {
    if samples.len() != states.len() {
        return Err(Error::DimensionMismatch { expected: states.len(), found: samples.len() });
    }
    let eval = |(s, sample): (&NodeState, &&Sample)| -> Result<(f64, ModelVector)> {
        let f = loss(spec, &s.x, sample)?;
        let mut g = vec![0.0; s.x.dim()];
        gradient_into(spec, &s.x, sample, &mut g)?;
        Ok((f, ModelVector(g)))
    };
    let pairs: Vec<(f64, ModelVector)> = if states.len() >= PARALLEL_NODES {
        states.par_iter().zip(samples.par_iter()).map(eval).collect::<Result<_>>()?
    } else {
        states.iter().zip(samples).map(eval).collect::<Result<_>>()?
    };
    Ok(pairs.into_iter().unzip())
}

/// One push-sum round on the given per-node samples.
pub fn ops_round(
    states: &[NodeState],
    w: &MixingMatrix,
    gamma: f64,
    samples: &[&Sample],
    spec: &LossSpec,
) -> Result<Vec<NodeState>> {
    let grads = compute_gradients(states, samples, spec)?;
    ops_step(states, w, gamma, &grads)
}

/// One decentralized online gradient round on the given per-node samples.
pub fn dol_round(
    states: &[NodeState],
    w: &MixingMatrix,
    gamma: f64,
    samples: &[&Sample],
    spec: &LossSpec,
    naive: bool,
) -> Result<Vec<NodeState>> {
    let grads = compute_gradients(states, samples, spec)?;
    dol_step(states, w, gamma, &grads, naive)
}

/// Model snapshot of every node at one round.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub round: usize,
    /// Node-major `n * d` values.
    pub z: Vec<f64>,
    pub x: Vec<f64>,
}

/// Record of a run. Round `t` (0-based) means the state before the `t+1`-th
/// update; losses are recorded at that pre-update model.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub algorithm: AlgorithmKind,
    pub gamma: f64,
    n: usize,
    d: usize,
    rounds: usize,
    /// `rounds * n`, round-major.
    losses: Vec<f64>,
    /// `(rounds + 1) * n`, round-major; entry 0 is the initial state.
    omegas: Vec<f64>,
    snapshot_stride: usize,
    snapshots: Vec<Snapshot>,
}

impl Trajectory {
    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Number of executed rounds `T`; the trajectory holds `T + 1` states.
    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn snapshot_stride(&self) -> usize {
        self.snapshot_stride
    }

    /// Loss of node `node` at its pre-update model in round `t` (0-based).
    pub fn loss(&self, t: usize, node: usize) -> f64 {
        self.losses[t * self.n + node]
    }

    pub fn round_losses(&self, t: usize) -> &[f64] {
        &self.losses[t * self.n..(t + 1) * self.n]
    }

    /// Weights after `t` rounds.
    pub fn omegas(&self, t: usize) -> &[f64] {
        &self.omegas[t * self.n..(t + 1) * self.n]
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn snapshot(&self, t: usize) -> Option<&Snapshot> {
        self.snapshots
            .binary_search_by_key(&t, |s| s.round)
            .ok()
            .map(|i| &self.snapshots[i])
    }

    /// Full node states after `t` rounds, if a snapshot was taken.
    pub fn states_at(&self, t: usize) -> Option<Vec<NodeState>> {
        let snap = self.snapshot(t)?;
        let omegas = self.omegas(t);
        Some(
            (0..self.n)
                .map(|i| NodeState {
                    z: ModelVector(snap.z[i * self.d..(i + 1) * self.d].to_vec()),
                    omega: omegas[i],
                    x: ModelVector(snap.x[i * self.d..(i + 1) * self.d].to_vec()),
                })
                .collect(),
        )
    }

    pub fn final_states(&self) -> Vec<NodeState> {
        self.states_at(self.rounds).expect("final round is always snapshotted")
    }

    /// `round,node,omega,loss` with 1-based rounds; `omega` is the weight
    /// after that round, `loss` is taken before it.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut out = std::io::BufWriter::new(out);
        writeln!(out, "round,node,omega,loss")?;
        for t in 0..self.rounds {
            for i in 0..self.n {
                writeln!(out, "{},{},{},{}", t + 1, i, self.omegas[(t + 1) * self.n + i], self.loss(t, i))?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Little-endian binary dump: magic, `n`, `d`, stride, snapshot count
    /// (all u64), then per snapshot its round (u64) followed by `z`, `x` and
    /// the node weights as f64.
    pub fn write_snapshots<W: Write>(&self, out: W) -> Result<()> {
        let mut out = std::io::BufWriter::new(out);
        out.write_all(SNAPSHOT_MAGIC)?;
        for v in [self.n, self.d, self.snapshot_stride, self.snapshots.len()] {
            out.write_all(&(v as u64).to_le_bytes())?;
        }
        for s in &self.snapshots {
            out.write_all(&(s.round as u64).to_le_bytes())?;
            for v in s.z.iter().chain(&s.x).chain(self.omegas(s.round)) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn save_snapshots(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_snapshots(std::fs::File::create(path)?)
    }
}

/// Snapshots as read back from [`Trajectory::write_snapshots`], with the
/// node weights of each round.
pub fn read_snapshots<R: Read>(input: R) -> Result<Vec<(Snapshot, Vec<f64>)>> {
    let mut input = std::io::BufReader::new(input);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(Error::InvalidInput("not a snapshot file".into()));
    }
    let read_u64 = |input: &mut std::io::BufReader<R>| -> Result<usize> {
        let mut b = [0u8; 8];
        input.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b) as usize)
    };
    let n = read_u64(&mut input)?;
    let d = read_u64(&mut input)?;
    let _stride = read_u64(&mut input)?;
    let count = read_u64(&mut input)?;
    let read_f64s = |input: &mut std::io::BufReader<R>, len: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; len * 8];
        input.read_exact(&mut buf)?;
        Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    };
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let round = read_u64(&mut input)?;
        let z = read_f64s(&mut input, n * d)?;
        let x = read_f64s(&mut input, n * d)?;
        let omegas = read_f64s(&mut input, n)?;
        out.push((Snapshot { round, z, x }, omegas));
    }
    Ok(out)
}

fn flatten(states: &[NodeState], round: usize) -> Snapshot {
    Snapshot {
        round,
        z: states.iter().flat_map(|s| s.z.iter().copied()).collect(),
        x: states.iter().flat_map(|s| s.x.iter().copied()).collect(),
    }
}

/// Matrix the algorithm actually mixes with.
pub fn effective_matrix(config: &RunConfig, n: usize) -> Result<MixingMatrix> {
    if config.matrix.dim() != n {
        return Err(Error::DimensionMismatch { expected: n, found: config.matrix.dim() });
    }
    match config.algorithm {
        AlgorithmKind::Col => Ok(fully_connected_matrix(n)),
        AlgorithmKind::LocalOgd => Ok(MixingMatrix::identity(n)),
        AlgorithmKind::DolSymm if config.matrix.kind() != MatrixKind::DoublyStochastic => {
            Err(Error::MatrixKindMismatch {
                algorithm: AlgorithmKind::DolSymm.as_str(),
                expected: MatrixKind::DoublyStochastic.as_str(),
            })
        }
        _ => Ok(config.matrix.clone()),
    }
}

/// Runs `config.rounds` rounds over the partition's streams.
pub fn run(config: &RunConfig, partition: &StreamPartition) -> Result<Trajectory> {
    run_with(config, partition.node_count(), partition.dim(), |t, i| partition.sample(i, t), partition.rounds())
}

/// Runs with gradients supplied by a callback `(round, states) -> grads`
/// instead of samples; losses are recorded as zero. Used to exercise the
/// update rules in isolation.
pub fn run_with_gradients<F>(config: &RunConfig, n: usize, d: usize, mut grads: F) -> Result<Trajectory>
where
    F: FnMut(usize, &[NodeState]) -> Vec<ModelVector>,
{
    let w = effective_matrix(config, n)?;
    let in_weights = w.in_weights();
    let mut rec = Recorder::new(config, n, d);
    let mut states = init_states(n, d);
    for t in 0..config.rounds {
        let g = grads(t, &states);
        check_shapes(&states, &w, &g)?;
        states = advance(config.algorithm, &states, &in_weights, config.gamma, &g, d)?;
        rec.push(t + 1, &states, vec![0.0; n]);
    }
    Ok(rec.finish(config))
}

fn advance(
    algorithm: AlgorithmKind,
    states: &[NodeState],
    in_weights: &[Vec<(usize, f64)>],
    gamma: f64,
    grads: &[ModelVector],
    d: usize,
) -> Result<Vec<NodeState>> {
    match algorithm {
        AlgorithmKind::Ops => ops_step_with(states, in_weights, gamma, grads, d),
        _ => Ok(dol_step_with(states, in_weights, gamma, grads, d)),
    }
}

struct Recorder {
    n: usize,
    rounds: usize,
    stride: usize,
    losses: Vec<f64>,
    omegas: Vec<f64>,
    snapshots: Vec<Snapshot>,
}

impl Recorder {
    fn new(config: &RunConfig, n: usize, d: usize) -> Self {
        let stride = config
            .snapshot_stride
            .unwrap_or_else(|| default_snapshot_stride(n, d, config.rounds))
            .max(1);
        let init = init_states(n, d);
        Self {
            n,
            rounds: config.rounds,
            stride,
            losses: Vec::with_capacity(config.rounds * n),
            omegas: vec![1.0; n],
            snapshots: vec![flatten(&init, 0)],
        }
    }

    /// Records the state after `round` rounds and the losses taken before it.
    fn push(&mut self, round: usize, states: &[NodeState], losses: Vec<f64>) {
        self.losses.extend(losses);
        self.omegas.extend(states.iter().map(|s| s.omega));
        if round.is_multiple_of(self.stride) || round == self.rounds {
            self.snapshots.push(flatten(states, round));
        }
    }

    fn finish(self, config: &RunConfig) -> Trajectory {
        let d = self.snapshots[0].z.len() / self.n;
        Trajectory {
            algorithm: config.algorithm,
            gamma: config.gamma,
            n: self.n,
            d,
            rounds: self.rounds,
            losses: self.losses,
            omegas: self.omegas,
            snapshot_stride: self.stride,
            snapshots: self.snapshots,
        }
    }
}

fn run_with<'a, S>(
    config: &RunConfig,
    n: usize,
    d: usize,
    sample: S,
    available: usize,
) -> Result<Trajectory>
where
    S: Fn(usize, usize) -> &'a Sample,
{
    if !(config.gamma >= 0.0 && config.gamma.is_finite()) {
        return Err(Error::InvalidInput(format!("step size {} must be finite and non-negative", config.gamma)));
    }
    if config.rounds > available {
        return Err(Error::RoundOutOfRange { requested: config.rounds, available });
    }
    let w = effective_matrix(config, n)?;
    let in_weights = w.in_weights();
    let mut rec = Recorder::new(config, n, d);
    let mut states = init_states(n, d);
    for t in 0..config.rounds {
        let samples: Vec<&Sample> = (0..n).map(|i| sample(t, i)).collect();
        let (losses, grads) = losses_and_gradients(&states, &samples, &config.loss)?;
        states = advance(config.algorithm, &states, &in_weights, config.gamma, &grads, d)?;
        rec.push(t + 1, &states, losses);
    }
    Ok(rec.finish(config))
}
