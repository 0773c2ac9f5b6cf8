//! Average loss, regret against a fixed comparator, and consensus error.

use std::io::Write;

use crate::data::StreamPartition;
use crate::engine::{AlgorithmKind, Trajectory};
use crate::error::{Error, Result};
use crate::loss::{loss, theoretical_gamma, BoundEstimates, LossSpec, ModelVector};
use crate::mixing::TheoryConstants;

fn check_up_to(traj: &Trajectory, up_to: usize) -> Result<()> {
    if up_to == 0 || traj.rounds() == 0 {
        return Err(Error::EmptyTrajectory);
    }
    if up_to > traj.rounds() {
        return Err(Error::RoundOutOfRange { requested: up_to, available: traj.rounds() });
    }
    Ok(())
}

/// Mean recorded loss over all nodes and the first `up_to` rounds.
pub fn average_loss(traj: &Trajectory, up_to: usize) -> Result<f64> {
    check_up_to(traj, up_to)?;
    let total: f64 = (0..up_to).map(|t| traj.round_losses(t).iter().sum::<f64>()).sum();
    Ok(total / (traj.node_count() * up_to) as f64)
}

/// Per-round network loss of the comparator on the delivered samples.
pub fn comparator_losses(
    comparator: &ModelVector,
    spec: &LossSpec,
    partition: &StreamPartition,
    rounds: usize,
) -> Result<Vec<f64>> {
    (0..rounds)
        .map(|t| {
            (0..partition.node_count())
                .map(|i| loss(spec, comparator, partition.sample(i, t)))
                .sum()
        })
        .collect()
}

/// Cumulative regret after each round `1..=T`.
pub fn regret(
    traj: &Trajectory,
    comparator: &ModelVector,
    spec: &LossSpec,
    partition: &StreamPartition,
) -> Result<Vec<f64>> {
    if comparator.dim() != traj.dim() {
        return Err(Error::DimensionMismatch { expected: traj.dim(), found: comparator.dim() });
    }
    if partition.node_count() != traj.node_count() {
        return Err(Error::DimensionMismatch { expected: traj.node_count(), found: partition.node_count() });
    }
    if partition.rounds() < traj.rounds() {
        return Err(Error::RoundOutOfRange { requested: traj.rounds(), available: partition.rounds() });
    }
    let reference = comparator_losses(comparator, spec, partition, traj.rounds())?;
    let mut acc = 0.0;
    Ok((0..traj.rounds())
        .map(|t| {
            acc += traj.round_losses(t).iter().sum::<f64>() - reference[t];
            acc
        })
        .collect())
}

/// `sum_i |x_t^(i) - mean_i z_t^(i)|^2` for a snapshotted round.
pub fn consensus_term(traj: &Trajectory, round: usize) -> Result<f64> {
    let snap = traj.snapshot(round).ok_or(Error::MissingSnapshots(round))?;
    let (n, d) = (traj.node_count(), traj.dim());
    let mut z_bar = vec![0.0; d];
    for i in 0..n {
        for (m, v) in z_bar.iter_mut().zip(&snap.z[i * d..(i + 1) * d]) {
            *m += v;
        }
    }
    z_bar.iter_mut().for_each(|m| *m /= n as f64);
    Ok((0..n)
        .map(|i| {
            snap.x[i * d..(i + 1) * d]
                .iter()
                .zip(&z_bar)
                .map(|(x, m)| (x - m) * (x - m))
                .sum::<f64>()
        })
        .sum())
}

/// `(1/up_to) sum_{t < up_to} consensus_term(t + 1)`; needs a snapshot for
/// every round `1..=up_to`.
pub fn consensus_error(traj: &Trajectory, up_to: usize) -> Result<f64> {
    check_up_to(traj, up_to)?;
    let mut total = 0.0;
    for r in 1..=up_to {
        total += consensus_term(traj, r)?;
    }
    Ok(total / up_to as f64)
}

/// Mean of the consensus term over the snapshotted rounds in `1..=up_to`;
/// equals [`consensus_error`] when every round is snapshotted. `None` if no
/// such snapshot exists.
pub fn consensus_error_strided(traj: &Trajectory, up_to: usize) -> Result<Option<f64>> {
    check_up_to(traj, up_to)?;
    let rounds: Vec<usize> = traj
        .snapshots()
        .iter()
        .map(|s| s.round)
        .filter(|&r| r >= 1 && r <= up_to)
        .collect();
    if rounds.is_empty() {
        return Ok(None);
    }
    let total: f64 = rounds.iter().map(|&r| consensus_term(traj, r)).sum::<Result<f64>>()?;
    Ok(Some(total / rounds.len() as f64))
}

/// `C1 n G^2 T gamma + (1 + n C2) sigma^2 T gamma + n R^2 / (2 gamma)` at the
/// balancing step size [`theoretical_gamma`].
pub fn theoretical_regret_bound(n: usize, rounds: usize, b: &BoundEstimates, c: &TheoryConstants) -> Result<f64> {
    let gamma = theoretical_gamma(n, rounds, b, c);
    let bound = regret_bound_at(n, rounds, gamma, b, c);
    if bound.is_finite() {
        Ok(bound)
    } else {
        Err(Error::Overflow { n })
    }
}

/// The same bound at an arbitrary step size.
pub fn regret_bound_at(n: usize, rounds: usize, gamma: f64, b: &BoundEstimates, c: &TheoryConstants) -> f64 {
    let (nf, t) = (n as f64, rounds as f64);
    c.c1 * nf * b.g * b.g * t * gamma + (1.0 + nf * c.c2) * b.sigma * b.sigma * t * gamma + nf * b.r * b.r / (2.0 * gamma)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub avg_loss: f64,
    pub cum_regret: f64,
    /// NaN before the first snapshot when snapshots are strided.
    pub consensus_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSeries {
    pub algorithm: AlgorithmKind,
    pub seed: u64,
    pub fingerprint: String,
    pub rows: Vec<MetricsRow>,
}

pub const METRICS_HEADER: &str = "round,algo,seed,avg_loss,cum_regret,consensus_error";

impl MetricsSeries {
    /// One row per round `1..=T`.
    pub fn compute(
        traj: &Trajectory,
        comparator: &ModelVector,
        spec: &LossSpec,
        partition: &StreamPartition,
        seed: u64,
        fingerprint: impl Into<String>,
    ) -> Result<Self> {
        let cum_regret = regret(traj, comparator, spec, partition)?;
        let n = traj.node_count() as f64;
        let mut loss_sum = 0.0;
        let mut cons_sum = 0.0;
        let mut cons_count = 0usize;
        let mut rows = Vec::with_capacity(traj.rounds());
        for t in 0..traj.rounds() {
            loss_sum += traj.round_losses(t).iter().sum::<f64>();
            if traj.snapshot(t + 1).is_some() {
                cons_sum += consensus_term(traj, t + 1)?;
                cons_count += 1;
            }
            rows.push(MetricsRow {
                round: t + 1,
                avg_loss: loss_sum / (n * (t + 1) as f64),
                cum_regret: cum_regret[t],
                consensus_error: if cons_count == 0 { f64::NAN } else { cons_sum / cons_count as f64 },
            });
        }
        Ok(Self { algorithm: traj.algorithm, seed, fingerprint: fingerprint.into(), rows })
    }

    pub fn final_row(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    /// Rows without the header line.
    pub fn write_rows<W: Write>(&self, out: &mut W) -> Result<()> {
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.round, self.algorithm, self.seed, r.avg_loss, r.cum_regret, r.consensus_error
            )?;
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut out = std::io::BufWriter::new(out);
        writeln!(out, "{METRICS_HEADER}")?;
        self.write_rows(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }
}
