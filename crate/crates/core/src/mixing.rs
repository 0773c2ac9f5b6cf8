//! Mixing (confusion) matrices and diagnostics for their backward products.
//!
//! `W[i][j]` is the weight node `i` sends to node `j`, so rows are the
//! senders and every row sums to one. Storage is dense row-major; the
//! largest networks we simulate have a few thousand nodes.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::DirectedGraph;

/// Absolute tolerance for row and column sums.
pub const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixKind {
    RowStochastic,
    DoublyStochastic,
}

impl MatrixKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MatrixKind::RowStochastic => "row_stochastic",
            MatrixKind::DoublyStochastic => "doubly_stochastic",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    n: usize,
    weights: Vec<f64>,
    kind: MatrixKind,
}

impl MixingMatrix {
    /// Validates a dense row-major matrix. The kind is inferred: symmetric
    /// matrices whose columns also sum to one are doubly stochastic.
    pub fn from_dense(n: usize, weights: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidMatrix("dimension must be at least 1".into()));
        }
        if weights.len() != n * n {
            return Err(Error::InvalidMatrix(format!(
                "expected {} entries, found {}",
                n * n,
                weights.len()
            )));
        }
        if let Some(pos) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidMatrix(format!(
                "entry ({}, {}) = {} is negative or not finite",
                pos / n,
                pos % n,
                weights[pos]
            )));
        }
        for i in 0..n {
            let sum: f64 = weights[i * n..(i + 1) * n].iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::InvalidMatrix(format!("row {i} sums to {sum}")));
            }
        }
        let mut m = Self { n, weights, kind: MatrixKind::RowStochastic };
        if m.is_symmetric(0.0) && m.columns_sum_to_one() {
            m.kind = MatrixKind::DoublyStochastic;
        }
        Ok(m)
    }

    pub fn identity(n: usize) -> Self {
        let mut weights = vec![0.0; n * n];
        for i in 0..n {
            weights[i * n + i] = 1.0;
        }
        Self { n, weights, kind: MatrixKind::DoublyStochastic }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> MatrixKind {
        self.kind
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n];
        for i in 0..self.n {
            for (s, w) in sums.iter_mut().zip(self.row(i)) {
                *s += w;
            }
        }
        sums
    }

    fn columns_sum_to_one(&self) -> bool {
        self.column_sums().iter().all(|s| (s - 1.0).abs() <= STOCHASTIC_TOL)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }

    pub fn has_positive_diagonal(&self) -> bool {
        (0..self.n).all(|i| self.get(i, i) > 0.0)
    }

    /// Graph of the positive entries.
    pub fn support_graph(&self) -> DirectedGraph {
        let lists = (0..self.n)
            .map(|i| (0..self.n).filter(|&j| self.get(i, j) > 0.0).collect())
            .collect();
        DirectedGraph::from_adjacency(lists).expect("support lists are sorted and in range")
    }

    /// For each receiver `i`, the senders `k` with `W[k][i] > 0` and their
    /// weights, in ascending `k`.
    pub fn in_weights(&self) -> Vec<Vec<(usize, f64)>> {
        (0..self.n)
            .map(|i| {
                (0..self.n)
                    .filter_map(|k| {
                        let w = self.get(k, i);
                        (w > 0.0).then_some((k, w))
                    })
                    .collect()
            })
            .collect()
    }

    /// Plain text: `n` on the first line, then `n` rows of `n` decimals.
    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.n);
        for i in 0..self.n {
            let row: Vec<String> = self.row(i).iter().map(|w| w.to_string()).collect();
            writeln!(out, "{}", row.join(" ")).unwrap();
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (first_line, header) = lines.next().ok_or_else(|| Error::Parse {
            line: 1,
            message: "missing dimension line".into(),
        })?;
        let n: usize = header.parse().map_err(|_| Error::Parse {
            line: first_line,
            message: format!("bad dimension `{header}`"),
        })?;
        let mut weights = Vec::with_capacity(n * n);
        let mut rows = 0;
        for (line_no, line) in lines {
            let row = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|_| Error::Parse {
                        line: line_no,
                        message: format!("bad weight `{tok}`"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if row.len() != n {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected {n} weights, found {}", row.len()),
                });
            }
            weights.extend(row);
            rows += 1;
        }
        if rows != n {
            return Err(Error::InvalidMatrix(format!("expected {n} rows, found {rows}")));
        }
        Self::from_dense(n, weights)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Uniform weights `1/|N_i^out|` over each node's out-neighbors (self included).
pub fn build_row_stochastic(g: &DirectedGraph) -> Result<MixingMatrix> {
    let n = g.node_count();
    let mut weights = vec![0.0; n * n];
    for i in 0..n {
        let out = g.out_neighbors(i);
        if out.is_empty() {
            return Err(Error::EmptyRow { node: i });
        }
        let w = 1.0 / out.len() as f64;
        for &j in out {
            weights[i * n + j] = w;
        }
    }
    Ok(MixingMatrix { n, weights, kind: MatrixKind::RowStochastic })
}

/// Metropolis-Hastings weights on a symmetric graph.
pub fn build_doubly_stochastic(g: &DirectedGraph) -> Result<MixingMatrix> {
    if let Some((from, to)) = g.edges().find(|&(i, j)| !g.has_edge(j, i)) {
        return Err(Error::AsymmetricInput { from, to });
    }
    let n = g.node_count();
    let degree: Vec<usize> = (0..n).map(|i| g.degree_without_self(i)).collect();
    let mut weights = vec![0.0; n * n];
    for i in 0..n {
        let mut off_diagonal = 0.0;
        for &j in g.out_neighbors(i) {
            if j != i {
                let w = 1.0 / (1 + degree[i].max(degree[j])) as f64;
                weights[i * n + j] = w;
                off_diagonal += w;
            }
        }
        weights[i * n + i] = 1.0 - off_diagonal;
    }
    Ok(MixingMatrix { n, weights, kind: MatrixKind::DoublyStochastic })
}

/// `(1/n) 11^T`: every node averages everything.
pub fn fully_connected_matrix(n: usize) -> MixingMatrix {
    assert!(n >= 1, "matrix dimension must be at least 1");
    MixingMatrix {
        n,
        weights: vec![1.0 / n as f64; n * n],
        kind: MatrixKind::DoublyStochastic,
    }
}

/// Worst-case constants of the product-concentration argument for `n` nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants {
    pub c: f64,
    pub q: f64,
    /// `1 - q`, kept separately because `q` rounds to exactly 1 for n >= 16.
    pub one_minus_q: f64,
    pub delta_min: f64,
    pub c1: f64,
    pub c2: f64,
}

impl TheoryConstants {
    /// `C q^lag`, the concentration bound at a given lag.
    pub fn concentration_bound(&self, lag: usize) -> f64 {
        self.c * self.q.powi(lag as i32)
    }
}

/// `C = 4`, `q = 1 - n^-n`, `delta_min = n^-n`, and the regret constants
/// `C1 = 8Cq / (delta_min (1-q)) + 1`, `C2 = 2Cq / (delta_min (1-q))`.
pub fn theory_constants(n: usize) -> Result<TheoryConstants> {
    if n == 0 {
        return Err(Error::InvalidInput("n must be at least 1".into()));
    }
    let c = 4.0;
    let log_nn = n as f64 * (n as f64).ln();
    let n_pow_n = log_nn.exp();
    let delta_min = (-log_nn).exp();
    if !n_pow_n.is_finite() || delta_min == 0.0 {
        return Err(Error::Overflow { n });
    }
    let one_minus_q = delta_min;
    let q = 1.0 - one_minus_q;
    // delta_min * (1 - q) = n^-2n
    let inv_denominator = (2.0 * log_nn).exp();
    let c2 = 2.0 * c * q * inv_denominator;
    let c1 = 4.0 * c2 + 1.0;
    if !c1.is_finite() || !c2.is_finite() {
        return Err(Error::Overflow { n });
    }
    Ok(TheoryConstants { c, q, one_minus_q, delta_min, c1, c2 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProductDiagnostics {
    pub horizon: usize,
    /// Limit profile: row means of `(W^T)^horizon`.
    pub psi: Vec<f64>,
    /// Entry `t-1` holds `max_ij |(W^T)^t_ij - psi_i|`.
    pub max_deviation_per_lag: Vec<f64>,
    /// Entry `t-1` holds `min_i sum_j (W^T)^t_ij`.
    pub min_column_sum_per_lag: Vec<f64>,
    /// Minimum of `min_column_sum_per_lag`; the empirical `delta_min`.
    pub min_column_sum: f64,
}

/// Powers `(W^T)^t` for `t = 1..=horizon`, measured against the limit profile.
///
/// Products are computed entry by entry with a fixed ascending summation
/// order, so parallel evaluation gives the same bits as sequential.
pub fn backward_product_diagnostics(w: &MixingMatrix, horizon: usize) -> ProductDiagnostics {
    assert!(horizon >= 1, "horizon must be at least 1");
    let n = w.dim();
    let mut transpose = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            transpose[i * n + j] = w.get(j, i);
        }
    }
    let mut powers = Vec::with_capacity(horizon);
    let mut current = transpose.clone();
    powers.push(current.clone());
    for _ in 1..horizon {
        current = mat_mul(&current, &transpose, n);
        powers.push(current.clone());
    }
    let last = powers.last().expect("horizon >= 1");
    let psi: Vec<f64> = (0..n)
        .map(|i| last[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
        .collect();

    let mut max_deviation_per_lag = Vec::with_capacity(horizon);
    let mut min_column_sum_per_lag = Vec::with_capacity(horizon);
    for p in &powers {
        let mut dev = 0.0f64;
        let mut min_sum = f64::INFINITY;
        for i in 0..n {
            let row = &p[i * n..(i + 1) * n];
            for v in row {
                dev = dev.max((v - psi[i]).abs());
            }
            min_sum = min_sum.min(row.iter().sum());
        }
        max_deviation_per_lag.push(dev);
        min_column_sum_per_lag.push(min_sum);
    }
    let min_column_sum = min_column_sum_per_lag.iter().copied().fold(f64::INFINITY, f64::min);
    ProductDiagnostics {
        horizon,
        psi,
        max_deviation_per_lag,
        min_column_sum_per_lag,
        min_column_sum,
    }
}

fn mat_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let a_row = &a[i * n..(i + 1) * n];
        for (j, slot) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in 0..n {
                acc += a_row[k] * b[k * n + j];
            }
            *slot = acc;
        }
    });
    out
}
