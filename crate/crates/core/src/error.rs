use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("node {node} has no out-neighbors")]
    EmptyRow { node: usize },

    #[error("graph is not symmetric: edge {from}->{to} has no reverse")]
    AsymmetricInput { from: usize, to: usize },

    #[error("theory constants are not representable for n = {n}")]
    Overflow { n: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("comparator solver did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("file {0} contains no samples")]
    EmptyFile(PathBuf),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("node {node} ended round with non-positive weight {omega}")]
    NonPositiveOmega { node: usize, omega: f64 },

    #[error("{algorithm} requires a {expected} mixing matrix")]
    MatrixKindMismatch {
        algorithm: &'static str,
        expected: &'static str,
    },

    #[error("trajectory has no recorded rounds")]
    EmptyTrajectory,

    #[error("no model snapshot recorded for round {0}")]
    MissingSnapshots(usize),

    #[error("round {requested} requested but only {available} recorded")]
    RoundOutOfRange { requested: usize, available: usize },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid mixing matrix: {0}")]
    InvalidMatrix(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
