//! Simulator for online push-sum learning over directed graphs.
//!
//! Nodes learn a shared logistic-regression model from per-node data streams
//! while exchanging weighted models over a directed graph. The push-sum weight
//! `omega` corrects the bias of row-stochastic mixing, so one-way links can be
//! used. Baselines: decentralized online gradient on the symmetric part of the
//! graph (`DOL_SYMM`) or naively on the full graph (`DOL_ASYMM`), centralized
//! averaging (`COL`) and isolated local gradient steps (`LOCAL_OGD`).

pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod graph;
pub mod kmeans;
pub mod loss;
pub mod metrics;
pub mod mixing;
pub mod runner;

pub use error::{Error, Result};
