//! Dataset ingestion and the stochastic/adversarial streaming split.
//!
//! Every dataset is turned into per-node streams with exactly one sample per
//! node per round. A fraction of the data forms a shared *stochastic* pool
//! that all nodes draw from with replacement; the rest is clustered into one
//! *adversarial* block per node and replayed sequentially.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmeans::{kmeans, sq_dist};
use crate::loss::{dot, ModelVector, Sample};

/// Variance below which a feature column is treated as constant.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub d: usize,
    pub samples: Vec<Sample>,
    /// Ground-truth weights for synthetic data.
    pub planted: Option<ModelVector>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, samples: Vec<Sample>) -> Result<Self> {
        let d = samples.first().ok_or(Error::EmptyDataset)?.dim();
        if let Some(bad) = samples.iter().find(|s| s.dim() != d) {
            return Err(Error::DimensionMismatch { expected: d, found: bad.dim() });
        }
        Ok(Self { name: name.into(), d, samples, planted: None })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Shift and scale every coordinate to zero mean and unit variance;
    /// constant columns become zero.
    pub fn standardize(&mut self) {
        let m = self.samples.len() as f64;
        for j in 0..self.d {
            let mean = self.samples.iter().map(|s| s.features[j]).sum::<f64>() / m;
            let var = self
                .samples
                .iter()
                .map(|s| (s.features[j] - mean).powi(2))
                .sum::<f64>()
                / m;
            if var <= VARIANCE_FLOOR {
                self.samples.iter_mut().for_each(|s| s.features[j] = 0.0);
            } else {
                let sd = var.sqrt();
                self.samples
                    .iter_mut()
                    .for_each(|s| s.features[j] = (s.features[j] - mean) / sd);
            }
        }
    }
}

fn parse_label(token: &str, line: usize) -> Result<f64> {
    match token.trim().parse::<f64>() {
        Ok(1.0) => Ok(1.0),
        Ok(v) if v == 0.0 || v == -1.0 => Ok(-1.0),
        _ => Err(Error::Parse { line, message: format!("label `{token}` is not binary") }),
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

/// Reads `label idx:val ...` lines (1-based indices), maps labels to +-1 and
/// standardizes features.
pub fn load_libsvm(path: impl AsRef<Path>) -> Result<Dataset> {
    load_libsvm_capped(path, None)
}

/// As [`load_libsvm`], keeping at most `max_samples` lines.
pub fn load_libsvm_capped(path: impl AsRef<Path>, max_samples: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut rows: Vec<(f64, Vec<(usize, f64)>)> = Vec::new();
    let mut d = 0;
    for (lineno, line) in reader.lines().enumerate() {
        let line_no = lineno + 1;
        let line = line?;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if max_samples.is_some_and(|cap| rows.len() >= cap) {
            break;
        }
        let mut tokens = line.split_whitespace();
        let label = parse_label(tokens.next().expect("line is non-empty"), line_no)?;
        let mut entries = Vec::new();
        for tok in tokens {
            let bad = || Error::Parse { line: line_no, message: format!("bad feature `{tok}`") };
            let (idx, val) = tok.split_once(':').ok_or_else(bad)?;
            let idx: usize = idx.parse().map_err(|_| bad())?;
            let val: f64 = val.parse().map_err(|_| bad())?;
            if idx == 0 || !val.is_finite() {
                return Err(bad());
            }
            d = d.max(idx);
            entries.push((idx - 1, val));
        }
        rows.push((label, entries));
    }
    if rows.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    let samples = rows
        .into_iter()
        .map(|(label, entries)| {
            let mut features = vec![0.0; d];
            for (j, v) in entries {
                features[j] = v;
            }
            Sample { features, label }
        })
        .collect();
    let mut ds = Dataset { name: file_stem(path), d, samples, planted: None };
    ds.standardize();
    Ok(ds)
}

/// Reads a headed CSV. Columns other than `label_column` that fail to parse
/// as numbers are dropped. Rows with one field more than the header (a
/// leading row id) have that first field ignored.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset> {
    load_csv_capped(path, label_column, None)
}

pub fn load_csv_capped(
    path: impl AsRef<Path>,
    label_column: &str,
    max_samples: Option<usize>,
) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::MissingColumn(label_column.to_owned()))?;

    let mut records: Vec<(usize, Vec<String>)> = Vec::new();
    for record in reader.records() {
        if max_samples.is_some_and(|cap| records.len() >= cap) {
            break;
        }
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let fields: Vec<String> = if record.len() == headers.len() {
            record.iter().map(str::to_owned).collect()
        } else if record.len() == headers.len() + 1 {
            record.iter().skip(1).map(str::to_owned).collect()
        } else {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        };
        records.push((line, fields));
    }
    if records.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }

    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != label_idx)
        .filter(|&c| {
            let numeric = records.iter().all(|(_, f)| f[c].parse::<f64>().is_ok_and(f64::is_finite));
            if !numeric {
                warn!("dropping non-numeric column `{}`", headers[c]);
            }
            numeric
        })
        .collect();
    let samples = records
        .iter()
        .map(|(line, f)| {
            Ok(Sample {
                features: feature_cols.iter().map(|&c| f[c].parse().expect("checked numeric")).collect(),
                label: parse_label(&f[label_idx], *line)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset { name: file_stem(path), d: feature_cols.len(), samples, planted: None };
    ds.standardize();
    Ok(ds)
}

/// Gaussian features with labels from a planted logistic model
/// `P(y = +1 | a) = sigmoid(<w, a>)`, `w ~ N(0, I)`.
///
/// Panics if `n_samples < 2` or `d == 0`.
pub fn synthetic_dataset(n_samples: usize, d: usize, seed: u64) -> Dataset {
    assert!(n_samples >= 2 && d >= 1, "synthetic data needs n_samples >= 2 and d >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planted: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let samples = (0..n_samples)
        .map(|_| {
            let features: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let p = 1.0 / (1.0 + (-dot(&planted, &features)).exp());
            let label = if rng.random::<f64>() < p { 1.0 } else { -1.0 };
            Sample { features, label }
        })
        .collect();
    Dataset {
        name: format!("synthetic-{n_samples}x{d}-s{seed}"),
        d,
        samples,
        planted: Some(ModelVector(planted)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Share of the data placed in the shared stochastic pool.
    pub stochastic_fraction: f64,
    pub n: usize,
    pub seed: u64,
    pub cluster_iters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Stochastic,
    Adversarial,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Stochastic => "stochastic",
            Provenance::Adversarial => "adversarial",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamEntry {
    /// Index into the dataset's samples.
    pub index: usize,
    pub provenance: Provenance,
}

/// Per-node, round-indexed sample streams over a shared dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamPartition {
    dataset: Arc<Dataset>,
    rounds: usize,
    streams: Vec<Vec<StreamEntry>>,
    stochastic_pool: Vec<usize>,
    adversarial: Vec<Vec<usize>>,
}

impl StreamPartition {
    /// Streams built directly from per-node index lists (all tagged
    /// stochastic). Every stream must have the same length.
    pub fn from_indices(dataset: Arc<Dataset>, streams: Vec<Vec<usize>>) -> Result<Self> {
        let rounds = streams.first().map_or(0, Vec::len);
        if streams.is_empty() || streams.iter().any(|s| s.len() != rounds) {
            return Err(Error::InvalidInput("streams must be non-empty and of equal length".into()));
        }
        if let Some(&bad) = streams.iter().flatten().find(|&&i| i >= dataset.len()) {
            return Err(Error::InvalidInput(format!("sample index {bad} out of range")));
        }
        let streams = streams
            .into_iter()
            .map(|s| {
                s.into_iter()
                    .map(|index| StreamEntry { index, provenance: Provenance::Stochastic })
                    .collect()
            })
            .collect::<Vec<Vec<_>>>();
        let n = streams.len();
        Ok(Self {
            dataset,
            rounds,
            streams,
            stochastic_pool: Vec::new(),
            adversarial: vec![Vec::new(); n],
        })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn node_count(&self) -> usize {
        self.streams.len()
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn dim(&self) -> usize {
        self.dataset.d
    }

    pub fn entry(&self, node: usize, round: usize) -> StreamEntry {
        self.streams[node][round]
    }

    /// The sample node `node` sees in round `round` (0-based).
    pub fn sample(&self, node: usize, round: usize) -> &Sample {
        &self.dataset.samples[self.streams[node][round].index]
    }

    pub fn stream(&self, node: usize) -> &[StreamEntry] {
        &self.streams[node]
    }

    pub fn stochastic_pool(&self) -> &[usize] {
        &self.stochastic_pool
    }

    /// Dataset indices of the adversarial cluster owned by each node.
    pub fn adversarial_assignment(&self) -> &[Vec<usize>] {
        &self.adversarial
    }

    /// Every sample delivered in the first `rounds` rounds, node-major.
    pub fn realized_samples(&self, rounds: usize) -> Vec<Sample> {
        self.streams
            .iter()
            .flat_map(|s| s[..rounds].iter().map(|e| self.dataset.samples[e.index].clone()))
            .collect()
    }

    /// Same partition cut to its first `rounds` rounds.
    pub fn truncated(&self, rounds: usize) -> Self {
        let rounds = rounds.min(self.rounds);
        Self {
            dataset: Arc::clone(&self.dataset),
            rounds,
            streams: self.streams.iter().map(|s| s[..rounds].to_vec()).collect(),
            stochastic_pool: self.stochastic_pool.clone(),
            adversarial: self.adversarial.clone(),
        }
    }

    /// One CSV per node (`node_<i>.csv`) with `round,sample_index,provenance,label`.
    pub fn export_csv(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (node, stream) in self.streams.iter().enumerate() {
            let mut out = std::io::BufWriter::new(File::create(dir.join(format!("node_{node}.csv")))?);
            writeln!(out, "round,sample_index,provenance,label")?;
            for (round, e) in stream.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{},{}",
                    round + 1,
                    e.index,
                    e.provenance.as_str(),
                    self.dataset.samples[e.index].label
                )?;
            }
            out.flush()?;
        }
        Ok(())
    }
}

fn stochastic_count(fraction: f64, total: usize) -> usize {
    // The epsilon absorbs products like 0.7 * 10 = 7.000000000000001.
    (((fraction * total as f64) - 1e-9).ceil().max(0.0) as usize).min(total)
}

/// Shuffles, splits into stochastic and adversarial pools, clusters the
/// adversarial pool into `n` blocks and builds `rounds` rounds of streams.
pub fn split_and_stream(ds: Arc<Dataset>, spec: &SplitSpec, rounds: usize) -> Result<StreamPartition> {
    if spec.n == 0 {
        return Err(Error::InvalidInput("split needs at least one node".into()));
    }
    if !(0.0..=1.0).contains(&spec.stochastic_fraction) {
        return Err(Error::InvalidInput(format!(
            "stochastic fraction {} outside [0, 1]",
            spec.stochastic_fraction
        )));
    }
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = spec.n;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng);
    let split_at = stochastic_count(spec.stochastic_fraction, ds.len());
    let stochastic_pool = order[..split_at].to_vec();
    let adversarial_pool = &order[split_at..];

    let stochastic_rounds =
        ((spec.stochastic_fraction * rounds as f64).round() as usize).min(rounds);
    let needs_adversarial = stochastic_rounds < rounds;

    let adversarial = if adversarial_pool.is_empty() {
        if needs_adversarial {
            return Err(Error::InsufficientData(
                "adversarial pool is empty but the schedule needs adversarial rounds".into(),
            ));
        }
        vec![Vec::new(); n]
    } else {
        cluster_pool(&ds, adversarial_pool, n, spec.cluster_iters, &mut rng)
    };

    let mut streams = Vec::with_capacity(n);
    for node in 0..n {
        let mut schedule = vec![Provenance::Adversarial; rounds];
        schedule[..stochastic_rounds].fill(Provenance::Stochastic);
        schedule.shuffle(&mut rng);

        let mut own = adversarial[node].clone();
        let mut cursor = 0;
        let mut stream = Vec::with_capacity(rounds);
        for provenance in schedule {
            let index = match provenance {
                Provenance::Stochastic => stochastic_pool[rng.random_range(0..stochastic_pool.len())],
                Provenance::Adversarial => {
                    if cursor == own.len() {
                        own.shuffle(&mut rng);
                        cursor = 0;
                    }
                    cursor += 1;
                    own[cursor - 1]
                }
            };
            stream.push(StreamEntry { index, provenance });
        }
        streams.push(stream);
    }

    Ok(StreamPartition { dataset: ds, rounds, streams, stochastic_pool, adversarial })
}

/// Clusters `pool` into `k` blocks ordered by centroid norm. Empty blocks
/// take half of the nearest block that can spare points, or share a block
/// when the pool has fewer than `k` points.
fn cluster_pool(ds: &Dataset, pool: &[usize], k: usize, iters: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let points: Vec<&[f64]> = pool.iter().map(|&i| ds.samples[i].features.as_slice()).collect();
    let clustering = kmeans(&points, k, iters, rng);
    let mut order: Vec<usize> = (0..k).collect();
    let norms: Vec<f64> = clustering.centroids.iter().map(|c| c.iter().map(|v| v * v).sum()).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    let members = clustering.members(k);
    let centroids: Vec<Vec<f64>> = order.iter().map(|&c| clustering.centroids[c].clone()).collect();
    let mut blocks: Vec<Vec<usize>> = order
        .iter()
        .map(|&c| members[c].iter().map(|&p| pool[p]).collect())
        .collect();

    for empty in 0..k {
        if !blocks[empty].is_empty() {
            continue;
        }
        warn!("adversarial cluster for node {empty} is empty; reassigning from the nearest cluster");
        let by_distance = |min_size: usize| {
            (0..k)
                .filter(|&c| c != empty && blocks[c].len() >= min_size)
                .min_by(|&a, &b| {
                    sq_dist(&centroids[a], &centroids[empty])
                        .total_cmp(&sq_dist(&centroids[b], &centroids[empty]))
                })
        };
        if let Some(donor) = by_distance(2) {
            let target = &centroids[empty];
            let mut donated = std::mem::take(&mut blocks[donor]);
            donated.sort_by(|&a, &b| {
                sq_dist(&ds.samples[a].features, target)
                    .total_cmp(&sq_dist(&ds.samples[b].features, target))
                    .then(a.cmp(&b))
            });
            let keep = donated.split_off(donated.len() / 2);
            blocks[empty] = donated;
            blocks[donor] = keep;
            blocks[donor].sort_unstable();
            blocks[empty].sort_unstable();
        } else if let Some(donor) = by_distance(1) {
            warn!("fewer adversarial samples than nodes; node {empty} shares cluster {donor}");
            blocks[empty] = blocks[donor].clone();
        }
    }
    blocks
}
