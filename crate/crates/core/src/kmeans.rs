//! Lloyd's k-means with k-means++ seeding, used to carve the adversarial
//! pool into one cluster per node.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub centroids: Vec<Vec<f64>>,
    /// Cluster index for every input point.
    pub assignment: Vec<usize>,
}

impl Clustering {
    pub fn members(&self, k: usize) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); k];
        for (p, &c) in self.assignment.iter().enumerate() {
            members[c].push(p);
        }
        members
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(centroid, p);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init<R: Rng>(points: &[&[f64]], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].to_vec()];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let next = match WeightedIndex::new(&dist) {
            Ok(weights) => weights.sample(rng),
            // Every point already coincides with a centroid.
            Err(_) => rng.random_range(0..points.len()),
        };
        let centroid = points[next].to_vec();
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centroid));
        }
        centroids.push(centroid);
    }
    centroids
}

/// Runs exactly `iters` Lloyd iterations after k-means++ seeding. Clusters
/// that lose all their points keep their previous centroid.
pub fn kmeans<R: Rng>(points: &[&[f64]], k: usize, iters: usize, rng: &mut R) -> Clustering {
    assert!(k >= 1 && !points.is_empty(), "kmeans needs k >= 1 and at least one point");
    let d = points[0].len();
    let mut centroids = plus_plus_init(points, k, rng);
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(&centroids, p).0).collect();
    for _ in 0..iters {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignment) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(&centroids, p).0).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    Clustering { centroids, assignment }
}
