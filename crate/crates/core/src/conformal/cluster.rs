use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{mean, skewness};

pub const DEFAULT_CLUSTERS: usize = 15;

const MAX_LLOYD_ITERATIONS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub k: usize,
    pub labels: Vec<usize>,
    /// Per-cluster (mean, std, skew) of absolute validation errors.
    pub centroids: Vec<[f64; 3]>,
}

impl ClusterAssignment {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == cluster)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

/// (mean, std, skew) of the absolute residuals of each node.
pub fn error_statistics(residuals_per_node: &[Vec<f64>]) -> Vec<[f64; 3]> {
    residuals_per_node
        .iter()
        .map(|r| {
            let abs: Vec<f64> = r.iter().map(|v| v.abs()).collect();
            let m = mean(&abs);
            let var = if abs.is_empty() {
                0.0
            } else {
                abs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / abs.len() as f64
            };
            [m, var.sqrt(), skewness(&abs)]
        })
        .collect()
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|d| (a[d] - b[d]).powi(2)).sum()
}

fn nearest(point: &[f64; 3], centroids: &[[f64; 3]]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = dist2(point, centroid);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn recompute_centroids(stats: &[[f64; 3]], labels: &[usize], k: usize) -> (Vec<[f64; 3]>, Vec<usize>) {
    let mut sums = vec![[0.0; 3]; k];
    let mut counts = vec![0usize; k];
    for (s, &l) in stats.iter().zip(labels) {
        for d in 0..3 {
            sums[l][d] += s[d];
        }
        counts[l] += 1;
    }
    let centroids = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| {
            if c == 0 {
                [f64::NAN; 3]
            } else {
                [s[0] / c as f64, s[1] / c as f64, s[2] / c as f64]
            }
        })
        .collect();
    (centroids, counts)
}

/// Move the point of the largest cluster that lies farthest from its
/// centroid into each empty cluster.
fn repair_empty(stats: &[[f64; 3]], labels: &mut [usize], k: usize) {
    loop {
        let (centroids, counts) = recompute_centroids(stats, labels, k);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let largest = (0..k).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap_or(0);
        if counts[largest] < 2 {
            return;
        }
        let far = (0..stats.len())
            .filter(|&i| labels[i] == largest)
            .max_by(|&a, &b| {
                dist2(&stats[a], &centroids[largest])
                    .total_cmp(&dist2(&stats[b], &centroids[largest]))
                    .then(b.cmp(&a))
            })
            .unwrap_or(0);
        labels[far] = empty;
    }
}

/// Seeded k-means (k-means++ initialisation, Lloyd iterations) on per-node
/// error statistics.
pub fn cluster_nodes(stats: &[[f64; 3]], k: usize, seed: u64) -> Result<ClusterAssignment> {
    if k == 0 {
        return Err(Error::invalid("number of clusters must be positive"));
    }
    let n = stats.len();
    if k > n {
        return Err(Error::invalid(format!("{k} clusters requested for {n} nodes")));
    }
    if stats.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("error statistics must be finite"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![stats[rng.random_range(0..n)]];
    while centroids.len() < k {
        let d: Vec<f64> = stats
            .iter()
            .map(|s| centroids.iter().map(|c| dist2(s, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let next = if total <= 0.0 {
            // All remaining points coincide with a centroid.
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &di) in d.iter().enumerate() {
                if target < di {
                    pick = i;
                    break;
                }
                target -= di;
            }
            pick
        };
        centroids.push(stats[next]);
    }

    let mut labels: Vec<usize> = stats.iter().map(|s| nearest(s, &centroids)).collect();
    for _ in 0..MAX_LLOYD_ITERATIONS {
        repair_empty(stats, &mut labels, k);
        let (c, _) = recompute_centroids(stats, &labels, k);
        centroids = c;
        let next: Vec<usize> = stats.iter().map(|s| nearest(s, &centroids)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    repair_empty(stats, &mut labels, k);
    let (centroids, _) = recompute_centroids(stats, &labels, k);
    Ok(ClusterAssignment { k, labels, centroids })
}
