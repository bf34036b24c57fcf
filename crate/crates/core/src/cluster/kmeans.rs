//! Seeded k-means for the spectral embedding rows.
//!
//! Each restart draws a k-means++ initialization from its own derived
//! stream and runs Lloyd iterations to an assignment fixpoint; the best
//! restart by within-cluster sum of squares wins, first-found on ties.
//! Empty clusters are repaired by reseeding the centroid at the point
//! farthest from its currently assigned centroid.

use ndarray::{Array2, ArrayView1};
use rand::Rng;

use crate::rng::{stream, StreamKind};
use crate::{Error, Result};

/// Cap on restarts; also the default.
pub const KMEANS_MAX_RESTARTS: usize = 100;
/// Safety bound on Lloyd iterations within one restart. Fixpoint normally
/// lands far earlier; this only guards against repair-induced cycling.
const MAX_ITERATIONS: usize = 1000;

#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// Cluster index per point, values in `0..k`.
    pub assignment: Vec<usize>,
    /// Total squared distance from each point to its centroid.
    pub inertia: f64,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_centroid(point: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, row) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(point, row);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

/// k-means++ seeding: first centroid uniform, each next one drawn with
/// probability proportional to the squared distance from the chosen set.
fn plus_plus_init(points: &Array2<f64>, k: usize, rng: &mut impl Rng) -> Array2<f64> {
    let n = points.nrows();
    let dim = points.ncols();
    let mut centroids = Array2::<f64>::zeros((k, dim));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));

    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let chosen = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            // All remaining distances zero (duplicate points): uniform draw.
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(chosen));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), centroids.row(c)));
        }
    }
    centroids
}

fn lloyd(points: &Array2<f64>, mut centroids: Array2<f64>, k: usize) -> KMeansResult {
    let n = points.nrows();
    let dim = points.ncols();
    let mut assignment = vec![usize::MAX; n];

    for _ in 0..MAX_ITERATIONS {
        let mut next: Vec<usize> = Vec::with_capacity(n);
        for i in 0..n {
            next.push(nearest_centroid(points.row(i), &centroids).0);
        }

        // Repair empty clusters before accepting the assignment: move each
        // empty centroid onto the point farthest from its current centroid.
        let mut counts = vec![0usize; k];
        for &a in &next {
            counts[a] += 1;
        }
        let mut repaired = false;
        for (c, &count) in counts.iter().enumerate() {
            if count > 0 {
                continue;
            }
            let mut far_i = 0;
            let mut far_d = -1.0;
            for (i, &a) in next.iter().enumerate() {
                let d = sq_dist(points.row(i), centroids.row(a));
                if d > far_d {
                    far_d = d;
                    far_i = i;
                }
            }
            centroids.row_mut(c).assign(&points.row(far_i));
            repaired = true;
        }
        if repaired {
            continue;
        }

        if next == assignment {
            break;
        }
        assignment = next;

        let mut sums = Array2::<f64>::zeros((k, dim));
        for (i, &a) in assignment.iter().enumerate() {
            let mut row = sums.row_mut(a);
            row += &points.row(i);
        }
        for (c, &count) in counts.iter().enumerate() {
            let mut row = sums.row_mut(c);
            row /= count as f64;
        }
        centroids = sums;
    }

    let inertia = (0..n)
        .map(|i| nearest_centroid(points.row(i), &centroids).1)
        .sum();
    KMeansResult { assignment, inertia }
}

/// Clusters the rows of `points` into `k` groups. Deterministic in `seed`.
pub fn kmeans(points: &Array2<f64>, k: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    let n = points.nrows();
    if k == 0 {
        return Err(Error::config("kmeans needs k >= 1"));
    }
    if n < k {
        return Err(Error::config(format!(
            "kmeans needs at least k={k} points, got {n}"
        )));
    }
    let restarts = restarts.clamp(1, KMEANS_MAX_RESTARTS);

    let mut best: Option<KMeansResult> = None;
    for r in 0..restarts {
        let mut rng = stream(seed, StreamKind::KMeans, &[r as u64]);
        let init = plus_plus_init(points, k, &mut rng);
        let result = lloyd(points, init, k);
        let better = match &best {
            None => true,
            Some(b) => result.inertia < b.inertia,
        };
        if better {
            best = Some(result);
        }
    }
    Ok(best.expect("at least one restart ran"))
}
