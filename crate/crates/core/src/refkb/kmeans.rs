use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Result of Lloyd's algorithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances from each point to its assigned centroid.
    pub inertia: f64,
    /// Inertia after every assignment step, starting with the seeding.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding. Once every remaining point has zero distance to a
/// chosen centroid, further centroids are drawn uniformly from unchosen points.
fn seed_centroids<P: AsRef<[f64]>>(points: &[P], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].as_ref().to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p.as_ref(), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen[pick] = true;
        let centroid = points[pick].as_ref().to_vec();
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p.as_ref(), &centroid));
        }
        centroids.push(centroid);
    }
    centroids
}

fn assign<P: AsRef<[f64]> + Sync>(points: &[P], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let nearest: Vec<(usize, f64)> = points.par_iter().map(|p| nearest(p.as_ref(), centroids)).collect();
    // summed in row order so the total does not depend on the thread count
    let inertia = nearest.iter().map(|(_, d)| d).sum();
    (nearest.into_iter().map(|(c, _)| c).collect(), inertia)
}

fn update<P: AsRef<[f64]>>(points: &[P], assignments: &[usize], centroids: &mut [Vec<f64>]) {
    let dim = centroids[0].len();
    let mut sums = vec![vec![0.0; dim]; centroids.len()];
    let mut counts = vec![0usize; centroids.len()];
    for (p, &c) in points.iter().zip(assignments) {
        counts[c] += 1;
        sums[c].iter_mut().zip(p.as_ref()).for_each(|(s, x)| *s += x);
    }
    for ((centroid, sum), count) in centroids.iter_mut().zip(sums).zip(counts) {
        // empty clusters keep their previous centroid
        if count > 0 {
            *centroid = sum.into_iter().map(|s| s / count as f64).collect();
        }
    }
}

/// Seeded k-means++ followed by Lloyd iterations until assignments stop
/// changing or `max_iters` update steps have run.
pub fn kmeans<P: AsRef<[f64]> + Sync>(points: &[P], k: usize, seed: u64, max_iters: usize) -> Result<ClusterModel> {
    let n = points.len();
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds {n} points")));
    }
    if max_iters == 0 {
        return Err(Error::invalid("max_iters must be at least 1"));
    }
    let dim = points[0].as_ref().len();
    if let Some(bad) = points.iter().find(|p| p.as_ref().len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.as_ref().len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(points, k, &mut rng);
    let (mut assignments, mut inertia) = assign(points, &centroids);
    let mut history = vec![inertia];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        update(points, &assignments, &mut centroids);
        let (next, next_inertia) = assign(points, &centroids);
        history.push(next_inertia);
        inertia = next_inertia;
        let unchanged = next == assignments;
        assignments = next;
        if unchanged {
            converged = true;
            break;
        }
    }
    Ok(ClusterModel {
        k,
        centroids,
        assignments,
        inertia,
        inertia_history: history,
        iterations,
        converged,
    })
}

/// Final inertia for each k, to help pick k by the elbow.
pub fn elbow_report<P: AsRef<[f64]> + Sync>(
    points: &[P],
    ks: &[usize],
    seed: u64,
    max_iters: usize,
) -> Result<Vec<(usize, f64)>> {
    ks.iter()
        .map(|&k| Ok((k, kmeans(points, k, seed, max_iters)?.inertia)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn random_points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn k1_centroid_is_the_mean() {
        let pts = random_points(50, 4, 1);
        let m = kmeans(&pts, 1, 0, 10).unwrap();
        for j in 0..4 {
            let mean = pts.iter().map(|p| p[j]).sum::<f64>() / 50.0;
            assert!((m.centroids[0][j] - mean).abs() < 1e-12);
        }
        let total: f64 = pts.iter().map(|p| sq_dist(p, &m.centroids[0])).sum();
        assert!((m.inertia - total).abs() < 1e-9);
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let pts = random_points(12, 3, 2);
        let m = kmeans(&pts, 12, 9, 5).unwrap();
        assert_eq!(m.inertia, 0.0);
        let mut seen = m.assignments.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 12);
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (label, center) in [(0usize, -10.0), (1, 10.0)] {
            for _ in 0..40 {
                pts.push((0..5).map(|_| center + noise.sample(&mut rng)).collect::<Vec<f64>>());
                labels.push(label);
            }
        }
        let m = kmeans(&pts, 2, 11, 50).unwrap();
        let flip = m.assignments[0] != labels[0];
        for (a, l) in m.assignments.iter().zip(&labels) {
            assert_eq!((*a == 1) ^ flip, *l == 1);
        }
    }

    #[test]
    fn invalid_k_rejected() {
        let pts = random_points(3, 2, 0);
        assert!(kmeans(&pts, 0, 0, 5).is_err());
        assert!(kmeans(&pts, 4, 0, 5).is_err());
        assert!(kmeans(&pts, 2, 0, 0).is_err());
    }

    #[test]
    fn duplicates_with_k_above_distinct_count() {
        let pts = vec![vec![1.0, 1.0]; 5];
        let m = kmeans(&pts, 3, 4, 10).unwrap();
        assert_eq!(m.inertia, 0.0);
    }

    #[test]
    fn deterministic_for_seed_and_consistent_inertia() {
        let pts = random_points(200, 6, 4);
        let a = kmeans(&pts, 5, 42, 100).unwrap();
        assert_eq!(a, kmeans(&pts, 5, 42, 100).unwrap());
        let recomputed: f64 = pts
            .iter()
            .zip(&a.assignments)
            .map(|(p, &c)| sq_dist(p, &a.centroids[c]))
            .sum();
        assert!((a.inertia - recomputed).abs() < 1e-6);
        assert!(a.assignments.iter().all(|&c| c < 5));
    }

    #[test]
    fn inertia_never_increases() {
        for seed in 0..10 {
            let pts = random_points(150, 4, 100 + seed);
            let m = kmeans(&pts, 6, seed, 100).unwrap();
            for w in m.inertia_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "seed {seed}: {:?}", m.inertia_history);
            }
        }
    }

    #[test]
    fn elbow_is_monotone_on_nested_blobs() {
        let pts = random_points(60, 2, 8);
        let report = elbow_report(&pts, &[1, 60], 0, 20).unwrap();
        assert!(report[0].1 > 0.0);
        assert_eq!(report[1].1, 0.0);
    }
}
