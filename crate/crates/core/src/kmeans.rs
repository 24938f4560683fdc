//! Lloyd's k-means with k-means++ seeding and independent restarts.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GckmError, Result};
use crate::exec::{self, Exec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iterations: usize,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansConfig { k, restarts: 20, max_iterations: 300, seed }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
}

/// Best of `restarts` runs by inertia; restarts execute in parallel and each
/// derives its own generator from `seed`, so the result does not depend on
/// the worker count.
pub fn kmeans(x: ArrayView2<'_, f64>, cfg: &KMeansConfig, exec: Exec) -> Result<KMeansResult> {
    let n = x.nrows();
    if cfg.k == 0 || cfg.k > n {
        return Err(GckmError::config("k", format!("need 1 <= k <= {n}, got {}", cfg.k)));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(GckmError::NonFinite("k-means input".into()));
    }
    if cfg.k == n {
        // one cluster per point, even when points coincide
        return Ok(KMeansResult { assignments: (0..n).collect(), centroids: x.to_owned(), inertia: 0.0 });
    }
    let runs = exec::map_indices(exec, cfg.restarts.max(1), |r| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(r as u64);
        single_run(x, cfg.k, cfg.max_iterations, &mut rng)
    });
    let mut best = 0;
    for (i, run) in runs.iter().enumerate() {
        if run.inertia < runs[best].inertia {
            best = i;
        }
    }
    Ok(runs.into_iter().nth(best).expect("at least one restart"))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn seed_plus_plus(x: ArrayView2<'_, f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (n, d) = x.dim();
    let rows: Vec<Vec<f64>> = x.outer_iter().map(|r| r.to_vec()).collect();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut dist: Vec<f64> = rows.iter().map(|r| sq_dist(r, &rows[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            if dist[pick] == 0.0 {
                // rounding pushed us past the end: take the last positive weight
                pick = dist.iter().rposition(|&w| w > 0.0).expect("positive total");
            }
            pick
        } else {
            // every point coincides with a centre; fall back to an unused index
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, r) in rows.iter().enumerate() {
            dist[i] = dist[i].min(sq_dist(r, &rows[next]));
        }
    }
    let mut c = Array2::zeros((k, d));
    for (j, &i) in chosen.iter().enumerate() {
        c.row_mut(j).assign(&x.row(i));
    }
    c
}

fn single_run(x: ArrayView2<'_, f64>, k: usize, max_iterations: usize, rng: &mut ChaCha8Rng) -> KMeansResult {
    let (n, d) = x.dim();
    let mut centroids = seed_plus_plus(x, k, rng);
    let mut assignments = vec![usize::MAX; n];
    for _ in 0..max_iterations.max(1) {
        let mut changed = false;
        for (i, row) in x.outer_iter().enumerate() {
            let row = row.to_vec();
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centroids.outer_iter().enumerate() {
                let dd = sq_dist(&row, c.as_slice().expect("contiguous"));
                if dd < best_d {
                    best_d = dd;
                    best = j;
                }
            }
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, row) in x.outer_iter().enumerate() {
            sums.row_mut(assignments[i]).scaled_add(1.0, &row);
            counts[assignments[i]] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids.row_mut(j).assign(&(&sums.row(j) / counts[j] as f64));
            } else {
                // re-seed an empty cluster at the point farthest from its centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(&x.row(a).to_vec(), centroids.row(assignments[a]).as_slice().unwrap());
                        let db = sq_dist(&x.row(b).to_vec(), centroids.row(assignments[b]).as_slice().unwrap());
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("n >= 1");
                centroids.row_mut(j).assign(&x.row(far));
            }
        }
    }
    let inertia = x
        .outer_iter()
        .zip(&assignments)
        .map(|(row, &a)| sq_dist(&row.to_vec(), centroids.row(a).as_slice().unwrap()))
        .sum();
    KMeansResult { assignments, centroids, inertia }
}
