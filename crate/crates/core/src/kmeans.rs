//! Seeded k-means (k-means++ seeding, Lloyd iterations) and the
//! nearest-to-centroid selections built on it.

use rand::Rng;
use thiserror::Error;

use crate::pool::{AnnotatedSet, Pool, Provenance, RngSeed};
use crate::scalar::{cmp_f, squared_distance, Scalar};

pub const MAX_ITERATIONS: usize = 300;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ClusterError {
    #[error("cannot form {clusters} clusters from {points} points")]
    TooManyClusters { clusters: usize, points: usize },
    #[error("subsample of {subsample} exceeds pool size {pool}")]
    SubsampleTooLarge { subsample: usize, pool: usize },
    #[error("example `{0}` has no ground-truth label")]
    MissingLabel(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult<F> {
    pub centroids: Vec<Vec<F>>,
    pub assignment: Vec<usize>,
    pub iterations: usize,
}

/// Clusters `points` into `k` groups.
///
/// Deterministic for a fixed seed. An empty cluster is re-seeded with the point
/// lying farthest from its current centroid.
pub fn kmeans<F: Scalar>(
    points: &[&[F]],
    k: usize,
    seed: RngSeed,
) -> Result<KMeansResult<F>, ClusterError> {
    let n = points.len();
    if k > n {
        return Err(ClusterError::TooManyClusters {
            clusters: k,
            points: n,
        });
    }
    if k == 0 {
        return Ok(KMeansResult {
            centroids: Vec::new(),
            assignment: vec![0; n],
            iterations: 0,
        });
    }
    let dim = points[0].len();
    let mut rng = seed.rng();
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut assignment = vec![usize::MAX; n];
    let mut iterations = 0;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = nearest(p, &centroids).0;
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }

        let mut sums = vec![vec![F::zero(); dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignment) {
            counts[c] += 1;
            for (s, &v) in sums[c].iter_mut().zip(p.iter()) {
                *s = *s + v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let denom = F::from_usize(counts[c]).unwrap_or_else(F::one);
            centroids[c] = sums[c].iter().map(|&s| s / denom).collect();
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            // farthest point from its own centroid; lower index wins ties
            let far = (0..n)
                .max_by(|&a, &b| {
                    let da = squared_distance(points[a], &centroids[assignment[a]]);
                    let db = squared_distance(points[b], &centroids[assignment[b]]);
                    cmp_f(da, db).then(b.cmp(&a))
                })
                .unwrap_or(0);
            centroids[c] = points[far].to_vec();
            counts[assignment[far]] -= 1;
            assignment[far] = c;
            counts[c] = 1;
        }
    }

    Ok(KMeansResult {
        centroids,
        assignment,
        iterations,
    })
}

fn plus_plus_init<F: Scalar, R: Rng>(points: &[&[F]], k: usize, rng: &mut R) -> Vec<Vec<F>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].to_vec()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, points[first]).to_f64_lossy())
        .collect();

    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if target < w {
                    break;
                }
                target -= w;
            }
            pick.unwrap_or(0)
        } else {
            // every remaining point coincides with a chosen centroid
            (0..n).find(|&i| !chosen[i]).unwrap_or(0)
        };
        chosen[next] = true;
        centroids.push(points[next].to_vec());
        for (i, p) in points.iter().enumerate() {
            let d = squared_distance(p, points[next]).to_f64_lossy();
            if d < d2[i] {
                d2[i] = d;
            }
        }
        d2[next] = 0.0;
    }
    centroids
}

fn nearest<F: Scalar>(p: &[F], centroids: &[Vec<F>]) -> (usize, F) {
    let mut best = (0, F::infinity());
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_distance(p, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// For each centroid in order, the closest not-yet-taken point. Ties go to
/// the lower point index. Returned positions index into `points`.
pub fn nearest_distinct<F: Scalar>(points: &[&[F]], centroids: &[Vec<F>]) -> Vec<usize> {
    let mut taken = vec![false; points.len()];
    let mut picks = Vec::with_capacity(centroids.len());
    for centroid in centroids {
        let best = (0..points.len())
            .filter(|&i| !taken[i])
            .min_by(|&a, &b| {
                cmp_f(
                    squared_distance(points[a], centroid),
                    squared_distance(points[b], centroid),
                )
                .then(a.cmp(&b))
            });
        if let Some(i) = best {
            taken[i] = true;
            picks.push(i);
        }
    }
    picks
}

/// Seeded random subsample clustered into `clusters` groups; returns the pool
/// indices nearest each centroid, sorted ascending.
pub fn prepare_candidate_pool<F: Scalar>(
    pool: &Pool<F>,
    subsample: usize,
    clusters: usize,
    seed: RngSeed,
) -> Result<Vec<usize>, ClusterError> {
    if subsample > pool.len() {
        return Err(ClusterError::SubsampleTooLarge {
            subsample,
            pool: pool.len(),
        });
    }
    if clusters > subsample {
        return Err(ClusterError::TooManyClusters {
            clusters,
            points: subsample,
        });
    }
    let mut rng = seed.derive(1).rng();
    let mut sample = rand::seq::index::sample(&mut rng, pool.len(), subsample).into_vec();
    sample.sort_unstable();
    let points: Vec<&[F]> = sample.iter().map(|&i| pool.embedding(i)).collect();
    let result = kmeans(&points, clusters, seed.derive(2))?;
    let mut picked: Vec<usize> = nearest_distinct(&points, &result.centroids)
        .into_iter()
        .map(|pos| sample[pos])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Pool indices of the `size` examples nearest the k-means centroids of the
/// whole pool, in centroid order.
pub fn kmeans_representatives<F: Scalar>(
    pool: &Pool<F>,
    size: usize,
    seed: RngSeed,
) -> Result<Vec<usize>, ClusterError> {
    if size > pool.len() {
        return Err(ClusterError::TooManyClusters {
            clusters: size,
            points: pool.len(),
        });
    }
    let points: Vec<&[F]> = (0..pool.len()).map(|i| pool.embedding(i)).collect();
    let result = kmeans(&points, size, seed.derive(3))?;
    Ok(nearest_distinct(&points, &result.centroids))
}

/// Initial annotated set built from k-means representatives, labeled from
/// ground truth.
pub fn init_pool_kmeans<F: Scalar>(
    pool: &Pool<F>,
    size: usize,
    seed: RngSeed,
) -> Result<AnnotatedSet, ClusterError> {
    let mut set = AnnotatedSet::new();
    for i in kmeans_representatives(pool, size, seed)? {
        let ex = pool.example(i);
        let label = ex
            .label
            .clone()
            .filter(|l| !l.is_empty())
            .ok_or_else(|| ClusterError::MissingLabel(ex.id.clone()))?;
        set.push(ex.id.clone(), label, Provenance::GroundTruth)
            .map_err(|_| ClusterError::MissingLabel(ex.id.clone()))?;
    }
    Ok(set)
}
