//! Gaussian-mixture benchmark pools for desk-scale trend checks.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::pool::{Example, Pool, PoolError, RngSeed, DEFAULT_SPLIT, TEST_SPLIT};
use crate::scalar::Scalar;

/// A mixture of isotropic Gaussians, one label per component. Centers sit
/// close enough that neighboring components overlap, so the boundary regions
/// are where annotations pay off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixtureSpec {
    pub clusters: usize,
    pub dim: usize,
    pub train: usize,
    pub test: usize,
    /// Distance of cluster centers from the origin.
    pub separation: f64,
    /// Per-coordinate standard deviation.
    pub spread: f64,
    pub seed: u64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            clusters: 4,
            dim: 16,
            train: 300,
            test: 256,
            separation: 3.0,
            spread: 1.0,
            seed: 0,
        }
    }
}

fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Draws the pool: `train` examples in the default split followed by `test`
/// examples in the test split. Labels are `c0`, `c1`, ...
pub fn gaussian_mixture<F: Scalar>(spec: &MixtureSpec) -> Result<Pool<F>, PoolError> {
    let mut rng = RngSeed(spec.seed).rng();
    let centers: Vec<Vec<f64>> = (0..spec.clusters)
        .map(|_| {
            unit_vector(&mut rng, spec.dim)
                .into_iter()
                .map(|x| x * spec.separation)
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, spec.spread).expect("finite spread");

    let total = spec.train + spec.test;
    let mut examples = Vec::with_capacity(total);
    for i in 0..total {
        let c = rng.random_range(0..spec.clusters);
        let offset: Vec<f64> = (0..spec.dim).map(|_| noise.sample(&mut rng)).collect();
        let embedding: Vec<F> = centers[c]
            .iter()
            .zip(&offset)
            .map(|(m, o)| F::from_f64_lossy(m + o))
            .collect();
        let split = if i < spec.train { "train" } else { "test" };
        examples.push(Example {
            id: format!("{split}-{i:04}"),
            text: format!("cluster {c} point {i}"),
            label: Some(format!("c{c}")),
            embedding,
        });
    }
    let splits = BTreeMap::from([
        (DEFAULT_SPLIT.to_string(), (0..spec.train).collect()),
        (TEST_SPLIT.to_string(), (spec.train..total).collect()),
    ]);
    Pool::with_splits(examples, splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_splits() {
        let pool: Pool<f32> = gaussian_mixture(&MixtureSpec::default()).unwrap();
        assert_eq!(pool.len(), 556);
        assert_eq!(pool.dim(), 16);
        assert_eq!(pool.split("train").unwrap().len(), 300);
        assert_eq!(pool.split("test").unwrap().len(), 256);
        assert!(pool.splits_disjoint("train", "test").unwrap());
        assert_eq!(pool.label_space(), vec!["c0", "c1", "c2", "c3"]);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let spec = MixtureSpec::default();
        let a: Pool<f64> = gaussian_mixture(&spec).unwrap();
        let b: Pool<f64> = gaussian_mixture(&spec).unwrap();
        assert_eq!(a, b);
    }
}
