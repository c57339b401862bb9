//! Semantic similarity graphs and the egonet cover sets derived from them.
//!
//! Edges are directed: `u -> v` means `v` is among the nearest neighbors of
//! `u`. A hard node's egonet collects the *hard* nodes pointing at it, so a
//! node that many hard examples would retrieve gets a large cover set.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pool::Pool;
use crate::scalar::{cmp_f, dot, norm, portion, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("m must be at least 1")]
    ZeroNeighbors,
    #[error("target average degree {target} outside [1, {max}]")]
    TargetDegree { target: usize, max: usize },
    #[error("heuristic rule denominator is zero")]
    ZeroDenominator,
    #[error("theta values must lie in (0, 1], got theta={theta}, theta_hat={theta_hat}")]
    Theta { theta: f64, theta_hat: f64 },
    #[error("hops must be 1 or 2, got {0}")]
    Hops(u8),
}

/// Cosine similarity in `[-1, 1]`. Inputs are not re-normalized.
pub fn cosine_similarity<F: Scalar>(a: &[F], b: &[F]) -> Result<F, GraphError> {
    if a.len() != b.len() {
        return Err(GraphError::LengthMismatch(a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == F::zero() || nb == F::zero() {
        return Err(GraphError::ZeroNorm);
    }
    let c = dot(a, b) / (na * nb);
    Ok(c.max(-F::one()).min(F::one()))
}

/// Cosine similarity for vectors already known to be valid (pool members).
pub(crate) fn cosine_unchecked<F: Scalar>(a: &[F], b: &[F]) -> F {
    let c = dot(a, b) / (norm(a) * norm(b));
    c.max(-F::one()).min(F::one())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum GraphKind {
    /// Each node points to its `m` most similar nodes.
    Mnn { m: usize },
    /// Every pair with similarity at least `delta` is connected.
    Delta { delta: f64, target_avg_degree: usize },
}

/// Directed neighbor structure over a pool; immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct SemanticGraph<F: Scalar = f32> {
    n: usize,
    out_neighbors: Vec<Vec<(usize, F)>>,
    kind: GraphKind,
}

impl<F: Scalar> SemanticGraph<F> {
    /// Builds a graph from explicit adjacency lists. Lists are re-sorted by
    /// descending similarity (ties by index) and self-loops are dropped.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize, F)>, kind: GraphKind) -> Self {
        let mut out_neighbors = vec![Vec::new(); n];
        for (u, v, s) in edges {
            if u != v && u < n && v < n && !out_neighbors[u].iter().any(|&(w, _)| w == v) {
                out_neighbors[u].push((v, s));
            }
        }
        for list in &mut out_neighbors {
            sort_desc(list);
        }
        Self {
            n,
            out_neighbors,
            kind,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    pub fn out_neighbors(&self, node: usize) -> &[(usize, F)] {
        &self.out_neighbors[node]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.out_neighbors[u].iter().any(|&(w, _)| w == v)
    }

    pub fn edge_count(&self) -> usize {
        self.out_neighbors.iter().map(Vec::len).sum()
    }

    pub fn mean_out_degree(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.edge_count() as f64 / self.n as f64
        }
    }

    /// For each node, the nodes with an edge pointing at it, ascending.
    pub fn in_neighbors(&self) -> Vec<Vec<usize>> {
        let mut incoming = vec![Vec::new(); self.n];
        for (u, list) in self.out_neighbors.iter().enumerate() {
            for &(v, _) in list {
                incoming[v].push(u);
            }
        }
        incoming
    }

    /// `{kind, params, edges: [[u, v, sim], ...]}` adjacency dump.
    pub fn to_json(&self) -> serde_json::Value {
        let (kind, params) = match self.kind {
            GraphKind::Mnn { m } => ("mnn", serde_json::json!({ "m": m })),
            GraphKind::Delta {
                delta,
                target_avg_degree,
            } => (
                "delta",
                serde_json::json!({ "delta": delta, "target_avg_degree": target_avg_degree }),
            ),
        };
        let edges: Vec<serde_json::Value> = self
            .out_neighbors
            .iter()
            .enumerate()
            .flat_map(|(u, list)| {
                list.iter()
                    .map(move |&(v, s)| serde_json::json!([u, v, s.to_f64_lossy()]))
            })
            .collect();
        serde_json::json!({ "kind": kind, "params": params, "n": self.n, "edges": edges })
    }
}

fn sort_desc<F: Scalar>(list: &mut [(usize, F)]) {
    list.sort_by(|a, b| cmp_f(b.1, a.1).then(a.0.cmp(&b.0)));
}

fn similarity_row<F: Scalar>(pool: &Pool<F>, u: usize) -> Vec<(usize, F)> {
    (0..pool.len())
        .filter(|&v| v != u)
        .map(|v| (v, cosine_unchecked(pool.embedding(u), pool.embedding(v))))
        .collect()
}

/// Directed m-nearest-neighbor graph under cosine similarity.
pub fn build_mnn_graph<F: Scalar>(pool: &Pool<F>, m: usize) -> Result<SemanticGraph<F>, GraphError> {
    if m == 0 {
        return Err(GraphError::ZeroNeighbors);
    }
    let out_neighbors = (0..pool.len())
        .into_par_iter()
        .map(|u| {
            let mut row = similarity_row(pool, u);
            sort_desc(&mut row);
            row.truncate(m);
            row
        })
        .collect();
    Ok(SemanticGraph {
        n: pool.len(),
        out_neighbors,
        kind: GraphKind::Mnn { m },
    })
}

/// Threshold graph whose `delta` makes the mean out-degree as large as
/// possible without exceeding `target_avg_degree`.
pub fn build_delta_graph<F: Scalar>(
    pool: &Pool<F>,
    target_avg_degree: usize,
) -> Result<SemanticGraph<F>, GraphError> {
    let n = pool.len();
    if target_avg_degree < 1 || target_avg_degree + 1 > n {
        return Err(GraphError::TargetDegree {
            target: target_avg_degree,
            max: n.saturating_sub(1),
        });
    }
    let rows: Vec<Vec<(usize, F)>> = (0..n)
        .into_par_iter()
        .map(|u| {
            let mut row = similarity_row(pool, u);
            sort_desc(&mut row);
            row
        })
        .collect();

    let mut sims: Vec<F> = rows.iter().flatten().map(|&(_, s)| s).collect();
    sims.sort_by(|a, b| cmp_f(*b, *a));
    let max_edges = target_avg_degree * n;

    // Walk distinct thresholds from high to low; keep the lowest one whose
    // edge count stays within the target.
    let mut delta = None;
    let mut i = 0;
    while i < sims.len() {
        let value = sims[i];
        let mut j = i;
        while j < sims.len() && sims[j] == value {
            j += 1;
        }
        if j > max_edges {
            break;
        }
        delta = Some(value);
        i = j;
    }
    let delta = match delta {
        Some(d) => d,
        None => {
            log::warn!(
                "delta graph: no threshold keeps mean degree <= {target_avg_degree}; \
                 similarities are degenerate, using the maximum similarity"
            );
            sims[0]
        }
    };

    let out_neighbors = rows
        .into_iter()
        .map(|row| row.into_iter().filter(|&(_, s)| s >= delta).collect())
        .collect();
    Ok(SemanticGraph {
        n,
        out_neighbors,
        kind: GraphKind::Delta {
            delta: delta.to_f64_lossy(),
            target_avg_degree,
        },
    })
}

/// Hop depth of a cover set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Hops {
    One,
    Two,
}

impl TryFrom<u8> for Hops {
    type Error = GraphError;
    fn try_from(v: u8) -> Result<Self, GraphError> {
        match v {
            1 => Ok(Hops::One),
            2 => Ok(Hops::Two),
            other => Err(GraphError::Hops(other)),
        }
    }
}

impl From<Hops> for u8 {
    fn from(h: Hops) -> u8 {
        match h {
            Hops::One => 1,
            Hops::Two => 2,
        }
    }
}

/// Candidate set for MaxCover, keyed by its center node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverSet {
    pub center: usize,
    pub members: BTreeSet<usize>,
    pub hops: Hops,
}

/// One cover set per hard node, in ascending center order.
///
/// The 1-hop set of `v` holds the hard nodes `u` with an edge `u -> v`. The
/// 2-hop set adds the 1-hop sets of those members and then drops `v` itself.
pub fn build_cover_sets<F: Scalar>(
    graph: &SemanticGraph<F>,
    hard: &BTreeSet<usize>,
    hops: Hops,
) -> Vec<CoverSet> {
    let incoming = graph.in_neighbors();
    let ego = |v: usize| -> BTreeSet<usize> {
        incoming[v].iter().copied().filter(|u| hard.contains(u)).collect()
    };
    hard.iter()
        .filter(|&&v| v < graph.len())
        .map(|&v| {
            let one_hop = ego(v);
            let members = match hops {
                Hops::One => one_hop,
                Hops::Two => {
                    let mut all = one_hop.clone();
                    for &u in &one_hop {
                        all.extend(ego(u));
                    }
                    all.remove(&v);
                    all
                }
            };
            CoverSet {
                center: v,
                members,
                hops,
            }
        })
        .collect()
}

/// Bounds on `m` (1-hop) or on `m²` (2-hop) from the iteration/coverage rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MRange {
    pub hops: Hops,
    pub lower: f64,
    pub upper: f64,
    pub n_theta: usize,
    pub n_theta_hat: usize,
}

impl MRange {
    /// Smallest integer `m` satisfying the lower bound.
    pub fn smallest_m(&self) -> usize {
        match self.hops {
            Hops::One => ceil_tol(self.lower),
            Hops::Two => {
                let mut m = ceil_tol(self.lower.sqrt());
                while ((m * m) as f64) < self.lower - 1e-9 {
                    m += 1;
                }
                m
            }
        }
    }

    /// Every integer `m` inside the bounds.
    pub fn integer_candidates(&self) -> Vec<usize> {
        let inside = |m: usize| {
            let v = match self.hops {
                Hops::One => m as f64,
                Hops::Two => (m * m) as f64,
            };
            v >= self.lower - 1e-9 && v <= self.upper + 1e-9
        };
        let hi = match self.hops {
            Hops::One => self.upper.floor() as usize + 1,
            Hops::Two => self.upper.sqrt().floor() as usize + 1,
        };
        (1..=hi).filter(|&m| inside(m)).collect()
    }
}

fn ceil_tol(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() <= 1e-9 {
        r.max(0.0) as usize
    } else {
        x.ceil().max(0.0) as usize
    }
}

/// Heuristic range for the neighbor count `m`.
///
/// With `N_θ = ⌊θN⌋` and `N_θ̂ = ⌊θ̂ N_θ⌋`, 1-hop sets need
/// `T̂·N_θ̂/(θB) ≤ m ≤ T̂·N_θ/(θB)`; 2-hop sets bound `m²` with `θ²`.
pub fn heuristic_m_range(
    budget: usize,
    max_iterations: usize,
    theta: f64,
    theta_hat: f64,
    pool_size: usize,
    hops: Hops,
) -> Result<MRange, GraphError> {
    if !(theta > 0.0 && theta <= 1.0 && theta_hat > 0.0 && theta_hat <= 1.0) {
        return Err(GraphError::Theta { theta, theta_hat });
    }
    if budget == 0 || max_iterations == 0 || pool_size == 0 {
        return Err(GraphError::ZeroDenominator);
    }
    let n_theta = portion(theta, pool_size);
    let n_theta_hat = portion(theta_hat, n_theta);
    let theta_pow = match hops {
        Hops::One => theta,
        Hops::Two => theta * theta,
    };
    let denom = theta_pow * budget as f64;
    let t = max_iterations as f64;
    Ok(MRange {
        hops,
        lower: t * n_theta_hat as f64 / denom,
        upper: t * n_theta as f64 / denom,
        n_theta,
        n_theta_hat,
    })
}
