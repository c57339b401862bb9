//! Greedy maximum coverage and its tier-weighted variant.
//!
//! The unweighted greedy marks elements covered once any picked set holds
//! them. The weighted greedy never removes elements: each time an element is
//! covered its tier goes up by one and its weight drops by a factor of `base`,
//! so overlapping regions keep a small residual value.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Debug;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::CoverSet;

/// A MaxCover instance over hard-example indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverInstance {
    pub universe: BTreeSet<usize>,
    pub sets: Vec<CoverSet>,
    pub budget: usize,
    /// Optional per-element uncertainty used to break ties between sets of
    /// equal gain (larger mass first).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncertainty: Option<BTreeMap<usize, f64>>,
}

impl CoverInstance {
    /// Builds an instance, dropping set members outside the universe.
    pub fn new(universe: BTreeSet<usize>, mut sets: Vec<CoverSet>, budget: usize) -> Self {
        for set in &mut sets {
            set.members.retain(|m| universe.contains(m));
        }
        Self {
            universe,
            sets,
            budget,
            uncertainty: None,
        }
    }

    pub fn with_uncertainty(mut self, uncertainty: BTreeMap<usize, f64>) -> Self {
        self.uncertainty = Some(uncertainty);
        self
    }

    fn mass<'a>(&self, members: impl Iterator<Item = &'a usize>) -> f64 {
        match &self.uncertainty {
            Some(u) => members.map(|m| u.get(m).copied().unwrap_or(0.0)).sum(),
            None => 0.0,
        }
    }
}

/// One greedy pick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pick<W> {
    pub set_index: usize,
    pub center: usize,
    pub gain: W,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverOutcome {
    pub picks: Vec<Pick<usize>>,
    pub covered: BTreeSet<usize>,
}

impl CoverOutcome {
    pub fn centers(&self) -> Vec<usize> {
        self.picks.iter().map(|p| p.center).collect()
    }
}

/// `(gain, mass, set position)`; larger gain, then larger mass, then the
/// lower center index wins.
fn better<W: PartialOrd>(
    a: (&W, f64, usize),
    b: (&W, f64, usize),
    sets: &[CoverSet],
) -> bool {
    match a.0.partial_cmp(b.0) {
        Some(std::cmp::Ordering::Greater) => true,
        Some(std::cmp::Ordering::Less) | None => false,
        Some(std::cmp::Ordering::Equal) => match a.1.partial_cmp(&b.1) {
            Some(std::cmp::Ordering::Greater) => true,
            Some(std::cmp::Ordering::Less) => false,
            _ => sets[a.2].center < sets[b.2].center,
        },
    }
}

/// Greedy MaxCover.
///
/// Stops when the budget is spent, every universe element is covered, or the
/// best remaining set adds nothing new.
pub fn greedy_maxcover(instance: &CoverInstance) -> CoverOutcome {
    let mut covered = BTreeSet::new();
    let mut used = vec![false; instance.sets.len()];
    let mut picks = Vec::new();

    while picks.len() < instance.budget && covered.len() < instance.universe.len() {
        let mut best: Option<(usize, f64, usize)> = None;
        for (i, set) in instance.sets.iter().enumerate() {
            if used[i] {
                continue;
            }
            let fresh = || set.members.iter().filter(|m| !covered.contains(*m));
            let gain = fresh().count();
            let mass = instance.mass(fresh());
            let candidate = (gain, mass, i);
            if best.is_none_or(|b| {
                better((&candidate.0, candidate.1, i), (&b.0, b.1, b.2), &instance.sets)
            }) {
                best = Some(candidate);
            }
        }
        let Some((gain, _, i)) = best else { break };
        if gain == 0 {
            break;
        }
        used[i] = true;
        covered.extend(instance.sets[i].members.iter().copied());
        picks.push(Pick {
            set_index: i,
            center: instance.sets[i].center,
            gain,
        });
    }
    CoverOutcome { picks, covered }
}

/// Numeric type for tier weights `base^(-tier)`.
///
/// Implemented for `f32`, `f64` and [`BigRational`]; the rational version is
/// exact and is what the step-optimality checks use.
pub trait TierWeight: Clone + PartialOrd + Debug + Zero + One {
    fn from_base(base: u64) -> Self;
    /// `base^(-tier)`.
    fn tier_weight(base: &Self, tier: u32) -> Self;
    fn approx_f64(&self) -> f64;
}

impl TierWeight for f64 {
    fn from_base(base: u64) -> Self {
        base as f64
    }
    fn tier_weight(base: &Self, tier: u32) -> Self {
        base.powi(-(tier as i32))
    }
    fn approx_f64(&self) -> f64 {
        *self
    }
}

impl TierWeight for f32 {
    fn from_base(base: u64) -> Self {
        base as f32
    }
    fn tier_weight(base: &Self, tier: u32) -> Self {
        base.powi(-(tier as i32))
    }
    fn approx_f64(&self) -> f64 {
        *self as f64
    }
}

impl TierWeight for BigRational {
    fn from_base(base: u64) -> Self {
        BigRational::from_integer(BigInt::from(base))
    }
    fn tier_weight(base: &Self, tier: u32) -> Self {
        num_traits::pow(base.clone(), tier as usize).recip()
    }
    fn approx_f64(&self) -> f64 {
        use num_traits::ToPrimitive;
        self.to_f64().unwrap_or(0.0)
    }
}

/// Per-element coverage tiers. Tier 0 has weight 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTiers<W = f64> {
    tiers: BTreeMap<usize, u32>,
    base: W,
}

pub const DEFAULT_WEIGHT_BASE: u64 = 10;

impl<W: TierWeight> WeightTiers<W> {
    pub fn new(base: W) -> Self {
        Self {
            tiers: BTreeMap::new(),
            base,
        }
    }

    pub fn with_base(base: u64) -> Self {
        Self::new(W::from_base(base))
    }

    pub fn tier(&self, element: usize) -> u32 {
        self.tiers.get(&element).copied().unwrap_or(0)
    }

    pub fn weight(&self, element: usize) -> W {
        W::tier_weight(&self.base, self.tier(element))
    }

    pub fn bump(&mut self, element: usize) {
        *self.tiers.entry(element).or_insert(0) += 1;
    }

    pub fn reset(&mut self) {
        self.tiers.clear();
    }

    pub fn base(&self) -> &W {
        &self.base
    }

    /// Sum of current weights over `members`.
    pub fn score<'a>(&self, members: impl IntoIterator<Item = &'a usize>) -> W {
        members
            .into_iter()
            .fold(W::zero(), |acc, &m| acc + self.weight(m))
    }

    pub fn snapshot(&self) -> &BTreeMap<usize, u32> {
        &self.tiers
    }
}

impl<W: TierWeight> Default for WeightTiers<W> {
    fn default() -> Self {
        Self::with_base(DEFAULT_WEIGHT_BASE)
    }
}

/// Tier-weighted greedy: makes exactly `picks` picks (fewer only when no
/// unused non-empty set remains), bumping the tier of every member after each
/// pick.
pub fn greedy_weighted_maxcover<W: TierWeight>(
    instance: &CoverInstance,
    tiers: &mut WeightTiers<W>,
    picks: usize,
) -> Vec<Pick<W>> {
    let mut used = vec![false; instance.sets.len()];
    let mut out = Vec::with_capacity(picks);
    while out.len() < picks {
        let mut best: Option<(W, f64, usize)> = None;
        for (i, set) in instance.sets.iter().enumerate() {
            if used[i] || set.members.is_empty() {
                continue;
            }
            let score = tiers.score(&set.members);
            let mass = instance.mass(set.members.iter());
            let replace = match &best {
                None => true,
                Some((bs, bm, bi)) => better((&score, mass, i), (bs, *bm, *bi), &instance.sets),
            };
            if replace {
                best = Some((score, mass, i));
            }
        }
        let Some((gain, _, i)) = best else { break };
        used[i] = true;
        for &m in &instance.sets[i].members {
            tiers.bump(m);
        }
        out.push(Pick {
            set_index: i,
            center: instance.sets[i].center,
            gain,
        });
    }
    out
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BruteForceError {
    #[error("{0} sets exceeds the exhaustive-search limit of {MAX_BRUTE_FORCE_SETS}")]
    TooLarge(usize),
    #[error("universe of {0} elements exceeds 128")]
    UniverseTooLarge(usize),
}

pub const MAX_BRUTE_FORCE_SETS: usize = 20;

/// Exact optimum of the MaxCover program by enumerating every subset of
/// `min(budget, |sets|)` sets.
pub fn brute_force_maxcover(instance: &CoverInstance) -> Result<usize, BruteForceError> {
    let n = instance.sets.len();
    if n > MAX_BRUTE_FORCE_SETS {
        return Err(BruteForceError::TooLarge(n));
    }
    let k = instance.budget.min(n);
    if instance.universe.len() > 128 {
        return Err(BruteForceError::UniverseTooLarge(instance.universe.len()));
    }
    let position: BTreeMap<usize, usize> = instance
        .universe
        .iter()
        .enumerate()
        .map(|(i, &m)| (m, i))
        .collect();
    let masks: Vec<u128> = instance
        .sets
        .iter()
        .map(|s| {
            s.members
                .iter()
                .filter_map(|m| position.get(m))
                .fold(0u128, |acc, &p| acc | (1u128 << p))
        })
        .collect();

    let mut best = 0;
    for subset in 0u32..(1u32 << n) {
        if subset.count_ones() as usize != k {
            continue;
        }
        let union = (0..n)
            .filter(|i| subset & (1 << i) != 0)
            .fold(0u128, |acc, i| acc | masks[i]);
        best = best.max(union.count_ones() as usize);
    }
    Ok(best)
}
