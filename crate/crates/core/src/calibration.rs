//! Calibration measurements: expected calibration error with reliability
//! bins, and the simplex-membership check on retrieved demonstrations.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::EvalReport;
use crate::pool::{AnnotatedSet, Pool};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CalibrationError {
    #[error("no predictions to calibrate")]
    Empty,
    #[error("{confidences} confidences but {flags} correctness flags")]
    LengthMismatch { confidences: usize, flags: usize },
    #[error("confidence {0} outside [0, 1]")]
    OutOfRange(String),
    #[error("need at least one bin")]
    NoBins,
    #[error("simplex needs at least one demonstration")]
    NoDemos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin<F> {
    pub lo: F,
    pub hi: F,
    pub mean_confidence: F,
    pub accuracy: F,
    pub count: usize,
}

/// Equal-width reliability bins over `[0, 1]` and the resulting ECE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct ReliabilityBins<F: Scalar = f64> {
    pub n_bins: usize,
    pub bins: Vec<Bin<F>>,
    pub ece: F,
}

impl<F: Scalar> ReliabilityBins<F> {
    /// `bin,conf_lo,conf_hi,mean_conf,acc,count` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,conf_lo,conf_hi,mean_conf,acc,count\n");
        for (i, b) in self.bins.iter().enumerate() {
            let _ = writeln!(
                out,
                "{i},{},{},{},{},{}",
                b.lo, b.hi, b.mean_confidence, b.accuracy, b.count
            );
        }
        out
    }
}

/// Bin index for a confidence: bins are `(j/n, (j+1)/n]`, with 0 in the first.
fn bin_index<F: Scalar>(confidence: F, n_bins: usize) -> usize {
    let scaled = confidence.to_f64_lossy() * n_bins as f64;
    let idx = (scaled - 1e-12).ceil() as isize - 1;
    idx.clamp(0, n_bins as isize - 1) as usize
}

/// Expected calibration error: `Σ (count/N)·|accuracy − mean confidence|`.
pub fn ece<F: Scalar>(
    confidences: &[F],
    correct: &[bool],
    n_bins: usize,
) -> Result<ReliabilityBins<F>, CalibrationError> {
    if confidences.is_empty() {
        return Err(CalibrationError::Empty);
    }
    if confidences.len() != correct.len() {
        return Err(CalibrationError::LengthMismatch {
            confidences: confidences.len(),
            flags: correct.len(),
        });
    }
    if n_bins == 0 {
        return Err(CalibrationError::NoBins);
    }
    if let Some(c) = confidences
        .iter()
        .find(|c| !(**c >= F::zero() && **c <= F::one()))
    {
        return Err(CalibrationError::OutOfRange(c.to_string()));
    }

    let mut sums = vec![(F::zero(), 0usize, 0usize); n_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let slot = &mut sums[bin_index(c, n_bins)];
        slot.0 = slot.0 + c;
        slot.1 += 1;
        slot.2 += usize::from(ok);
    }
    let n = F::from_usize(confidences.len()).expect("count fits");
    let width = F::one() / F::from_usize(n_bins).expect("bins fit");
    let mut ece = F::zero();
    let bins = sums
        .into_iter()
        .enumerate()
        .map(|(j, (conf_sum, count, hits))| {
            let (mean_confidence, accuracy) = if count == 0 {
                (F::zero(), F::zero())
            } else {
                let c = F::from_usize(count).expect("count fits");
                (conf_sum / c, F::from_usize(hits).expect("count fits") / c)
            };
            if count > 0 {
                let weight = F::from_usize(count).expect("count fits") / n;
                ece = ece + weight * (accuracy - mean_confidence).abs();
            }
            Bin {
                lo: F::from_usize(j).expect("fits") * width,
                hi: if j + 1 == n_bins {
                    F::one()
                } else {
                    F::from_usize(j + 1).expect("fits") * width
                },
                mean_confidence,
                accuracy,
                count,
            }
        })
        .collect();
    Ok(ReliabilityBins { n_bins, bins, ece })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipReason {
    /// No retrieved demo carries the predicted label.
    NoMatchingDemos,
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Membership {
    Inside,
    Outside,
    Skipped(SkipReason),
}

const BARYCENTRIC_TOLERANCE: f64 = -1e-9;
const POINT_TOLERANCE: f64 = 1e-9;
const RANK_TOLERANCE: f64 = 1e-10;

/// Projects rows onto their top `d` principal components.
fn pca_project(rows: &[Vec<f64>], d: usize) -> DMatrix<f64> {
    let n = rows.len();
    let dim = rows[0].len();
    let mut m = DMatrix::from_fn(n, dim, |i, j| rows[i][j]);
    let mean = m.row_mean();
    for mut row in m.row_iter_mut() {
        row -= &mean;
    }
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    // singular values come unsorted from nalgebra; order them
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let basis = DMatrix::from_fn(dim, d, |r, c| v_t[(order[c], r)]);
    m * basis
}

/// 2D principal-component coordinates for display. Each axis is oriented so
/// its largest-magnitude coordinate is positive, which makes the output
/// independent of the SVD's sign choice. Missing axes are zero.
pub fn pca_2d<F: Scalar>(points: &[&[F]]) -> Vec<[f64; 2]> {
    if points.is_empty() {
        return Vec::new();
    }
    let rows: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().map(|x| x.to_f64_lossy()).collect())
        .collect();
    let d = 2.min(rows[0].len()).min(rows.len());
    let projected = pca_project(&rows, d);
    let mut out = vec![[0.0; 2]; rows.len()];
    for c in 0..d {
        let column = projected.column(c);
        let pivot = column
            .iter()
            .copied()
            .fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (r, v) in column.iter().enumerate() {
            // fold -0.0 into 0.0 so CSV output is stable
            out[r][c] = sign * v + 0.0;
        }
    }
    out
}

/// Barycentric coordinates of `x` in the simplex with vertices `vertices`
/// (one per column). `None` when the vertices are affinely dependent.
fn barycentric(vertices: &DMatrix<f64>, x: &DVector<f64>) -> Option<DVector<f64>> {
    let (d, r) = vertices.shape();
    let mut a = DMatrix::zeros(d + 1, r);
    a.view_mut((0, 0), (d, r)).copy_from(vertices);
    a.row_mut(d).fill(1.0);
    let mut b = DVector::zeros(d + 1);
    b.rows_mut(0, d).copy_from(x);
    b[d] = 1.0;
    let svd = a.svd(true, true);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    if max <= 0.0 || min / max < RANK_TOLERANCE || d + 1 != r {
        return None;
    }
    svd.solve(&b, 0.0).ok()
}

fn inside(lambda: &DVector<f64>) -> bool {
    lambda.iter().all(|&l| l >= BARYCENTRIC_TOLERANCE)
}

/// Whether `test` lies in the simplex spanned by `demos` after projecting
/// demos and test jointly onto `min(|demos| - 1, dim)` principal components.
pub fn simplex_membership<F: Scalar>(test: &[F], demos: &[&[F]]) -> Result<Membership, CalibrationError> {
    if demos.is_empty() {
        return Err(CalibrationError::NoDemos);
    }
    let to64 = |v: &[F]| v.iter().map(|x| x.to_f64_lossy()).collect::<Vec<f64>>();
    let test64 = to64(test);
    if demos.len() == 1 {
        let d2: f64 = test64
            .iter()
            .zip(to64(demos[0]))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        return Ok(if d2.sqrt() <= POINT_TOLERANCE {
            Membership::Inside
        } else {
            Membership::Outside
        });
    }

    let r = demos.len();
    let dim = test.len();
    let d = (r - 1).min(dim);
    let mut rows: Vec<Vec<f64>> = demos.iter().map(|v| to64(v)).collect();
    rows.push(test64);
    let projected = pca_project(&rows, d);
    let x = projected.row(r).transpose();

    if d == r - 1 {
        let vertices = projected.rows(0, r).transpose();
        return Ok(match barycentric(&vertices, &x) {
            None => Membership::Skipped(SkipReason::Degenerate),
            Some(l) if inside(&l) => Membership::Inside,
            Some(_) => Membership::Outside,
        });
    }

    // More vertices than an ambient simplex holds: the hull is the union of
    // its (d+1)-vertex simplices.
    let mut any_valid = false;
    for subset in combinations(r, d + 1) {
        let vertices = DMatrix::from_fn(d, d + 1, |i, j| projected[(subset[j], i)]);
        if let Some(l) = barycentric(&vertices, &x) {
            any_valid = true;
            if inside(&l) {
                return Ok(Membership::Inside);
            }
        }
    }
    Ok(if any_valid {
        Membership::Outside
    } else {
        Membership::Skipped(SkipReason::Degenerate)
    })
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut current, &mut out);
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimplexReport {
    pub inside_correct: usize,
    pub inside_wrong: usize,
    pub outside: usize,
    /// `inside_correct − inside_wrong`.
    pub net: i64,
    pub skipped: usize,
    pub skipped_by_reason: BTreeMap<SkipReason, usize>,
}

impl SimplexReport {
    pub fn add(&mut self, membership: Membership, correct: bool) {
        match membership {
            Membership::Inside if correct => self.inside_correct += 1,
            Membership::Inside => self.inside_wrong += 1,
            Membership::Outside => self.outside += 1,
            Membership::Skipped(reason) => {
                self.skipped += 1;
                *self.skipped_by_reason.entry(reason).or_insert(0) += 1;
            }
        }
        self.net = self.inside_correct as i64 - self.inside_wrong as i64;
    }
}

/// For each evaluated test instance, checks whether it falls inside the
/// simplex of its retrieved demos sharing the predicted label, and tallies
/// correct minus wrong predictions among those inside.
pub fn simplex_calibration_report<F: Scalar>(
    report: &EvalReport,
    annotation_pool: &Pool<F>,
    test_pool: &Pool<F>,
    annotated: &AnnotatedSet,
) -> SimplexReport {
    let mut out = SimplexReport::default();
    for record in &report.records {
        let Some(test_index) = test_pool.index_of(&record.id) else {
            out.add(Membership::Skipped(SkipReason::NoMatchingDemos), record.correct);
            continue;
        };
        let demos: Vec<&[F]> = record
            .retrieved
            .iter()
            .filter(|id| annotated.label_of(id) == Some(record.prediction.as_str()))
            .filter_map(|id| annotation_pool.index_of(id))
            .map(|i| annotation_pool.embedding(i))
            .collect();
        let membership = if demos.is_empty() {
            Membership::Skipped(SkipReason::NoMatchingDemos)
        } else {
            simplex_membership(test_pool.embedding(test_index), &demos)
                .unwrap_or(Membership::Skipped(SkipReason::NoMatchingDemos))
        };
        out.add(membership, record.correct);
    }
    out
}
