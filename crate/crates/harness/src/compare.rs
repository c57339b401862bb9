//! `compare`: align summaries by budget step and report Δ-gain.
//!
//! The first summary is the reference. For each budget step and each other
//! summary, Δ-gain is the best strategy mean in that summary minus the best
//! strategy mean in the reference.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::run::{RunError, Summary};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub budget: usize,
    pub source: String,
    pub strategy: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaRow {
    pub budget: usize,
    pub source: String,
    pub reference: String,
    pub best: String,
    pub reference_best: String,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub budgets: Vec<usize>,
    pub rows: Vec<CompareRow>,
    pub deltas: Vec<DeltaRow>,
}

fn source_name(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("summary");
    match path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()) {
        Some(dir) if stem == "summary" => dir.to_string(),
        _ => stem.to_string(),
    }
}

fn best_of(summary: &Summary, budget: usize) -> Option<(&str, f64)> {
    summary
        .cells
        .iter()
        .filter(|c| c.budget == budget && c.mean.is_finite())
        .fold(None, |best: Option<(&str, f64)>, c| match best {
            Some((_, m)) if m >= c.mean => best,
            _ => Some((c.strategy.as_str(), c.mean)),
        })
}

pub fn compare(summaries: &[(String, Summary)]) -> Result<Comparison, RunError> {
    let Some((ref_name, reference)) = summaries.first() else {
        return Err(RunError::Setup("compare needs at least one summary".into()));
    };
    for (name, s) in &summaries[1..] {
        if s.budget_schedule != reference.budget_schedule {
            return Err(RunError::Setup(format!(
                "budget steps differ: {ref_name} has {:?}, {name} has {:?}",
                reference.budget_schedule, s.budget_schedule
            )));
        }
    }
    let budgets = reference.budget_schedule.clone();
    let mut rows = Vec::new();
    for &budget in &budgets {
        for (name, s) in summaries {
            for c in s.cells.iter().filter(|c| c.budget == budget) {
                rows.push(CompareRow {
                    budget,
                    source: name.clone(),
                    strategy: c.strategy.clone(),
                    mean: c.mean,
                    std: c.std,
                });
            }
        }
    }
    let mut deltas = Vec::new();
    for &budget in &budgets {
        let Some((ref_best, ref_mean)) = best_of(reference, budget) else { continue };
        for (name, s) in &summaries[1..] {
            if let Some((best, mean)) = best_of(s, budget) {
                deltas.push(DeltaRow {
                    budget,
                    source: name.clone(),
                    reference: ref_name.clone(),
                    best: best.to_string(),
                    reference_best: ref_best.to_string(),
                    delta: mean - ref_mean,
                });
            }
        }
    }
    Ok(Comparison { budgets, rows, deltas })
}

pub fn compare_files(paths: &[PathBuf]) -> Result<Comparison, RunError> {
    let mut loaded = Vec::with_capacity(paths.len());
    for (i, path) in paths.iter().enumerate() {
        let mut name = source_name(path);
        if loaded.iter().any(|(n, _): &(String, Summary)| *n == name) {
            name = format!("{name}#{i}");
        }
        loaded.push((name, Summary::load(path)?));
    }
    compare(&loaded)
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("budget,source,strategy,mean,std\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.budget, r.source, r.strategy, r.mean, r.std);
        }
        for d in &self.deltas {
            let _ = writeln!(out, "{},{},delta-gain vs {},{},", d.budget, d.source, d.reference, d.delta);
        }
        out
    }

    /// Plain-text table for the terminal.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>7}  {:<20} {:<16} {:>8} {:>8}", "budget", "source", "strategy", "mean", "std");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>7}  {:<20} {:<16} {:>8.4} {:>8.4}",
                r.budget, r.source, r.strategy, r.mean, r.std
            );
        }
        for d in &self.deltas {
            let _ = writeln!(
                out,
                "{:>7}  Δ-gain {} ({}) vs {} ({}): {:+.4}",
                d.budget, d.source, d.best, d.reference, d.reference_best, d.delta
            );
        }
        out
    }
}
