//! `run`: strategy × seed × budget-step cells, per-cell artifacts and the
//! aggregated summary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use adaicl_core::calibration::{ece, simplex_calibration_report};
use adaicl_core::feedback::Feedback;
use adaicl_core::graph::{build_delta_graph, build_mnn_graph, SemanticGraph};
use adaicl_core::inference::{evaluate, EvalMode, EvalReport, EvalSetup, Retriever};
use adaicl_core::kmeans::{init_pool_kmeans, prepare_candidate_pool};
use adaicl_core::pool::{load_pool, AnnotatedSet, Pool, RngSeed};
use adaicl_core::strategies::{
    run_strategy_observed, GraphChoice, GroundTruth, SelectionContext, SelectionState, StrategyConfig,
};
use adaicl_core::synthetic::gaussian_mixture;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, PoolSource, StrategyEntry};

/// Scalar used for embeddings throughout the harness.
pub type Real = f64;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("pool: {0}")]
    Pool(#[from] adaicl_core::pool::PoolError),
    #[error("{0}")]
    Setup(String),
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{} cell(s) failed: {}", .0.len(), .0.iter().map(|f| format!("{}/seed-{}: {}", f.strategy, f.seed, f.message)).collect::<Vec<_>>().join("; "))]
    Cells(Vec<CellFailure>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellFailure {
    pub strategy: String,
    pub seed: u64,
    pub message: String,
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<(), RunError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

pub(crate) fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// The loaded example pool, shared by every cell.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub full: Pool<Real>,
    pub labels: Vec<String>,
}

impl Dataset {
    pub fn load(config: &ExperimentConfig) -> Result<Self, RunError> {
        let full: Pool<Real> = match &config.pool {
            PoolSource::File { path, format } => load_pool(path, *format)?,
            PoolSource::Synthetic(spec) => gaussian_mixture(spec)?,
        };
        full.split(&config.candidate_split)?;
        if config.mode == EvalMode::Inductive {
            full.split(&config.test_split)?;
            if !full.splits_disjoint(&config.candidate_split, &config.test_split)? {
                return Err(RunError::Setup(format!(
                    "inductive mode needs disjoint `{}` and `{}` splits",
                    config.candidate_split, config.test_split
                )));
            }
        }
        let labels = full.label_space();
        Ok(Self { full, labels })
    }
}

/// Everything one (seed) cell needs: candidate and test pools, feedback, and
/// the evaluation setup.
pub struct Workbench {
    pub candidates: Pool<Real>,
    pub test: Pool<Real>,
    pub test_indices: Vec<usize>,
    pub labels: Vec<String>,
    pub feedback: Box<dyn Feedback<Real>>,
    pub retriever: Retriever,
    pub config: ExperimentConfig,
    pub seed: u64,
}

impl Workbench {
    pub fn new(dataset: &Dataset, config: &ExperimentConfig, seed: u64) -> Result<Self, RunError> {
        let split = dataset.full.split_pool(&config.candidate_split)?;
        let candidates = match config.candidates {
            Some(spec) => {
                let picked = prepare_candidate_pool(&split, spec.subsample, spec.clusters, RngSeed(seed))
                    .map_err(|e| RunError::Setup(e.to_string()))?;
                split.subset(&picked)?
            }
            None => split,
        };
        let test = match config.mode {
            EvalMode::Inductive => dataset.full.split_pool(&config.test_split)?,
            EvalMode::Transductive => candidates.clone(),
        };
        let feedback = config
            .feedback()
            .build::<Real>(&dataset.labels, &config.template)
            .map_err(|e| RunError::Setup(e.to_string()))?;
        Ok(Self {
            test_indices: (0..test.len()).collect(),
            candidates,
            test,
            labels: dataset.labels.clone(),
            feedback,
            retriever: Retriever {
                k: config.k,
                max_chars: config.max_prompt_chars,
            },
            config: config.clone(),
            seed,
        })
    }

    pub fn initial_set(&self) -> Result<AnnotatedSet, RunError> {
        if self.config.initial_size == 0 {
            return Ok(AnnotatedSet::new());
        }
        init_pool_kmeans(&self.candidates, self.config.initial_size, RngSeed(self.seed))
            .map_err(|e| RunError::Setup(e.to_string()))
    }

    pub fn graph(&self, strategy: &StrategyConfig) -> Result<Option<SemanticGraph<Real>>, RunError> {
        if !strategy.name.needs_graph() {
            return Ok(None);
        }
        let graph = match strategy.graph {
            GraphChoice::Mnn => build_mnn_graph(&self.candidates, strategy.m),
            GraphChoice::Delta => build_delta_graph(&self.candidates, strategy.m),
        };
        graph.map(Some).map_err(|e| RunError::Setup(e.to_string()))
    }

    pub fn evaluate(&self, annotated: &AnnotatedSet) -> Result<EvalReport, RunError> {
        let setup = EvalSetup {
            annotation_pool: &self.candidates,
            test_pool: &self.test,
            test_indices: &self.test_indices,
            feedback: self.feedback.as_ref(),
            retriever: &self.retriever,
            template: &self.config.template,
            mode: self.config.mode,
            task: self.config.task,
            seed: self.seed,
            config_hash: self.config.hash(),
        };
        evaluate(annotated, &setup).map_err(|e| RunError::Setup(e.to_string()))
    }
}

/// One iteration's scores, kept for visualization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationScores {
    pub iteration: usize,
    pub budget: usize,
    pub picked: Vec<String>,
    pub confidence: BTreeMap<String, f64>,
}

/// Metrics of one (strategy, seed, budget) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub budget: usize,
    pub accuracy: Option<f64>,
    pub ece: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub strategy: String,
    pub seed: u64,
    pub steps: Vec<StepResult>,
    pub annotated: AnnotatedSet,
}

pub fn cell_dir(root: &Path, strategy: &str, seed: u64) -> PathBuf {
    root.join(strategy).join(format!("seed-{seed}"))
}

/// Runs one strategy for one seed over the whole budget schedule, writing
/// artifacts as each step completes.
pub fn run_cell(
    dataset: &Dataset,
    config: &ExperimentConfig,
    entry: &StrategyEntry,
    seed: u64,
) -> Result<CellResult, RunError> {
    let bench = Workbench::new(dataset, config, seed)?;
    let strategy = config.strategy_config(entry, seed);
    let graph = bench.graph(&strategy)?;
    let feedback = strategy.name.needs_feedback().then_some(bench.feedback.as_ref());
    let ctx = SelectionContext {
        pool: &bench.candidates,
        graph: graph.as_ref(),
        feedback,
        retriever: bench.retriever.clone(),
        template: &config.template,
        config: &strategy,
    };
    let label = entry.label();
    let dir = cell_dir(&config.output_dir, &label, seed);
    let mut state = SelectionState::new(bench.initial_set()?, 0);
    let mut scores: Vec<IterationScores> = Vec::new();
    let mut steps = Vec::new();

    for (&budget, increment) in config.budget_schedule.iter().zip(config.increments()) {
        state.extend_budget(increment);
        let mut observe = |s: &SelectionState, batch: &adaicl_core::Batch| {
            scores.push(IterationScores {
                iteration: s.iteration - 1,
                budget,
                picked: batch.picks.iter().map(|&i| bench.candidates.example(i).id.clone()).collect(),
                confidence: if strategy.name.needs_feedback() {
                    s.last_records.iter().map(|r| (r.example_id.clone(), r.confidence)).collect()
                } else {
                    BTreeMap::new()
                },
            });
        };
        run_strategy_observed(&ctx, &mut state, &mut GroundTruth, &mut observe)
            .map_err(|e| RunError::Setup(format!("budget {budget}: {e}")))?;

        let report = bench.evaluate(&state.annotated)?;
        let step_dir = dir.join(format!("budget-{budget}"));
        write_file(&step_dir.join("report.json"), &to_json(&report))?;
        let calibration = match report.accuracy {
            Some(_) => {
                let conf: Vec<f64> = report.records.iter().map(|r| r.confidence.clamp(0.0, 1.0)).collect();
                let ok: Vec<bool> = report.records.iter().map(|r| r.correct).collect();
                let bins = ece(&conf, &ok, config.n_bins).map_err(|e| RunError::Setup(e.to_string()))?;
                write_file(&step_dir.join("reliability.csv"), &bins.to_csv())?;
                let simplex = simplex_calibration_report(&report, &bench.candidates, &bench.test, &state.annotated);
                write_file(&step_dir.join("simplex.json"), &to_json(&simplex))?;
                Some(bins.ece)
            }
            None => None,
        };
        write_trace(&dir, &state, &scores)?;
        steps.push(StepResult {
            budget,
            accuracy: report.accuracy,
            ece: calibration,
        });
    }
    write_file(&dir.join("annotated.json"), &to_json(&state.annotated))?;
    Ok(CellResult {
        strategy: label,
        seed,
        steps,
        annotated: state.annotated,
    })
}

fn write_trace(dir: &Path, state: &SelectionState, scores: &[IterationScores]) -> Result<(), RunError> {
    let lines = |items: Vec<String>| items.into_iter().map(|l| l + "\n").collect::<String>();
    let trace = lines(state.trace.iter().map(|t| serde_json::to_string(t).expect("serializable")).collect());
    write_file(&dir.join("trace.jsonl"), &trace)?;
    let scores = lines(scores.iter().map(|t| serde_json::to_string(t).expect("serializable")).collect());
    write_file(&dir.join("scores.jsonl"), &scores)
}

/// Aggregate of one (strategy, budget) cell over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    pub strategy: String,
    pub budget: usize,
    /// Per-seed accuracy, in `seeds` order.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n − 1); 0 for a single seed.
    pub std: f64,
    pub ece_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub budget_schedule: Vec<usize>,
    pub cells: Vec<SummaryCell>,
}

impl Summary {
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| RunError::Setup(format!("{}: {e}", path.display())))
    }

    pub fn cell(&self, strategy: &str, budget: usize) -> Option<&SummaryCell> {
        self.cells.iter().find(|c| c.strategy == strategy && c.budget == budget)
    }
}

/// Mean and sample standard deviation, summed in input order.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().fold(0.0, |a, v| a + v) / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss = values.iter().fold(0.0, |a, v| a + (v - mean) * (v - mean));
    (mean, (ss / (n - 1.0)).sqrt())
}

pub fn summarize(config: &ExperimentConfig, results: &[CellResult]) -> Summary {
    let mut cells = Vec::new();
    for entry in &config.strategies {
        let label = entry.label();
        for (step, &budget) in config.budget_schedule.iter().enumerate() {
            let per_seed: Vec<&StepResult> = config
                .seeds
                .iter()
                .filter_map(|s| results.iter().find(|r| r.strategy == label && r.seed == *s))
                .map(|r| &r.steps[step])
                .collect();
            let accuracies: Vec<f64> = per_seed.iter().filter_map(|s| s.accuracy).collect();
            let eces: Vec<f64> = per_seed.iter().filter_map(|s| s.ece).collect();
            let (mean, std) = mean_std(&accuracies);
            cells.push(SummaryCell {
                strategy: label.clone(),
                budget,
                accuracies,
                mean,
                std,
                ece_mean: mean_std(&eces).0,
            });
        }
    }
    Summary {
        config_hash: config.hash(),
        seeds: config.seeds.clone(),
        budget_schedule: config.budget_schedule.clone(),
        cells,
    }
}

/// Runs every cell and writes `summary.json` once all of them finished.
/// Completed cells keep their artifacts when others fail.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Summary, RunError> {
    config.validate()?;
    let dataset = Dataset::load(config)?;
    let available = dataset.full.split(&config.candidate_split)?.len();
    let needed = config.initial_size + config.total_budget();
    if config.candidates.is_none() && needed > available {
        return Err(RunError::Setup(format!(
            "initial set plus budget ({needed}) exceeds the {available} candidates"
        )));
    }
    write_file(&config.output_dir.join("config.json"), &to_json(config))?;

    let jobs: Vec<(&StrategyEntry, u64)> = config
        .strategies
        .iter()
        .flat_map(|e| config.seeds.iter().map(move |&s| (e, s)))
        .collect();
    let run = |&(entry, seed): &(&StrategyEntry, u64)| {
        run_cell(&dataset, config, entry, seed).map_err(|e| CellFailure {
            strategy: entry.label(),
            seed,
            message: e.to_string(),
        })
    };
    let outcomes: Vec<Result<CellResult, CellFailure>> = if config.parallel {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter().map(run).collect()
    };
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(r) => results.push(r),
            Err(f) => {
                log::error!("{}/seed-{} failed: {}", f.strategy, f.seed, f.message);
                failures.push(f);
            }
        }
    }
    if !failures.is_empty() {
        return Err(RunError::Cells(failures));
    }
    let summary = summarize(config, &results);
    write_file(&config.output_dir.join("summary.json"), &to_json(&summary))?;
    Ok(summary)
}
