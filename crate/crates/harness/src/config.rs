//! Experiment configuration: one JSON document with every default baked in.

use std::path::{Path, PathBuf};

use adaicl_core::feedback::FeedbackSource;
use adaicl_core::graph::Hops;
use adaicl_core::inference::{EvalMode, PromptTemplate, TaskKind};
use adaicl_core::pool::{PoolFormat, DEFAULT_SPLIT, TEST_SPLIT};
use adaicl_core::strategies::{GraphChoice, StrategyConfig, StrategyName};
use adaicl_core::synthetic::MixtureSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config field `{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Where the examples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PoolSource {
    File {
        path: PathBuf,
        #[serde(default = "default_format")]
        format: PoolFormat,
    },
    Synthetic(MixtureSpec),
}

fn default_format() -> PoolFormat {
    PoolFormat::Jsonl
}

impl Default for PoolSource {
    fn default() -> Self {
        Self::Synthetic(MixtureSpec::default())
    }
}

/// Subsample-and-cluster reduction of the unlabeled split before selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSpec {
    pub subsample: usize,
    pub clusters: usize,
}

/// A strategy entry; unset knobs inherit the experiment-level values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyEntry {
    pub name: StrategyName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hops: Option<Hops>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_base: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<GraphChoice>,
    /// Output label; defaults to the strategy name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl StrategyEntry {
    pub fn new(name: StrategyName) -> Self {
        Self {
            name,
            theta: None,
            m: None,
            hops: None,
            iterations: None,
            weight_base: None,
            graph: None,
            label: None,
        }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.name.to_string())
    }
}

fn d_k() -> usize {
    5
}
fn d_half() -> f64 {
    0.5
}
fn d_two() -> usize {
    2
}
fn d_base() -> u64 {
    10
}
fn d_bandwidth() -> f64 {
    0.1
}
fn d_schedule() -> Vec<usize> {
    vec![20]
}
fn d_initial() -> usize {
    10
}
fn d_bins() -> usize {
    10
}
fn d_seeds() -> Vec<u64> {
    vec![0]
}
fn d_output() -> PathBuf {
    PathBuf::from("runs")
}
fn d_strategies() -> Vec<StrategyEntry> {
    vec![StrategyEntry::new(StrategyName::AdaiclPlus)]
}
fn d_candidate_split() -> String {
    DEFAULT_SPLIT.to_string()
}
fn d_test_split() -> String {
    TEST_SPLIT.to_string()
}
fn d_true() -> bool {
    true
}

/// The full experiment description. `{}` is a valid config: AdaICL+ on the
/// synthetic mixture with k=5, B=20, θ=0.5, T=2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub pool: PoolSource,
    #[serde(default = "d_candidate_split")]
    pub candidate_split: String,
    #[serde(default = "d_test_split")]
    pub test_split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<CandidateSpec>,
    #[serde(default = "d_strategies")]
    pub strategies: Vec<StrategyEntry>,
    /// Cumulative budgets; each step adds the difference to the previous one.
    #[serde(default = "d_schedule")]
    pub budget_schedule: Vec<usize>,
    /// Size of the k-means initial annotated set.
    #[serde(default = "d_initial")]
    pub initial_size: usize,
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default = "d_half")]
    pub theta: f64,
    #[serde(default = "d_half")]
    pub theta_hat: f64,
    /// Iterations per step for AdaICL+.
    #[serde(default = "d_two")]
    pub iterations: usize,
    /// Desired maximum iterations in the neighbor-count heuristic.
    #[serde(default = "d_two")]
    pub max_iterations_hat: usize,
    /// Overrides both presets (15 for 1-hop, 5 for 2-hop) when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hops: Option<Hops>,
    #[serde(default = "d_base")]
    pub weight_base: u64,
    #[serde(default = "d_bandwidth")]
    pub bandwidth: f64,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub mode: EvalMode,
    #[serde(default = "classification")]
    pub task: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<FeedbackSource>,
    #[serde(default)]
    pub template: PromptTemplate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_prompt_chars: Option<usize>,
    #[serde(default = "d_bins")]
    pub n_bins: usize,
    #[serde(default = "d_output")]
    pub output_dir: PathBuf,
    /// Run independent (strategy, seed) cells concurrently.
    #[serde(default = "d_true")]
    pub parallel: bool,
}

fn classification() -> TaskKind {
    TaskKind::Classification
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_json(&text)?;
        // relative pool paths are relative to the config file
        if let PoolSource::File { path: pool, .. } = &mut config.pool {
            if pool.is_relative() {
                if let Some(dir) = path.parent() {
                    *pool = dir.join(&*pool);
                }
            }
        }
        Ok(config)
    }

    pub fn feedback(&self) -> FeedbackSource {
        self.feedback.clone().unwrap_or(FeedbackSource::KernelOracle {
            bandwidth: self.bandwidth,
        })
    }

    /// Per-step increments of the cumulative schedule.
    pub fn increments(&self) -> Vec<usize> {
        let mut prev = 0;
        self.budget_schedule
            .iter()
            .map(|&b| {
                let inc = b - prev;
                prev = b;
                inc
            })
            .collect()
    }

    pub fn total_budget(&self) -> usize {
        self.budget_schedule.last().copied().unwrap_or(0)
    }

    /// Resolves an entry against the experiment-level values and presets.
    pub fn strategy_config(&self, entry: &StrategyEntry, seed: u64) -> StrategyConfig {
        let mut config = StrategyConfig::new(entry.name);
        let hops = entry.hops.or(self.hops).unwrap_or(config.hops);
        config.hops = hops;
        config.m = entry.m.or(self.m).unwrap_or(match hops {
            Hops::One => 15,
            Hops::Two => 5,
        });
        config.theta = entry.theta.unwrap_or(self.theta);
        config.iterations = entry.iterations.unwrap_or(self.iterations);
        config.weight_base = entry.weight_base.unwrap_or(self.weight_base);
        config.graph = entry.graph.unwrap_or(config.graph);
        config.k = self.k;
        config.seed = seed;
        config
    }

    /// Deterministic content hash of everything that affects results (the
    /// output location and scheduling are left out).
    pub fn hash(&self) -> String {
        let mut scrubbed = self.clone();
        scrubbed.output_dir = PathBuf::new();
        scrubbed.parallel = true;
        let canonical = serde_json::to_string(&scrubbed).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(invalid("seeds", format!("seed {dup} listed twice")));
        }
        if self.strategies.is_empty() {
            return Err(invalid("strategies", "at least one strategy is required"));
        }
        let mut labels = std::collections::BTreeSet::new();
        for entry in &self.strategies {
            if !labels.insert(entry.label()) {
                return Err(invalid("strategies", format!("duplicate label `{}`", entry.label())));
            }
        }
        if self.budget_schedule.is_empty() {
            return Err(invalid("budget_schedule", "must not be empty"));
        }
        if self.budget_schedule.windows(2).any(|w| w[1] <= w[0]) || self.budget_schedule[0] == 0 {
            return Err(invalid("budget_schedule", "budgets must be positive and strictly increasing"));
        }
        if self.k == 0 {
            return Err(invalid("k", "must be at least 1"));
        }
        for (field, v) in [("theta", self.theta), ("theta_hat", self.theta_hat)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(invalid(field, "must lie in (0, 1]"));
            }
        }
        if self.iterations == 0 {
            return Err(invalid("iterations", "must be at least 1"));
        }
        if self.max_iterations_hat == 0 {
            return Err(invalid("max_iterations_hat", "must be at least 1"));
        }
        if self.weight_base < 2 {
            return Err(invalid("weight_base", "must be at least 2"));
        }
        if !(self.bandwidth > 0.0) {
            return Err(invalid("bandwidth", "must be positive"));
        }
        if self.n_bins == 0 {
            return Err(invalid("n_bins", "must be at least 1"));
        }
        if let Some(c) = self.candidates {
            if c.clusters == 0 || c.clusters > c.subsample {
                return Err(invalid("candidates", "need 1 <= clusters <= subsample"));
            }
        }
        if self.task == TaskKind::Generation
            && matches!(self.feedback(), FeedbackSource::KernelOracle { .. })
        {
            return Err(invalid("feedback", "the kernel oracle only supports classification"));
        }
        self.template
            .validate()
            .map_err(|e| invalid("template", e.to_string()))?;
        for entry in &self.strategies {
            let resolved = self.strategy_config(entry, 0);
            resolved
                .validate()
                .map_err(|e| invalid(&format!("strategies.{}", entry.label()), e.to_string()))?;
            if entry.name.needs_graph() && resolved.m == 0 {
                return Err(invalid(&format!("strategies.{}.m", entry.label()), "must be at least 1"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gets_documented_defaults() {
        let c = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(c.k, 5);
        assert_eq!(c.budget_schedule, vec![20]);
        assert_eq!((c.theta, c.theta_hat), (0.5, 0.5));
        assert_eq!((c.iterations, c.max_iterations_hat), (2, 2));
        assert_eq!(c.weight_base, 10);
        assert_eq!(c.bandwidth, 0.1);
        assert_eq!(c.mode, EvalMode::Inductive);
        let plus = c.strategy_config(&StrategyEntry::new(StrategyName::AdaiclPlus), 0);
        assert_eq!((plus.m, plus.hops), (15, Hops::One));
        let ada = c.strategy_config(&StrategyEntry::new(StrategyName::Adaicl), 0);
        assert_eq!((ada.m, ada.hops), (5, Hops::Two));
    }

    #[test]
    fn overrides_layer_entry_over_experiment() {
        let c = ExperimentConfig::from_json(
            r#"{"m": 9, "theta": 0.4, "strategies": [{"name": "adaicl", "hops": 1}, {"name": "adaicl-plus", "m": 3}]}"#,
        )
        .unwrap();
        let a = c.strategy_config(&c.strategies[0], 4);
        assert_eq!((a.m, a.hops, a.theta, a.seed), (9, Hops::One, 0.4, 4));
        let p = c.strategy_config(&c.strategies[1], 0);
        assert_eq!(p.m, 3);
    }

    #[test]
    fn errors_name_the_field() {
        let cases = [
            (r#"{"seeds": []}"#, "seeds"),
            (r#"{"budget_schedule": [10, 5]}"#, "budget_schedule"),
            (r#"{"theta": 0}"#, "theta"),
            (r#"{"k": 0}"#, "k"),
            (r#"{"strategies": [{"name": "random"}, {"name": "random"}]}"#, "strategies"),
            (r#"{"strategies": [{"name": "adaicl", "m": 0}]}"#, "strategies.adaicl.m"),
            (r#"{"template": {"demo_pattern": "{text}", "separator": " ", "query_pattern": "{text}:"}}"#, "template"),
        ];
        for (json, field) in cases {
            match ExperimentConfig::from_json(json) {
                Err(ConfigError::Invalid { field: f, .. }) => assert_eq!(f, field, "{json}"),
                other => panic!("{json}: {other:?}"),
            }
        }
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"bogus": 1}"#),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn increments_and_hash() {
        let c = ExperimentConfig::from_json(r#"{"budget_schedule": [5, 10, 15, 20]}"#).unwrap();
        assert_eq!(c.increments(), vec![5, 5, 5, 5]);
        assert_eq!(c.total_budget(), 20);
        assert_eq!(c.hash(), c.clone().hash());
        assert_ne!(c.hash(), ExperimentConfig::default().hash());
    }
}
