//! Experiment orchestration: config loading, strategy runs over seeds and
//! budget schedules, summaries, comparisons and visualization data.

pub mod compare;
pub mod config;
pub mod run;
pub mod viz;

pub use compare::{compare, compare_files, Comparison};
pub use config::{ConfigError, ExperimentConfig, PoolSource, StrategyEntry};
pub use run::{run_experiment, Dataset, RunError, Summary, SummaryCell, Workbench};
pub use viz::emit_viz;
