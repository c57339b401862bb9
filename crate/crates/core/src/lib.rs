//! Budgeted active selection of in-context learning demonstrations.
//!
//! The crate picks which unlabeled examples to annotate by combining model
//! uncertainty with Maximum Coverage over a semantic-similarity graph, then
//! evaluates the annotated pool with a k-NN retrieval loop.
//!
//! Embedding math is generic over [`Scalar`] (`f32` or `f64`); tier weights in
//! the re-weighted cover are generic over [`TierWeight`], which includes an
//! exact rational type for verification.

pub mod calibration;
pub mod coverage;
pub mod feedback;
pub mod graph;
pub mod inference;
pub mod kmeans;
pub mod pool;
pub mod scalar;
pub mod strategies;
pub mod synthetic;

pub use calibration::{ece, pca_2d, simplex_calibration_report, simplex_membership, Membership, ReliabilityBins, SimplexReport};
pub use coverage::{
    brute_force_maxcover, greedy_maxcover, greedy_weighted_maxcover, CoverInstance, CoverOutcome, TierWeight,
    WeightTiers,
};
pub use feedback::{
    fetch_scores, pseudo_label, select_hard_set, Feedback, FeedbackSource, HardSet, KernelOracle, ScoreFile,
    UncertaintyRecord,
};
pub use graph::{
    build_cover_sets, build_delta_graph, build_mnn_graph, heuristic_m_range, CoverSet, Hops, MRange, SemanticGraph,
};
pub use inference::{evaluate, EvalMode, EvalReport, PromptTemplate, Retriever, TaskKind};
pub use kmeans::{init_pool_kmeans, kmeans, prepare_candidate_pool};
pub use pool::{load_pool, save_pool, AnnotatedSet, Budget, Example, Pool, PoolFormat, Provenance, RngSeed};
pub use scalar::Scalar;
pub use strategies::{
    plan_batch, run_simulation, run_strategy, run_strategy_observed, Annotator, Batch, GroundTruth, SelectionContext, SelectionState,
    StrategyConfig, StrategyName,
};

pub type F32Pool = Pool<f32>;
pub type F64Pool = Pool<f64>;
pub type F32Graph = SemanticGraph<f32>;
pub type F64Graph = SemanticGraph<f64>;
/// Exact tier weights for checking the re-weighted cover.
pub type ExactWeight = num_rational::BigRational;
pub type ExactTiers = WeightTiers<ExactWeight>;
