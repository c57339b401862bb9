//! Model feedback: confidence scores for unlabeled examples.
//!
//! Three interchangeable sources sit behind [`Feedback`]: precomputed score
//! files, an HTTP inference endpoint, and a kernel-regression oracle that
//! predicts with a similarity-weighted vote over the retrieved demonstrations.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::cosine_unchecked;
use crate::inference::{build_queries, Demo, PromptTemplate, Retriever, TemplateError};
use crate::pool::{AnnotatedEntry, AnnotatedSet, Pool, Provenance};
use crate::scalar::{portion, Scalar};

#[derive(Debug, Error)]
pub enum FeedbackError {
    #[error("empty class distribution")]
    EmptyDistribution,
    #[error("malformed class distribution: {0}")]
    MalformedDistribution(String),
    #[error("no generated tokens to score")]
    EmptyTokens,
    #[error("no score for example `{0}`")]
    MissingScore(String),
    #[error("score file {path}: {message}")]
    ScoreFile { path: PathBuf, message: String },
    #[error("request for example `{id}` failed after {attempts} attempts: {message}")]
    Request {
        id: String,
        attempts: u32,
        message: String,
    },
    #[error("malformed response for example `{id}`: {message}")]
    MalformedResponse { id: String, message: String },
    #[error("kernel weights vanished")]
    ZeroKernelMass,
    #[error("cannot pseudo-label {requested} examples: only {available} unlabeled")]
    PseudoLabelCount { requested: usize, available: usize },
    #[error(transparent)]
    Template(#[from] TemplateError),
}

pub type Result<T, E = FeedbackError> = std::result::Result<T, E>;

/// Model confidence for one example. Serialized as one score-file line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRecord {
    #[serde(rename = "id")]
    pub example_id: String,
    /// Higher means more confident.
    pub confidence: f64,
    #[serde(default)]
    pub prediction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
}

impl UncertaintyRecord {
    pub fn from_distribution(id: impl Into<String>, per_class: BTreeMap<String, f64>) -> Result<Self> {
        let (prediction, confidence) = score_classification(&per_class)?;
        Ok(Self {
            example_id: id.into(),
            confidence,
            prediction,
            per_class: Some(per_class),
            token_logprobs: None,
        })
    }

    pub fn from_tokens(id: impl Into<String>, prediction: String, token_logprobs: Vec<f64>) -> Result<Self> {
        Ok(Self {
            example_id: id.into(),
            confidence: score_generation(&token_logprobs)?,
            prediction,
            per_class: None,
            token_logprobs: Some(token_logprobs),
        })
    }
}

/// Argmax label and its probability. Ties go to the lexicographically
/// smallest label.
pub fn score_classification(per_class: &BTreeMap<String, f64>) -> Result<(String, f64)> {
    if per_class.is_empty() {
        return Err(FeedbackError::EmptyDistribution);
    }
    if let Some((label, p)) = per_class.iter().find(|(_, p)| !p.is_finite() || **p < 0.0) {
        return Err(FeedbackError::MalformedDistribution(format!("p({label}) = {p}")));
    }
    let total: f64 = per_class.values().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(FeedbackError::MalformedDistribution(format!("sums to {total}")));
    }
    // BTreeMap iterates in lexicographic order; strict > keeps the first max
    let mut best: Option<(&String, f64)> = None;
    for (label, &p) in per_class {
        if best.is_none_or(|(_, b)| p > b) {
            best = Some((label, p));
        }
    }
    let (label, p) = best.expect("non-empty");
    Ok((label.clone(), p))
}

/// Mean token log-probability of a generated sequence.
pub fn score_generation(token_logprobs: &[f64]) -> Result<f64> {
    if token_logprobs.is_empty() {
        return Err(FeedbackError::EmptyTokens);
    }
    Ok(token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64)
}

/// The `⌊θN⌋` least confident records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardSet {
    /// Positions into the scored record list, by ascending confidence.
    pub positions: Vec<usize>,
    pub ids: Vec<String>,
    pub theta: f64,
    pub n_theta: usize,
}

/// Picks the `⌊θN⌋` lowest-confidence records; ties keep the earlier record.
pub fn select_hard_set(records: &[UncertaintyRecord], theta: f64) -> HardSet {
    let theta = theta.clamp(0.0, 1.0);
    let n_theta = portion(theta, records.len());
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[a]
            .confidence
            .total_cmp(&records[b].confidence)
            .then(a.cmp(&b))
    });
    order.truncate(n_theta);
    HardSet {
        ids: order.iter().map(|&i| records[i].example_id.clone()).collect(),
        positions: order,
        theta,
        n_theta,
    }
}

/// What a feedback source sees for one example.
#[derive(Debug, Clone)]
pub struct Query<'a, F: Scalar> {
    pub id: &'a str,
    pub text: &'a str,
    pub embedding: &'a [F],
    /// Retrieved demonstrations, least similar first.
    pub demos: Vec<Demo<'a, F>>,
    pub prompt: String,
}

/// A source of model confidence scores.
pub trait Feedback<F: Scalar>: Send + Sync {
    /// One record per query, in query order.
    fn score(&self, queries: &[Query<'_, F>]) -> Result<Vec<UncertaintyRecord>>;
}

pub const DEFAULT_BANDWIDTH: f64 = 0.1;

/// Kernel-regression stand-in for a language model.
///
/// `K(a, b) = exp((cos(a, b) - 1) / bandwidth)`, bounded in `(0, 1]` with
/// `K(x, x) = 1`. The class score is the kernel mass of demos carrying that
/// label over the total mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelOracle {
    pub bandwidth: f64,
    /// Label space, used for the uniform zero-shot prior.
    pub labels: Vec<String>,
}

impl KernelOracle {
    pub fn new(bandwidth: f64, mut labels: Vec<String>) -> Self {
        labels.sort();
        labels.dedup();
        Self { bandwidth, labels }
    }

    fn zero_shot(&self) -> BTreeMap<String, f64> {
        let p = 1.0 / self.labels.len().max(1) as f64;
        self.labels.iter().map(|l| (l.clone(), p)).collect()
    }

    pub fn record<F: Scalar>(&self, query: &Query<'_, F>) -> Result<UncertaintyRecord> {
        let per_class = if query.demos.is_empty() {
            self.zero_shot()
        } else {
            let demos: Vec<(&[F], &str)> = query.demos.iter().map(|d| (d.embedding, d.label)).collect();
            kernel_oracle_predict(&demos, query.embedding, self.bandwidth)?.1
        };
        UncertaintyRecord::from_distribution(query.id, per_class)
    }
}

/// Similarity-weighted label vote over `demos`. Returns the argmax label
/// (lexicographic on ties) and the normalized per-class scores.
pub fn kernel_oracle_predict<F: Scalar>(
    demos: &[(&[F], &str)],
    query: &[F],
    bandwidth: f64,
) -> Result<(String, BTreeMap<String, f64>)> {
    if demos.is_empty() {
        return Err(FeedbackError::EmptyDistribution);
    }
    let mut weights: Vec<(&str, f64)> = demos
        .iter()
        .map(|(emb, label)| {
            let cos = cosine_unchecked(query, emb).to_f64_lossy();
            (*label, ((cos - 1.0) / bandwidth).exp())
        })
        .collect();
    // canonical summation order makes the result independent of demo order
    weights.sort_by(|a, b| a.0.cmp(b.0).then(a.1.total_cmp(&b.1)));
    let total: f64 = weights.iter().map(|w| w.1).sum();
    if !(total > 0.0) {
        return Err(FeedbackError::ZeroKernelMass);
    }
    let mut per_class: BTreeMap<String, f64> = BTreeMap::new();
    for (label, w) in weights {
        *per_class.entry(label.to_string()).or_insert(0.0) += w;
    }
    for v in per_class.values_mut() {
        *v /= total;
    }
    let (prediction, _) = score_classification(&per_class)?;
    Ok((prediction, per_class))
}

impl<F: Scalar> Feedback<F> for KernelOracle {
    fn score(&self, queries: &[Query<'_, F>]) -> Result<Vec<UncertaintyRecord>> {
        queries.par_iter().map(|q| self.record(q)).collect()
    }
}

/// Precomputed scores keyed by example id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreFile {
    records: HashMap<String, UncertaintyRecord>,
}

impl ScoreFile {
    pub fn from_records(records: impl IntoIterator<Item = UncertaintyRecord>) -> Self {
        Self {
            records: records.into_iter().map(|r| (r.example_id.clone(), r)).collect(),
        }
    }

    /// Reads `{id, confidence, prediction?, per_class?, token_logprobs?}` lines.
    pub fn load(path: &Path) -> Result<Self> {
        let err = |message: String| FeedbackError::ScoreFile {
            path: path.to_path_buf(),
            message,
        };
        let file = fs::File::open(path).map_err(|e| err(e.to_string()))?;
        let mut records = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut rec: UncertaintyRecord = serde_json::from_str(&line)
                .map_err(|e| err(format!("line {}: {e}", lineno + 1)))?;
            if rec.prediction.is_empty() {
                if let Some(pc) = &rec.per_class {
                    rec.prediction = score_classification(pc)?.0;
                }
            }
            records.push(rec);
        }
        Ok(Self::from_records(records))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl<F: Scalar> Feedback<F> for ScoreFile {
    fn score(&self, queries: &[Query<'_, F>]) -> Result<Vec<UncertaintyRecord>> {
        queries
            .iter()
            .map(|q| {
                self.records
                    .get(q.id)
                    .cloned()
                    .ok_or_else(|| FeedbackError::MissingScore(q.id.to_string()))
            })
            .collect()
    }
}

/// Connection settings for an inference server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub base_url: String,
    #[serde(default = "default_path")]
    pub path: String,
    pub model: String,
    /// Environment variable holding a bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub initial_backoff_ms: u64,
    #[serde(default = "default_max_backoff_ms")]
    pub max_backoff_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Classification label space; when present, class log-probabilities
    /// are expected and softmax-normalized.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

fn default_path() -> String {
    "/v1/score".into()
}
fn default_timeout() -> f64 {
    30.0
}
fn default_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    200
}
fn default_max_backoff_ms() -> u64 {
    5_000
}
fn default_in_flight() -> usize {
    8
}

#[derive(Debug, Serialize)]
struct ScoreRequest<'a> {
    model: &'a str,
    id: &'a str,
    prompt: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<&'a str>>,
}

#[derive(Debug, Deserialize)]
struct ScoreResponse {
    #[serde(default)]
    class_logprobs: Option<BTreeMap<String, f64>>,
    #[serde(default)]
    token_logprobs: Option<Vec<f64>>,
    #[serde(default)]
    text: Option<String>,
}

/// Blocking client issuing one request per example, with capped exponential
/// backoff on failure and a bounded number of requests in flight.
pub struct HttpFeedback {
    config: HttpConfig,
    template: PromptTemplate,
    agent: ureq::Agent,
    token: Option<String>,
}

impl HttpFeedback {
    pub fn new(config: HttpConfig, template: PromptTemplate) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let token = config.auth_env.as_deref().and_then(|v| std::env::var(v).ok());
        Self {
            config,
            template,
            agent,
            token,
        }
    }

    fn url(&self) -> String {
        format!(
            "{}/{}",
            self.config.base_url.trim_end_matches('/'),
            self.config.path.trim_start_matches('/')
        )
    }

    fn attempt(&self, url: &str, body: &ScoreRequest<'_>) -> std::result::Result<ScoreResponse, String> {
        let mut request = self.agent.post(url);
        if let Some(token) = &self.token {
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = request.send_json(body).map_err(|e| e.to_string())?;
        let status = response.status();
        if !status.is_success() {
            return Err(format!("HTTP {}", status.as_u16()));
        }
        response
            .body_mut()
            .read_json::<ScoreResponse>()
            .map_err(|e| format!("decode: {e}"))
    }

    fn score_one<F: Scalar>(&self, url: &str, query: &Query<'_, F>) -> Result<UncertaintyRecord> {
        let labels = self
            .config
            .labels
            .as_ref()
            .map(|ls| ls.iter().map(|l| self.template.verbalize(l)).collect());
        let body = ScoreRequest {
            model: &self.config.model,
            id: query.id,
            prompt: &query.prompt,
            labels,
        };
        let mut backoff = self.config.initial_backoff_ms;
        let mut attempts = 0;
        let response = loop {
            attempts += 1;
            match self.attempt(url, &body) {
                Ok(r) => break r,
                Err(message) if attempts > self.config.max_retries => {
                    return Err(FeedbackError::Request {
                        id: query.id.to_string(),
                        attempts,
                        message,
                    })
                }
                Err(message) => {
                    log::debug!("retrying `{}` after {backoff} ms: {message}", query.id);
                    std::thread::sleep(Duration::from_millis(backoff));
                    backoff = (backoff * 2).min(self.config.max_backoff_ms);
                }
            }
        };
        self.parse(query.id, response)
    }

    fn parse(&self, id: &str, response: ScoreResponse) -> Result<UncertaintyRecord> {
        let malformed = |message: &str| FeedbackError::MalformedResponse {
            id: id.to_string(),
            message: message.to_string(),
        };
        match (response.class_logprobs, response.token_logprobs) {
            (Some(logprobs), _) if self.config.labels.is_some() => {
                let per_class = softmax_classes(&logprobs, &self.template)
                    .ok_or_else(|| malformed("empty or non-finite class_logprobs"))?;
                UncertaintyRecord::from_distribution(id, per_class)
            }
            (_, Some(tokens)) => {
                UncertaintyRecord::from_tokens(id, response.text.unwrap_or_default(), tokens)
                    .map_err(|_| malformed("empty token_logprobs"))
            }
            (Some(_), None) => Err(malformed("class_logprobs without configured labels")),
            (None, None) => Err(malformed("neither class_logprobs nor token_logprobs")),
        }
    }
}

/// Softmax over class log-probabilities; keys may be class names or their
/// verbalizations.
fn softmax_classes(
    logprobs: &BTreeMap<String, f64>,
    template: &PromptTemplate,
) -> Option<BTreeMap<String, f64>> {
    if logprobs.is_empty() || logprobs.values().any(|v| !v.is_finite()) {
        return None;
    }
    let max = logprobs.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<(String, f64)> = logprobs
        .iter()
        .map(|(k, v)| (template.class_of(k).to_string(), (v - max).exp()))
        .collect();
    let total: f64 = exp.iter().map(|e| e.1).sum();
    let mut out = BTreeMap::new();
    for (k, e) in exp {
        *out.entry(k).or_insert(0.0) += e / total;
    }
    Some(out)
}

impl<F: Scalar> Feedback<F> for HttpFeedback {
    fn score(&self, queries: &[Query<'_, F>]) -> Result<Vec<UncertaintyRecord>> {
        let url = self.url();
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<Result<UncertaintyRecord>>>> =
            Mutex::new((0..queries.len()).map(|_| None).collect());
        let workers = self.config.max_in_flight.clamp(1, queries.len().max(1));
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= queries.len() {
                        break;
                    }
                    let outcome = self.score_one(&url, &queries[i]);
                    results.lock().expect("poisoned")[i] = Some(outcome);
                });
            }
        });
        results
            .into_inner()
            .expect("poisoned")
            .into_iter()
            .map(|r| r.expect("every query visited"))
            .collect()
    }
}

/// The configured source, as stored in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeedbackSource {
    ScoreFile { path: PathBuf },
    HttpEndpoint(HttpConfig),
    KernelOracle {
        #[serde(default = "default_bandwidth")]
        bandwidth: f64,
    },
}

fn default_bandwidth() -> f64 {
    DEFAULT_BANDWIDTH
}

impl Default for FeedbackSource {
    fn default() -> Self {
        Self::KernelOracle {
            bandwidth: DEFAULT_BANDWIDTH,
        }
    }
}

impl FeedbackSource {
    /// Instantiates the source. `labels` is the task's label space.
    pub fn build<F: Scalar>(
        &self,
        labels: &[String],
        template: &PromptTemplate,
    ) -> Result<Box<dyn Feedback<F>>> {
        Ok(match self {
            Self::ScoreFile { path } => Box::new(ScoreFile::load(path)?),
            Self::HttpEndpoint(config) => {
                Box::new(HttpFeedback::new(config.clone(), template.clone()))
            }
            Self::KernelOracle { bandwidth } => {
                Box::new(KernelOracle::new(*bandwidth, labels.to_vec()))
            }
        })
    }
}

/// Scores `targets` of `pool` by k-shot retrieval from `annotated`.
/// Records come back in `targets` order.
#[allow(clippy::too_many_arguments)]
pub fn fetch_scores<F: Scalar>(
    feedback: &dyn Feedback<F>,
    pool: &Pool<F>,
    annotated: &AnnotatedSet,
    targets: &[usize],
    retriever: &Retriever,
    template: &PromptTemplate,
) -> Result<Vec<UncertaintyRecord>> {
    let queries = build_queries(annotated, pool, pool, targets, retriever, template, true)?;
    feedback.score(&queries)
}

/// Labels the `count` most confident unlabeled examples with the model's own
/// predictions.
pub fn pseudo_label<F: Scalar>(
    feedback: &dyn Feedback<F>,
    pool: &Pool<F>,
    annotated: &AnnotatedSet,
    count: usize,
    retriever: &Retriever,
    template: &PromptTemplate,
) -> Result<Vec<AnnotatedEntry>> {
    let unlabeled: Vec<usize> = (0..pool.len())
        .filter(|&i| !annotated.contains(&pool.example(i).id))
        .collect();
    if count > unlabeled.len() {
        return Err(FeedbackError::PseudoLabelCount {
            requested: count,
            available: unlabeled.len(),
        });
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let records = fetch_scores(feedback, pool, annotated, &unlabeled, retriever, template)?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[b]
            .confidence
            .total_cmp(&records[a].confidence)
            .then(a.cmp(&b))
    });
    Ok(order
        .into_iter()
        .filter(|&i| !records[i].prediction.is_empty())
        .take(count)
        .map(|i| AnnotatedEntry {
            id: records[i].example_id.clone(),
            label: records[i].prediction.clone(),
            provenance: Provenance::PseudoLabel,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(items: &[(&str, f64)]) -> BTreeMap<String, f64> {
        items.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn rec(id: &str, confidence: f64) -> UncertaintyRecord {
        UncertaintyRecord {
            example_id: id.into(),
            confidence,
            prediction: String::new(),
            per_class: None,
            token_logprobs: None,
        }
    }

    #[test]
    fn classification_argmax() {
        assert_eq!(
            score_classification(&dist(&[("A", 0.2), ("B", 0.5), ("C", 0.3)])).unwrap(),
            ("B".to_string(), 0.5)
        );
        assert_eq!(
            score_classification(&dist(&[("B", 0.5), ("A", 0.5)])).unwrap(),
            ("A".to_string(), 0.5)
        );
        assert_eq!(
            score_classification(&dist(&[("d", 0.25), ("c", 0.25), ("b", 0.25), ("a", 0.25)])).unwrap(),
            ("a".to_string(), 0.25)
        );
    }

    #[test]
    fn classification_errors() {
        assert!(matches!(
            score_classification(&BTreeMap::new()),
            Err(FeedbackError::EmptyDistribution)
        ));
        assert!(matches!(
            score_classification(&dist(&[("A", 0.7), ("B", 0.7)])),
            Err(FeedbackError::MalformedDistribution(_))
        ));
        assert!(matches!(
            score_classification(&dist(&[("A", -0.1), ("B", 1.1)])),
            Err(FeedbackError::MalformedDistribution(_))
        ));
    }

    #[test]
    fn generation_mean() {
        assert!((score_generation(&[-0.1, -0.3]).unwrap() + 0.2).abs() < 1e-15);
        assert_eq!(score_generation(&[0.0]).unwrap(), 0.0);
        assert_eq!(score_generation(&[-1.0, -2.0, -3.0]).unwrap(), -2.0);
        assert!(matches!(score_generation(&[]), Err(FeedbackError::EmptyTokens)));
    }

    #[test]
    fn hard_set_sizes() {
        let records: Vec<_> = (1..=10).rev().map(|i| rec(&format!("e{i}"), i as f64 / 10.0)).collect();
        let hard = select_hard_set(&records, 0.5);
        assert_eq!(hard.n_theta, 5);
        let mut ids = hard.ids.clone();
        ids.sort();
        assert_eq!(ids, vec!["e1", "e2", "e3", "e4", "e5"]);
        assert_eq!(hard.ids[0], "e1");
        assert!(select_hard_set(&records, 0.0).ids.is_empty());
        assert_eq!(select_hard_set(&records, 1.0).ids.len(), 10);
    }

    #[test]
    fn hard_set_ties_prefer_earlier_records() {
        let records: Vec<_> = (0..4).map(|i| rec(&i.to_string(), 0.5)).collect();
        assert_eq!(select_hard_set(&records, 0.5).positions, vec![0, 1]);
    }

    #[test]
    fn kernel_single_demo() {
        let demo: &[f64] = &[1.0, 0.0];
        let (pred, pc) = kernel_oracle_predict(&[(demo, "pos")], &[0.3, 0.7], 0.1).unwrap();
        assert_eq!(pred, "pos");
        assert_eq!(pc, dist(&[("pos", 1.0)]));
    }

    #[test]
    fn kernel_symmetric_demos() {
        let a: &[f64] = &[1.0, 0.0];
        let b: &[f64] = &[0.0, 1.0];
        let (pred, pc) = kernel_oracle_predict(&[(a, "pos"), (b, "neg")], &[1.0, 1.0], 0.1).unwrap();
        assert_eq!(pred, "neg");
        assert!((pc["pos"] - 0.5).abs() < 1e-12 && (pc["neg"] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kernel_logistic_of_one() {
        let a: &[f64] = &[1.0, 0.0];
        let b: &[f64] = &[0.0, 1.0];
        let (pred, pc) = kernel_oracle_predict(&[(a, "a"), (b, "b")], &[1.0, 0.0], 1.0).unwrap();
        // e^0 / (e^0 + e^-1) = 1 / (1 + e^-1)
        let oracle = 1.0 / (1.0 + (-1.0f64).exp());
        assert_eq!(pred, "a");
        assert!((pc["a"] - 0.7310585786).abs() < 1e-9);
        assert!((pc["a"] - oracle).abs() < 1e-15);
        assert!((pc["b"] - 0.2689414214).abs() < 1e-9);
    }

    #[test]
    fn score_file_pass_through_and_missing() {
        let file = ScoreFile::from_records([rec("a", 0.9), rec("b", 0.1)]);
        let q = |id: &'static str| Query::<f32> {
            id,
            text: "",
            embedding: &[],
            demos: vec![],
            prompt: String::new(),
        };
        let out = Feedback::<f32>::score(&file, &[q("b"), q("a")]).unwrap();
        assert_eq!(out[0].confidence, 0.1);
        assert_eq!(out[1].confidence, 0.9);
        assert!(matches!(
            Feedback::<f32>::score(&file, &[q("zzz")]),
            Err(FeedbackError::MissingScore(id)) if id == "zzz"
        ));
    }

    #[test]
    fn score_file_loads_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.jsonl");
        fs::write(
            &path,
            "{\"id\":\"a\",\"confidence\":0.7,\"per_class\":{\"x\":0.7,\"y\":0.3}}\n\
             {\"id\":\"b\",\"confidence\":-0.4,\"prediction\":\"hi\",\"token_logprobs\":[-0.4]}\n",
        )
        .unwrap();
        let file = ScoreFile::load(&path).unwrap();
        assert_eq!(file.len(), 2);
        assert_eq!(file.records["a"].prediction, "x");
        assert_eq!(file.records["b"].token_logprobs, Some(vec![-0.4]));
    }

    #[test]
    fn softmax_maps_verbalized_keys() {
        let mut t = PromptTemplate::default();
        t.label_map.insert("1".into(), "great".into());
        let pc = softmax_classes(&dist(&[("great", 0.0), ("0", 0.0)]), &t).unwrap();
        assert_eq!(pc, dist(&[("0", 0.5), ("1", 0.5)]));
    }
}
