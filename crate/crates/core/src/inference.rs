//! k-NN demonstration retrieval, prompt assembly and held-out evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feedback::{Feedback, FeedbackError, Query};
use crate::graph::cosine_unchecked;
use crate::pool::{AnnotatedSet, Pool};
use crate::scalar::{cmp_f, Scalar};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("demo pattern must contain {{text}} and {{label}}")]
    DemoPlaceholders,
    #[error("query pattern must contain {{text}}")]
    QueryPlaceholder,
}

/// Verbalization of demonstrations and the query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub demo_pattern: String,
    pub separator: String,
    pub query_pattern: String,
    pub label_map: BTreeMap<String, String>,
}

impl Default for PromptTemplate {
    /// `"{text}: {label}"` demos joined by `" \n "`, then `"{text}:"`.
    fn default() -> Self {
        Self {
            demo_pattern: "{text}: {label}".into(),
            separator: " \n ".into(),
            query_pattern: "{text}:".into(),
            label_map: BTreeMap::new(),
        }
    }
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<(), TemplateError> {
        if !(self.demo_pattern.contains("{text}") && self.demo_pattern.contains("{label}")) {
            return Err(TemplateError::DemoPlaceholders);
        }
        if !self.query_pattern.contains("{text}") {
            return Err(TemplateError::QueryPlaceholder);
        }
        Ok(())
    }

    /// Target string for a class; the class name itself when unmapped.
    pub fn verbalize<'a>(&'a self, label: &'a str) -> &'a str {
        self.label_map.get(label).map_or(label, String::as_str)
    }

    /// Inverse of [`verbalize`](Self::verbalize).
    pub fn class_of<'a>(&'a self, verbalized: &'a str) -> &'a str {
        self.label_map
            .iter()
            .find(|(_, v)| v.as_str() == verbalized)
            .map_or(verbalized, |(k, _)| k.as_str())
    }

    pub fn render_demo(&self, text: &str, label: &str) -> String {
        self.demo_pattern
            .replace("{label}", self.verbalize(label))
            .replace("{text}", text)
    }

    pub fn render_query(&self, text: &str) -> String {
        self.query_pattern.replace("{text}", text)
    }
}

/// A retrieved demonstration.
#[derive(Debug, Clone, PartialEq)]
pub struct Demo<'a, F: Scalar> {
    pub id: &'a str,
    pub text: &'a str,
    pub label: &'a str,
    pub embedding: &'a [F],
    pub similarity: F,
}

/// k-NN retriever over the annotated set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Retriever {
    pub k: usize,
    /// Approximates a context-length limit: demos are admitted most-similar
    /// first while their rendered length fits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_chars: Option<usize>,
}

impl Retriever {
    pub fn new(k: usize) -> Self {
        Self { k, max_chars: None }
    }

    /// Up to `k` annotated demos most similar to `query`, ordered by ascending
    /// similarity so the closest one sits next to the query. Similarity ties
    /// keep the lower pool index first among the selected. A demo whose id
    /// equals `exclude_id` is never returned.
    pub fn retrieve<'a, F: Scalar>(
        &self,
        annotated: &'a AnnotatedSet,
        pool: &'a Pool<F>,
        query: &[F],
        exclude_id: Option<&str>,
        template: &PromptTemplate,
    ) -> Vec<Demo<'a, F>> {
        if self.k == 0 {
            return Vec::new();
        }
        let mut scored: Vec<(usize, Demo<'a, F>)> = annotated
            .entries()
            .iter()
            .filter(|e| Some(e.id.as_str()) != exclude_id)
            .filter_map(|e| {
                let index = pool.index_of(&e.id)?;
                let ex = pool.example(index);
                Some((
                    index,
                    Demo {
                        id: &ex.id,
                        text: &ex.text,
                        label: &e.label,
                        embedding: &ex.embedding,
                        similarity: cosine_unchecked(query, &ex.embedding),
                    },
                ))
            })
            .collect();
        // most similar first for admission
        scored.sort_by(|a, b| cmp_f(b.1.similarity, a.1.similarity).then(a.0.cmp(&b.0)));

        let mut chosen: Vec<(usize, Demo<'a, F>)> = Vec::new();
        let mut used_chars = 0usize;
        for item in scored {
            if chosen.len() == self.k {
                break;
            }
            if let Some(limit) = self.max_chars {
                let cost = template.render_demo(item.1.text, item.1.label).chars().count()
                    + template.separator.chars().count();
                if used_chars + cost > limit {
                    break;
                }
                used_chars += cost;
            }
            chosen.push(item);
        }
        chosen.sort_by(|a, b| cmp_f(a.1.similarity, b.1.similarity).then(a.0.cmp(&b.0)));
        chosen.into_iter().map(|(_, d)| d).collect()
    }
}

/// Concatenates verbalized demos and the query: `π(x1,y1) ⊕ … ⊕ π(x,*)`.
pub fn assemble_prompt<F: Scalar>(
    template: &PromptTemplate,
    demos: &[Demo<'_, F>],
    query_text: &str,
) -> Result<String, TemplateError> {
    template.validate()?;
    let mut parts: Vec<String> = demos
        .iter()
        .map(|d| template.render_demo(d.text, d.label))
        .collect();
    parts.push(template.render_query(query_text));
    Ok(parts.join(&template.separator))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    #[default]
    Classification,
    Generation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Test queries come from a split disjoint from the annotation pool.
    #[default]
    Inductive,
    /// Test queries are drawn from the annotation pool; a query never
    /// retrieves itself.
    Transductive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub truth: Option<String>,
    pub prediction: String,
    pub confidence: f64,
    pub correct: bool,
    pub retrieved: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    /// Mean of the `correct` flags; absent for generation tasks.
    pub accuracy: Option<f64>,
    pub records: Vec<EvalRecord>,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("test split is empty")]
    EmptyTestSet,
    #[error("test example `{0}` has no ground-truth label")]
    MissingLabel(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
}

/// Everything an evaluation pass needs besides the annotated set.
pub struct EvalSetup<'a, F: Scalar> {
    /// Pool holding the annotated examples.
    pub annotation_pool: &'a Pool<F>,
    pub test_pool: &'a Pool<F>,
    pub test_indices: &'a [usize],
    pub feedback: &'a dyn Feedback<F>,
    pub retriever: &'a Retriever,
    pub template: &'a PromptTemplate,
    pub mode: EvalMode,
    pub task: TaskKind,
    pub seed: u64,
    pub config_hash: String,
}

/// Builds the scoring queries for `targets` of `pool` against `annotated`.
pub(crate) fn build_queries<'a, F: Scalar>(
    annotated: &'a AnnotatedSet,
    annotation_pool: &'a Pool<F>,
    pool: &'a Pool<F>,
    targets: &[usize],
    retriever: &Retriever,
    template: &PromptTemplate,
    exclude_self: bool,
) -> Result<Vec<Query<'a, F>>, TemplateError> {
    targets
        .iter()
        .map(|&i| {
            let ex = pool.example(i);
            let demos = retriever.retrieve(
                annotated,
                annotation_pool,
                &ex.embedding,
                exclude_self.then_some(ex.id.as_str()),
                template,
            );
            let prompt = assemble_prompt(template, &demos, &ex.text)?;
            Ok(Query {
                id: &ex.id,
                text: &ex.text,
                embedding: &ex.embedding,
                demos,
                prompt,
            })
        })
        .collect()
}

/// Scores every test instance with retrieved demos and compares predictions to
/// ground truth.
pub fn evaluate<F: Scalar>(
    annotated: &AnnotatedSet,
    setup: &EvalSetup<'_, F>,
) -> Result<EvalReport, EvalError> {
    if setup.test_indices.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    if setup.task == TaskKind::Classification {
        if let Some(&i) = setup
            .test_indices
            .iter()
            .find(|&&i| setup.test_pool.example(i).label.is_none())
        {
            return Err(EvalError::MissingLabel(setup.test_pool.example(i).id.clone()));
        }
    }
    let queries = build_queries(
        annotated,
        setup.annotation_pool,
        setup.test_pool,
        setup.test_indices,
        setup.retriever,
        setup.template,
        setup.mode == EvalMode::Transductive,
    )?;
    let scored = setup.feedback.score(&queries)?;
    let records: Vec<EvalRecord> = queries
        .iter()
        .zip(scored)
        .map(|(q, rec)| {
            let truth = setup
                .test_pool
                .index_of(q.id)
                .and_then(|i| setup.test_pool.example(i).label.clone());
            let correct = setup.task == TaskKind::Classification
                && truth.as_deref() == Some(rec.prediction.as_str());
            EvalRecord {
                id: q.id.to_string(),
                truth,
                prediction: rec.prediction,
                confidence: rec.confidence,
                correct,
                retrieved: q.demos.iter().map(|d| d.id.to_string()).collect(),
            }
        })
        .collect();
    let accuracy = (setup.task == TaskKind::Classification).then(|| {
        records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64
    });
    Ok(EvalReport {
        task: setup.task,
        accuracy,
        records,
        seed: setup.seed,
        config_hash: setup.config_hash.clone(),
    })
}
