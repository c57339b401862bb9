//! Pool data model and file formats.
//!
//! Two on-disk layouts are supported:
//!
//! * `jsonl`: one object per line with `id`, `text`, optional `label`, optional
//!   `split` and an inline `embedding` array.
//! * `jsonl+binary-embeddings`: the same JSONL without inline embeddings, plus a
//!   sidecar pair next to it: `<stem>.embeddings.json` holding
//!   `{count, dim, ids}` and `<stem>.embeddings.bin` holding `count * dim`
//!   little-endian `f32` values in row-major order, rows in `ids` order.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{norm, Scalar};

/// Split every record lands in when the file does not say otherwise.
pub const DEFAULT_SPLIT: &str = "train";
pub const TEST_SPLIT: &str = "test";

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("embedding of `{id}` has dimension {found}, expected {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("duplicate example id `{0}`")]
    DuplicateId(String),
    #[error("example `{0}` has no embedding")]
    MissingEmbedding(String),
    #[error("example `{0}` has an all-zero embedding")]
    ZeroEmbedding(String),
    #[error("unknown split `{0}`")]
    UnknownSplit(String),
    #[error("index {index} out of range for pool of {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("sidecar manifest: {0}")]
    Manifest(String),
}

pub type Result<T, E = PoolError> = std::result::Result<T, E>;

/// One pool item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct Example<F: Scalar = f32> {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub embedding: Vec<F>,
}

/// An ordered collection of examples sharing one embedding dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Pool<F: Scalar = f32> {
    examples: Vec<Example<F>>,
    dim: usize,
    splits: BTreeMap<String, Vec<usize>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Pool<F> {
    /// Builds a pool with every example in the default split.
    pub fn new(examples: Vec<Example<F>>) -> Result<Self> {
        let splits = BTreeMap::from([(DEFAULT_SPLIT.to_string(), (0..examples.len()).collect())]);
        Self::with_splits(examples, splits)
    }

    pub fn with_splits(
        examples: Vec<Example<F>>,
        splits: BTreeMap<String, Vec<usize>>,
    ) -> Result<Self> {
        let dim = examples.first().map_or(0, |e| e.embedding.len());
        let mut index = HashMap::with_capacity(examples.len());
        for (i, ex) in examples.iter().enumerate() {
            if ex.embedding.is_empty() {
                return Err(PoolError::MissingEmbedding(ex.id.clone()));
            }
            if ex.embedding.len() != dim {
                return Err(PoolError::DimensionMismatch {
                    id: ex.id.clone(),
                    expected: dim,
                    found: ex.embedding.len(),
                });
            }
            if norm(&ex.embedding) == F::zero() {
                return Err(PoolError::ZeroEmbedding(ex.id.clone()));
            }
            if index.insert(ex.id.clone(), i).is_some() {
                return Err(PoolError::DuplicateId(ex.id.clone()));
            }
        }
        for indices in splits.values() {
            if let Some(&bad) = indices.iter().find(|&&i| i >= examples.len()) {
                return Err(PoolError::IndexOutOfRange {
                    index: bad,
                    len: examples.len(),
                });
            }
        }
        Ok(Self {
            examples,
            dim,
            splits,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn examples(&self) -> &[Example<F>] {
        &self.examples
    }

    pub fn example(&self, index: usize) -> &Example<F> {
        &self.examples[index]
    }

    pub fn embedding(&self, index: usize) -> &[F] {
        &self.examples[index].embedding
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn splits(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.splits
    }

    pub fn split(&self, name: &str) -> Result<&[usize]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| PoolError::UnknownSplit(name.to_string()))
    }

    /// True when no index belongs to two of the named splits.
    pub fn splits_disjoint(&self, a: &str, b: &str) -> Result<bool> {
        let left: HashSet<usize> = self.split(a)?.iter().copied().collect();
        Ok(self.split(b)?.iter().all(|i| !left.contains(i)))
    }

    /// A new pool holding the given examples in the given order, all in the
    /// default split.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let examples = indices
            .iter()
            .map(|&i| {
                self.examples.get(i).cloned().ok_or(PoolError::IndexOutOfRange {
                    index: i,
                    len: self.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(examples)
    }

    /// The named split materialized as its own pool.
    pub fn split_pool(&self, name: &str) -> Result<Self> {
        let indices = self.split(name)?.to_vec();
        self.subset(&indices)
    }

    /// Sorted set of ground-truth labels present in the pool.
    pub fn label_space(&self) -> Vec<String> {
        let mut labels: Vec<String> = self
            .examples
            .iter()
            .filter_map(|e| e.label.clone())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        labels.sort();
        labels
    }

    /// Name of the split an index belongs to, first match in name order.
    fn split_of(&self, index: usize) -> Option<&str> {
        self.splits
            .iter()
            .find(|(_, v)| v.contains(&index))
            .map(|(k, _)| k.as_str())
    }
}

/// Where an annotation came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    GroundTruth,
    Human,
    PseudoLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedEntry {
    pub id: String,
    pub label: String,
    pub provenance: Provenance,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnnotationError {
    #[error("example `{0}` is already annotated")]
    Duplicate(String),
    #[error("example `{0}` was given an empty label")]
    EmptyLabel(String),
}

/// The annotated set, in annotation order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSet {
    entries: Vec<AnnotatedEntry>,
}

impl AnnotatedSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[AnnotatedEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.iter().any(|e| e.id == id)
    }

    pub fn label_of(&self, id: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.id == id)
            .map(|e| e.label.as_str())
    }

    pub fn push(
        &mut self,
        id: impl Into<String>,
        label: impl Into<String>,
        provenance: Provenance,
    ) -> Result<(), AnnotationError> {
        let (id, label) = (id.into(), label.into());
        if label.is_empty() {
            return Err(AnnotationError::EmptyLabel(id));
        }
        if self.contains(&id) {
            return Err(AnnotationError::Duplicate(id));
        }
        self.entries.push(AnnotatedEntry {
            id,
            label,
            provenance,
        });
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BudgetError {
    #[error("budget total must be positive")]
    ZeroTotal,
    #[error("schedule increments sum to {sum}, expected {total}")]
    ScheduleMismatch { sum: usize, total: usize },
    #[error("cannot spend {amount}: only {remaining} remaining")]
    Overspend { amount: usize, remaining: usize },
}

/// Annotation budget and its optional multi-step schedule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    total: usize,
    spent: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    schedule: Option<Vec<usize>>,
}

impl Budget {
    pub fn new(total: usize) -> Result<Self, BudgetError> {
        if total == 0 {
            return Err(BudgetError::ZeroTotal);
        }
        Ok(Self {
            total,
            spent: 0,
            schedule: None,
        })
    }

    /// A budget of zero is allowed here: strategies treat it as "return L0".
    pub fn unchecked(total: usize) -> Self {
        Self {
            total,
            spent: 0,
            schedule: None,
        }
    }

    pub fn with_schedule(total: usize, increments: Vec<usize>) -> Result<Self, BudgetError> {
        let mut budget = Self::new(total)?;
        let sum = increments.iter().sum();
        if sum != total {
            return Err(BudgetError::ScheduleMismatch { sum, total });
        }
        budget.schedule = Some(increments);
        Ok(budget)
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn spent(&self) -> usize {
        self.spent
    }

    pub fn remaining(&self) -> usize {
        self.total - self.spent
    }

    pub fn is_exhausted(&self) -> bool {
        self.spent == self.total
    }

    pub fn schedule(&self) -> Option<&[usize]> {
        self.schedule.as_deref()
    }

    pub fn spend(&mut self, amount: usize) -> Result<(), BudgetError> {
        if amount > self.remaining() {
            return Err(BudgetError::Overspend {
                amount,
                remaining: self.remaining(),
            });
        }
        self.spent += amount;
        Ok(())
    }

    /// Raises the total by `amount`, used by multi-step schedules that keep
    /// one selection state across steps.
    pub fn extend(&mut self, amount: usize) {
        self.total += amount;
    }
}

/// Seed for every randomized operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn rng(self) -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        rand_chacha::ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Independent stream for a named sub-task.
    pub fn derive(self, salt: u64) -> Self {
        // splitmix64 finalizer
        let mut z = self.0 ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        Self(z ^ (z >> 31))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolFormat {
    #[serde(rename = "jsonl")]
    Jsonl,
    #[serde(rename = "jsonl+binary-embeddings")]
    JsonlBinary,
}

impl std::str::FromStr for PoolFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(Self::Jsonl),
            "jsonl+binary-embeddings" => Ok(Self::JsonlBinary),
            other => Err(format!("unknown pool format `{other}`")),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
struct Record<F: Scalar> {
    id: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<F>>,
}

/// Manifest describing a binary embedding sidecar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidecarManifest {
    pub count: usize,
    pub dim: usize,
    pub ids: Vec<String>,
}

/// Paths of the manifest and binary blob belonging to a JSONL file.
pub fn sidecar_paths(jsonl: &Path) -> (PathBuf, PathBuf) {
    let stem = jsonl.with_extension("");
    let base = stem.to_string_lossy();
    (
        PathBuf::from(format!("{base}.embeddings.json")),
        PathBuf::from(format!("{base}.embeddings.bin")),
    )
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PoolError + '_ {
    move |source| PoolError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a pool from disk.
pub fn load_pool<F: Scalar>(path: &Path, format: PoolFormat) -> Result<Pool<F>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut records: Vec<Record<F>> = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| PoolError::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }

    if format == PoolFormat::JsonlBinary {
        let sidecar = read_sidecar::<F>(path)?;
        for record in &mut records {
            if record.embedding.is_none() {
                record.embedding = sidecar.get(&record.id).cloned();
            }
        }
    }

    let mut splits: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let examples = records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            splits
                .entry(r.split.unwrap_or_else(|| DEFAULT_SPLIT.to_string()))
                .or_default()
                .push(i);
            let embedding = r.embedding.ok_or_else(|| PoolError::MissingEmbedding(r.id.clone()))?;
            Ok(Example {
                id: r.id,
                text: r.text,
                label: r.label,
                embedding,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Pool::with_splits(examples, splits)
}

fn read_sidecar<F: Scalar>(jsonl: &Path) -> Result<HashMap<String, Vec<F>>> {
    let (manifest_path, bin_path) = sidecar_paths(jsonl);
    let manifest: SidecarManifest = serde_json::from_slice(
        &fs::read(&manifest_path).map_err(io_err(&manifest_path))?,
    )
    .map_err(|e| PoolError::Manifest(e.to_string()))?;
    if manifest.ids.len() != manifest.count {
        return Err(PoolError::Manifest(format!(
            "count {} but {} ids",
            manifest.count,
            manifest.ids.len()
        )));
    }
    let bytes = fs::read(&bin_path).map_err(io_err(&bin_path))?;
    if bytes.len() != manifest.count * manifest.dim * 4 {
        return Err(PoolError::Manifest(format!(
            "expected {} bytes, found {}",
            manifest.count * manifest.dim * 4,
            bytes.len()
        )));
    }
    let row_bytes = manifest.dim * 4;
    Ok(manifest
        .ids
        .into_iter()
        .enumerate()
        .map(|(row, id)| {
            let chunk = &bytes[row * row_bytes..(row + 1) * row_bytes];
            let values = chunk
                .chunks_exact(4)
                .map(|b| F::from_le_f32_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            (id, values)
        })
        .collect())
}

/// Writes a pool in the given format. Loading the result yields an equal pool.
pub fn save_pool<F: Scalar>(pool: &Pool<F>, path: &Path, format: PoolFormat) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for (i, ex) in pool.examples.iter().enumerate() {
        let record = Record {
            id: ex.id.clone(),
            text: ex.text.clone(),
            label: ex.label.clone(),
            split: pool.split_of(i).map(str::to_string),
            embedding: (format == PoolFormat::Jsonl).then(|| ex.embedding.clone()),
        };
        let line = serde_json::to_string(&record).map_err(|e| PoolError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))?;

    if format == PoolFormat::JsonlBinary {
        let (manifest_path, bin_path) = sidecar_paths(path);
        let manifest = SidecarManifest {
            count: pool.len(),
            dim: pool.dim,
            ids: pool.examples.iter().map(|e| e.id.clone()).collect(),
        };
        fs::write(
            &manifest_path,
            serde_json::to_vec(&manifest).map_err(|e| PoolError::Manifest(e.to_string()))?,
        )
        .map_err(io_err(&manifest_path))?;
        let bytes: Vec<u8> = pool
            .examples
            .iter()
            .flat_map(|e| e.embedding.iter().flat_map(|v| v.to_le_f32_bytes()))
            .collect();
        fs::write(&bin_path, bytes).map_err(io_err(&bin_path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(id: &str, emb: Vec<f32>) -> Example<f32> {
        Example {
            id: id.into(),
            text: format!("text {id}"),
            label: Some("pos".into()),
            embedding: emb,
        }
    }

    fn write_lines(dir: &Path, lines: &[&str]) -> PathBuf {
        let path = dir.join("pool.jsonl");
        fs::write(&path, lines.join("\n")).unwrap();
        path
    }

    #[test]
    fn loads_three_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(
            dir.path(),
            &[
                r#"{"id":"a","text":"x","embedding":[1,0,0,0]}"#,
                r#"{"id":"b","text":"y","label":"neg","embedding":[0,1,0,0]}"#,
                r#"{"id":"c","text":"z","embedding":[0,0,1,0]}"#,
            ],
        );
        let pool: Pool<f32> = load_pool(&path, PoolFormat::Jsonl).unwrap();
        assert_eq!(pool.len(), 3);
        assert_eq!(pool.dim(), 4);
        assert_eq!(pool.index_of("b"), Some(1));
        assert_eq!(pool.example(1).label.as_deref(), Some("neg"));
    }

    #[test]
    fn dimension_mismatch_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(
            dir.path(),
            &[
                r#"{"id":"a","text":"x","embedding":[1,0,0,0]}"#,
                r#"{"id":"short","text":"y","embedding":[0,1,0]}"#,
            ],
        );
        match load_pool::<f32>(&path, PoolFormat::Jsonl) {
            Err(PoolError::DimensionMismatch { id, expected, found }) => {
                assert_eq!((id.as_str(), expected, found), ("short", 4, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(
            dir.path(),
            &[
                r#"{"id":"a","text":"x","embedding":[1,0]}"#,
                r#"{"id":"a","text":"y","embedding":[0,1]}"#,
            ],
        );
        assert!(matches!(
            load_pool::<f32>(&path, PoolFormat::Jsonl),
            Err(PoolError::DuplicateId(id)) if id == "a"
        ));
    }

    #[test]
    fn malformed_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(
            dir.path(),
            &[r#"{"id":"a","text":"x","embedding":[1,0]}"#, "{not json"],
        );
        assert!(matches!(
            load_pool::<f32>(&path, PoolFormat::Jsonl),
            Err(PoolError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn zero_embedding_rejected() {
        assert!(matches!(
            Pool::new(vec![ex("z", vec![0.0, 0.0])]),
            Err(PoolError::ZeroEmbedding(_))
        ));
    }

    #[test]
    fn binary_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.jsonl");
        let pool = Pool::new(vec![
            ex("a", vec![0.1, -2.5e-8, 3.0]),
            ex("b", vec![f32::MIN_POSITIVE, 1.0, 7.25]),
        ])
        .unwrap();
        save_pool(&pool, &path, PoolFormat::JsonlBinary).unwrap();
        let (manifest, bin) = sidecar_paths(&path);
        assert!(manifest.ends_with("pool.embeddings.json"));
        assert_eq!(fs::metadata(bin).unwrap().len(), 2 * 3 * 4);
        let back: Pool<f32> = load_pool(&path, PoolFormat::JsonlBinary).unwrap();
        assert_eq!(back, pool);
    }

    #[test]
    fn splits_are_read_from_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(
            dir.path(),
            &[
                r#"{"id":"a","text":"x","embedding":[1,0]}"#,
                r#"{"id":"b","text":"y","split":"test","embedding":[0,1]}"#,
            ],
        );
        let pool: Pool<f32> = load_pool(&path, PoolFormat::Jsonl).unwrap();
        assert_eq!(pool.split("train").unwrap(), &[0]);
        assert_eq!(pool.split("test").unwrap(), &[1]);
        assert!(pool.splits_disjoint("train", "test").unwrap());
        assert_eq!(pool.split_pool("test").unwrap().example(0).id, "b");
    }

    #[test]
    fn budget_accounting() {
        let mut b = Budget::new(3).unwrap();
        b.spend(2).unwrap();
        assert_eq!(b.remaining(), 1);
        assert!(b.spend(2).is_err());
        b.spend(1).unwrap();
        assert!(b.is_exhausted());
        assert_eq!(Budget::new(0), Err(BudgetError::ZeroTotal));
        let s = Budget::with_schedule(20, vec![5, 5, 5, 5]).unwrap();
        assert_eq!(s.schedule(), Some(&[5, 5, 5, 5][..]));
        assert!(matches!(
            Budget::with_schedule(20, vec![5, 10]),
            Err(BudgetError::ScheduleMismatch { sum: 15, total: 20 })
        ));
    }

    #[test]
    fn annotated_set_rejects_duplicates_and_empty_labels() {
        let mut set = AnnotatedSet::new();
        set.push("a", "pos", Provenance::GroundTruth).unwrap();
        assert_eq!(
            set.push("a", "neg", Provenance::Human),
            Err(AnnotationError::Duplicate("a".into()))
        );
        assert_eq!(
            set.push("b", "", Provenance::Human),
            Err(AnnotationError::EmptyLabel("b".into()))
        );
        assert_eq!(set.label_of("a"), Some("pos"));
    }

    #[test]
    fn derived_seeds_differ() {
        let s = RngSeed(7);
        assert_ne!(s.derive(1), s.derive(2));
        assert_eq!(s.derive(1), RngSeed(7).derive(1));
    }
}
