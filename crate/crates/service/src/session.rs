//! One human-in-the-loop selection run and the store that owns them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock, RwLock};

use adaicl_core::calibration::pca_2d;
use adaicl_core::feedback::select_hard_set;
use adaicl_core::graph::{build_cover_sets, SemanticGraph};
use adaicl_core::inference::{EvalReport, TaskKind};
use adaicl_core::pool::Provenance;
use adaicl_core::strategies::{plan_batch, SelectionContext, SelectionState, StrategyConfig, TraceEntry};
use adaicl_harness::run::Real;
use adaicl_harness::{Dataset, ExperimentConfig, Workbench};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("{0}")]
    BadConfig(String),
    #[error("unknown session `{0}`")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    InvalidLabel(String),
    #[error("{0}")]
    Internal(String),
}

fn internal(e: impl std::fmt::Display) -> SessionError {
    SessionError::Internal(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Scoring,
    Selecting,
    AwaitingLabels,
    Done,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Scoring => "scoring",
            Phase::Selecting => "selecting",
            Phase::AwaitingLabels => "awaiting-labels",
            Phase::Done => "done",
        }
    }
}

/// A pending example as shown to annotators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingExample {
    pub id: String,
    pub text: String,
    pub confidence: Option<f64>,
    /// Position on the 2D PCA map of the candidate pool.
    pub pca: [f64; 2],
    /// Size of the example's cover set in the round that picked it.
    pub cover_set_size: usize,
}

/// Everything persisted about a session; a snapshot is one of these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionData {
    pub id: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    /// Label space annotators choose from.
    pub labels: Vec<String>,
    pub phase: Phase,
    pub state: SelectionState,
    /// Index into the budget schedule.
    pub step: usize,
    pub pending: Vec<PendingExample>,
    /// Labels submitted for the pending batch, committed once it is complete.
    pub held: BTreeMap<String, String>,
}

impl SessionData {
    pub fn total_budget(&self) -> usize {
        self.config.total_budget()
    }

    pub fn spent(&self) -> usize {
        self.state.budget.spent()
    }
}

/// Immutable per-session machinery rebuilt from (config, seed).
pub struct Runtime {
    pub bench: Workbench,
    pub graph: Option<SemanticGraph<Real>>,
    pub strategy: StrategyConfig,
    pub coords: Vec<[f64; 2]>,
}

impl Runtime {
    pub fn build(config: &ExperimentConfig, seed: u64) -> Result<Self, SessionError> {
        let entry = config
            .strategies
            .first()
            .ok_or_else(|| SessionError::BadConfig("no strategy".into()))?;
        let dataset = Dataset::load(config).map_err(|e| SessionError::BadConfig(e.to_string()))?;
        let bench = Workbench::new(&dataset, config, seed).map_err(|e| SessionError::BadConfig(e.to_string()))?;
        let strategy = config.strategy_config(entry, seed);
        strategy.validate().map_err(|e| SessionError::BadConfig(e.to_string()))?;
        let graph = bench.graph(&strategy).map_err(|e| SessionError::BadConfig(e.to_string()))?;
        let pool = &bench.candidates;
        let points: Vec<&[Real]> = (0..pool.len()).map(|i| pool.embedding(i)).collect();
        let coords = pca_2d(&points);
        Ok(Self {
            bench,
            graph,
            strategy,
            coords,
        })
    }

    fn ctx(&self) -> SelectionContext<'_, Real> {
        SelectionContext {
            pool: &self.bench.candidates,
            graph: self.graph.as_ref(),
            feedback: Some(self.bench.feedback.as_ref()),
            retriever: self.bench.retriever.clone(),
            template: &self.bench.config.template,
            config: &self.strategy,
        }
    }

    fn check_label(&self, id: &str, label: &str) -> Result<(), SessionError> {
        match self.bench.config.task {
            TaskKind::Classification if !self.bench.labels.iter().any(|l| l == label) => Err(
                SessionError::InvalidLabel(format!("`{label}` for `{id}` is not one of {:?}", self.bench.labels)),
            ),
            _ if label.trim().is_empty() => Err(SessionError::InvalidLabel(format!("empty label for `{id}`"))),
            _ => Ok(()),
        }
    }

    /// Describes a freshly planned batch using the scores it was planned from.
    fn describe(&self, state: &SelectionState, picks: &[usize]) -> Vec<PendingExample> {
        let pool = &self.bench.candidates;
        let confidence: HashMap<&str, f64> =
            state.last_records.iter().map(|r| (r.example_id.as_str(), r.confidence)).collect();
        let sizes: HashMap<usize, usize> = match &self.graph {
            Some(graph) => {
                let hard = select_hard_set(&state.last_records, self.strategy.theta);
                let universe: BTreeSet<usize> = hard.ids.iter().filter_map(|id| pool.index_of(id)).collect();
                build_cover_sets(graph, &universe, self.strategy.hops)
                    .into_iter()
                    .map(|s| (s.center, s.members.len()))
                    .collect()
            }
            None => HashMap::new(),
        };
        picks
            .iter()
            .map(|&i| {
                let ex = pool.example(i);
                PendingExample {
                    id: ex.id.clone(),
                    text: ex.text.clone(),
                    confidence: confidence.get(ex.id.as_str()).copied(),
                    pca: self.coords[i],
                    cover_set_size: sizes.get(&i).copied().unwrap_or(0),
                }
            })
            .collect()
    }
}

/// Outcome of a label submission.
#[derive(Debug, Clone)]
pub struct Submission {
    pub accepted: Vec<String>,
    /// True when the submission completed the batch and a new round ran.
    pub advanced: bool,
    pub data: Arc<SessionData>,
}

pub struct Session {
    /// Serializes writers.
    writer: Mutex<SessionData>,
    /// Latest published snapshot; readers never wait on the writer.
    latest: RwLock<Arc<SessionData>>,
    runtime: OnceLock<Arc<Runtime>>,
    snapshot: Option<PathBuf>,
}

impl Session {
    fn new(data: SessionData, snapshot: Option<PathBuf>) -> Self {
        Self {
            latest: RwLock::new(Arc::new(data.clone())),
            writer: Mutex::new(data),
            runtime: OnceLock::new(),
            snapshot,
        }
    }

    pub fn latest(&self) -> Arc<SessionData> {
        self.latest.read().expect("snapshot lock").clone()
    }

    pub fn runtime(&self) -> Result<Arc<Runtime>, SessionError> {
        if let Some(rt) = self.runtime.get() {
            return Ok(rt.clone());
        }
        let data = self.latest();
        let rt = Arc::new(Runtime::build(&data.config, data.seed)?);
        Ok(self.runtime.get_or_init(|| rt).clone())
    }

    fn publish(&self, data: &SessionData) -> Result<(), SessionError> {
        if let Some(path) = &self.snapshot {
            write_snapshot(path, data)?;
        }
        *self.latest.write().expect("snapshot lock") = Arc::new(data.clone());
        Ok(())
    }

    fn transition(&self, data: &mut SessionData, phase: Phase) -> Result<(), SessionError> {
        log::debug!("session {}: {:?} -> {:?}", data.id, data.phase, phase);
        data.phase = phase;
        self.publish(data)
    }

    /// Runs rounds until a non-empty batch is pending or the schedule ends.
    fn advance(&self, data: &mut SessionData, rt: &Runtime) -> Result<(), SessionError> {
        let increments = data.config.increments();
        let mut idle = 0;
        loop {
            if data.state.is_done() {
                if data.step + 1 < increments.len() {
                    data.step += 1;
                    data.state.extend_budget(increments[data.step]);
                    continue;
                }
                data.pending.clear();
                return self.transition(data, Phase::Done);
            }
            self.transition(data, Phase::Scoring)?;
            let batch = plan_batch(&rt.ctx(), &mut data.state).map_err(internal)?;
            self.transition(data, Phase::Selecting)?;
            if batch.picks.is_empty() {
                idle += 1;
                if idle > rt.strategy.iterations.max(2) + 1 {
                    return Err(SessionError::Internal(format!(
                        "{} made no progress with budget remaining",
                        rt.strategy.name
                    )));
                }
                continue;
            }
            data.pending = rt.describe(&data.state, &batch.picks);
            return self.transition(data, Phase::AwaitingLabels);
        }
    }

    /// Accepts labels for pending ids; commits and re-plans when the batch
    /// is complete. Either every label in `labels` is accepted or none is.
    pub fn submit(&self, labels: BTreeMap<String, String>) -> Result<Submission, SessionError> {
        let rt = self.runtime()?;
        let mut data = self.writer.lock().expect("writer lock");
        if data.phase != Phase::AwaitingLabels {
            return Err(SessionError::Conflict(format!(
                "session is {}, not awaiting labels",
                data.phase.as_str()
            )));
        }
        for (id, label) in &labels {
            if data.state.annotated.contains(id) {
                return Err(SessionError::Conflict(format!("`{id}` is already annotated")));
            }
            if !data.pending.iter().any(|p| &p.id == id) {
                return Err(SessionError::Conflict(format!("`{id}` is not in the pending batch")));
            }
            if data.held.contains_key(id) {
                return Err(SessionError::Conflict(format!("`{id}` was already labeled in this batch")));
            }
            rt.check_label(id, label)?;
        }
        let accepted: Vec<String> = labels.keys().cloned().collect();
        data.held.extend(labels);
        let complete = data.pending.iter().all(|p| data.held.contains_key(&p.id));
        if !complete {
            self.publish(&data)?;
            return Ok(Submission {
                accepted,
                advanced: false,
                data: self.latest(),
            });
        }

        let pool = &rt.bench.candidates;
        let picks: Vec<usize> = data
            .pending
            .iter()
            .map(|p| pool.index_of(&p.id).ok_or_else(|| internal(format!("`{}` left the pool", p.id))))
            .collect::<Result<_, _>>()?;
        let answers: Vec<String> = data.pending.iter().map(|p| data.held[&p.id].clone()).collect();
        // work on a copy so a failed round leaves the session untouched
        let mut next = data.clone();
        next.state
            .commit(pool, &picks, &answers, Provenance::Human)
            .map_err(internal)?;
        next.held.clear();
        next.pending.clear();
        if let Err(e) = self.advance(&mut next, &rt) {
            self.publish(&data)?;
            return Err(e);
        }
        *data = next;
        Ok(Submission {
            accepted,
            advanced: true,
            data: self.latest(),
        })
    }

    pub fn report(&self) -> Result<(Arc<SessionData>, EvalReport), SessionError> {
        let rt = self.runtime()?;
        let data = self.latest();
        let report = rt.bench.evaluate(&data.state.annotated).map_err(internal)?;
        Ok((data, report))
    }

    pub fn trace(&self) -> Vec<TraceEntry> {
        self.latest().state.trace.clone()
    }
}

fn write_snapshot(path: &Path, data: &SessionData) -> Result<(), SessionError> {
    let tmp = path.with_extension("json.tmp");
    let text = serde_json::to_string_pretty(data).map_err(internal)?;
    fs::write(&tmp, text).map_err(|e| internal(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| internal(format!("{}: {e}", path.display())))
}

/// All sessions, optionally backed by a snapshot directory.
pub struct SessionStore {
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    dir: Option<PathBuf>,
}

impl SessionStore {
    pub fn in_memory() -> Self {
        Self {
            sessions: RwLock::new(HashMap::new()),
            dir: None,
        }
    }

    /// Opens `dir`, restoring every session snapshot found there.
    pub fn open(dir: &Path) -> Result<Self, SessionError> {
        fs::create_dir_all(dir).map_err(|e| internal(format!("{}: {e}", dir.display())))?;
        let mut sessions = HashMap::new();
        let entries = fs::read_dir(dir).map_err(|e| internal(format!("{}: {e}", dir.display())))?;
        for entry in entries {
            let path = entry.map_err(internal)?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(|e| internal(format!("{}: {e}", path.display())))?;
            let data: SessionData =
                serde_json::from_str(&text).map_err(|e| internal(format!("{}: {e}", path.display())))?;
            log::info!("restored session {} ({:?})", data.id, data.phase);
            sessions.insert(data.id.clone(), Arc::new(Session::new(data, Some(path))));
        }
        Ok(Self {
            sessions: RwLock::new(sessions),
            dir: Some(dir.to_path_buf()),
        })
    }

    pub fn get(&self, id: &str) -> Result<Arc<Session>, SessionError> {
        self.sessions
            .read()
            .expect("store lock")
            .get(id)
            .cloned()
            .ok_or_else(|| SessionError::NotFound(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.sessions.read().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Validates `config`, creates the session and plans its first batch.
    pub fn create(&self, config: ExperimentConfig) -> Result<Arc<Session>, SessionError> {
        config.validate().map_err(|e| SessionError::BadConfig(e.to_string()))?;
        let [entry] = config.strategies.as_slice() else {
            return Err(SessionError::BadConfig(format!(
                "a session runs exactly one strategy, got {}",
                config.strategies.len()
            )));
        };
        if !entry.name.is_interactive() {
            return Err(SessionError::BadConfig(format!(
                "strategy `{}` has no human loop; use adaicl or adaicl-plus",
                entry.name
            )));
        }
        let [seed] = config.seeds.as_slice() else {
            return Err(SessionError::BadConfig("a session runs exactly one seed".into()));
        };
        let rt = Arc::new(Runtime::build(&config, *seed)?);
        let initial = rt.bench.initial_set().map_err(|e| SessionError::BadConfig(e.to_string()))?;
        let mut state = SelectionState::new(initial, 0);
        state.extend_budget(config.increments()[0]);

        let id = uuid::Uuid::new_v4().simple().to_string();
        let snapshot = self.dir.as_ref().map(|d| d.join(format!("{id}.json")));
        let mut data = SessionData {
            id: id.clone(),
            seed: *seed,
            labels: rt.bench.labels.clone(),
            config,
            phase: Phase::Scoring,
            state,
            step: 0,
            pending: Vec::new(),
            held: BTreeMap::new(),
        };
        let session = Arc::new(Session::new(data.clone(), snapshot));
        let _ = session.runtime.set(rt.clone());
        session.publish(&data)?;
        if let Err(e) = session.advance(&mut data, &rt) {
            if let Some(path) = &session.snapshot {
                let _ = fs::remove_file(path);
            }
            return Err(e);
        }
        *session.writer.lock().expect("writer lock") = data;
        self.sessions.write().expect("store lock").insert(id, session.clone());
        Ok(session)
    }
}
