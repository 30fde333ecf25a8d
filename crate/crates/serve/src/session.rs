use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use cocoba::corpus::{cold_start_split, Dataset, Label, PoolState};
use cocoba::embeddings::EmbeddingSnapshot;
use cocoba::engine::{Checkpoint, EngineConfig, EngineError};
use cocoba::harness::f1_positive;
use cocoba::strategy::{build_learner, restore_learner, ActiveLearner};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub posting_id: String,
    pub label: Label,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// |L| when the point was measured.
    pub budget: usize,
    pub f1: f64,
    pub at: DateTime<Utc>,
}

/// Everything persisted for one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    pub seed: u64,
    pub initial_pool: PoolState,
    pub log: Vec<LogEntry>,
    pub curve: Vec<CurvePoint>,
    pub checkpoint: Checkpoint,
}

/// A live session: its record plus the learner built from it.
pub struct Session {
    pub record: SessionRecord,
    pub learner: Box<dyn ActiveLearner>,
    /// Test postings that carry a gold label; F1 is measured on these.
    test_gold: BTreeMap<String, Label>,
}

fn test_gold(dataset: &Dataset, pool: &PoolState) -> BTreeMap<String, Label> {
    let gold = dataset.gold_labels();
    pool.test.iter().filter_map(|id| gold.get(id).map(|l| (id.clone(), *l))).collect()
}

impl Session {
    pub fn create(
        id: String,
        dataset: &Dataset,
        snapshot: &EmbeddingSnapshot,
        config: EngineConfig,
        cold_start: usize,
        seed: u64,
    ) -> Result<Self, SessionError> {
        let pool = cold_start_split(dataset, cold_start, seed)?;
        let learner = build_learner(snapshot, pool.clone(), config)?;
        let now = Utc::now();
        let record = SessionRecord {
            session_id: id,
            created_at: now,
            updated_at: now,
            seed,
            initial_pool: pool.clone(),
            log: Vec::new(),
            curve: Vec::new(),
            checkpoint: learner.checkpoint(),
        };
        Ok(Session { test_gold: test_gold(dataset, &pool), record, learner })
    }

    pub fn restore(record: SessionRecord, dataset: &Dataset, snapshot: &EmbeddingSnapshot) -> Result<Self, SessionError> {
        let learner = restore_learner(snapshot, &record.checkpoint)?;
        Ok(Session { test_gold: test_gold(dataset, &record.initial_pool), record, learner })
    }

    /// Commits `label`, measures test F1 when gold test labels exist and
    /// refreshes the checkpoint. The caller persists the record.
    pub fn commit(&mut self, posting_id: &str, label: Label) -> Result<Option<f64>, SessionError> {
        self.learner.commit_label(posting_id, label)?;
        let now = Utc::now();
        self.record.log.push(LogEntry { posting_id: posting_id.to_string(), label, at: now });
        let f1 = if self.test_gold.is_empty() {
            None
        } else {
            let ids: Vec<&str> = self.test_gold.keys().map(String::as_str).collect();
            let predicted: BTreeMap<String, Label> =
                ids.iter().map(|s| s.to_string()).zip(self.learner.predict_ids(&ids)?).collect();
            let f1 = f1_positive(&predicted, &self.test_gold).map_err(|e| SessionError::Other(e.to_string()))?;
            self.record.curve.push(CurvePoint { budget: self.learner.pool().labeled.len(), f1, at: now });
            Some(f1)
        };
        self.record.updated_at = now;
        self.record.checkpoint = self.learner.checkpoint();
        Ok(f1)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error(transparent)]
    Corpus(#[from] cocoba::corpus::CorpusError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("replay diverged at entry {index}: engine queried {queried:?}, log has {logged:?}")]
    ReplayDiverged { index: usize, queried: String, logged: String },
    #[error("{0}")]
    Other(String),
}

/// Result of replaying a session's annotation log on a fresh learner.
#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub pool: PoolState,
    pub pending: Option<String>,
}

/// Rebuilds the learner from the initial pool and re-applies every logged
/// label. Each logged posting must be the query the fresh learner issues at
/// that step.
pub fn replay(record: &SessionRecord, snapshot: &EmbeddingSnapshot) -> Result<Replay, SessionError> {
    let mut learner = build_learner(snapshot, record.initial_pool.clone(), record.checkpoint.config.clone())?;
    for (index, entry) in record.log.iter().enumerate() {
        let q = learner.next_query()?;
        if q.id != entry.posting_id {
            return Err(SessionError::ReplayDiverged { index, queried: q.id, logged: entry.posting_id.clone() });
        }
        learner.commit_label(&entry.posting_id, entry.label)?;
    }
    let pending = if learner.pool().unlabeled.is_empty() { None } else { Some(learner.next_query()?.id) };
    Ok(Replay { pool: learner.pool().clone(), pending })
}

pub fn record_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.json"))
}

/// Writes through a temporary file so a crash never leaves a torn record.
pub fn save_record(dir: &Path, record: &SessionRecord) -> Result<(), SessionError> {
    fs::create_dir_all(dir)?;
    let path = record_path(dir, &record.session_id);
    let tmp = path.with_extension("json.tmp");
    let mut f = fs::File::create(&tmp)?;
    serde_json::to_writer(&mut f, record)?;
    f.write_all(b"\n")?;
    f.sync_all()?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_records(dir: &Path) -> Result<Vec<SessionRecord>, SessionError> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    paths.sort();
    for p in paths {
        if p.extension().is_some_and(|e| e == "json") {
            out.push(serde_json::from_slice(&fs::read(&p)?)?);
        }
    }
    Ok(out)
}
