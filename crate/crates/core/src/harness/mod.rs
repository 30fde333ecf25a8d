//! Simulated-oracle experiments: seeded cold start, gold-label replay,
//! periodic snapshot swaps and F1-on-positives learning curves.

mod metrics;
mod summary;
mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{cold_start_split, CorpusError, Dataset, Label};
use crate::embeddings::{EmbeddingError, EmbeddingSnapshot};
use crate::engine::{EngineConfig, EngineError, QuerySource};
use crate::strategy::{build_learner, Strategy};

pub use metrics::{f1_positive, Confusion};
pub use summary::{curve_value_at, paired_t_test, summarize, Comparison, PairedTTest, StrategyRow, Summary, SIGNIFICANCE};
pub use synth::{make_synthetic_dataset, SynthSpec, MODERATE_NOISE, SYNTH_TERM};

pub const DEFAULT_FRACTIONS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("queried posting {0:?} has no gold label")]
    OracleMiss(String),
    #[error("test posting {0:?} has no gold label")]
    UnlabeledTest(String),
    #[error("the dataset has no test postings")]
    NoTestSplit,
    #[error("prediction and gold id sets differ")]
    IdMismatch,
    #[error("paired t-test needs at least 2 seeds, got {0}")]
    InsufficientSeeds(usize),
    #[error("no curves to summarize")]
    EmptyCurves,
    #[error("invalid experiment: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One evaluation point of a learning curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub iteration: usize,
    /// |L| after this iteration's label.
    pub budget: usize,
    pub queried_id: String,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryLogEntry {
    pub iteration: usize,
    pub id: String,
    pub label: Label,
    pub source: QuerySource,
    pub score: Option<f64>,
}

/// Learning curve of one (strategy, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub strategy: Strategy,
    pub seed: u64,
    /// |L| + |U| at the cold start.
    pub train_size: usize,
    pub cold_start: Vec<String>,
    pub records: Vec<RunRecord>,
    pub queries: Vec<QueryLogEntry>,
}

impl Curve {
    pub fn fallback_queries(&self) -> usize {
        self.queries.iter().filter(|q| q.source == QuerySource::Fallback).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    pub cold_start: usize,
    /// Stop once |L| reaches this share of the training pool.
    pub budget_frac: f64,
    pub eval_every: usize,
    /// Swap to the next alternate snapshot every this many queries (0 = never).
    pub swap_every: usize,
    pub fractions: Vec<f64>,
    /// Shared engine settings; strategy and seed are set per cell.
    pub engine: EngineConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            strategies: vec![Strategy::Cocoba, Strategy::Uncertainty, Strategy::Random],
            seeds: (1..=5).collect(),
            cold_start: 50,
            budget_frac: 1.0,
            eval_every: 10,
            swap_every: 350,
            fractions: DEFAULT_FRACTIONS.to_vec(),
            engine: EngineConfig::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidSpec(m.to_string()));
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.strategies.is_empty() {
            return bad("at least one strategy is required");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        if !(self.budget_frac > 0.0 && self.budget_frac <= 1.0) {
            return bad("budget fraction must be in (0, 1]");
        }
        if self.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad("budget fractions must be in (0, 1]");
        }
        Ok(())
    }
}

/// Seed of the engine's own random stream for a cell, kept apart from the
/// cold-start draw that every strategy shares.
pub fn engine_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x00c0_c0ba
}

/// Runs one (strategy, seed) cell with the gold labels as oracle.
///
/// `snapshots[0]` is the initial embedding; with more than one snapshot the
/// run cycles through them every `swap_every` queries.
pub fn run_cell(
    dataset: &Dataset,
    snapshots: &[EmbeddingSnapshot],
    spec: &ExperimentSpec,
    strategy: Strategy,
    seed: u64,
) -> Result<Curve, HarnessError> {
    let first = snapshots.first().ok_or_else(|| HarnessError::InvalidSpec("no snapshot".into()))?;
    let pool = cold_start_split(dataset, spec.cold_start, seed)?;
    if pool.test.is_empty() {
        return Err(HarnessError::NoTestSplit);
    }
    let gold = dataset.gold_labels();
    let test_owned: Vec<String> = pool.test.iter().cloned().collect();
    let test_ids: Vec<&str> = test_owned.iter().map(String::as_str).collect();
    let test_gold: BTreeMap<String, Label> = test_ids
        .iter()
        .map(|id| gold.get(*id).map(|l| (id.to_string(), *l)).ok_or_else(|| HarnessError::UnlabeledTest(id.to_string())))
        .collect::<Result<_, _>>()?;

    let train_size = pool.pool_size();
    let cap = ((spec.budget_frac * train_size as f64).round() as usize).clamp(spec.cold_start, train_size);
    let cold_start: Vec<String> = pool.labeled.keys().cloned().collect();
    let config = spec.engine.clone().with_strategy(strategy).with_seed(engine_seed(seed));
    let mut learner = build_learner(first, pool, config)?;

    let mut records = Vec::new();
    let mut queries = Vec::new();
    let mut iteration = 0;
    while learner.pool().labeled.len() < cap && !learner.pool().unlabeled.is_empty() {
        let q = learner.next_query()?;
        let label = *gold.get(&q.id).ok_or_else(|| HarnessError::OracleMiss(q.id.clone()))?;
        learner.commit_label(&q.id, label)?;
        iteration += 1;
        queries.push(QueryLogEntry { iteration, id: q.id.clone(), label, source: q.source, score: q.score });

        if spec.swap_every > 0 && snapshots.len() > 1 && iteration % spec.swap_every == 0 {
            let next = &snapshots[(iteration / spec.swap_every) % snapshots.len()];
            learner.swap_snapshot(next)?;
        }
        let done = learner.pool().labeled.len() >= cap || learner.pool().unlabeled.is_empty();
        if iteration % spec.eval_every == 0 || done {
            let predicted: BTreeMap<String, Label> =
                test_ids.iter().map(|s| s.to_string()).zip(learner.predict_ids(&test_ids)?).collect();
            records.push(RunRecord {
                iteration,
                budget: learner.pool().labeled.len(),
                queried_id: q.id,
                f1: f1_positive(&predicted, &test_gold)?,
            });
        }
    }
    Ok(Curve { strategy, seed, train_size, cold_start, records, queries })
}

/// Every (strategy, seed) cell; cells run in parallel and come back ordered
/// by strategy, then seed, as listed in the spec.
pub fn run_experiment(
    dataset: &Dataset,
    snapshots: &[EmbeddingSnapshot],
    spec: &ExperimentSpec,
) -> Result<Vec<Curve>, HarnessError> {
    spec.validate()?;
    let cells: Vec<(Strategy, u64)> =
        spec.strategies.iter().flat_map(|s| spec.seeds.iter().map(move |seed| (*s, *seed))).collect();
    cells.par_iter().map(|(s, seed)| run_cell(dataset, snapshots, spec, *s, *seed)).collect()
}

pub fn cell_dir(out: &Path, strategy: Strategy, seed: u64) -> PathBuf {
    out.join(strategy.as_str()).join(format!("seed-{seed}"))
}

/// `iteration,budget,queried_id,f1`
pub fn write_curve_csv(path: &Path, curve: &Curve) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "budget", "queried_id", "f1"])?;
    for r in &curve.records {
        w.write_record([r.iteration.to_string(), r.budget.to_string(), r.queried_id.clone(), r.f1.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<RunRecord>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<RunRecord>, _>>()?)
}

/// Writes `curve.csv` and `queries.log` per cell plus `summary.json`.
pub fn write_outputs(out: &Path, curves: &[Curve], summary: &Summary) -> Result<(), HarnessError> {
    for c in curves {
        let dir = cell_dir(out, c.strategy, c.seed);
        fs::create_dir_all(&dir)?;
        write_curve_csv(&dir.join("curve.csv"), c)?;
        let mut log = std::io::BufWriter::new(fs::File::create(dir.join("queries.log"))?);
        for q in &c.queries {
            serde_json::to_writer(&mut log, q)?;
            log.write_all(b"\n")?;
        }
        log.flush()?;
    }
    fs::create_dir_all(out)?;
    let mut f = fs::File::create(out.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut f, summary)?;
    f.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (Dataset, EmbeddingSnapshot) {
        make_synthetic_dataset(&SynthSpec { n: 300, noise: 0.8, seed: 4, ..SynthSpec::default() }).unwrap()
    }

    fn spec(strategies: Vec<Strategy>, seeds: Vec<u64>) -> ExperimentSpec {
        ExperimentSpec {
            strategies,
            seeds,
            budget_frac: 1.0,
            eval_every: 1,
            engine: EngineConfig { estimators: 3, ..EngineConfig::default() },
            ..ExperimentSpec::default()
        }
    }

    #[test]
    fn budget_cap_yields_one_record_per_query() {
        let (ds, snap) = small();
        let mut s = spec(vec![Strategy::Uncertainty], vec![1]);
        let train = ds.split_ids(crate::corpus::Split::Train).len();
        s.budget_frac = 100.0 / train as f64;
        let c = run_cell(&ds, &[snap], &s, Strategy::Uncertainty, 1).unwrap();
        assert_eq!(c.records.len(), 50);
        assert_eq!(c.records.last().unwrap().budget, 100);
        for w in c.records.windows(2) {
            assert_eq!(w[1].budget, w[0].budget + 1);
        }
    }

    #[test]
    fn cross_product_of_cells_and_shared_cold_start() {
        let (ds, snap) = small();
        let mut s = spec(vec![Strategy::Cocoba, Strategy::Random], (1..=5).collect());
        s.budget_frac = 0.3;
        s.eval_every = 10;
        let curves = run_experiment(&ds, &[snap], &s).unwrap();
        assert_eq!(curves.len(), 10);
        for seed in 1..=5 {
            let starts: Vec<&Vec<String>> = curves.iter().filter(|c| c.seed == seed).map(|c| &c.cold_start).collect();
            assert_eq!(starts.len(), 2);
            assert_eq!(starts[0], starts[1]);
        }
        let dir = tempfile::tempdir().unwrap();
        let summary = summarize(&curves, &s.fractions).unwrap();
        write_outputs(dir.path(), &curves, &summary).unwrap();
        let files = walk_curves(dir.path());
        assert_eq!(files.len(), 10);
        let back = read_curve_csv(&cell_dir(dir.path(), Strategy::Cocoba, 3).join("curve.csv")).unwrap();
        assert_eq!(back, curves[2].records);
    }

    fn walk_curves(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk_curves(&p));
            } else if p.file_name().unwrap() == "curve.csv" {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn snapshot_swaps_do_not_break_the_run() {
        let (ds, snap) = small();
        let mut alt = snap.clone();
        alt.epoch = 7;
        let mut s = spec(vec![Strategy::Coba], vec![2]);
        s.budget_frac = 0.5;
        s.swap_every = 5;
        s.eval_every = 10;
        let with = run_cell(&ds, &[snap.clone(), alt], &s, Strategy::Coba, 2).unwrap();
        let without = run_cell(&ds, &[snap], &s, Strategy::Coba, 2).unwrap();
        // identical vectors: swapping must not change the query sequence
        assert_eq!(with.records, without.records);
    }

    #[test]
    fn invalid_specs() {
        let (ds, snap) = small();
        let mut s = spec(vec![Strategy::Random], vec![]);
        assert!(matches!(run_experiment(&ds, &[snap.clone()], &s), Err(HarnessError::InvalidSpec(_))));
        s.seeds = vec![1];
        s.eval_every = 0;
        assert!(matches!(run_experiment(&ds, &[snap], &s), Err(HarnessError::InvalidSpec(_))));
    }
}
