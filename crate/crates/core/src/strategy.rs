//! Query strategies behind one loop interface, so the harness and the
//! annotation service drive the engine and the baselines the same way.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineLearner;
use crate::corpus::{Label, PoolState};
use crate::embeddings::EmbeddingSnapshot;
use crate::engine::{Checkpoint, Engine, EngineConfig, EngineError, QueryDecision, SwapAck};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Bagged co-testing with density-weighted contention scores.
    Cocoba,
    /// Bagging without densities.
    Coba,
    /// Density-weighted co-testing with a single pair trained on all of L.
    Coco,
    /// Plain co-testing: single pair, most confident disagreement.
    Cotesting,
    Random,
    Uncertainty,
}

impl Strategy {
    pub const ALL: [Strategy; 6] =
        [Strategy::Cocoba, Strategy::Coba, Strategy::Coco, Strategy::Cotesting, Strategy::Random, Strategy::Uncertainty];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Cocoba => "cocoba",
            Strategy::Coba => "coba",
            Strategy::Coco => "coco",
            Strategy::Cotesting => "cotesting",
            Strategy::Random => "random",
            Strategy::Uncertainty => "uncertainty",
        }
    }

    /// Multi-view strategies run by [`Engine`]; the rest are baselines.
    pub fn is_multi_view(self) -> bool {
        !matches!(self, Strategy::Random | Strategy::Uncertainty)
    }

    /// Density terms enter the contention score.
    pub fn uses_density(self) -> bool {
        matches!(self, Strategy::Cocoba | Strategy::Coco)
    }

    /// A single pair trained on the whole labeled set instead of bags.
    pub fn single_pair(self) -> bool {
        matches!(self, Strategy::Coco | Strategy::Cotesting)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim().to_lowercase())
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

/// One pool-based active-learning loop: query, commit, predict.
pub trait ActiveLearner: Send {
    fn strategy(&self) -> Strategy;

    fn pool(&self) -> &PoolState;

    /// The current query. Repeated calls return the same id until a label is
    /// committed.
    fn next_query(&mut self) -> Result<QueryDecision, EngineError>;

    fn commit_label(&mut self, id: &str, label: Label) -> Result<(), EngineError>;

    fn predict_ids(&mut self, ids: &[&str]) -> Result<Vec<Label>, EngineError>;

    fn swap_snapshot(&mut self, snapshot: &EmbeddingSnapshot) -> Result<SwapAck, EngineError>;

    fn checkpoint(&self) -> Checkpoint;
}

/// Builds the learner for `config.strategy`.
pub fn build_learner(
    snapshot: &EmbeddingSnapshot,
    pool: PoolState,
    config: EngineConfig,
) -> Result<Box<dyn ActiveLearner>, EngineError> {
    if config.strategy.is_multi_view() {
        Ok(Box::new(Engine::new(snapshot, pool, config)?))
    } else {
        Ok(Box::new(BaselineLearner::new(snapshot, pool, config)?))
    }
}

/// Rebuilds a learner from a checkpoint; learner weights are retrained.
pub fn restore_learner(
    snapshot: &EmbeddingSnapshot,
    checkpoint: &Checkpoint,
) -> Result<Box<dyn ActiveLearner>, EngineError> {
    if checkpoint.config.strategy.is_multi_view() {
        Ok(Box::new(Engine::restore(snapshot, checkpoint)?))
    } else {
        Ok(Box::new(BaselineLearner::restore(snapshot, checkpoint)?))
    }
}
