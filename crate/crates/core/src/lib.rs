//! Pool-based active learning for query-anchored short texts: two views per
//! posting, bagged co-testing on view disagreements, density-weighted query
//! selection, and the baselines and harness to evaluate it.

pub mod baselines;
pub mod corpus;
pub mod density;
pub mod embeddings;
pub mod engine;
pub mod harness;
pub mod learner;
pub mod strategy;

pub use corpus::{Dataset, Label, Posting, PoolState};
pub use embeddings::EmbeddingSnapshot;
pub use engine::{Checkpoint, Engine, EngineConfig, EngineError, QueryDecision, QuerySource};
pub use strategy::{build_learner, restore_learner, ActiveLearner, Strategy};
