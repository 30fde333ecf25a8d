//! Single-learner baselines: random sampling and least-margin uncertainty
//! sampling. Both see the concatenated document and word vectors.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Label, PoolState};
use crate::embeddings::EmbeddingSnapshot;
use crate::engine::{
    least_margin, rng_at, rng_position, Checkpoint, EngineConfig, EngineError, QueryDecision, QuerySource,
    RankContext, SwapAck, ViewTable,
};
use crate::learner::{LearnerConfig, LinearLearner};
use crate::strategy::{ActiveLearner, Strategy};

/// Row-major `doc ++ word` vectors by table index.
#[derive(Debug, Clone)]
pub struct JointTable {
    table: ViewTable,
    dim: usize,
    joint: Vec<f64>,
}

impl JointTable {
    pub fn new(table: ViewTable) -> Self {
        let (d, w) = table.dims();
        let mut joint = Vec::with_capacity(table.len() * (d + w));
        for i in 0..table.len() {
            joint.extend_from_slice(table.doc(i));
            joint.extend_from_slice(table.word(i));
        }
        JointTable { table, dim: d + w, joint }
    }

    pub fn table(&self) -> &ViewTable {
        &self.table
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.joint[i * self.dim..(i + 1) * self.dim]
    }
}

/// Uniform draw from the id-sorted unlabeled set.
pub fn random_query<'a>(unlabeled: &'a BTreeSet<String>, rng: &mut ChaCha8Rng) -> Result<&'a str, EngineError> {
    if unlabeled.is_empty() {
        return Err(EngineError::EmptyUnlabeledPool);
    }
    let k = rng.gen_range(0..unlabeled.len());
    Ok(unlabeled.iter().nth(k).expect("index in range"))
}

/// Unlabeled posting with the smallest confidence magnitude; ties by id.
pub fn uncertainty_query(
    learner: &LinearLearner,
    unlabeled: &BTreeSet<usize>,
    joint: &JointTable,
) -> Result<(usize, f64), EngineError> {
    least_margin(unlabeled, |i| learner.confidence(joint.row(i)).expect("joint dims").value())
        .ok_or(EngineError::EmptyUnlabeledPool)
}

fn train_joint(
    labeled: &BTreeMap<usize, Label>,
    joint: &JointTable,
    config: &LearnerConfig,
) -> Result<LinearLearner, EngineError> {
    let examples: Vec<(&[f64], Label)> = labeled.iter().map(|(i, l)| (joint.row(*i), *l)).collect();
    Ok(LinearLearner::train(&examples, *config)?)
}

pub struct BaselineLearner {
    config: EngineConfig,
    joint: JointTable,
    pool: PoolState,
    labeled: BTreeMap<usize, Label>,
    unlabeled: BTreeSet<usize>,
    rng: ChaCha8Rng,
    learner: Option<LinearLearner>,
    pending: Option<QueryDecision>,
    epoch: u64,
}

impl BaselineLearner {
    pub fn new(snapshot: &EmbeddingSnapshot, pool: PoolState, config: EngineConfig) -> Result<Self, EngineError> {
        if config.strategy.is_multi_view() {
            return Err(EngineError::InvalidConfig(format!("{} is not a baseline strategy", config.strategy)));
        }
        if !pool.is_partition() {
            return Err(EngineError::InvalidConfig("pool sets overlap".into()));
        }
        let ids = pool.labeled.keys().chain(&pool.unlabeled).chain(&pool.test).map(String::as_str);
        let joint = JointTable::new(ViewTable::new(ids, snapshot)?);
        let idx = |id: &String| joint.table().index_of(id).expect("table covers the pool");
        let labeled = pool.labeled.iter().map(|(id, l)| (idx(id), *l)).collect();
        let unlabeled = pool.unlabeled.iter().map(idx).collect();
        let rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        Ok(BaselineLearner {
            config,
            joint,
            pool,
            labeled,
            unlabeled,
            rng,
            learner: None,
            pending: None,
            epoch: snapshot.epoch,
        })
    }

    pub fn restore(snapshot: &EmbeddingSnapshot, cp: &Checkpoint) -> Result<Self, EngineError> {
        let mut b = BaselineLearner::new(snapshot, cp.pool.clone(), cp.config.clone())?;
        b.rng = rng_at(cp.config.rng_seed, &cp.rng_word_pos)?;
        b.epoch = cp.snapshot_epoch;
        Ok(b)
    }

    fn ensure_learner(&mut self) -> Result<&LinearLearner, EngineError> {
        if self.learner.is_none() {
            if self.labeled.is_empty() {
                return Err(EngineError::EmptyLabeledPool);
            }
            self.learner = Some(train_joint(&self.labeled, &self.joint, &self.config.learner)?);
        }
        Ok(self.learner.as_ref().expect("just trained"))
    }

    pub fn next_query(&mut self) -> Result<QueryDecision, EngineError> {
        if let Some(p) = &self.pending {
            return Ok(p.clone());
        }
        if self.unlabeled.is_empty() {
            return Err(EngineError::EmptyUnlabeledPool);
        }
        let context = RankContext { candidates: self.unlabeled.len(), runners_up: Vec::new() };
        let decision = match self.config.strategy {
            Strategy::Random => QueryDecision {
                id: random_query(&self.pool.unlabeled, &mut self.rng)?.to_string(),
                source: QuerySource::Random,
                score: None,
                rank_context: context,
            },
            _ => {
                self.ensure_learner()?;
                let learner = self.learner.as_ref().expect("trained");
                let (i, m) = uncertainty_query(learner, &self.unlabeled, &self.joint)?;
                QueryDecision {
                    id: self.joint.table().id(i).to_string(),
                    source: QuerySource::Uncertainty,
                    score: Some(m),
                    rank_context: context,
                }
            }
        };
        self.pending = Some(decision.clone());
        Ok(decision)
    }

    pub fn commit_label(&mut self, id: &str, label: Label) -> Result<(), EngineError> {
        let index = self.joint.table().index_of(id).ok_or_else(|| EngineError::UnknownId(id.to_string()))?;
        if self.labeled.contains_key(&index) {
            return Err(EngineError::AlreadyLabeled(id.to_string()));
        }
        if !self.unlabeled.remove(&index) {
            return Err(EngineError::NotInPool(id.to_string()));
        }
        self.labeled.insert(index, label);
        self.pool.unlabeled.remove(id);
        self.pool.labeled.insert(id.to_string(), label);
        self.learner = None;
        self.pending = None;
        Ok(())
    }

    pub fn predict_ids(&mut self, ids: &[&str]) -> Result<Vec<Label>, EngineError> {
        let indices = ids
            .iter()
            .map(|id| self.joint.table().index_of(id).ok_or_else(|| EngineError::UnknownId(id.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        self.ensure_learner()?;
        let learner = self.learner.as_ref().expect("trained");
        Ok(indices.into_iter().map(|i| Label::from_score(learner.logit(self.joint.row(i)))).collect())
    }
}

impl ActiveLearner for BaselineLearner {
    fn strategy(&self) -> Strategy {
        self.config.strategy
    }

    fn pool(&self) -> &PoolState {
        &self.pool
    }

    fn next_query(&mut self) -> Result<QueryDecision, EngineError> {
        BaselineLearner::next_query(self)
    }

    fn commit_label(&mut self, id: &str, label: Label) -> Result<(), EngineError> {
        BaselineLearner::commit_label(self, id, label)
    }

    fn predict_ids(&mut self, ids: &[&str]) -> Result<Vec<Label>, EngineError> {
        BaselineLearner::predict_ids(self, ids)
    }

    fn swap_snapshot(&mut self, snapshot: &EmbeddingSnapshot) -> Result<SwapAck, EngineError> {
        let ids = self.pool.labeled.keys().chain(&self.pool.unlabeled).chain(&self.pool.test).map(String::as_str);
        self.joint = JointTable::new(ViewTable::new(ids, snapshot)?);
        self.epoch += 1;
        self.learner = None;
        self.pending = None;
        Ok(SwapAck { epoch: self.epoch })
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            pool: self.pool.clone(),
            bag_samples: Vec::new(),
            round_open: false,
            rng_word_pos: rng_position(&self.rng),
            snapshot_epoch: self.epoch,
        }
    }
}
