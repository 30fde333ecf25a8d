//! The bagged two-view co-testing loop.
//!
//! One iteration: draw K bootstrap samples of the labeled set, train a
//! document-view and a word-view learner on each, collect the unlabeled
//! postings the two learners of a bag disagree on (the bag's contention set),
//! weight each contention point's confidence magnitudes by Parzen densities
//! fitted on that bag's contention set, sum the per-bag scores, and query the
//! top posting. Test postings are labeled by a majority vote over the bags.
//!
//! All float accumulation runs in posting-id order, so a given dataset,
//! snapshot, config and seed always yield the same query sequence.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Label, PoolState};
use crate::density::{DensityError, ParzenEstimator};
use crate::embeddings::{EmbeddingError, EmbeddingSnapshot};
use crate::learner::{Confidence, LearnerConfig, LearnerError, LinearLearner};
use crate::strategy::{ActiveLearner, Strategy};

/// How many runner-up candidates a [`QueryDecision`] reports.
const RUNNERS_UP: usize = 5;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("the labeled pool is empty")]
    EmptyLabeledPool,
    #[error("the unlabeled pool is empty")]
    EmptyUnlabeledPool,
    #[error("no bag has contention points")]
    NoContention,
    #[error("unknown posting id {0:?}")]
    UnknownId(String),
    #[error("posting {0:?} is already labeled")]
    AlreadyLabeled(String),
    #[error("posting {0:?} is not in the unlabeled pool")]
    NotInPool(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Density(#[from] DensityError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub estimators: usize,
    pub subsample_ratio: f64,
    pub bandwidth_doc: f64,
    pub bandwidth_word: f64,
    pub strategy: Strategy,
    pub rng_seed: u64,
    pub learner: LearnerConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            estimators: 15,
            subsample_ratio: 0.6,
            bandwidth_doc: 30.0,
            bandwidth_word: 45.0,
            strategy: Strategy::Cocoba,
            rng_seed: 0,
            learner: LearnerConfig::default(),
        }
    }
}

impl EngineConfig {
    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    /// Bag count actually used: single-pair strategies always run one.
    pub fn effective_estimators(&self) -> usize {
        if self.strategy.single_pair() {
            1
        } else {
            self.estimators
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.estimators == 0 {
            return Err(EngineError::InvalidConfig("estimators must be at least 1".into()));
        }
        if !(self.subsample_ratio > 0.0 && self.subsample_ratio <= 1.0) {
            return Err(EngineError::InvalidConfig(format!(
                "subsample ratio must be in (0, 1], got {}",
                self.subsample_ratio
            )));
        }
        if !(self.bandwidth_doc > 0.0 && self.bandwidth_word > 0.0) {
            return Err(EngineError::InvalidConfig("bandwidths must be positive".into()));
        }
        Ok(())
    }
}

/// Snapshot vectors laid out by posting index. Indices follow lexicographic id
/// order, so iterating indices in ascending order iterates ids in order.
#[derive(Debug, Clone)]
pub struct ViewTable {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    dims: (usize, usize),
    doc: Vec<f64>,
    word: Vec<f64>,
}

impl ViewTable {
    pub fn new<'a>(ids: impl IntoIterator<Item = &'a str>, snapshot: &EmbeddingSnapshot) -> Result<Self, EmbeddingError> {
        let ids: BTreeSet<&str> = ids.into_iter().collect();
        snapshot.check_coverage(ids.iter().copied())?;
        let dims = snapshot.dims();
        let mut doc = Vec::with_capacity(ids.len() * dims.0);
        let mut word = Vec::with_capacity(ids.len() * dims.1);
        for id in &ids {
            let v = snapshot.get(id).expect("coverage checked");
            doc.extend_from_slice(&v.doc);
            word.extend_from_slice(&v.word);
        }
        let ids: Vec<String> = ids.into_iter().map(String::from).collect();
        let index = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        Ok(ViewTable { ids, index, dims, doc, word })
    }

    fn for_pool(pool: &PoolState, snapshot: &EmbeddingSnapshot) -> Result<Self, EmbeddingError> {
        let ids = pool.labeled.keys().chain(&pool.unlabeled).chain(&pool.test).map(String::as_str);
        ViewTable::new(ids, snapshot)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn doc(&self, i: usize) -> &[f64] {
        &self.doc[i * self.dims.0..(i + 1) * self.dims.0]
    }

    pub fn word(&self, i: usize) -> &[f64] {
        &self.word[i * self.dims.1..(i + 1) * self.dims.1]
    }
}

/// Labeled and unlabeled sets by table index.
#[derive(Debug, Clone, Default)]
struct IndexPool {
    labeled: BTreeMap<usize, Label>,
    unlabeled: BTreeSet<usize>,
}

impl IndexPool {
    fn from_pool(pool: &PoolState, table: &ViewTable) -> Self {
        let idx = |id: &String| table.index_of(id).expect("table covers the pool");
        IndexPool {
            labeled: pool.labeled.iter().map(|(id, l)| (idx(id), *l)).collect(),
            unlabeled: pool.unlabeled.iter().map(idx).collect(),
        }
    }
}

/// The two base learners of one bag.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerPair {
    pub doc: LinearLearner,
    pub word: LinearLearner,
}

impl LearnerPair {
    pub fn confidences(&self, table: &ViewTable, i: usize) -> (Confidence, Confidence) {
        (
            Confidence::from_logit(self.doc.logit(table.doc(i))),
            Confidence::from_logit(self.word.logit(table.word(i))),
        )
    }

    /// `Conf_doc + Conf_word`; its sign is the pair's label.
    pub fn pair_sum(&self, table: &ViewTable, i: usize) -> f64 {
        let (d, w) = self.confidences(table, i);
        d.value() + w.value()
    }
}

/// Trains both views of one bag on the (multi)set `sample`.
pub fn train_pair(
    sample: &[usize],
    labels: &BTreeMap<usize, Label>,
    table: &ViewTable,
    config: &LearnerConfig,
) -> Result<LearnerPair, EngineError> {
    let label = |i: &usize| labels[i];
    let doc: Vec<(&[f64], Label)> = sample.iter().map(|i| (table.doc(*i), label(i))).collect();
    let word: Vec<(&[f64], Label)> = sample.iter().map(|i| (table.word(*i), label(i))).collect();
    Ok(LearnerPair { doc: LinearLearner::train(&doc, *config)?, word: LinearLearner::train(&word, *config)? })
}

/// A contention posting within one bag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContentionPoint {
    pub index: usize,
    pub conf_doc: f64,
    pub conf_word: f64,
    pub p_doc: f64,
    pub p_word: f64,
}

impl ContentionPoint {
    pub fn score(&self) -> f64 {
        contention_score(self.conf_doc, self.conf_word, self.p_doc, self.p_word)
    }
}

/// `P_D |Conf_D| + P_W |Conf_W|`.
pub fn contention_score(conf_doc: f64, conf_word: f64, p_doc: f64, p_word: f64) -> f64 {
    p_doc * conf_doc.abs() + p_word * conf_word.abs()
}

/// The two views assign opposite classes; a zero confidence counts as positive.
pub fn is_contention(conf_doc: f64, conf_word: f64) -> bool {
    Label::from_score(conf_doc) != Label::from_score(conf_word)
}

#[derive(Debug, Clone)]
pub struct BagState {
    sample: Vec<usize>,
    learners: Option<LearnerPair>,
    contention: Vec<ContentionPoint>,
    densities: Option<(ParzenEstimator, ParzenEstimator)>,
}

impl BagState {
    pub fn new(sample: Vec<usize>) -> Self {
        BagState { sample, learners: None, contention: Vec::new(), densities: None }
    }

    /// Sampled labeled postings (with repeats), by table index.
    pub fn sample(&self) -> &[usize] {
        &self.sample
    }

    pub fn learners(&self) -> Option<&LearnerPair> {
        self.learners.as_ref()
    }

    pub fn contention(&self) -> &[ContentionPoint] {
        &self.contention
    }

    pub fn densities(&self) -> Option<&(ParzenEstimator, ParzenEstimator)> {
        self.densities.as_ref()
    }

    fn invalidate(&mut self) {
        self.learners = None;
        self.contention.clear();
        self.densities = None;
    }
}

/// Draws one sample per bag. Single-pair strategies take L itself.
pub fn draw_samples(labeled: &BTreeMap<usize, Label>, config: &EngineConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let ids: Vec<usize> = labeled.keys().copied().collect();
    if config.strategy.single_pair() {
        return vec![ids];
    }
    let size = ((config.subsample_ratio * ids.len() as f64).round() as usize).max(1);
    (0..config.estimators).map(|_| (0..size).map(|_| ids[rng.gen_range(0..ids.len())]).collect()).collect()
}

/// Samples and trains every bag for one iteration.
pub fn train_bags(
    labeled: &BTreeMap<usize, Label>,
    table: &ViewTable,
    config: &EngineConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<BagState>, EngineError> {
    if labeled.is_empty() {
        return Err(EngineError::EmptyLabeledPool);
    }
    let mut bags: Vec<BagState> = draw_samples(labeled, config, rng).into_iter().map(BagState::new).collect();
    bags.par_iter_mut().try_for_each(|bag| -> Result<(), EngineError> {
        bag.learners = Some(train_pair(&bag.sample, labeled, table, &config.learner)?);
        Ok(())
    })?;
    Ok(bags)
}

/// Unlabeled postings the two learners disagree on, in id order. Densities
/// are left at 1.
pub fn detect_contention<'a>(
    pair: &LearnerPair,
    unlabeled: impl IntoIterator<Item = &'a usize>,
    table: &ViewTable,
) -> Vec<ContentionPoint> {
    unlabeled
        .into_iter()
        .filter_map(|&index| {
            let (d, w) = pair.confidences(table, index);
            is_contention(d.value(), w.value()).then_some(ContentionPoint {
                index,
                conf_doc: d.value(),
                conf_word: w.value(),
                p_doc: 1.0,
                p_word: 1.0,
            })
        })
        .collect()
}

/// Fits one Parzen estimator per view on the contention vectors and stores
/// each point's density under its own bag's estimators.
pub fn fit_densities(
    points: &mut [ContentionPoint],
    table: &ViewTable,
    config: &EngineConfig,
) -> Result<Option<(ParzenEstimator, ParzenEstimator)>, EngineError> {
    if points.is_empty() {
        return Ok(None);
    }
    let doc = ParzenEstimator::fit(points.iter().map(|p| table.doc(p.index)), config.bandwidth_doc)?;
    let word = ParzenEstimator::fit(points.iter().map(|p| table.word(p.index)), config.bandwidth_word)?;
    for ((p, pd), pw) in points.iter_mut().zip(doc.self_densities()).zip(word.self_densities()) {
        p.p_doc = pd;
        p.p_word = pw;
    }
    Ok(Some((doc, word)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BagDetail {
    pub bag: usize,
    pub conf_doc: f64,
    pub conf_word: f64,
    pub p_doc: f64,
    pub p_word: f64,
    pub bag_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub index: usize,
    pub id: String,
    pub details: Vec<BagDetail>,
    pub aggregate: f64,
}

/// Sums per-bag contention scores across bags and ranks the union of the
/// contention sets: descending aggregate, ties by ascending id.
pub fn score_candidates(bags: &[BagState], table: &ViewTable) -> Result<Vec<ScoredCandidate>, EngineError> {
    let mut by_index: BTreeMap<usize, ScoredCandidate> = BTreeMap::new();
    for (b, bag) in bags.iter().enumerate() {
        for p in &bag.contention {
            let bag_score = p.score();
            let entry = by_index.entry(p.index).or_insert_with(|| ScoredCandidate {
                index: p.index,
                id: table.id(p.index).to_string(),
                details: Vec::new(),
                aggregate: 0.0,
            });
            entry.details.push(BagDetail {
                bag: b,
                conf_doc: p.conf_doc,
                conf_word: p.conf_word,
                p_doc: p.p_doc,
                p_word: p.p_word,
                bag_score,
            });
            entry.aggregate += bag_score;
        }
    }
    if by_index.is_empty() {
        return Err(EngineError::NoContention);
    }
    let mut ranked: Vec<ScoredCandidate> = by_index.into_values().collect();
    ranked.sort_by(|a, b| b.aggregate.total_cmp(&a.aggregate).then_with(|| a.id.cmp(&b.id)));
    Ok(ranked)
}

/// Top-ranked candidate that is still unlabeled.
pub fn select_query<'a>(ranked: &'a [ScoredCandidate], unlabeled: &BTreeSet<usize>) -> Option<&'a ScoredCandidate> {
    ranked.iter().find(|c| unlabeled.contains(&c.index))
}

/// Positive iff at least half of the pairs vote positive (`PCount >= K / 2`).
pub fn majority_vote(pair_sums: impl IntoIterator<Item = f64>) -> Label {
    let (mut positive, mut total) = (0usize, 0usize);
    for s in pair_sums {
        total += 1;
        if s >= 0.0 {
            positive += 1;
        }
    }
    if 2 * positive >= total {
        Label::Positive
    } else {
        Label::Negative
    }
}

/// Majority-vote label of posting `index` over trained bags.
pub fn predict(bags: &[BagState], index: usize, table: &ViewTable) -> Label {
    majority_vote(bags.iter().map(|b| b.learners.as_ref().expect("bag trained").pair_sum(table, index)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuerySource {
    /// Top of the contention ranking.
    Contention,
    /// No bag had contention; smallest summed margin of a pair trained on L.
    Fallback,
    Random,
    Uncertainty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedId {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankContext {
    /// Size of the ranked candidate list the query was drawn from.
    pub candidates: usize,
    pub runners_up: Vec<RankedId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDecision {
    pub id: String,
    pub source: QuerySource,
    /// Aggregate contention score, or the margin magnitude for uncertainty-style picks.
    pub score: Option<f64>,
    pub rank_context: RankContext,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapAck {
    pub epoch: u64,
}

/// Serializable loop state. Learner weights are not stored; they are
/// retrained from the samples on restore.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: EngineConfig,
    pub pool: PoolState,
    pub bag_samples: Vec<Vec<String>>,
    /// Bags were drawn for the current iteration and no label has been
    /// committed since.
    pub round_open: bool,
    /// ChaCha word position, as a decimal string.
    pub rng_word_pos: String,
    pub snapshot_epoch: u64,
}

pub(crate) fn rng_position(rng: &ChaCha8Rng) -> String {
    rng.get_word_pos().to_string()
}

pub(crate) fn rng_at(seed: u64, pos: &str) -> Result<ChaCha8Rng, EngineError> {
    let pos: u128 = pos.parse().map_err(|_| EngineError::Checkpoint(format!("bad rng position {pos:?}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_word_pos(pos);
    Ok(rng)
}

/// Smallest `|sum of confidences|` over `candidates`, ties by id.
pub(crate) fn least_margin<'a>(
    candidates: impl IntoIterator<Item = &'a usize>,
    margin: impl Fn(usize) -> f64,
) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for &i in candidates {
        let m = margin(i).abs();
        if best.map_or(true, |(_, b)| m < b) {
            best = Some((i, m));
        }
    }
    best
}

pub struct Engine {
    config: EngineConfig,
    table: ViewTable,
    pool: PoolState,
    ipool: IndexPool,
    rng: ChaCha8Rng,
    bags: Vec<BagState>,
    round_open: bool,
    ranking: Option<Vec<ScoredCandidate>>,
    pending: Option<QueryDecision>,
    epoch: u64,
}

impl Engine {
    pub fn new(snapshot: &EmbeddingSnapshot, pool: PoolState, config: EngineConfig) -> Result<Self, EngineError> {
        config.validate()?;
        if !config.strategy.is_multi_view() {
            return Err(EngineError::InvalidConfig(format!("{} is not a co-testing strategy", config.strategy)));
        }
        if !pool.is_partition() {
            return Err(EngineError::InvalidConfig("pool sets overlap".into()));
        }
        let table = ViewTable::for_pool(&pool, snapshot)?;
        let ipool = IndexPool::from_pool(&pool, &table);
        let rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        Ok(Engine {
            config,
            table,
            pool,
            ipool,
            rng,
            bags: Vec::new(),
            round_open: false,
            ranking: None,
            pending: None,
            epoch: snapshot.epoch,
        })
    }

    pub fn restore(snapshot: &EmbeddingSnapshot, cp: &Checkpoint) -> Result<Self, EngineError> {
        let mut engine = Engine::new(snapshot, cp.pool.clone(), cp.config.clone())?;
        engine.rng = rng_at(cp.config.rng_seed, &cp.rng_word_pos)?;
        engine.bags = cp
            .bag_samples
            .iter()
            .map(|ids| {
                ids.iter()
                    .map(|id| {
                        engine
                            .table
                            .index_of(id)
                            .filter(|i| engine.ipool.labeled.contains_key(i))
                            .ok_or_else(|| EngineError::Checkpoint(format!("bag sample {id:?} is not labeled")))
                    })
                    .collect::<Result<Vec<_>, _>>()
                    .map(BagState::new)
            })
            .collect::<Result<_, _>>()?;
        engine.round_open = cp.round_open && !engine.bags.is_empty();
        engine.epoch = cp.snapshot_epoch;
        Ok(engine)
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn table(&self) -> &ViewTable {
        &self.table
    }

    pub fn bags(&self) -> &[BagState] {
        &self.bags
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Unlabeled postings by table index.
    pub fn unlabeled_indices(&self) -> &BTreeSet<usize> {
        &self.ipool.unlabeled
    }

    /// Draws fresh bags unless this iteration already has them.
    fn ensure_round(&mut self) -> Result<(), EngineError> {
        if self.round_open && !self.bags.is_empty() {
            return Ok(());
        }
        if self.ipool.labeled.is_empty() {
            return Err(EngineError::EmptyLabeledPool);
        }
        self.bags = draw_samples(&self.ipool.labeled, &self.config, &mut self.rng)
            .into_iter()
            .map(BagState::new)
            .collect();
        self.round_open = true;
        self.ranking = None;
        Ok(())
    }

    fn ensure_trained(&mut self) -> Result<(), EngineError> {
        let (labeled, table, cfg) = (&self.ipool.labeled, &self.table, &self.config.learner);
        self.bags.par_iter_mut().filter(|b| b.learners.is_none()).try_for_each(|bag| -> Result<(), EngineError> {
            bag.learners = Some(train_pair(&bag.sample, labeled, table, cfg)?);
            Ok(())
        })
    }

    fn analyze(&mut self) -> Result<(), EngineError> {
        let (unlabeled, table, config) = (&self.ipool.unlabeled, &self.table, &self.config);
        self.bags.par_iter_mut().try_for_each(|bag| -> Result<(), EngineError> {
            let pair = bag.learners.as_ref().expect("trained before analysis");
            bag.contention = detect_contention(pair, unlabeled, table);
            bag.densities = if config.strategy.uses_density() {
                fit_densities(&mut bag.contention, table, config)?
            } else {
                None
            };
            Ok(())
        })?;
        self.ranking = Some(match score_candidates(&self.bags, &self.table) {
            Ok(r) => r,
            Err(EngineError::NoContention) => Vec::new(),
            Err(e) => return Err(e),
        });
        Ok(())
    }

    /// The current iteration's contention ranking (computed on demand).
    pub fn ranked_candidates(&mut self) -> Result<&[ScoredCandidate], EngineError> {
        self.ensure_round()?;
        self.ensure_trained()?;
        if self.ranking.is_none() {
            self.analyze()?;
        }
        Ok(self.ranking.as_deref().unwrap_or_default())
    }

    /// Uncertainty pick over U with one pair trained on all of L.
    pub fn fallback_query(&self) -> Result<(usize, f64), EngineError> {
        let all: Vec<usize> = self.ipool.labeled.keys().copied().collect();
        let pair = train_pair(&all, &self.ipool.labeled, &self.table, &self.config.learner)?;
        least_margin(&self.ipool.unlabeled, |i| pair.pair_sum(&self.table, i)).ok_or(EngineError::EmptyUnlabeledPool)
    }

    pub fn next_query(&mut self) -> Result<QueryDecision, EngineError> {
        if let Some(p) = &self.pending {
            return Ok(p.clone());
        }
        if self.ipool.unlabeled.is_empty() {
            return Err(EngineError::EmptyUnlabeledPool);
        }
        self.ranked_candidates()?;
        let ranking = self.ranking.as_deref().unwrap_or_default();
        let runners_up: Vec<RankedId> = ranking
            .iter()
            .take(RUNNERS_UP + 1)
            .map(|c| RankedId { id: c.id.clone(), score: c.aggregate })
            .collect();
        let decision = match select_query(ranking, &self.ipool.unlabeled) {
            Some(top) => QueryDecision {
                id: top.id.clone(),
                source: QuerySource::Contention,
                score: Some(top.aggregate),
                rank_context: RankContext {
                    candidates: ranking.len(),
                    runners_up: runners_up.into_iter().filter(|r| r.id != top.id).take(RUNNERS_UP).collect(),
                },
            },
            None => {
                let (index, margin) = self.fallback_query()?;
                QueryDecision {
                    id: self.table.id(index).to_string(),
                    source: QuerySource::Fallback,
                    score: Some(margin),
                    rank_context: RankContext { candidates: self.ipool.unlabeled.len(), runners_up: Vec::new() },
                }
            }
        };
        self.pending = Some(decision.clone());
        Ok(decision)
    }

    /// Moves `id` from U to L, appends it to every bag sample and marks all
    /// learners for retraining.
    pub fn commit_label(&mut self, id: &str, label: Label) -> Result<(), EngineError> {
        let index = self.table.index_of(id).ok_or_else(|| EngineError::UnknownId(id.to_string()))?;
        if self.ipool.labeled.contains_key(&index) {
            return Err(EngineError::AlreadyLabeled(id.to_string()));
        }
        if !self.ipool.unlabeled.remove(&index) {
            return Err(EngineError::NotInPool(id.to_string()));
        }
        self.ipool.labeled.insert(index, label);
        self.pool.unlabeled.remove(id);
        self.pool.labeled.insert(id.to_string(), label);
        for bag in &mut self.bags {
            bag.sample.push(index);
            bag.invalidate();
        }
        self.round_open = false;
        self.ranking = None;
        self.pending = None;
        Ok(())
    }

    pub fn predict_ids(&mut self, ids: &[&str]) -> Result<Vec<Label>, EngineError> {
        let indices = ids
            .iter()
            .map(|id| self.table.index_of(id).ok_or_else(|| EngineError::UnknownId(id.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        if self.bags.is_empty() {
            self.ensure_round()?;
        }
        self.ensure_trained()?;
        Ok(indices.into_iter().map(|i| predict(&self.bags, i, &self.table)).collect())
    }

    /// Replaces all vectors; learners and densities are retrained from the
    /// current samples at next use.
    pub fn swap_snapshot(&mut self, snapshot: &EmbeddingSnapshot) -> Result<SwapAck, EngineError> {
        self.table = ViewTable::for_pool(&self.pool, snapshot)?;
        self.epoch += 1;
        for bag in &mut self.bags {
            bag.invalidate();
        }
        self.ranking = None;
        self.pending = None;
        Ok(SwapAck { epoch: self.epoch })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            pool: self.pool.clone(),
            bag_samples: self
                .bags
                .iter()
                .map(|b| b.sample.iter().map(|i| self.table.id(*i).to_string()).collect())
                .collect(),
            round_open: self.round_open,
            rng_word_pos: rng_position(&self.rng),
            snapshot_epoch: self.epoch,
        }
    }
}

impl ActiveLearner for Engine {
    fn strategy(&self) -> Strategy {
        self.config.strategy
    }

    fn pool(&self) -> &PoolState {
        &self.pool
    }

    fn next_query(&mut self) -> Result<QueryDecision, EngineError> {
        Engine::next_query(self)
    }

    fn commit_label(&mut self, id: &str, label: Label) -> Result<(), EngineError> {
        Engine::commit_label(self, id, label)
    }

    fn predict_ids(&mut self, ids: &[&str]) -> Result<Vec<Label>, EngineError> {
        Engine::predict_ids(self, ids)
    }

    fn swap_snapshot(&mut self, snapshot: &EmbeddingSnapshot) -> Result<SwapAck, EngineError> {
        Engine::swap_snapshot(self, snapshot)
    }

    fn checkpoint(&self) -> Checkpoint {
        Engine::checkpoint(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::ViewVectors;

    /// Two-dimensional toy pool: doc view separates by x, word view by y.
    fn toy(n_labeled: usize, n_unlabeled: usize, n_test: usize) -> (EmbeddingSnapshot, PoolState) {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut vectors = Vec::new();
        let mut pool = PoolState::default();
        for i in 0..n_labeled + n_unlabeled + n_test {
            let id = format!("p{i:04}");
            let y = if rng.gen_bool(0.4) { 1.0 } else { -1.0 };
            let doc = vec![y + rng.gen_range(-1.2..1.2), rng.gen_range(-1.0..1.0)];
            let word = vec![rng.gen_range(-1.0..1.0), y + rng.gen_range(-1.2..1.2)];
            vectors.push((id.clone(), ViewVectors { doc, word }));
            let label = Label::from_score(y);
            if i < n_labeled {
                pool.labeled.insert(id, label);
            } else if i < n_labeled + n_unlabeled {
                pool.unlabeled.insert(id);
            } else {
                pool.test.insert(id);
            }
        }
        (EmbeddingSnapshot::from_vectors((2, 2), vectors).unwrap(), pool)
    }

    fn config(strategy: Strategy) -> EngineConfig {
        EngineConfig { bandwidth_doc: 1.0, bandwidth_word: 1.5, ..EngineConfig::default() }
            .with_strategy(strategy)
            .with_seed(3)
    }

    #[test]
    fn bag_sizes_follow_subsample_ratio() {
        let (snap, pool) = toy(50, 100, 0);
        let mut e = Engine::new(&snap, pool, config(Strategy::Cocoba)).unwrap();
        e.next_query().unwrap();
        assert_eq!(e.bags().len(), 15);
        assert!(e.bags().iter().all(|b| b.sample().len() == 30));
    }

    #[test]
    fn single_pair_uses_all_of_l() {
        let (snap, pool) = toy(50, 100, 0);
        let labeled: Vec<usize> = (0..50).collect();
        for s in [Strategy::Coco, Strategy::Cotesting] {
            let mut e = Engine::new(&snap, pool.clone(), config(s)).unwrap();
            e.next_query().unwrap();
            assert_eq!(e.bags().len(), 1);
            assert_eq!(e.bags()[0].sample(), labeled.as_slice());
        }
    }

    #[test]
    fn samples_are_seeded() {
        let (snap, pool) = toy(50, 100, 0);
        let mut a = Engine::new(&snap, pool.clone(), config(Strategy::Cocoba)).unwrap();
        let mut b = Engine::new(&snap, pool, config(Strategy::Cocoba)).unwrap();
        a.next_query().unwrap();
        b.next_query().unwrap();
        assert_eq!(a.checkpoint().bag_samples, b.checkpoint().bag_samples);
    }

    #[test]
    fn empty_labeled_pool() {
        let (snap, mut pool) = toy(1, 10, 0);
        let id = pool.labeled.keys().next().unwrap().clone();
        pool.labeled.clear();
        pool.unlabeled.insert(id);
        let mut e = Engine::new(&snap, pool, config(Strategy::Cocoba)).unwrap();
        assert!(matches!(e.next_query(), Err(EngineError::EmptyLabeledPool)));
    }

    #[test]
    fn contention_rule() {
        assert!(is_contention(0.8, -0.3));
        assert!(!is_contention(0.8, 0.1));
        assert!(is_contention(0.0, -0.2));
        assert!(!is_contention(0.0, 0.0));
    }

    #[test]
    fn contention_score_examples() {
        assert!((contention_score(0.8, -0.5, 0.6, 0.2) - 0.58).abs() < 1e-12);
        assert_eq!(contention_score(0.9, -0.7, 0.0, 0.0), 0.0);
    }

    fn bag_with(points: &[(usize, f64)]) -> BagState {
        let mut b = BagState::new(vec![]);
        b.contention = points
            .iter()
            .map(|&(index, s)| ContentionPoint { index, conf_doc: s, conf_word: -s, p_doc: 0.5, p_word: 0.5 })
            .collect();
        b
    }

    #[test]
    fn aggregation_sums_over_bags() {
        let (snap, pool) = toy(5, 5, 0);
        let table = ViewTable::for_pool(&pool, &snap).unwrap();
        // bag_score = 0.5|s| + 0.5|s| = |s|
        let mut bags = vec![bag_with(&[(3, 0.5)]), bag_with(&[(3, 0.2), (1, 0.1)]), bag_with(&[(3, 0.1)])];
        bags.extend((0..12).map(|_| bag_with(&[])));
        let ranked = score_candidates(&bags, &table).unwrap();
        assert_eq!(ranked[0].index, 3);
        assert!((ranked[0].aggregate - 0.8).abs() < 1e-12);
        assert_eq!(ranked[0].details.len(), 3);
        assert_eq!(ranked[1].index, 1);
        assert!(matches!(score_candidates(&bags[3..], &table), Err(EngineError::NoContention)));
    }

    #[test]
    fn ranking_ties_break_by_id() {
        let (snap, pool) = toy(5, 5, 0);
        let table = ViewTable::for_pool(&pool, &snap).unwrap();
        let bags = vec![bag_with(&[(7, 0.4), (2, 0.4), (5, 0.9)])];
        let ranked = score_candidates(&bags, &table).unwrap();
        let order: Vec<usize> = ranked.iter().map(|c| c.index).collect();
        assert_eq!(order, vec![5, 2, 7]);
        let u: BTreeSet<usize> = [2, 7].into_iter().collect();
        assert_eq!(select_query(&ranked, &u).unwrap().index, 2);
    }

    #[test]
    fn majority_vote_threshold() {
        let votes = |pos: usize, k: usize| (0..k).map(move |i| if i < pos { 0.3 } else { -0.3 });
        assert_eq!(majority_vote(votes(8, 15)), Label::Positive);
        assert_eq!(majority_vote(votes(7, 15)), Label::Negative);
        assert_eq!(majority_vote([-0.1]), Label::Negative);
        assert_eq!(majority_vote([0.0]), Label::Positive);
    }

    #[test]
    fn commit_updates_pool_and_samples() {
        let (snap, pool) = toy(50, 100, 10);
        let mut e = Engine::new(&snap, pool, config(Strategy::Cocoba)).unwrap();
        let q = e.next_query().unwrap();
        assert_eq!(e.next_query().unwrap(), q);
        e.commit_label(&q.id, Label::Positive).unwrap();
        assert_eq!(e.pool().labeled.len(), 51);
        assert_eq!(e.pool().unlabeled.len(), 99);
        assert!(e.bags().iter().all(|b| b.sample().len() == 31));
        assert!(matches!(e.commit_label(&q.id, Label::Positive), Err(EngineError::AlreadyLabeled(_))));
        assert!(matches!(e.commit_label("nope", Label::Positive), Err(EngineError::UnknownId(_))));
        let test_id = e.pool().test.iter().next().unwrap().clone();
        assert!(matches!(e.commit_label(&test_id, Label::Positive), Err(EngineError::NotInPool(_))));

        let index = e.table().index_of(&q.id).unwrap();
        e.ranked_candidates().unwrap();
        assert!(e.bags().iter().all(|b| b.contention().iter().all(|p| p.index != index)));
    }

    #[test]
    fn predict_with_one_pair_is_sign_of_sum() {
        let (snap, pool) = toy(40, 20, 30);
        let test: Vec<String> = pool.test.iter().cloned().collect();
        let mut e = Engine::new(&snap, pool, config(Strategy::Coco)).unwrap();
        let ids: Vec<&str> = test.iter().map(String::as_str).collect();
        let labels = e.predict_ids(&ids).unwrap();
        let pair = e.bags()[0].learners().unwrap();
        for (id, l) in ids.iter().zip(labels) {
            let s = pair.pair_sum(e.table(), e.table().index_of(id).unwrap());
            assert_eq!(l, Label::from_score(s));
        }
    }

    #[test]
    fn no_contention_falls_back_to_uncertainty() {
        // Both views carry the same signal, so the learners always agree.
        let mut vectors = Vec::new();
        let mut pool = PoolState::default();
        for i in 0..40 {
            let x = i as f64 / 10.0 - 2.05;
            let id = format!("q{i:02}");
            vectors.push((id.clone(), ViewVectors { doc: vec![x], word: vec![x] }));
            if i % 4 == 0 {
                pool.labeled.insert(id, Label::from_score(x));
            } else {
                pool.unlabeled.insert(id);
            }
        }
        let snap = EmbeddingSnapshot::from_vectors((1, 1), vectors).unwrap();
        let mut e = Engine::new(&snap, pool, config(Strategy::Cocoba)).unwrap();
        let q = e.next_query().unwrap();
        assert_eq!(q.source, QuerySource::Fallback);
        assert!(e.bags().iter().all(|b| b.contention().is_empty()));
        let (expected, _) = e.fallback_query().unwrap();
        assert_eq!(q.id, e.table().id(expected));
    }

    #[test]
    fn noop_swap_keeps_the_query() {
        let (snap, pool) = toy(50, 100, 0);
        let mut a = Engine::new(&snap, pool.clone(), config(Strategy::Cocoba)).unwrap();
        let mut b = Engine::new(&snap, pool.clone(), config(Strategy::Cocoba)).unwrap();
        assert_eq!(b.swap_snapshot(&snap).unwrap().epoch, 1);
        assert_eq!(a.next_query().unwrap(), b.next_query().unwrap());
        // mid-iteration swap recomputes from the same samples
        b.swap_snapshot(&snap).unwrap();
        assert!(b.bags().iter().all(|bag| bag.learners().is_none()));
        assert_eq!(a.next_query().unwrap(), b.next_query().unwrap());
    }

    #[test]
    fn swap_requires_coverage() {
        let (snap, pool) = toy(10, 10, 0);
        let mut e = Engine::new(&snap, pool.clone(), config(Strategy::Cocoba)).unwrap();
        let missing = pool.unlabeled.iter().next().unwrap();
        let partial =
            EmbeddingSnapshot::from_vectors((2, 2), snap.iter().filter(|(id, _)| *id != missing).map(|(i, v)| (i.clone(), v.clone())))
                .unwrap();
        assert!(matches!(
            e.swap_snapshot(&partial),
            Err(EngineError::Embedding(EmbeddingError::Coverage { .. }))
        ));
    }

    #[test]
    fn checkpoint_restores_pending_query() {
        let (snap, pool) = toy(50, 100, 10);
        let mut e = Engine::new(&snap, pool, config(Strategy::Cocoba)).unwrap();
        for _ in 0..3 {
            let q = e.next_query().unwrap();
            e.commit_label(&q.id, Label::Negative).unwrap();
        }
        let q = e.next_query().unwrap();
        let cp = e.checkpoint();
        let json = serde_json::to_string(&cp).unwrap();
        let mut r = Engine::restore(&snap, &serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(r.next_query().unwrap(), q);
        e.commit_label(&q.id, Label::Positive).unwrap();
        r.commit_label(&q.id, Label::Positive).unwrap();
        assert_eq!(e.next_query().unwrap(), r.next_query().unwrap());
    }

    #[test]
    fn invalid_configs() {
        let (snap, pool) = toy(5, 5, 0);
        for cfg in [
            EngineConfig { estimators: 0, ..EngineConfig::default() },
            EngineConfig { subsample_ratio: 0.0, ..EngineConfig::default() },
            EngineConfig { subsample_ratio: 1.5, ..EngineConfig::default() },
            EngineConfig { bandwidth_doc: -1.0, ..EngineConfig::default() },
            EngineConfig::default().with_strategy(Strategy::Random),
        ] {
            assert!(matches!(Engine::new(&snap, pool.clone(), cfg), Err(EngineError::InvalidConfig(_))));
        }
    }
}
