//! Synthetic two-view corpus with context-dependent labels.
//!
//! Each posting belongs to one of `contexts` usage contexts; a fixed share of
//! them are the positive sense. The word view is the context centroid plus
//! noise. The doc view carries the label along one axis plus a topic
//! orthogonal to it, plus noise. Every positive context shares its topic with
//! one negative context, so on the doc view those two differ only by the
//! label axis while the word view tells them apart. Both views are rescaled
//! so their mean pairwise distance matches the default density bandwidths.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, DatasetMeta, Entry, Label, Posting, Split};
use crate::density::auto_bandwidth;
use crate::embeddings::{EmbeddingSnapshot, ViewVectors};

use super::HarnessError;

pub const SYNTH_TERM: &str = "apple";

/// Noise level at which a fully trained joint classifier plateaus near 0.8 F1.
pub const MODERATE_NOISE: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub pos_rate: f64,
    pub contexts: usize,
    /// Standard deviation of the per-posting noise, relative to unit-scale
    /// centroids.
    pub noise: f64,
    /// Strength of the label axis in the doc view.
    pub signal: f64,
    pub dims: (usize, usize),
    pub test_fraction: f64,
    /// Target mean pairwise distance per view.
    pub scale: (f64, f64),
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n: 4000,
            pos_rate: 0.18,
            contexts: 8,
            noise: MODERATE_NOISE,
            signal: 1.0,
            dims: (24, 16),
            test_fraction: 1.0 / 3.0,
            scale: (30.0, 45.0),
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn positive_contexts(&self) -> usize {
        ((0.375 * self.contexts as f64).round() as usize).clamp(1, self.contexts / 2)
    }

    fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidSpec(m.to_string()));
        if self.n < 4 {
            return bad("synthetic corpus needs at least 4 postings");
        }
        if self.contexts < 2 {
            return bad("at least 2 contexts are required");
        }
        if !(self.pos_rate > 0.0 && self.pos_rate < 1.0) {
            return bad("positive rate must be in (0, 1)");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test fraction must be in (0, 1)");
        }
        if self.dims.0 < 2 || self.dims.1 < 1 {
            return bad("doc view needs at least 2 dims, word view at least 1");
        }
        if !(self.noise >= 0.0 && self.signal > 0.0 && self.scale.0 > 0.0 && self.scale.1 > 0.0) {
            return bad("noise must be non-negative, signal and scale positive");
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, sd: f64) -> Vec<f64> {
    (0..dim).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn rescale(vs: &mut [Vec<f64>], target: f64, seed: u64) {
    let refs: Vec<&[f64]> = vs.iter().map(Vec::as_slice).collect();
    let mean = auto_bandwidth(&refs, seed).unwrap_or(0.0);
    let k = if mean > 0.0 { target / mean } else { 1.0 };
    for v in vs.iter_mut() {
        for x in v.iter_mut() {
            *x = ((*x * k) as f32) as f64;
        }
    }
}

/// Builds the dataset and its embedding snapshot. Identical specs give
/// identical output.
pub fn make_synthetic_dataset(spec: &SynthSpec) -> Result<(Dataset, EmbeddingSnapshot), HarnessError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (dd, dw) = spec.dims;
    let n_pos = spec.positive_contexts();

    let word_centroids: Vec<Vec<f64>> = (0..spec.contexts).map(|_| gaussian(&mut rng, dw, 1.0)).collect();
    // Negative context n_pos + j shares topic j; positive context j owns it.
    let topics: Vec<Vec<f64>> = (0..spec.contexts - n_pos)
        .map(|_| {
            let mut t = gaussian(&mut rng, dd, 1.0);
            t[0] = 0.0;
            t
        })
        .collect();
    let topic_of = |c: usize| if c < n_pos { c } else { c - n_pos };
    let weights: Vec<f64> = (0..spec.contexts)
        .map(|c| if c < n_pos { spec.pos_rate / n_pos as f64 } else { (1.0 - spec.pos_rate) / (spec.contexts - n_pos) as f64 })
        .collect();

    let mut labels = Vec::with_capacity(spec.n);
    let mut ctx = Vec::with_capacity(spec.n);
    let mut docs = Vec::with_capacity(spec.n);
    let mut words = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut c = spec.contexts - 1;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                c = i;
                break;
            }
        }
        let y = if c < n_pos { Label::Positive } else { Label::Negative };
        let mut doc = gaussian(&mut rng, dd, spec.noise);
        for (d, t) in doc.iter_mut().zip(&topics[topic_of(c)]) {
            *d += t;
        }
        doc[0] += y.sign() * spec.signal;
        let mut word = gaussian(&mut rng, dw, spec.noise);
        for (w, m) in word.iter_mut().zip(&word_centroids[c]) {
            *w += m;
        }
        labels.push(y);
        ctx.push(c);
        docs.push(doc);
        words.push(word);
    }
    rescale(&mut docs, spec.scale.0, spec.seed);
    rescale(&mut words, spec.scale.1, spec.seed.wrapping_add(1));

    let mut order: Vec<usize> = (0..spec.n).collect();
    order.shuffle(&mut rng);
    let n_test = ((spec.test_fraction * spec.n as f64).round() as usize).clamp(1, spec.n - 1);
    let mut is_test = vec![false; spec.n];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }

    let terms = vec![SYNTH_TERM.to_string()];
    let width = (spec.n - 1).to_string().len();
    let mut entries = Vec::with_capacity(spec.n);
    let mut snapshot = EmbeddingSnapshot::new(spec.dims);
    for (i, ((doc, word), (y, c))) in docs.into_iter().zip(words).zip(labels.into_iter().zip(ctx)).enumerate() {
        let id = format!("s{i:0width$}");
        let text = format!("context {c} note {i} about {SYNTH_TERM} in context {c}");
        let posting = Posting::from_text(id.clone(), text, &terms, Some(y))?;
        entries.push(Entry { posting, split: if is_test[i] { Split::Test } else { Split::Train } });
        snapshot.insert(id, ViewVectors { doc, word })?;
    }
    let meta = DatasetMeta { query_terms: terms, name: format!("synthetic-{}", spec.seed) };
    Ok((Dataset::new(meta, entries)?, snapshot))
}
