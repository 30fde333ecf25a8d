//! Single-view base learner: an affine map followed by a logistic output,
//! trained by full-batch gradient descent on the L2-penalized logistic loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;

#[derive(Debug, Error, PartialEq)]
pub enum LearnerError {
    #[error("training set is empty")]
    DegenerateSet,
    #[error("vector has dimension {found}, expected {expected}")]
    DimMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub init_seed: u64,
    /// Half-width of the uniform weight initialization; 0 means zero init.
    pub init_scale: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig { learning_rate: 0.1, epochs: 200, l2: 1e-4, init_seed: 0, init_scale: 0.0 }
    }
}

/// Signed margin `2 p(positive) - 1` in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Confidence(pub f64);

impl Confidence {
    /// `2 sigma(z) - 1`, computed as `tanh(z / 2)`.
    pub fn from_logit(z: f64) -> Self {
        Confidence((0.5 * z).tanh())
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn magnitude(self) -> f64 {
        self.0.abs()
    }

    /// Zero counts as positive.
    pub fn predicted(self) -> Label {
        Label::from_score(self.0)
    }
}

/// A borrowed training example.
pub type Example<'a> = (&'a [f64], Label);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLearner {
    weights: Vec<f64>,
    bias: f64,
    config: LearnerConfig,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_dims(examples: &[Example<'_>], dim: usize) -> Result<(), LearnerError> {
    for (x, _) in examples {
        if x.len() != dim {
            return Err(LearnerError::DimMismatch { expected: dim, found: x.len() });
        }
    }
    Ok(())
}

impl LinearLearner {
    pub fn from_parts(weights: Vec<f64>, bias: f64, config: LearnerConfig) -> Self {
        LinearLearner { weights, bias, config }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Trains from scratch. Deterministic given the config.
    ///
    /// The step size is `min(learning_rate, 1 / S)` where
    /// `S = (mean ||x||^2 + 1) / 4 + l2` bounds the curvature of the loss, so
    /// the loss never increases from one epoch to the next.
    pub fn train(examples: &[Example<'_>], config: LearnerConfig) -> Result<Self, LearnerError> {
        let dim = examples.first().ok_or(LearnerError::DegenerateSet)?.0.len();
        check_dims(examples, dim)?;
        let weights = if config.init_scale > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
            (0..dim).map(|_| rng.gen_range(-config.init_scale..=config.init_scale)).collect()
        } else {
            vec![0.0; dim]
        };
        let mut learner = LinearLearner { weights, bias: 0.0, config };

        let n = examples.len() as f64;
        let mean_sq = examples.iter().map(|(x, _)| dot(x, x)).sum::<f64>() / n;
        let smoothness = 0.25 * (mean_sq + 1.0) + config.l2;
        let step = config.learning_rate.min(1.0 / smoothness);

        let mut grad = vec![0.0; dim + 1];
        for _ in 0..config.epochs {
            learner.gradient_into(examples, &mut grad);
            for (w, g) in learner.weights.iter_mut().zip(&grad) {
                *w -= step * g;
            }
            learner.bias -= step * grad[dim];
        }
        Ok(learner)
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.bias
    }

    pub fn confidence(&self, x: &[f64]) -> Result<Confidence, LearnerError> {
        if x.len() != self.weights.len() {
            return Err(LearnerError::DimMismatch { expected: self.weights.len(), found: x.len() });
        }
        Ok(Confidence::from_logit(self.logit(x)))
    }

    /// Mean logistic loss plus `l2 / 2 * ||w||^2` (bias unpenalized).
    pub fn loss(&self, examples: &[Example<'_>]) -> Result<f64, LearnerError> {
        if examples.is_empty() {
            return Err(LearnerError::DegenerateSet);
        }
        check_dims(examples, self.dim())?;
        let data = examples.iter().map(|(x, y)| softplus(-y.sign() * self.logit(x))).sum::<f64>()
            / examples.len() as f64;
        Ok(data + 0.5 * self.config.l2 * dot(&self.weights, &self.weights))
    }

    /// Analytic gradient of [`loss`](Self::loss); the last entry is the bias term.
    pub fn gradient(&self, examples: &[Example<'_>]) -> Result<Vec<f64>, LearnerError> {
        if examples.is_empty() {
            return Err(LearnerError::DegenerateSet);
        }
        check_dims(examples, self.dim())?;
        let mut g = vec![0.0; self.dim() + 1];
        self.gradient_into(examples, &mut g);
        Ok(g)
    }

    fn gradient_into(&self, examples: &[Example<'_>], g: &mut [f64]) {
        let dim = self.weights.len();
        g.iter_mut().for_each(|v| *v = 0.0);
        for (x, y) in examples {
            let y = y.sign();
            // d/dz softplus(-y z) = -y sigma(-y z)
            let r = -y * sigmoid(-y * self.logit(x));
            for (gi, xi) in g[..dim].iter_mut().zip(x.iter()) {
                *gi += r * xi;
            }
            g[dim] += r;
        }
        let n = examples.len() as f64;
        for (gi, w) in g[..dim].iter_mut().zip(&self.weights) {
            *gi = *gi / n + self.config.l2 * w;
        }
        g[dim] /= n;
    }
}
