use std::collections::BTreeMap;

use crate::corpus::Label;

use super::HarnessError;

/// Positive-class confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Label, Label)>) -> Self {
        let mut c = Confusion::default();
        for (pred, gold) in pairs {
            match (pred, gold) {
                (Label::Positive, Label::Positive) => c.tp += 1,
                (Label::Positive, Label::Negative) => c.fp += 1,
                (Label::Negative, Label::Positive) => c.fn_ += 1,
                (Label::Negative, Label::Negative) => c.tn += 1,
            }
        }
        c
    }

    /// `2PR / (P + R)`, or 0 when precision and recall are both 0 or undefined.
    pub fn f1(&self) -> f64 {
        let precision = if self.tp + self.fp == 0 { 0.0 } else { self.tp as f64 / (self.tp + self.fp) as f64 };
        let recall = if self.tp + self.fn_ == 0 { 0.0 } else { self.tp as f64 / (self.tp + self.fn_) as f64 };
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    }
}

/// F1 on the positive class over identical id sets.
pub fn f1_positive(predictions: &BTreeMap<String, Label>, gold: &BTreeMap<String, Label>) -> Result<f64, HarnessError> {
    if predictions.len() != gold.len() || predictions.keys().zip(gold.keys()).any(|(a, b)| a != b) {
        return Err(HarnessError::IdMismatch);
    }
    Ok(Confusion::from_pairs(predictions.values().copied().zip(gold.values().copied())).f1())
}
