//! Mean F1 at fixed budget fractions, and paired t-tests across seeds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::strategy::Strategy;

use super::{Curve, HarnessError};

pub const SIGNIFICANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTTest {
    pub mean_diff: f64,
    /// `None` when the differences have zero variance.
    pub t: Option<f64>,
    pub df: usize,
    pub p: f64,
    /// Zero-variance differences; `p` is 1 for a zero mean and 0 otherwise.
    pub degenerate: bool,
}

/// Two-sided paired t-test of `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTTest, HarnessError> {
    if a.len() != b.len() {
        return Err(HarnessError::IdMismatch);
    }
    let n = a.len();
    if n < 2 {
        return Err(HarnessError::InsufficientSeeds(n));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    // Differences equal up to rounding noise count as constant.
    if var.sqrt() <= 1e-12 * mean.abs().max(1.0) {
        let p = if mean.abs() <= 1e-12 { 1.0 } else { 0.0 };
        return Ok(PairedTTest { mean_diff: mean, t: None, df, p, degenerate: true });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1");
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(PairedTTest { mean_diff: mean, t: Some(t), df, p, degenerate: false })
}

/// F1 at `budget` labeled postings, linearly interpolated between records and
/// clamped to the first and last record.
pub fn curve_value_at(curve: &Curve, budget: f64) -> Option<f64> {
    let recs = &curve.records;
    let first = recs.first()?;
    if budget <= first.budget as f64 {
        return Some(first.f1);
    }
    for w in recs.windows(2) {
        let (lo, hi) = (&w[0], &w[1]);
        if budget <= hi.budget as f64 {
            let t = (budget - lo.budget as f64) / (hi.budget - lo.budget) as f64;
            return Some(lo.f1 + t * (hi.f1 - lo.f1));
        }
    }
    recs.last().map(|r| r.f1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: Strategy,
    pub seeds: Vec<u64>,
    /// `per_seed[s][f]`: F1 of seed `s` at fraction `f`.
    pub per_seed: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reference: Strategy,
    pub other: Strategy,
    pub fraction: f64,
    pub test: Option<PairedTTest>,
    pub significant: bool,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub fractions: Vec<f64>,
    pub train_size: usize,
    pub reference: Option<Strategy>,
    pub rows: Vec<StrategyRow>,
    pub comparisons: Vec<Comparison>,
}

impl Summary {
    pub fn row(&self, strategy: Strategy) -> Option<&StrategyRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    /// Mean F1 of `strategy` at the given fraction.
    pub fn mean_at(&self, strategy: Strategy, fraction: f64) -> Option<f64> {
        let f = self.fractions.iter().position(|x| (x - fraction).abs() < 1e-12)?;
        self.row(strategy).map(|r| r.mean[f])
    }
}

/// Table of mean F1 per strategy and budget fraction. The reference strategy
/// (cocoba if present, otherwise the first multi-view strategy) is tested
/// against every other strategy, paired by seed.
pub fn summarize(curves: &[Curve], fractions: &[f64]) -> Result<Summary, HarnessError> {
    let first = curves.first().ok_or(HarnessError::EmptyCurves)?;
    let train_size = first.train_size;
    let mut by_strategy: BTreeMap<Strategy, Vec<&Curve>> = BTreeMap::new();
    for c in curves {
        by_strategy.entry(c.strategy).or_default().push(c);
    }
    let mut rows = Vec::new();
    for (strategy, mut cs) in by_strategy {
        cs.sort_by_key(|c| c.seed);
        let per_seed: Vec<Vec<f64>> = cs
            .iter()
            .map(|c| {
                fractions
                    .iter()
                    .map(|f| curve_value_at(c, f * c.train_size as f64).ok_or(HarnessError::EmptyCurves))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<_, _>>()?;
        let mean = (0..fractions.len())
            .map(|f| per_seed.iter().map(|s| s[f]).sum::<f64>() / per_seed.len() as f64)
            .collect();
        rows.push(StrategyRow { strategy, seeds: cs.iter().map(|c| c.seed).collect(), per_seed, mean });
    }

    let reference = rows
        .iter()
        .map(|r| r.strategy)
        .find(|s| *s == Strategy::Cocoba)
        .or_else(|| rows.iter().map(|r| r.strategy).find(|s| s.is_multi_view()));
    let mut comparisons = Vec::new();
    if let Some(reference) = reference {
        let ref_row = rows.iter().find(|r| r.strategy == reference).expect("reference row");
        for other in rows.iter().filter(|r| r.strategy != reference) {
            for (f, fraction) in fractions.iter().enumerate() {
                let (mut a, mut b) = (Vec::new(), Vec::new());
                for (i, seed) in ref_row.seeds.iter().enumerate() {
                    if let Some(j) = other.seeds.iter().position(|s| s == seed) {
                        a.push(ref_row.per_seed[i][f]);
                        b.push(other.per_seed[j][f]);
                    }
                }
                let (test, note) = match paired_t_test(&a, &b) {
                    Ok(t) => (Some(t), t.degenerate.then(|| "zero-variance differences".to_string())),
                    Err(e) => (None, Some(e.to_string())),
                };
                comparisons.push(Comparison {
                    reference,
                    other: other.strategy,
                    fraction: *fraction,
                    significant: test.map_or(false, |t| t.p < SIGNIFICANCE),
                    test,
                    note,
                });
            }
        }
    }
    Ok(Summary { fractions: fractions.to_vec(), train_size, reference, rows, comparisons })
}
