//! Parzen window estimates with the triangular kernel `K(u) = max(0, 1 - u)`.
//!
//! Densities are the plain kernel average over the stored points, so they stay
//! in `[0, 1]` and are not normalized by kernel volume.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Above this many points the mean pairwise distance is estimated from a
/// random subsample of pairs.
pub const EXACT_BANDWIDTH_LIMIT: usize = 2000;
pub const BANDWIDTH_PAIR_SAMPLES: usize = 2000;

#[derive(Debug, Error, PartialEq)]
pub enum DensityError {
    #[error("cannot fit a density on an empty set")]
    EmptySet,
    #[error("bandwidth must be positive, got {0}")]
    NonPositiveBandwidth(f64),
    #[error("vector has dimension {found}, expected {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("bandwidth needs at least two points")]
    UndefinedBandwidth,
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParzenEstimator {
    /// Row-major copy of the fitted points.
    points: Vec<f64>,
    dim: usize,
    bandwidth: f64,
}

impl ParzenEstimator {
    pub fn fit<'a>(points: impl IntoIterator<Item = &'a [f64]>, bandwidth: f64) -> Result<Self, DensityError> {
        if !(bandwidth > 0.0) {
            return Err(DensityError::NonPositiveBandwidth(bandwidth));
        }
        let mut iter = points.into_iter();
        let first = iter.next().ok_or(DensityError::EmptySet)?;
        let dim = first.len();
        let mut flat = first.to_vec();
        for p in iter {
            if p.len() != dim {
                return Err(DensityError::DimMismatch { expected: dim, found: p.len() });
            }
            flat.extend_from_slice(p);
        }
        Ok(ParzenEstimator { points: flat, dim, bandwidth })
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `(1/n) sum_i max(0, 1 - ||x - p_i|| / h)`.
    pub fn density(&self, x: &[f64]) -> Result<f64, DensityError> {
        if x.len() != self.dim {
            return Err(DensityError::DimMismatch { expected: self.dim, found: x.len() });
        }
        Ok(self.density_unchecked(x))
    }

    pub(crate) fn density_unchecked(&self, x: &[f64]) -> f64 {
        let h2 = self.bandwidth * self.bandwidth;
        let mut acc = 0.0;
        if self.dim == 0 {
            return 1.0;
        }
        for p in self.points.chunks_exact(self.dim) {
            let d2: f64 = p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < h2 {
                acc += 1.0 - d2.sqrt() / self.bandwidth;
            }
        }
        acc / self.len() as f64
    }

    /// Density at every stored point, each pair's distance computed once.
    ///
    /// Per point the kernel terms are still added in stored order, so each
    /// value is bit-identical to `density` at that point.
    pub fn self_densities(&self) -> Vec<f64> {
        let n = self.len();
        let mut acc = vec![0.0; n];
        if self.dim == 0 {
            return vec![1.0; n];
        }
        let h2 = self.bandwidth * self.bandwidth;
        let rows: Vec<&[f64]> = self.points.chunks_exact(self.dim).collect();
        for a in 0..n {
            acc[a] += 1.0;
            for b in a + 1..n {
                let d2: f64 = rows[a].iter().zip(rows[b]).map(|(x, y)| (x - y) * (x - y)).sum();
                if d2 < h2 {
                    let k = 1.0 - d2.sqrt() / self.bandwidth;
                    acc[a] += k;
                    acc[b] += k;
                }
            }
        }
        acc.iter().map(|v| v / n as f64).collect()
    }
}

/// Mean pairwise Euclidean distance.
///
/// Exact over all unordered pairs up to [`EXACT_BANDWIDTH_LIMIT`] points;
/// beyond that, the mean over [`BANDWIDTH_PAIR_SAMPLES`] uniformly drawn
/// distinct pairs (seeded).
pub fn auto_bandwidth(points: &[&[f64]], seed: u64) -> Result<f64, DensityError> {
    let n = points.len();
    if n < 2 {
        return Err(DensityError::UndefinedBandwidth);
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(DensityError::DimMismatch { expected: dim, found: p.len() });
    }
    if n <= EXACT_BANDWIDTH_LIMIT {
        let mut total = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                total += euclidean(points[i], points[j]);
            }
        }
        Ok(total / (n * (n - 1) / 2) as f64)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total = 0.0;
        for _ in 0..BANDWIDTH_PAIR_SAMPLES {
            let i = rng.gen_range(0..n);
            let mut j = rng.gen_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            total += euclidean(points[i], points[j]);
        }
        Ok(total / BANDWIDTH_PAIR_SAMPLES as f64)
    }
}
