//! Vector tomography with an ℓ∞ guarantee, simulated at the level of
//! measurement counts.
//!
//! Magnitudes come from standard-basis measurements. Signs come from measuring
//! the state after interfering it with the magnitude estimate, which splits
//! each coordinate into two outcomes with amplitudes `(x_i ± sqrt(p_i)) / 2`.

use rand::Rng;

use crate::error::{QcnnError, Result};
use crate::sampling_tree::SamplingTree;

pub const DEFAULT_SIGN_THRESHOLD: f64 = 0.4;

#[derive(Debug, Clone, PartialEq)]
pub struct TomographyResult {
    pub estimate: Vec<f64>,
    /// Copies consumed by each of the two measurement rounds.
    pub samples: usize,
    pub basis_counts: Vec<usize>,
    pub plus_counts: Vec<usize>,
    pub minus_counts: Vec<usize>,
    pub signs: Vec<i8>,
}

impl TomographyResult {
    pub fn linf_error(&self, x: &[f64]) -> f64 {
        self.estimate.iter().zip(x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

fn count_for_log_dim(ln_d: f64, delta: f64) -> usize {
    (36.0 * ln_d / (delta * delta)).ceil() as usize
}

/// Copies needed for dimension `d` at precision `delta`: `ceil(36 ln d / delta^2)`.
pub fn sample_count(d: usize, delta: f64) -> Result<usize> {
    if d < 2 {
        return Err(QcnnError::InvalidParameter(format!("dimension must be at least 2, got {d}")));
    }
    if !(delta > 0.0) {
        return Err(QcnnError::InvalidParameter(format!("precision must be positive, got {delta}")));
    }
    Ok(count_for_log_dim((d as f64).ln(), delta))
}

pub fn tomography<R: Rng + ?Sized>(x: &[f64], delta: f64, rng: &mut R) -> Result<TomographyResult> {
    tomography_with_threshold(x, delta, DEFAULT_SIGN_THRESHOLD, rng)
}

pub fn tomography_with_threshold<R: Rng + ?Sized>(
    x: &[f64],
    delta: f64,
    threshold: f64,
    rng: &mut R,
) -> Result<TomographyResult> {
    let d = x.len();
    if !(delta > 0.0 && delta < 1.0) {
        return Err(QcnnError::InvalidParameter(format!("precision must be in (0, 1), got {delta}")));
    }
    let n = sample_count(d, delta)?;
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() || (norm - 1.0).abs() > 1e-9 {
        return Err(QcnnError::InvalidParameter(format!("input must be a unit vector, norm is {norm}")));
    }
    let x: Vec<f64> = x.iter().map(|v| v / norm).collect();

    let basis = SamplingTree::from_values(&x)?;
    let mut basis_counts = vec![0usize; d];
    for _ in 0..n {
        basis_counts[basis.sample(rng)?] += 1;
    }
    let p: Vec<f64> = basis_counts.iter().map(|&c| c as f64 / n as f64).collect();

    // outcomes (0, i) at index i, (1, i) at index d + i
    let mut amps = Vec::with_capacity(2 * d);
    amps.extend(x.iter().zip(&p).map(|(xi, pi)| 0.5 * (xi + pi.sqrt())));
    amps.extend(x.iter().zip(&p).map(|(xi, pi)| 0.5 * (xi - pi.sqrt())));
    let interference = SamplingTree::from_values(&amps)?;
    let total = interference.squared_norm();
    if (total - 1.0).abs() > 1e-9 {
        return Err(QcnnError::Numeric(format!("interference distribution sums to {total}")));
    }
    let mut plus_counts = vec![0usize; d];
    let mut minus_counts = vec![0usize; d];
    for _ in 0..n {
        let k = interference.sample(rng)?;
        if k < d {
            plus_counts[k] += 1;
        } else {
            minus_counts[k - d] += 1;
        }
    }

    let signs: Vec<i8> =
        (0..d).map(|i| if plus_counts[i] as f64 > threshold * n as f64 * p[i] { 1 } else { -1 }).collect();
    let estimate = p.iter().zip(&signs).map(|(pi, &s)| s as f64 * pi.sqrt()).collect();

    Ok(TomographyResult { estimate, samples: n, basis_counts, plus_counts, minus_counts, signs })
}
