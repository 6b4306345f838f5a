//! Quantum subroutines reduced to their effect on classical arrays.
//!
//! Amplitude estimation becomes additive Gaussian noise on the convolution
//! output, the bounded non-linearity is a capped ReLU, and tomography of the
//! output state becomes importance sampling of positions with probability
//! proportional to the activation value.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{QcnnError, Result};
use crate::sampling_tree::SamplingTree;
use crate::tensor::{matmul_conv, Dims3, ExpandedInput, KernelMatrix, OutputMatrix, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// One standard deviation `2 M eps` for every output entry.
    GlobalM,
    /// `2 eps ||A_p|| ||F_q||` for entry `(p, q)`.
    PerPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    /// `ceil(sigma n)` independent draws with probability proportional to value.
    Measurement,
    /// Keep the `ceil(sigma n)` largest positive entries.
    TopK,
}

/// Backward rule for entries the cap clipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CapGradient {
    /// The quantum layer cannot record where the cap was active, so clipped
    /// entries keep their upstream gradient as if the activation were ReLU.
    #[default]
    PassThrough,
    /// Exact derivative of the capped ReLU: zero above the cap.
    Zero,
}

/// Knobs of the emulated quantum layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Amplitude-estimation precision.
    pub epsilon: f64,
    /// Backpropagation (tomography) precision.
    pub delta: f64,
    /// Activation cap; `f64::INFINITY` means plain ReLU.
    #[serde(with = "cap_serde")]
    pub cap: f64,
    /// Fraction of output entries drawn during tomography.
    pub sigma: f64,
    pub noise_mode: NoiseMode,
    pub sample_mode: SampleMode,
    /// Also perturb the gradient passed to the previous layer.
    #[serde(default)]
    pub perturb_input_grad: bool,
    #[serde(default)]
    pub cap_gradient: CapGradient,
    pub seed: u64,
}

impl NoiseConfig {
    /// All quantum effects off: exact convolution, ReLU, every positive entry kept.
    pub fn classical(seed: u64) -> Self {
        Self {
            epsilon: 0.0,
            delta: 0.0,
            cap: f64::INFINITY,
            sigma: 1.0,
            noise_mode: NoiseMode::GlobalM,
            sample_mode: SampleMode::TopK,
            perturb_input_grad: false,
            cap_gradient: CapGradient::PassThrough,
            seed,
        }
    }

    pub fn quantum(epsilon: f64, delta: f64, cap: f64, sigma: f64, seed: u64) -> Self {
        Self {
            epsilon,
            delta,
            cap,
            sigma,
            noise_mode: NoiseMode::GlobalM,
            sample_mode: SampleMode::Measurement,
            perturb_input_grad: false,
            cap_gradient: CapGradient::PassThrough,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(QcnnError::InvalidParameter(m));
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return bad(format!("epsilon must be finite and >= 0, got {}", self.epsilon));
        }
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return bad(format!("delta must be finite and >= 0, got {}", self.delta));
        }
        if !(self.cap > 0.0) {
            return bad(format!("cap must be > 0, got {}", self.cap));
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            return bad(format!("sigma must be in [0, 1], got {}", self.sigma));
        }
        Ok(())
    }
}

mod cap_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(cap: &f64, s: S) -> Result<S::Ok, S::Error> {
        if cap.is_finite() {
            s.serialize_some(cap)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

fn row_norms(a: &ExpandedInput) -> Vec<f64> {
    a.0.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
}

fn col_norms(f: &KernelMatrix) -> Vec<f64> {
    f.0.columns().into_iter().map(|c| c.dot(&c).sqrt()).collect()
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

/// `M = max_{p,q} ||A_p|| ||F_q||`, the bound on every inner product the layer
/// estimates.
pub fn big_m(a: &ExpandedInput, f: &KernelMatrix) -> f64 {
    max_of(&row_norms(a)) * max_of(&col_norms(f))
}

/// `A F` plus zero-mean Gaussian error of the configured scale.
pub fn noisy_conv<R: Rng + ?Sized>(
    a: &ExpandedInput,
    f: &KernelMatrix,
    cfg: &NoiseConfig,
    rng: &mut R,
) -> Result<OutputMatrix> {
    let mut y = matmul_conv(a, f)?;
    if cfg.epsilon == 0.0 {
        return Ok(y);
    }
    match cfg.noise_mode {
        NoiseMode::GlobalM => {
            let s = 2.0 * big_m(a, f) * cfg.epsilon;
            for v in y.0.iter_mut() {
                let g: f64 = StandardNormal.sample(rng);
                *v += s * g;
            }
        }
        NoiseMode::PerPair => {
            let (rn, cn) = (row_norms(a), col_norms(f));
            for ((p, q), v) in y.0.indexed_iter_mut() {
                let g: f64 = StandardNormal.sample(rng);
                *v += 2.0 * cfg.epsilon * rn[p] * cn[q] * g;
            }
        }
    }
    Ok(y)
}

#[inline]
pub fn cap_relu(v: f64, cap: f64) -> f64 {
    v.max(0.0).min(cap)
}

/// Tomography precision equivalent to drawing `sigma` of the output entries:
/// `1 / eta^2 = sigma H' W' D'`.
pub fn eta_from_sigma(sigma: f64, dims: Dims3) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(QcnnError::InvalidParameter(format!("precision is undefined for sampling ratio {sigma}")));
    }
    Ok(1.0 / (sigma * dims.len() as f64).sqrt())
}

/// Number of tomography draws for `n` entries, `ceil(sigma n)`.
pub fn draw_count(sigma: f64, n: usize) -> usize {
    // shave the last ulp so that e.g. 0.1 * 2420 does not round up to 243
    let raw = sigma * n as f64;
    ((raw * (1.0 - 4.0 * f64::EPSILON)).ceil() as usize).min(n.max(raw.ceil() as usize))
}

/// Output of tomography on one layer: the retained entries in order of first
/// observation, with unobserved entries reading as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledTensor {
    dense: Tensor3,
    order: Vec<usize>,
    mask: Vec<bool>,
    draws: usize,
}

impl SampledTensor {
    pub fn dims(&self) -> Dims3 {
        self.dense.dims()
    }

    /// Zero-filled dense view.
    pub fn dense(&self) -> &Tensor3 {
        &self.dense
    }

    pub fn into_dense(self) -> Tensor3 {
        self.dense
    }

    /// Retained tensor offsets, first-observation order.
    pub fn retained(&self) -> &[usize] {
        &self.order
    }

    pub fn is_retained(&self, offset: usize) -> bool {
        self.mask[offset]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Draws performed (with replacement in measurement mode).
    pub fn draws(&self) -> usize {
        self.draws
    }

    /// `(offset, value)` stream in observation order.
    pub fn stream(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.order.iter().map(|&n| (n, self.dense.as_slice()[n]))
    }
}

/// Reads out a non-negative activation tensor the way tomography of the
/// layer's output state would. Retained entries carry their exact value.
pub fn importance_sample<R: Rng + ?Sized>(
    activations: &Tensor3,
    sigma: f64,
    mode: SampleMode,
    rng: &mut R,
) -> Result<SampledTensor> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(QcnnError::InvalidParameter(format!("sigma must be in [0, 1], got {sigma}")));
    }
    let values = activations.as_slice();
    if let Some(v) = values.iter().find(|v| !(**v >= 0.0)) {
        return Err(QcnnError::InvalidParameter(format!("importance sampling needs non-negative values, found {v}")));
    }
    let n = values.len();
    let budget = draw_count(sigma, n);
    let mut mask = vec![false; n];
    let mut order = Vec::new();
    let mut draws = 0;

    let total: f64 = values.iter().sum();
    if total > 0.0 && budget > 0 {
        match mode {
            SampleMode::Measurement => {
                // amplitudes are sqrt(f), so draws land on n with prob f_n / sum f
                let amps: Vec<f64> = values.iter().map(|v| v.sqrt()).collect();
                let tree = SamplingTree::from_values(&amps)?;
                for _ in 0..budget {
                    let k = tree.sample(rng)?;
                    if !mask[k] {
                        mask[k] = true;
                        order.push(k);
                    }
                }
                draws = budget;
            }
            SampleMode::TopK => {
                let mut positive: Vec<usize> = (0..n).filter(|&k| values[k] > 0.0).collect();
                if budget < positive.len() {
                    positive.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
                    positive.truncate(budget);
                }
                for &k in &positive {
                    mask[k] = true;
                }
                draws = positive.len();
                order = positive;
            }
        }
    }

    let mut dense = Tensor3::zeros(activations.dims())?;
    for &k in &order {
        dense.as_mut_slice()[k] = values[k];
    }
    Ok(SampledTensor { dense, order, mask, draws })
}
