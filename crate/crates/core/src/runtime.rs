//! Operation-count models for one convolution layer: classical, quantum
//! forward, quantum backpropagation and quantum-inspired classical.
//!
//! All costs drop poly-logarithmic factors, so only ratios between
//! configurations are meaningful. They are not wall-clock predictions.

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::emulation::{big_m, eta_from_sigma, NoiseConfig};
use crate::error::{dim_err, QcnnError, Result};
use crate::net::{masked_upstream, ConvTrace};
use crate::tensor::{kernel_to_matrix, Dims3, Kernel4, OutputMatrix, Tensor3};

pub const DEFAULT_P_GRID: usize = 101;

pub const POLYLOG_NOTE: &str = "poly-logarithmic factors omitted; compare ratios, not absolute values";

/// Mean entry of a non-negative activation matrix.
pub fn avg_activation(y: &OutputMatrix) -> Result<f64> {
    if y.0.is_empty() {
        return dim_err("empty activation matrix");
    }
    if let Some(v) = y.0.iter().find(|v| !(**v >= 0.0)) {
        return Err(QcnnError::InvalidParameter(format!("activations must be non-negative, found {v}")));
    }
    Ok(y.0.sum() / y.0.len() as f64)
}

pub fn singular_values(v: ArrayView2<'_, f64>) -> Vec<f64> {
    let (r, c) = v.dim();
    let m = DMatrix::from_fn(r, c, |i, j| v[[i, j]]);
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// `max_i sum_j |v_ij|^p`, summing over non-zero entries only so that
/// negative exponents stay finite.
pub fn row_power_sum(v: ArrayView2<'_, f64>, p: f64) -> f64 {
    v.rows()
        .into_iter()
        .map(|r| r.iter().filter(|x| **x != 0.0).map(|x| x.abs().powf(p)).sum::<f64>())
        .fold(0.0, f64::max)
}

/// The norm parameter governing quantum linear-algebra cost:
/// `min( ||V||_F, min_p sqrt(s_2p(V) s_(1-2p)(V^T)) ) / ||V||` with `p` on a
/// uniform grid over `[0, 1]`.
pub fn mu(v: ArrayView2<'_, f64>, grid: usize) -> Result<f64> {
    if grid < 2 {
        return Err(QcnnError::InvalidParameter("p-grid needs at least two points".into()));
    }
    let spectral = singular_values(v).first().copied().unwrap_or(0.0);
    if !(spectral > 0.0) {
        return Err(QcnnError::InvalidParameter("mu is undefined for a zero matrix".into()));
    }
    let frob = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let vt = v.t();
    let best = (0..grid)
        .map(|k| k as f64 / (grid - 1) as f64)
        .map(|p| (row_power_sum(v, 2.0 * p) * row_power_sum(vt, 1.0 - 2.0 * p)).sqrt())
        .fold(frob, f64::min);
    Ok(best / spectral)
}

/// Condition number over singular values above `tau`. With `tau = 0` values
/// at the level of rounding noise count as zero.
pub fn kappa(v: ArrayView2<'_, f64>, tau: f64) -> Result<f64> {
    if !(tau >= 0.0) {
        return Err(QcnnError::InvalidParameter(format!("threshold must be >= 0, got {tau}")));
    }
    let s = singular_values(v);
    let top = s.first().copied().unwrap_or(0.0);
    if !(top > 0.0) {
        return Err(QcnnError::InvalidParameter("kappa is undefined for a zero matrix".into()));
    }
    let (r, c) = v.dim();
    let floor = tau.max(top * r.max(c) as f64 * f64::EPSILON);
    let kept: Vec<f64> = s.into_iter().filter(|x| *x > floor).collect();
    match (kept.first(), kept.last()) {
        (Some(a), Some(b)) => Ok(a / b),
        _ => Err(QcnnError::InvalidParameter(format!("no singular value above {tau}"))),
    }
}

/// Measurements from a forward pass that the forward cost models need.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForwardStats {
    pub input_dims: Dims3,
    pub output_dims: Dims3,
    pub m: f64,
    pub mean_activation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForwardCosts {
    pub classical: f64,
    /// `M sqrt(C) / (eps eta^2 sqrt(E))`.
    pub quantum: f64,
    /// The same cost written with the sampled fraction:
    /// `sigma H'W'D' M sqrt(C) / (eps sqrt(E))`.
    pub quantum_sampled_form: f64,
    pub quantum_inspired: f64,
    pub eta: f64,
}

/// `inf` marks a cost that diverges (zero precision or zero mean activation).
pub fn forward_costs(stats: &ForwardStats, cap: f64, epsilon: f64, sigma: f64) -> Result<ForwardCosts> {
    let n_out = stats.output_dims.len() as f64;
    let classical = n_out * stats.input_dims.len() as f64;
    let eta = eta_from_sigma(sigma, stats.output_dims)?;
    let e = stats.mean_activation;
    let diverges = !(epsilon > 0.0) || !(e > 0.0);
    let (quantum, quantum_sampled_form, quantum_inspired) = if diverges {
        (f64::INFINITY, f64::INFINITY, f64::INFINITY)
    } else {
        (
            (1.0 / (epsilon * eta * eta)) * stats.m * cap.sqrt() / e.sqrt(),
            sigma * n_out * stats.m * cap.sqrt() / (epsilon * e.sqrt()),
            n_out * stats.m * stats.m * cap / (epsilon * epsilon * e),
        )
    };
    Ok(ForwardCosts { classical, quantum, quantum_sampled_form, quantum_inspired, eta })
}

/// Quantum backpropagation cost for one layer:
/// `((mu_A + mu_G) kappa_F + (mu_G + mu_F) kappa_Y) ln(1/delta) / delta^2`.
pub fn backprop_cost(mu_a: f64, mu_g: f64, mu_f: f64, kappa_f: f64, kappa_y: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(QcnnError::InvalidParameter(format!("delta must be in (0, 1), got {delta}")));
    }
    if [mu_a, mu_g, mu_f, kappa_f, kappa_y].iter().any(|v| !(*v > 0.0)) {
        return Err(QcnnError::InvalidParameter("matrix parameters must be positive".into()));
    }
    Ok(((mu_a + mu_g) * kappa_f + (mu_g + mu_f) * kappa_y) * (1.0 / delta).ln() / (delta * delta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackpropStats {
    pub mu_input: f64,
    pub mu_output_grad: f64,
    pub mu_kernel: f64,
    pub kappa_kernel_grad: f64,
    pub kappa_output_grad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub layer: usize,
    pub input_dims: Dims3,
    pub output_dims: Dims3,
    pub m: f64,
    pub cap: f64,
    pub mean_activation: f64,
    pub sigma: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub eta: f64,
    pub classical_forward: f64,
    pub quantum_forward: f64,
    pub quantum_forward_sampled_form: f64,
    pub quantum_inspired: f64,
    pub quantum_backprop: Option<f64>,
    pub backprop: Option<BackpropStats>,
    pub speedup_quantum: f64,
    pub speedup_inspired: f64,
    pub note: String,
}

/// Builds a report from one traced layer. The mean activation is taken over
/// the capped pre-activation, and the backprop part needs the gradient
/// arriving at this layer's output.
pub fn layer_report(
    layer: usize,
    trace: &ConvTrace,
    kernel: &Kernel4,
    cfg: &NoiseConfig,
    upstream: Option<&Tensor3>,
    p_grid: usize,
) -> Result<CostReport> {
    let f = kernel_to_matrix(kernel);
    let m = big_m(&trace.expanded, &f);
    let capped = OutputMatrix(trace.pre_activation.0.mapv(|v| v.max(0.0).min(cfg.cap)));
    let mean_activation = avg_activation(&capped)?;
    let output_dims = trace.sampled.dims();
    let stats = ForwardStats { input_dims: trace.input_dims, output_dims, m, mean_activation };
    let costs = forward_costs(&stats, cfg.cap, cfg.epsilon, cfg.sigma)?;

    let backprop = match upstream {
        Some(up) => {
            let g = masked_upstream(trace, up)?;
            let dk: Array2<f64> = trace.expanded.0.t().dot(&g.0);
            Some(BackpropStats {
                mu_input: mu(trace.expanded.view(), p_grid)?,
                mu_output_grad: mu(g.view(), p_grid)?,
                mu_kernel: mu(f.view(), p_grid)?,
                kappa_kernel_grad: kappa(dk.view(), 0.0)?,
                kappa_output_grad: kappa(g.view(), 0.0)?,
            })
        }
        None => None,
    };
    let quantum_backprop = match (&backprop, cfg.delta > 0.0 && cfg.delta < 1.0) {
        (Some(b), true) => Some(backprop_cost(
            b.mu_input,
            b.mu_output_grad,
            b.mu_kernel,
            b.kappa_kernel_grad,
            b.kappa_output_grad,
            cfg.delta,
        )?),
        _ => None,
    };

    Ok(CostReport {
        layer,
        input_dims: trace.input_dims,
        output_dims,
        m,
        cap: cfg.cap,
        mean_activation,
        sigma: cfg.sigma,
        epsilon: cfg.epsilon,
        delta: cfg.delta,
        eta: costs.eta,
        classical_forward: costs.classical,
        quantum_forward: costs.quantum,
        quantum_forward_sampled_form: costs.quantum_sampled_form,
        quantum_inspired: costs.quantum_inspired,
        quantum_backprop,
        backprop,
        speedup_quantum: costs.classical / costs.quantum,
        speedup_inspired: costs.classical / costs.quantum_inspired,
        note: POLYLOG_NOTE.into(),
    })
}

/// Combines per-image reports of one layer: the measured inputs (M, mean
/// activation, the mu and kappa values) are averaged and the costs are
/// evaluated again from the averages.
pub fn average_reports(reports: &[CostReport]) -> Result<CostReport> {
    let first = reports.first().ok_or_else(|| QcnnError::InvalidParameter("no reports to average".into()))?;
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&CostReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let m = mean(&|r| r.m);
    let mean_activation = mean(&|r| r.mean_activation);
    let stats = ForwardStats { input_dims: first.input_dims, output_dims: first.output_dims, m, mean_activation };
    let costs = forward_costs(&stats, first.cap, first.epsilon, first.sigma)?;
    let backprop = if reports.iter().all(|r| r.backprop.is_some()) {
        let b = |f: &dyn Fn(&BackpropStats) -> f64| mean(&|r| f(r.backprop.as_ref().expect("checked")));
        Some(BackpropStats {
            mu_input: b(&|s| s.mu_input),
            mu_output_grad: b(&|s| s.mu_output_grad),
            mu_kernel: b(&|s| s.mu_kernel),
            kappa_kernel_grad: b(&|s| s.kappa_kernel_grad),
            kappa_output_grad: b(&|s| s.kappa_output_grad),
        })
    } else {
        None
    };
    let quantum_backprop = match (&backprop, first.delta > 0.0 && first.delta < 1.0) {
        (Some(s), true) => Some(backprop_cost(
            s.mu_input,
            s.mu_output_grad,
            s.mu_kernel,
            s.kappa_kernel_grad,
            s.kappa_output_grad,
            first.delta,
        )?),
        _ => None,
    };
    Ok(CostReport {
        m,
        mean_activation,
        eta: costs.eta,
        classical_forward: costs.classical,
        quantum_forward: costs.quantum,
        quantum_forward_sampled_form: costs.quantum_sampled_form,
        quantum_inspired: costs.quantum_inspired,
        quantum_backprop,
        backprop,
        speedup_quantum: costs.classical / costs.quantum,
        speedup_inspired: costs.classical / costs.quantum_inspired,
        ..first.clone()
    })
}
