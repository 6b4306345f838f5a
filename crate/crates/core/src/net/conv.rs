//! One emulated quantum convolution layer: forward pipeline and masked
//! backpropagation.

use ndarray::{Array2, ShapeBuilder};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::pool::{pool_online, PoolKind, PoolTrace};
use crate::emulation::{cap_relu, importance_sample, noisy_conv, CapGradient, NoiseConfig, SampledTensor};
use crate::error::{dim_err, Result};
use crate::tensor::{
    expand_input, fold_expanded, kernel_to_matrix, matrix_to_kernel, output_dims, output_to_tensor, Dims3,
    ExpandedInput, Kernel4, KernelDims, KernelMatrix, OutputMatrix, Tensor3,
};

/// Everything the backward pass needs from one layer's forward pass.
#[derive(Debug, Clone)]
pub struct ConvTrace {
    pub input_dims: Dims3,
    pub kernel: KernelDims,
    pub expanded: ExpandedInput,
    /// Noisy pre-activation, before the cap.
    pub pre_activation: OutputMatrix,
    pub sampled: SampledTensor,
    pub pool: Option<PoolTrace>,
    pub output: Tensor3,
    /// Pre-activations above this value get no gradient (`None`: all pass).
    pub gradient_cut: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvGrad {
    pub kernel: Kernel4,
    /// Masked gradient with respect to the pre-activation.
    pub output: OutputMatrix,
    /// Gradient with respect to the layer input, when requested.
    pub input: Option<Tensor3>,
}

/// Cap, sample and pool a pre-activation matrix.
pub fn activate<R: Rng + ?Sized>(
    pre_activation: &OutputMatrix,
    out_dims: Dims3,
    cfg: &NoiseConfig,
    pool: Option<(PoolKind, usize)>,
    rng: &mut R,
) -> Result<(Tensor3, SampledTensor, Option<PoolTrace>)> {
    let capped = output_to_tensor(pre_activation, out_dims)?.map(|v| cap_relu(v, cfg.cap));
    let sampled = importance_sample(&capped, cfg.sigma, cfg.sample_mode, rng)?;
    match pool {
        None => Ok((sampled.dense().clone(), sampled, None)),
        Some((kind, size)) => {
            let (out, trace) = pool_online(sampled.stream(), out_dims, kind, size)?;
            Ok((out, sampled, Some(trace)))
        }
    }
}

pub fn forward_layer<R: Rng + ?Sized>(
    x: &Tensor3,
    kernel: &Kernel4,
    cfg: &NoiseConfig,
    pool: Option<(PoolKind, usize)>,
    rng: &mut R,
) -> Result<(Tensor3, ConvTrace)> {
    let kd = kernel.dims();
    let od = output_dims(x.dims(), kd)?;
    let expanded = expand_input(x, kd)?;
    let pre_activation = noisy_conv(&expanded, &kernel_to_matrix(kernel), cfg, rng)?;
    let (output, sampled, pool) = activate(&pre_activation, od, cfg, pool, rng)?;
    let trace = ConvTrace {
        input_dims: x.dims(),
        kernel: kd,
        expanded,
        pre_activation,
        sampled,
        pool,
        output: output.clone(),
        gradient_cut: match cfg.cap_gradient {
            CapGradient::Zero if cfg.cap.is_finite() => Some(cfg.cap),
            _ => None,
        },
    };
    Ok((output, trace))
}

/// Adds i.i.d. `Normal(0, (delta ||g||_2)^2)` to every entry of `g`.
pub fn gradient_noise<R: Rng + ?Sized>(g: &mut [f64], delta: f64, rng: &mut R) {
    if delta == 0.0 {
        return;
    }
    let s = delta * g.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in g.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v += s * z;
    }
}

/// Gradient with respect to the pre-activation: upstream values reach only
/// positions that were sampled and, when pooling, selected by the pool.
/// Entries above the cap keep their gradient unless the trace carries a cut.
pub fn masked_upstream(trace: &ConvTrace, upstream: &Tensor3) -> Result<OutputMatrix> {
    if upstream.dims() != trace.output.dims() {
        return dim_err(format!(
            "upstream {:?} does not match layer output {:?}",
            upstream.dims(),
            trace.output.dims()
        ));
    }
    let g = match &trace.pool {
        Some(p) => p.route_back(upstream.as_slice(), trace.sampled.retained())?,
        None => {
            upstream.as_slice().iter().zip(trace.sampled.mask()).map(|(&u, &keep)| if keep { u } else { 0.0 }).collect()
        }
    };
    let rows = trace.pre_activation.rows();
    let cols = trace.pre_activation.cols();
    let mut g = Array2::from_shape_vec((rows, cols).f(), g).expect("mask length matches output");
    if let Some(cut) = trace.gradient_cut {
        g.zip_mut_with(&trace.pre_activation.0, |v, &pre| {
            if pre > cut {
                *v = 0.0;
            }
        });
    }
    Ok(OutputMatrix(g))
}

/// Noise-free backward pass. `A^T G` for the kernel and the fold of `G F^T`
/// for the input.
pub fn backward_conv_exact(
    trace: &ConvTrace,
    upstream: &Tensor3,
    kernel: &Kernel4,
    want_input: bool,
) -> Result<ConvGrad> {
    if kernel.dims() != trace.kernel {
        return dim_err("kernel does not match the traced layer");
    }
    let g = masked_upstream(trace, upstream)?;
    let df = trace.expanded.0.t().dot(&g.0);
    let dk = matrix_to_kernel(&KernelMatrix(df), trace.kernel)?;
    let input = if want_input {
        let f = kernel_to_matrix(kernel);
        let da = g.0.dot(&f.0.t());
        Some(fold_expanded(&da, trace.input_dims, trace.kernel)?)
    } else {
        None
    };
    Ok(ConvGrad { kernel: dk, output: g, input })
}

/// Backward pass with the emulated tomography error: the kernel gradient gets
/// relative Gaussian noise of scale `delta`, and so does the input gradient if
/// the config asks for it.
pub fn backward_conv<R: Rng + ?Sized>(
    trace: &ConvTrace,
    upstream: &Tensor3,
    kernel: &Kernel4,
    cfg: &NoiseConfig,
    rng: &mut R,
) -> Result<ConvGrad> {
    let mut grad = backward_conv_exact(trace, upstream, kernel, true)?;
    gradient_noise(grad.kernel.as_mut_slice(), cfg.delta, rng);
    if cfg.perturb_input_grad {
        if let Some(x) = grad.input.as_mut() {
            gradient_noise(x.as_mut_slice(), cfg.delta, rng);
        }
    }
    Ok(grad)
}
