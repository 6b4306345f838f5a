//! The network engine: emulated quantum convolutions followed by a classical
//! fully connected head.

mod checkpoint;
mod conv;
mod dense;
mod pool;

pub use checkpoint::{Checkpoint, Normalization, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use conv::{
    activate, backward_conv, backward_conv_exact, forward_layer, gradient_noise, masked_upstream, ConvGrad, ConvTrace,
};
pub use dense::{
    argmax_rows, fc_backward, fc_forward, relu_backward_in_place, relu_in_place, softmax_nll, FcGrad, FcLayer,
};
pub use pool::{pool_online, pooled_dims, PoolKind, PoolTrace};

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::emulation::NoiseConfig;
use crate::error::{dim_err, QcnnError, Result};
use crate::rng::StreamKey;
use crate::tensor::{output_dims, Dims3, Kernel4, KernelDims, Tensor3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv {
        height: usize,
        width: usize,
        in_depth: usize,
        out_depth: usize,
        /// Replaces the run-wide noise settings for this layer.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        noise: Option<NoiseConfig>,
    },
    /// Pools the output of the convolution right before it, online.
    Pool {
        pool: PoolKind,
        size: usize,
    },
    Fc {
        inputs: usize,
        outputs: usize,
        #[serde(default)]
        relu: bool,
    },
    SoftmaxNll,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage {
    pub kernel: KernelDims,
    pub pool: Option<(PoolKind, usize)>,
    pub noise: Option<NoiseConfig>,
    pub input_dims: Dims3,
    pub output_dims: Dims3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FcStage {
    pub inputs: usize,
    pub outputs: usize,
    pub relu: bool,
}

/// A validated layer list: convolutions (each optionally pooled), then fully
/// connected layers, then the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub input_dims: Dims3,
    pub layers: Vec<LayerSpec>,
    pub convs: Vec<ConvStage>,
    pub fcs: Vec<FcStage>,
}

impl Architecture {
    pub fn new(input_dims: Dims3, layers: Vec<LayerSpec>) -> Result<Self> {
        let mut convs: Vec<ConvStage> = Vec::new();
        let mut fcs: Vec<FcStage> = Vec::new();
        let mut dims = input_dims;
        let mut seen_loss = false;
        for (idx, layer) in layers.iter().enumerate() {
            if seen_loss {
                return dim_err(format!("layer {idx} follows the loss"));
            }
            match *layer {
                LayerSpec::Conv { height, width, in_depth, out_depth, noise } => {
                    if !fcs.is_empty() {
                        return dim_err(format!("convolution at layer {idx} after a fully connected layer"));
                    }
                    if in_depth != dims.depth {
                        return dim_err(format!("layer {idx} expects depth {in_depth}, input has {}", dims.depth));
                    }
                    if let Some(n) = noise {
                        n.validate()?;
                    }
                    let kernel = KernelDims::new(height, width, in_depth, out_depth);
                    let out = output_dims(dims, kernel)?;
                    convs.push(ConvStage { kernel, pool: None, noise, input_dims: dims, output_dims: out });
                    dims = out;
                }
                LayerSpec::Pool { pool, size } => {
                    let prev_is_conv = idx > 0 && matches!(layers[idx - 1], LayerSpec::Conv { .. });
                    if !prev_is_conv {
                        return dim_err(format!("pooling at layer {idx} must directly follow a convolution"));
                    }
                    let out = pooled_dims(dims, size)?;
                    let stage = convs.last_mut().expect("checked above");
                    stage.pool = Some((pool, size));
                    stage.output_dims = out;
                    dims = out;
                }
                LayerSpec::Fc { inputs, outputs, relu } => {
                    let expect = fcs.last().map_or(dims.len(), |f| f.outputs);
                    if inputs != expect {
                        return dim_err(format!("fc layer {idx} takes {inputs} inputs, previous layer gives {expect}"));
                    }
                    if outputs == 0 {
                        return dim_err(format!("fc layer {idx} has no outputs"));
                    }
                    fcs.push(FcStage { inputs, outputs, relu });
                }
                LayerSpec::SoftmaxNll => {
                    if fcs.is_empty() {
                        return dim_err("the loss needs at least one fully connected layer before it");
                    }
                    seen_loss = true;
                }
            }
        }
        if !seen_loss {
            return dim_err("architecture must end with the softmax loss");
        }
        Ok(Self { input_dims, layers, convs, fcs })
    }

    /// Two unpadded 7x7 convolutions with 5 and 10 kernels on 28x28 digits,
    /// then a three-layer fully connected classifier.
    pub fn mnist_default() -> Self {
        let layers = vec![
            LayerSpec::Conv { height: 7, width: 7, in_depth: 1, out_depth: 5, noise: None },
            LayerSpec::Conv { height: 7, width: 7, in_depth: 5, out_depth: 10, noise: None },
            LayerSpec::Fc { inputs: 16 * 16 * 10, outputs: 128, relu: true },
            LayerSpec::Fc { inputs: 128, outputs: 64, relu: true },
            LayerSpec::Fc { inputs: 64, outputs: 10, relu: false },
            LayerSpec::SoftmaxNll,
        ];
        Self::new(Dims3::new(28, 28, 1), layers).expect("default architecture is consistent")
    }

    pub fn classes(&self) -> usize {
        self.fcs.last().map_or(0, |f| f.outputs)
    }

    /// Flattened size of the last convolution stage (or the raw input).
    pub fn feature_len(&self) -> usize {
        self.convs.last().map_or(self.input_dims.len(), |c| c.output_dims.len())
    }

    pub fn layer_config(&self, layer: usize, run: &NoiseConfig) -> NoiseConfig {
        self.convs[layer].noise.unwrap_or(*run)
    }
}

/// Trainable parameters; gradients use the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub convs: Vec<Kernel4>,
    pub fcs: Vec<FcLayer>,
}

pub type GradientSet = NetworkParams;

impl NetworkParams {
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        let convs = arch.convs.iter().map(|c| Kernel4::zeros(c.kernel)).collect::<Result<_>>()?;
        let fcs = arch.fcs.iter().map(|f| FcLayer::zeros(f.inputs, f.outputs)).collect();
        Ok(Self { convs, fcs })
    }

    /// Uniform on `+-1/sqrt(fan_in)` for every weight and fc bias.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        for k in &mut p.convs {
            let b = 1.0 / (k.dims().patch_len() as f64).sqrt();
            k.as_mut_slice().iter_mut().for_each(|v| *v = rng.gen_range(-b..b));
        }
        for f in &mut p.fcs {
            let b = 1.0 / (f.inputs() as f64).sqrt();
            f.weight.mapv_inplace(|_| rng.gen_range(-b..b));
            f.bias.mapv_inplace(|_| rng.gen_range(-b..b));
        }
        Ok(p)
    }

    pub fn matches(&self, arch: &Architecture) -> bool {
        self.convs.len() == arch.convs.len()
            && self.fcs.len() == arch.fcs.len()
            && self.convs.iter().zip(&arch.convs).all(|(k, c)| k.dims() == c.kernel)
            && self.fcs.iter().zip(&arch.fcs).all(|(f, s)| f.inputs() == s.inputs && f.outputs() == s.outputs)
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.convs.len() == other.convs.len()
            && self.fcs.len() == other.fcs.len()
            && self.convs.iter().zip(&other.convs).all(|(a, b)| a.dims() == b.dims())
            && self
                .fcs
                .iter()
                .zip(&other.fcs)
                .all(|(a, b)| a.weight.dim() == b.weight.dim() && a.bias.len() == b.bias.len())
    }

    /// `theta <- theta - lr * g` for every parameter.
    pub fn sgd_step(&mut self, grads: &GradientSet, lr: f64) -> Result<()> {
        if !self.same_shape(grads) {
            return dim_err("gradient shapes do not match the parameters");
        }
        for (k, g) in self.convs.iter_mut().zip(&grads.convs) {
            k.as_mut_slice().iter_mut().zip(g.as_slice()).for_each(|(v, d)| *v -= lr * d);
        }
        for (f, g) in self.fcs.iter_mut().zip(&grads.fcs) {
            f.weight.scaled_add(-lr, &g.weight);
            f.bias.scaled_add(-lr, &g.bias);
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.convs.iter().all(|k| k.as_slice().iter().all(|v| v.is_finite()))
            && self.fcs.iter().all(|f| f.weight.iter().chain(f.bias.iter()).all(|v| v.is_finite()))
    }
}

/// Forward record of one batch, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Per image, per convolution stage.
    pub convs: Vec<Vec<ConvTrace>>,
    /// Head activations: flattened features first, logits last.
    pub head: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Array2<f64> {
        self.head.last().expect("head is never empty")
    }
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub loss: f64,
    pub logits: Array2<f64>,
    pub grads: GradientSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub arch: Architecture,
    pub params: NetworkParams,
}

impl Network {
    pub fn new(arch: Architecture, params: NetworkParams) -> Result<Self> {
        if !params.matches(&arch) {
            return dim_err("parameters do not match the architecture");
        }
        Ok(Self { arch, params })
    }

    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        let params = NetworkParams::init(&arch, rng)?;
        Ok(Self { arch, params })
    }

    /// Runs every convolution stage on one image and returns the last output.
    pub fn forward_convs(
        &self,
        x: &Tensor3,
        image: u64,
        run: &NoiseConfig,
        key: &StreamKey,
    ) -> Result<(Tensor3, Vec<ConvTrace>)> {
        if x.dims() != self.arch.input_dims {
            return dim_err(format!("image {:?} does not match input {:?}", x.dims(), self.arch.input_dims));
        }
        let mut traces = Vec::with_capacity(self.arch.convs.len());
        let mut cur = x.clone();
        for (l, (stage, kernel)) in self.arch.convs.iter().zip(&self.params.convs).enumerate() {
            let cfg = self.arch.layer_config(l, run);
            let mut rng = key.forward(image, l);
            let (out, trace) = forward_layer(&cur, kernel, &cfg, stage.pool, &mut rng)?;
            traces.push(trace);
            cur = out;
        }
        Ok((cur, traces))
    }

    pub fn forward_batch(
        &self,
        images: &[&Tensor3],
        ids: &[u64],
        run: &NoiseConfig,
        key: &StreamKey,
    ) -> Result<ForwardTrace> {
        if images.len() != ids.len() || images.is_empty() {
            return dim_err("need one id per image and a non-empty batch");
        }
        let width = self.arch.feature_len();
        let mut features = Array2::zeros((images.len(), width));
        let mut convs = Vec::with_capacity(images.len());
        for (b, (x, &id)) in images.iter().zip(ids).enumerate() {
            let (out, traces) = self.forward_convs(x, id, run, key)?;
            features.row_mut(b).assign(&ndarray::ArrayView1::from(out.as_slice()));
            convs.push(traces);
        }
        let mut head = vec![features];
        for (stage, layer) in self.arch.fcs.iter().zip(&self.params.fcs) {
            let mut z = fc_forward(layer, head.last().expect("non-empty").view())?;
            if stage.relu {
                relu_in_place(&mut z);
            }
            head.push(z);
        }
        Ok(ForwardTrace { convs, head })
    }

    /// Mean loss over the batch and its gradient. The tomography error on
    /// kernel gradients is applied once, to the batch gradient.
    pub fn batch_gradients(
        &self,
        images: &[&Tensor3],
        labels: &[usize],
        ids: &[u64],
        run: &NoiseConfig,
        key: &StreamKey,
    ) -> Result<BatchOutcome> {
        let trace = self.forward_batch(images, ids, run, key)?;
        let (outcome, _) = self.backward(&trace, labels, ids, run, key, false)?;
        Ok(outcome)
    }

    /// Backward pass over a recorded batch. With `record` set, also returns
    /// the gradient arriving at each convolution stage's output, per image.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        labels: &[usize],
        ids: &[u64],
        run: &NoiseConfig,
        key: &StreamKey,
        record: bool,
    ) -> Result<(BatchOutcome, Vec<Vec<Tensor3>>)> {
        let (loss, mut dz) = softmax_nll(trace.logits().view(), labels)?;
        let mut grads = NetworkParams::zeros(&self.arch)?;

        for i in (0..self.arch.fcs.len()).rev() {
            if self.arch.fcs[i].relu {
                relu_backward_in_place(&mut dz, &trace.head[i + 1]);
            }
            let g = fc_backward(&self.params.fcs[i], trace.head[i].view(), dz.view())?;
            grads.fcs[i] = FcLayer { weight: g.weight, bias: g.bias };
            dz = g.input;
        }

        let mut recorded = Vec::new();
        let n_conv = self.arch.convs.len();
        if n_conv > 0 {
            let last_dims = self.arch.convs[n_conv - 1].output_dims;
            for (b, traces) in trace.convs.iter().enumerate() {
                let mut upstream = Tensor3::from_vec(last_dims, dz.row(b).to_vec())?;
                let mut seen = vec![None; n_conv];
                for l in (0..n_conv).rev() {
                    let cfg = self.arch.layer_config(l, run);
                    let g = backward_conv_exact(&traces[l], &upstream, &self.params.convs[l], l > 0)?;
                    grads.convs[l].as_mut_slice().iter_mut().zip(g.kernel.as_slice()).for_each(|(a, v)| *a += v);
                    let next = g.input.map(|mut input| {
                        if cfg.perturb_input_grad {
                            gradient_noise(input.as_mut_slice(), cfg.delta, &mut key.input_grad(ids[b], l));
                        }
                        input
                    });
                    if record {
                        seen[l] = Some(upstream.clone());
                    }
                    if let Some(input) = next {
                        upstream = input;
                    }
                }
                if record {
                    recorded.push(seen.into_iter().map(|t| t.expect("every stage visited")).collect());
                }
            }
            for l in 0..n_conv {
                let cfg = self.arch.layer_config(l, run);
                gradient_noise(grads.convs[l].as_mut_slice(), cfg.delta, &mut key.kernel_grad(l));
            }
        }

        let outcome = BatchOutcome { loss, logits: trace.logits().clone(), grads };
        Ok((outcome, recorded))
    }

    /// Logits for a batch, no gradient bookkeeping kept.
    pub fn logits(&self, images: &[&Tensor3], ids: &[u64], run: &NoiseConfig, key: &StreamKey) -> Result<Array2<f64>> {
        let mut t = self.forward_batch(images, ids, run, key)?;
        Ok(t.head.pop().expect("non-empty"))
    }

    /// Mean loss and accuracy on a labelled set, in chunks.
    pub fn evaluate(
        &self,
        images: &[Tensor3],
        labels: &[usize],
        run: &NoiseConfig,
        key: &StreamKey,
        chunk: usize,
    ) -> Result<(f64, f64)> {
        if images.len() != labels.len() || images.is_empty() {
            return dim_err("evaluation needs a non-empty labelled set");
        }
        let chunk = chunk.max(1);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for start in (0..images.len()).step_by(chunk) {
            let end = (start + chunk).min(images.len());
            let refs: Vec<&Tensor3> = images[start..end].iter().collect();
            let ids: Vec<u64> = (start as u64..end as u64).collect();
            let z = self.logits(&refs, &ids, run, key)?;
            let (l, _) = softmax_nll(z.view(), &labels[start..end])?;
            loss_sum += l * (end - start) as f64;
            correct += argmax_rows(z.view()).iter().zip(&labels[start..end]).filter(|(a, b)| a == b).count();
        }
        let n = images.len() as f64;
        let loss = loss_sum / n;
        if !loss.is_finite() {
            return Err(QcnnError::Numeric(format!("evaluation loss is {loss}")));
        }
        Ok((loss, correct as f64 / n))
    }
}

/// Scales a gradient in place; used to average when accumulating by hand.
pub fn scale_gradients(g: &mut GradientSet, factor: f64) {
    for k in &mut g.convs {
        k.as_mut_slice().iter_mut().for_each(|v| *v *= factor);
    }
    for f in &mut g.fcs {
        f.weight *= factor;
        f.bias *= factor;
    }
}

pub(crate) fn fc_from_parts(weight: Vec<f64>, bias: Vec<f64>, inputs: usize, outputs: usize) -> Result<FcLayer> {
    let weight = Array2::from_shape_vec((outputs, inputs), weight)
        .map_err(|e| QcnnError::Checkpoint(format!("fc weight: {e}")))?;
    if bias.len() != outputs {
        return Err(QcnnError::Checkpoint(format!("fc bias has {} entries, expected {outputs}", bias.len())));
    }
    Ok(FcLayer { weight, bias: Array1::from(bias) })
}
