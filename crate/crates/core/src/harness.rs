//! Training and evaluation runs over a labelled image set.

use std::collections::VecDeque;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::emulation::{CapGradient, NoiseConfig, SampleMode};
use crate::error::{QcnnError, Result};
use crate::net::{Architecture, LayerSpec, Network};
use crate::rng::{substream, StreamKey};
use crate::tensor::Tensor3;

const SCOPE_TRAIN: u64 = 1;
const SCOPE_EVAL: u64 = 2;
const SCOPE_INIT: u64 = 3;
const SCOPE_SHUFFLE: u64 = 4;
const SCOPE_PROBE: u64 = 5;

pub const SMOOTHING_WINDOW: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    QuantumTrain,
    ClassicalTrain,
    WeightTransferEval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 0.01, batch_size: 64, epochs: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: RunMode,
    pub noise: NoiseConfig,
    pub optimizer: OptimizerConfig,
    /// `None` selects the default MNIST architecture.
    pub layers: Option<Vec<LayerSpec>>,
    pub data_dir: PathBuf,
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    /// Use only the first `n` training / test items.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// Every `n` steps, log loss and accuracy on the first `probe_size` test items.
    pub probe_every: Option<usize>,
    pub probe_size: usize,
    pub eval_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: RunMode::QuantumTrain,
            noise: NoiseConfig::quantum(0.01, 0.01, 10.0, 0.5, 0),
            optimizer: OptimizerConfig::default(),
            layers: None,
            data_dir: PathBuf::from("data/mnist"),
            metrics_path: None,
            checkpoint_path: None,
            train_limit: None,
            test_limit: None,
            probe_every: None,
            probe_size: 1000,
            eval_batch: 256,
        }
    }
}

impl RunConfig {
    /// Noise settings actually used; classical training switches every
    /// quantum effect off.
    pub fn effective_noise(&self) -> NoiseConfig {
        match self.mode {
            RunMode::ClassicalTrain => NoiseConfig::classical(self.noise.seed),
            _ => self.noise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(QcnnError::InvalidParameter(m.into()));
        if self.optimizer.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.optimizer.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.optimizer.learning_rate >= 0.0) || !self.optimizer.learning_rate.is_finite() {
            return bad("learning rate must be finite and >= 0");
        }
        if self.eval_batch == 0 {
            return bad("evaluation batch must be at least 1");
        }
        if self.mode == RunMode::WeightTransferEval && self.checkpoint_path.is_none() {
            return bad("weight-transfer evaluation needs a checkpoint");
        }
        self.noise.validate()
    }

    pub fn architecture(&self, sample: &Tensor3) -> Result<Architecture> {
        match &self.layers {
            Some(l) => Architecture::new(sample.dims(), l.clone()),
            None => Ok(Architecture::mnist_default()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub smoothed_loss: f64,
}

/// Per-batch losses with a trailing-window mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    window: usize,
    recent: VecDeque<f64>,
    pub rows: Vec<MetricRow>,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
}

impl Default for MetricsLog {
    fn default() -> Self {
        Self::new(SMOOTHING_WINDOW)
    }
}

impl MetricsLog {
    pub fn new(window: usize) -> Self {
        Self { window: window.max(1), recent: VecDeque::new(), rows: Vec::new(), test_loss: None, test_accuracy: None }
    }

    pub fn push(&mut self, loss: f64) -> MetricRow {
        if self.recent.len() == self.window {
            self.recent.pop_front();
        }
        self.recent.push_back(loss);
        let smoothed_loss = self.recent.iter().sum::<f64>() / self.recent.len() as f64;
        let row = MetricRow { step: self.rows.len() + 1, loss, smoothed_loss };
        self.rows.push(row);
        row
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        if self.rows.is_empty() {
            out.write_record(["step", "loss", "smoothed_loss"])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// One-line result record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: RunMode,
    pub seed: u64,
    pub epsilon: f64,
    pub delta: f64,
    pub cap: Option<f64>,
    pub sigma: f64,
    pub sample_mode: SampleMode,
    pub cap_gradient: CapGradient,
    pub steps: usize,
    pub final_smoothed_loss: Option<f64>,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub seconds: f64,
}

impl RunSummary {
    pub fn new(cfg: &RunConfig, log: &MetricsLog, test_loss: f64, test_accuracy: f64, seconds: f64) -> Self {
        let n = cfg.effective_noise();
        Self {
            mode: cfg.mode,
            seed: n.seed,
            epsilon: n.epsilon,
            delta: n.delta,
            cap: n.cap.is_finite().then_some(n.cap),
            sigma: n.sigma,
            sample_mode: n.sample_mode,
            cap_gradient: n.cap_gradient,
            steps: log.rows.len(),
            final_smoothed_loss: log.rows.last().map(|r| r.smoothed_loss),
            test_loss,
            test_accuracy,
            seconds,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("summary serializes")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub log: MetricsLog,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

pub fn initial_network(cfg: &RunConfig, sample: &Tensor3) -> Result<Network> {
    let arch = cfg.architecture(sample)?;
    Network::init(arch, &mut substream(cfg.noise.seed, &[SCOPE_INIT]))
}

/// Loss and accuracy with the run's noise settings.
pub fn evaluate(network: &Network, test: &Dataset, cfg: &RunConfig) -> Result<(f64, f64)> {
    let noise = cfg.effective_noise();
    let key = StreamKey::new(noise.seed, [SCOPE_EVAL, 0, 0]);
    network.evaluate(&test.images, &test.labels, &noise, &key, cfg.eval_batch)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Seeded SGD over shuffled mini-batches, then one pass over the test set.
pub fn train(cfg: &RunConfig, train_set: &Dataset, test_set: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(QcnnError::InvalidParameter("training and test sets must be non-empty".into()));
    }
    let noise = cfg.effective_noise();
    let mut network = initial_network(cfg, &train_set.images[0])?;
    let mut log = MetricsLog::default();
    let opt = cfg.optimizer;
    let started = Instant::now();

    for epoch in 0..opt.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut substream(noise.seed, &[SCOPE_SHUFFLE, epoch as u64]));
        for batch in order.chunks(opt.batch_size) {
            let step = log.rows.len();
            let images: Vec<&Tensor3> = batch.iter().map(|&k| &train_set.images[k]).collect();
            let labels: Vec<usize> = batch.iter().map(|&k| train_set.labels[k]).collect();
            let ids: Vec<u64> = batch.iter().map(|&k| k as u64).collect();
            let key = StreamKey::new(noise.seed, [SCOPE_TRAIN, epoch as u64, step as u64]);
            let out = network.batch_gradients(&images, &labels, &ids, &noise, &key)?;
            if !out.loss.is_finite() {
                return Err(QcnnError::Numeric(format!(
                    "loss became {} at epoch {epoch}, step {}",
                    out.loss,
                    step + 1
                )));
            }
            network.params.sgd_step(&out.grads, opt.learning_rate)?;
            if !network.params.all_finite() {
                return Err(QcnnError::Numeric(format!("non-finite parameter after step {}", step + 1)));
            }
            let row = log.push(out.loss);
            if row.step % 100 == 0 {
                info!(
                    "epoch {} step {} loss {:.4} smoothed {:.4} ({:.0}s)",
                    epoch + 1,
                    row.step,
                    row.loss,
                    row.smoothed_loss,
                    started.elapsed().as_secs_f64()
                );
                let norms: Vec<String> = network
                    .params
                    .convs
                    .iter()
                    .map(|k| l2(k.as_slice()))
                    .chain(network.params.fcs.iter().map(|f| l2(f.weight.as_slice().unwrap_or(&[]))))
                    .map(|n| format!("{n:.3}"))
                    .collect();
                debug!("parameter norms by layer: {}", norms.join(" "));
            }
            if let Some(every) = cfg.probe_every.filter(|e| *e > 0 && row.step % *e == 0) {
                let n = cfg.probe_size.min(test_set.len()).max(1);
                let key = StreamKey::new(noise.seed, [SCOPE_PROBE, row.step as u64, 0]);
                let (l, a) =
                    network.evaluate(&test_set.images[..n], &test_set.labels[..n], &noise, &key, cfg.eval_batch)?;
                info!("probe at step {} (every {every}): loss {l:.4} accuracy {:.2}%", row.step, 100.0 * a);
            }
        }
        debug!("epoch {} done after {:.1}s", epoch + 1, started.elapsed().as_secs_f64());
    }

    let (test_loss, test_accuracy) = evaluate(&network, test_set, cfg)?;
    log.test_loss = Some(test_loss);
    log.test_accuracy = Some(test_accuracy);
    Ok(TrainOutcome { network, log, test_loss, test_accuracy })
}
