//! Run settings shared by flags and the TOML config file. A flag given on the
//! command line wins over the file, and the file wins over built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use qcnn::emulation::{CapGradient, NoiseConfig, NoiseMode, SampleMode};
use qcnn::harness::{OptimizerConfig, RunConfig, RunMode};
use qcnn::net::LayerSpec;
use qcnn::{QcnnError, Result};
use serde::Deserialize;

pub const DATA_DIR_ENV: &str = "QCNN_MNIST_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Quantum,
    Classical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseModeArg {
    GlobalM,
    PerPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleModeArg {
    Measurement,
    Topk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CapGradientArg {
    PassThrough,
    Zero,
}

#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunArgs {
    /// Quantum emulation or plain classical CNN
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Inner-product estimation precision
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Gradient tomography precision
    #[arg(long)]
    pub delta: Option<f64>,
    /// Activation cap (`inf` for plain ReLU)
    #[arg(long)]
    pub cap: Option<f64>,
    /// Fraction of convolution outputs sampled
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long, value_enum)]
    pub noise_mode: Option<NoiseModeArg>,
    #[arg(long, value_enum)]
    pub sample_mode: Option<SampleModeArg>,
    /// Also perturb the gradient passed between convolution layers
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub perturb_input_grad: Option<bool>,
    /// Backward rule above the cap: keep the gradient or zero it
    #[arg(long, value_enum)]
    pub cap_gradient: Option<CapGradientArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, visible_alias = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Directory holding the four uncompressed MNIST IDX files
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Where to write the per-step metrics CSV
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Model file to write (train) or read (eval, estimate)
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// JSON file with a layer list replacing the default architecture
    #[arg(long)]
    pub architecture: Option<PathBuf>,
    #[arg(long)]
    pub train_limit: Option<usize>,
    #[arg(long)]
    pub test_limit: Option<usize>,
    /// Log accuracy on a test subset every N steps
    #[arg(long)]
    pub probe_every: Option<usize>,
    #[arg(long)]
    pub probe_size: Option<usize>,
    #[arg(long)]
    pub eval_batch: Option<usize>,
}

macro_rules! prefer {
    ($hi:expr, $lo:expr, $($f:ident),+) => {
        RunArgs { $($f: $hi.$f.or($lo.$f)),+ }
    };
}

impl RunArgs {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| QcnnError::InvalidParameter(format!("{}: {e}", path.display())))
    }

    /// Fields set here win; unset ones fall back to `lower`.
    pub fn over(self, lower: RunArgs) -> RunArgs {
        prefer!(
            self,
            lower,
            mode,
            epsilon,
            delta,
            cap,
            sigma,
            noise_mode,
            sample_mode,
            perturb_input_grad,
            cap_gradient,
            seed,
            learning_rate,
            batch_size,
            epochs,
            data_dir,
            metrics,
            checkpoint,
            architecture,
            train_limit,
            test_limit,
            probe_every,
            probe_size,
            eval_batch
        )
    }

    pub fn resolve(flags: RunArgs, config: Option<&Path>) -> Result<RunArgs> {
        match config {
            Some(p) => Ok(flags.over(RunArgs::from_file(p)?)),
            None => Ok(flags),
        }
    }

    pub fn noise(&self) -> NoiseConfig {
        let d = RunConfig::default().noise;
        let seed = self.seed.unwrap_or(d.seed);
        if self.mode == Some(ModeArg::Classical) {
            return NoiseConfig::classical(seed);
        }
        NoiseConfig {
            epsilon: self.epsilon.unwrap_or(d.epsilon),
            delta: self.delta.unwrap_or(d.delta),
            cap: self.cap.unwrap_or(d.cap),
            sigma: self.sigma.unwrap_or(d.sigma),
            noise_mode: match self.noise_mode {
                Some(NoiseModeArg::PerPair) => NoiseMode::PerPair,
                Some(NoiseModeArg::GlobalM) => NoiseMode::GlobalM,
                None => d.noise_mode,
            },
            sample_mode: match self.sample_mode {
                Some(SampleModeArg::Topk) => SampleMode::TopK,
                Some(SampleModeArg::Measurement) => SampleMode::Measurement,
                None => d.sample_mode,
            },
            perturb_input_grad: self.perturb_input_grad.unwrap_or(d.perturb_input_grad),
            cap_gradient: match self.cap_gradient {
                Some(CapGradientArg::Zero) => CapGradient::Zero,
                Some(CapGradientArg::PassThrough) => CapGradient::PassThrough,
                None => d.cap_gradient,
            },
            seed,
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| RunConfig::default().data_dir)
    }

    pub fn run_config(&self, mode: RunMode) -> Result<RunConfig> {
        let d = RunConfig::default();
        let layers = match &self.architecture {
            Some(p) => Some(serde_json::from_str::<Vec<LayerSpec>>(&fs::read_to_string(p)?)?),
            None => None,
        };
        let cfg = RunConfig {
            mode,
            noise: self.noise(),
            optimizer: OptimizerConfig {
                learning_rate: self.learning_rate.unwrap_or(d.optimizer.learning_rate),
                batch_size: self.batch_size.unwrap_or(d.optimizer.batch_size),
                epochs: self.epochs.unwrap_or(d.optimizer.epochs),
            },
            layers,
            data_dir: self.data_dir(),
            metrics_path: self.metrics.clone(),
            checkpoint_path: self.checkpoint.clone(),
            train_limit: self.train_limit,
            test_limit: self.test_limit,
            probe_every: self.probe_every,
            probe_size: self.probe_size.unwrap_or(d.probe_size),
            eval_batch: self.eval_batch.unwrap_or(d.eval_batch),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
