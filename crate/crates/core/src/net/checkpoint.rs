//! JSON model files.
//!
//! Layout: `format` and `version` tags, the input dimensions, the layer list,
//! one flat array per convolution kernel (kernel by kernel, channel-major,
//! column-first), one row-major `outputs x inputs` weight array and one bias
//! array per fully connected layer, and the input normalization constants.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{fc_from_parts, Architecture, LayerSpec, Network, NetworkParams};
use crate::error::{QcnnError, Result};
use crate::tensor::{Dims3, Kernel4};

pub const CHECKPOINT_FORMAT: &str = "qcnn-model";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Pixel scaling applied before the network: `(raw / 255 - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    pub const IDENTITY: Self = Self { mean: 0.0, std: 1.0 };

    #[inline]
    pub fn apply(&self, byte: u8) -> f64 {
        (byte as f64 / 255.0 - self.mean) / self.std
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub input_dims: Dims3,
    pub layers: Vec<LayerSpec>,
    pub conv_kernels: Vec<Vec<f64>>,
    pub fc_weights: Vec<Vec<f64>>,
    pub fc_biases: Vec<Vec<f64>>,
    pub normalization: Normalization,
}

impl Checkpoint {
    pub fn from_network(net: &Network, normalization: Normalization) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            input_dims: net.arch.input_dims,
            layers: net.arch.layers.clone(),
            conv_kernels: net.params.convs.iter().map(|k| k.as_slice().to_vec()).collect(),
            fc_weights: net.params.fcs.iter().map(|f| f.weight.iter().copied().collect()).collect(),
            fc_biases: net.params.fcs.iter().map(|f| f.bias.to_vec()).collect(),
            normalization,
        }
    }

    pub fn into_network(self) -> Result<(Network, Normalization)> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(QcnnError::Checkpoint(format!("unknown format tag {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(QcnnError::Checkpoint(format!("unsupported version {}", self.version)));
        }
        let arch = Architecture::new(self.input_dims, self.layers)?;
        if self.conv_kernels.len() != arch.convs.len()
            || self.fc_weights.len() != arch.fcs.len()
            || self.fc_biases.len() != arch.fcs.len()
        {
            return Err(QcnnError::Checkpoint("parameter count does not match the layer list".into()));
        }
        let convs = self
            .conv_kernels
            .into_iter()
            .zip(&arch.convs)
            .map(|(v, c)| Kernel4::from_vec(c.kernel, v))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| QcnnError::Checkpoint(e.to_string()))?;
        let fcs = self
            .fc_weights
            .into_iter()
            .zip(self.fc_biases)
            .zip(&arch.fcs)
            .map(|((w, b), s)| fc_from_parts(w, b, s.inputs, s.outputs))
            .collect::<Result<Vec<_>>>()?;
        let net = Network::new(arch, NetworkParams { convs, fcs })?;
        if !net.params.all_finite() {
            return Err(QcnnError::Checkpoint("non-finite parameter".into()));
        }
        Ok((net, self.normalization))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        Ok(serde_json::from_reader(r)?)
    }
}
