//! Versioned JSON checkpoints. Floats are written in shortest round-trip
//! decimal form, so save followed by load is bit-exact.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::model::{Dense, ModelKind, ModelParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    /// Row-major `in x out` weights.
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

/// Where a set of parameters came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: ModelKind,
    pub layer_sizes: Vec<usize>,
    pub activation: String,
    pub layers: Vec<LayerRecord>,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn from_model(model: &ModelParams, provenance: Provenance) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: model.kind(),
            layer_sizes: model.layer_sizes(),
            activation: "relu".into(),
            layers: model
                .layers()
                .iter()
                .map(|d| LayerRecord {
                    weights: d.weights.iter().copied().collect(),
                    bias: d.bias.as_ref().map(|b| b.to_vec()),
                })
                .collect(),
            provenance,
        }
    }

    pub fn to_model(&self) -> Result<ModelParams> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                self.format_version
            )));
        }
        if self.activation != "relu" {
            return Err(Error::Format(format!("unknown activation {}", self.activation)));
        }
        if self.layer_sizes.len() != self.layers.len() + 1 {
            return Err(Error::Format("layer_sizes does not match the layer list".into()));
        }
        let layers = self
            .layers
            .iter()
            .zip(self.layer_sizes.windows(2))
            .map(|(rec, io)| {
                let weights = Array2::from_shape_vec((io[0], io[1]), rec.weights.clone())
                    .map_err(|e| Error::Format(format!("weights: {e}")))?;
                Ok(Dense { weights, bias: rec.bias.clone().map(Array1::from) })
            })
            .collect::<Result<Vec<_>>>()?;
        ModelParams::new(self.kind, layers)
    }
}

pub fn save_checkpoint(path: &Path, model: &ModelParams, provenance: Provenance) -> Result<()> {
    let text = serde_json::to_string_pretty(&Checkpoint::from_model(model, provenance))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Provenance)> {
    let ck: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
    Ok((ck.to_model()?, ck.provenance))
}
