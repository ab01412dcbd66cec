//! JSON model checkpoints. The layout is described in `docs/FORMATS.md`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Dense, Network};
use crate::scalar::Scalar;

pub const FORMAT_TAG: &str = "smoothmix-mlp";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major, `out_dim` rows of `in_dim` entries.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Scalar type the model was trained in.
    pub scalar: String,
    pub activation: String,
    pub init_seed: Option<u64>,
    pub layers: Vec<LayerRecord>,
}

impl Checkpoint {
    pub fn from_network<S: Scalar>(net: &Network<S>) -> Self {
        Self {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            scalar: S::NAME.into(),
            activation: net.activation().name().into(),
            init_seed: net.init_seed(),
            layers: net
                .layers()
                .iter()
                .map(|l| LayerRecord {
                    in_dim: l.in_dim(),
                    out_dim: l.out_dim(),
                    weight: l.weight().iter().map(|v| v.f64()).collect(),
                    bias: l.bias().iter().map(|v| v.f64()).collect(),
                })
                .collect(),
        }
    }

    pub fn to_network<S: Scalar>(&self) -> Result<Network<S>> {
        if self.format != FORMAT_TAG {
            return Err(Error::Checkpoint(format!("unknown format tag {:?}", self.format)));
        }
        if self.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        if self.activation != "relu" {
            return Err(Error::Checkpoint(format!("unsupported activation {:?}", self.activation)));
        }
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Dense::new(
                    l.in_dim,
                    l.out_dim,
                    l.weight.iter().map(|&v| S::of(v)).collect(),
                    l.bias.iter().map(|&v| S::of(v)).collect(),
                )
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut net = Network::new(layers).map_err(|e| Error::Checkpoint(e.to_string()))?;
        net.set_init_seed(self.init_seed);
        Ok(net)
    }
}

pub fn save_checkpoint<S: Scalar>(net: &Network<S>, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&Checkpoint::from_network(net))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Network<S>> {
    let text = fs::read_to_string(path)?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    ck.to_network()
}
