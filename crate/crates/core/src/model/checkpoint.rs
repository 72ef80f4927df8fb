use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{config_hash, ModelConfig, TacoModel};
use crate::error::{Error, Result};
use crate::numerics::ParamStore;
use crate::training::AdamState;

pub const CHECKPOINT_FORMAT: &str = "taco-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Model parameters with their config, plus optional optimizer state for resuming.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub config_hash: String,
    pub params: ParamStore,
    #[serde(default)]
    pub optimizer: Option<AdamState>,
    #[serde(default)]
    pub epoch: usize,
    #[serde(default)]
    pub best_val: Option<f64>,
    /// Hash of the training config that produced this checkpoint.
    #[serde(default)]
    pub train_hash: Option<String>,
}

impl Checkpoint {
    pub fn from_model(model: &TacoModel) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.cfg.clone(),
            config_hash: model.config_hash(),
            params: model.params.clone(),
            optimizer: None,
            epoch: 0,
            best_val: None,
            train_hash: None,
        }
    }

    pub fn model(&self) -> Result<TacoModel> {
        TacoModel::from_params(self.config.clone(), self.params.clone())
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, serde_json::to_vec(ck)?)?;
    Ok(())
}

/// Load and verify a checkpoint. With `expected_hash`, the stored config
/// must hash to that value.
pub fn load_checkpoint(path: impl AsRef<Path>, expected_hash: Option<&str>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let ck: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
    }
    let actual = config_hash(&ck.config);
    if actual != ck.config_hash {
        return Err(Error::Checkpoint("stored config does not match its hash".into()));
    }
    if let Some(want) = expected_hash {
        if want != actual {
            return Err(Error::Checkpoint(format!("config hash {actual} does not match expected {want}")));
        }
    }
    ck.model()?;
    Ok(ck)
}
