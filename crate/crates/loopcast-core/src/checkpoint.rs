//! JSON checkpoints: full parameter store plus enough metadata to refuse
//! mismatched resumes.

use crate::error::{Error, Result};
use crate::experiment::TrainedModel;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Pipeline stage a checkpoint was written after.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Pretrain,
    Stage1,
    Stage2,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Hash of the resolved run configuration that produced this model.
    pub config_hash: u64,
    pub seed: u64,
    pub model: TrainedModel,
}

impl Checkpoint {
    /// Structural sanity: finite parameters and a frozen backbone for any
    /// stage past pretraining.
    pub fn validate(&self) -> Result<()> {
        let store = &self.model.store;
        for id in self.model.plant.all_ids() {
            if !store.matrix(id).is_finite() {
                return Err(Error::Checkpoint(format!(
                    "non-finite values in parameter {:?}",
                    store.name(id)
                )));
            }
        }
        if self.stage >= Stage::Stage1 && !self.model.plant.backbone_frozen {
            return Err(Error::Checkpoint(
                "stage-1+ checkpoint with an unfrozen backbone".into(),
            ));
        }
        if self.stage == Stage::Stage2 && self.model.observer.is_none() {
            return Err(Error::Checkpoint(
                "stage-2 checkpoint without an observer".into(),
            ));
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.validate()?;
    let json = serde_json::to_string(ckpt)?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let ckpt: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("parse error: {e}")))?;
    ckpt.validate()?;
    Ok(ckpt)
}

/// Refuse to resume from a checkpoint built under a different configuration.
pub fn check_config_hash(ckpt: &Checkpoint, expected: u64) -> Result<()> {
    if ckpt.config_hash != expected {
        return Err(Error::Checkpoint(format!(
            "config hash mismatch: checkpoint {:#x}, current {:#x}",
            ckpt.config_hash, expected
        )));
    }
    Ok(())
}
