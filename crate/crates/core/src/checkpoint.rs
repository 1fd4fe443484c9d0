//! Checkpoint directories: `params.safetensors` plus `meta.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::error::{AgmanError, Result};
use crate::model::AgmanModel;
use crate::train::{EpochStats, History};

pub const FORMAT: &str = "agman-checkpoint";
pub const VERSION: u32 = 1;
pub const PARAMS_FILE: &str = "params.safetensors";
pub const META_FILE: &str = "meta.json";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Parameter initialization and synthetic data.
    pub init: u64,
    /// Triplet sampling.
    pub sampling: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    /// Completed training epochs.
    pub epoch: usize,
    pub seeds: Seeds,
    /// Statistics of the last completed epoch.
    pub metrics: Option<EpochStats>,
}

impl CheckpointMeta {
    pub fn new(config: &RunConfig, history: &History) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            config: config.clone(),
            epoch: history.epochs.len(),
            seeds: Seeds {
                init: config.seed,
                sampling: config.train.seed,
            },
            metrics: history.last().copied(),
        }
    }
}

/// Writes parameters, metadata and, when non-empty, the loss history.
pub fn save_checkpoint(dir: &Path, model: &AgmanModel, config: &RunConfig, history: &History) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| AgmanError::io(dir, e))?;
    model.save_safetensors(&dir.join(PARAMS_FILE))?;
    let meta = CheckpointMeta::new(config, history);
    let path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    std::fs::write(&path, text + "\n").map_err(|e| AgmanError::io(&path, e))?;
    history.write_csv(&dir.join(HISTORY_FILE))
}

pub fn load_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| AgmanError::io(&path, e))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| AgmanError::Parse {
        path: path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if value.get("format").and_then(Value::as_str) != Some(FORMAT) {
        return Err(AgmanError::Checkpoint(format!("{} is not an agman checkpoint", path.display())));
    }
    let meta: CheckpointMeta =
        serde_json::from_value(value).map_err(|e| AgmanError::Checkpoint(format!("{}: {e}", path.display())))?;
    if meta.version != VERSION {
        return Err(AgmanError::Checkpoint(format!(
            "{}: unsupported checkpoint version {}",
            path.display(),
            meta.version
        )));
    }
    Ok(meta)
}

/// Rebuilds the model described by `meta.json` and loads its parameters.
pub fn load_checkpoint(dir: &Path) -> Result<(AgmanModel, CheckpointMeta)> {
    let meta = load_meta(dir)?;
    let mut model = AgmanModel::new(meta.config.model_spec()?)?;
    model.load_safetensors(&dir.join(PARAMS_FILE), true)?;
    Ok((model, meta))
}

/// Fails when `config` describes a different architecture or attribute set
/// than the checkpoint was trained with.
pub fn check_compatible(meta: &CheckpointMeta, config: &RunConfig) -> Result<()> {
    let ours = meta.config.model_spec()?;
    let theirs = config.model_spec()?;
    let mismatch = |what: &str| {
        Err(AgmanError::Checkpoint(format!(
            "checkpoint/config mismatch: {what} differs from the checkpoint"
        )))
    };
    if meta.config.attributes != config.attributes {
        return mismatch("the attribute list");
    }
    if ours.profile != theirs.profile || ours.input_size != theirs.input_size || ours.channels != theirs.channels {
        return mismatch("the backbone");
    }
    if ours.embedding_size != theirs.embedding_size
        || ours.asa_channels != theirs.asa_channels
        || ours.aca_hidden != theirs.aca_hidden
        || ours.ca_reduction != theirs.ca_reduction
        || ours.toggles != theirs.toggles
        || ours.fusion != theirs.fusion
    {
        return mismatch("the attention module");
    }
    Ok(())
}
