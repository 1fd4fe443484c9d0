//! Run configuration: one JSON document shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attention::StageToggles;
use crate::backbone::BackboneProfile;
use crate::data::{AttributeDef, AttributeSpace};
use crate::error::{AgmanError, Result};
use crate::model::ModelSpec;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub profile: BackboneProfile,
    /// Profile default when absent.
    pub input_size: Option<usize>,
    pub channels: Option<[usize; 4]>,
    pub mean: Option<[f64; 3]>,
    pub std: Option<[f64; 3]>,
    /// safetensors file with pretrained backbone weights.
    pub weights: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embedding_size: Option<usize>,
    pub asa_channels: Option<usize>,
    /// Hidden width of the attribute-aware channel bottleneck; half the
    /// embedding size when absent.
    pub aca_hidden: Option<usize>,
    pub ca_reduction: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    /// Triplets for `eval-triplet`; sampled from the evaluation split when absent.
    pub eval_triplets: Option<PathBuf>,
    /// Triplets per attribute sampled for `eval-triplet`.
    pub eval_triplets_per_attribute: usize,
    /// Share of each evaluation split used as queries.
    pub query_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_manifest: None,
            eval_manifest: None,
            eval_triplets: None,
            eval_triplets_per_attribute: 100,
            query_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Minimum images per (attribute, sub-class) cell.
    pub per_subclass: usize,
    pub image_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            per_subclass: 12,
            image_size: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub enable_asa: bool,
    pub enable_sa: bool,
    pub enable_aca: bool,
    pub enable_ca: bool,
    pub enable_fusion: bool,
    pub enable_classification_loss: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            enable_asa: true,
            enable_sa: true,
            enable_aca: true,
            enable_ca: true,
            enable_fusion: true,
            enable_classification_loss: true,
        }
    }
}

impl AblationConfig {
    pub fn toggles(&self) -> StageToggles {
        StageToggles {
            asa: self.enable_asa,
            sa: self.enable_sa,
            aca: self.enable_aca,
            ca: self.enable_ca,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub attributes: Vec<AttributeDef>,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
    /// Seed of parameter initialization and synthetic data.
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn from_value(value: Value) -> Result<Self> {
        let config: RunConfig =
            serde_json::from_value(value).map_err(|e| AgmanError::Config(format!("invalid configuration: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| AgmanError::Config(format!("configuration is not valid JSON: {e}")))?;
        Self::from_value(value)
    }

    /// Reads `path` and applies `KEY=VALUE` overrides before validation.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AgmanError::io(path, e))?;
        let mut value: Value = serde_json::from_str(&text)
            .map_err(|e| AgmanError::Config(format!("{}: not valid JSON: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut config = Self::from_value(value)?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    /// Makes relative data paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.data.train_manifest);
        fix(&mut self.data.eval_manifest);
        fix(&mut self.data.eval_triplets);
        fix(&mut self.backbone.weights);
    }

    pub fn validate(&self) -> Result<()> {
        self.space()?;
        self.train.validate(self.attributes.len())?;
        if !(self.data.query_fraction > 0.0 && self.data.query_fraction < 1.0) {
            return Err(AgmanError::Config(format!(
                "data.query_fraction must lie in (0, 1), got {}",
                self.data.query_fraction
            )));
        }
        let spec = self.model_spec()?;
        if spec.input_size == 0 || spec.embedding_size == 0 || spec.asa_channels == 0 || spec.aca_hidden == 0 {
            return Err(AgmanError::Config("backbone and model sizes must be positive".into()));
        }
        if spec.ca_reduction == 0 || spec.embedding_size % spec.ca_reduction != 0 {
            return Err(AgmanError::Config(format!(
                "model.ca_reduction {} must divide model.embedding_size {}",
                spec.ca_reduction, spec.embedding_size
            )));
        }
        if spec.normalization.1.iter().any(|s| *s <= 0.0) {
            return Err(AgmanError::Config("backbone.std entries must be positive".into()));
        }
        Ok(())
    }

    pub fn space(&self) -> Result<AttributeSpace> {
        AttributeSpace::from_defs(&self.attributes).map_err(|e| AgmanError::Config(e.to_string()))
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let profile = self.backbone.profile;
        let mut spec = ModelSpec::for_profile(profile, self.attributes.len());
        if let Some(v) = self.backbone.input_size {
            spec.input_size = v;
        }
        if let Some(v) = self.backbone.channels {
            spec.channels = v;
        }
        if let Some(v) = self.backbone.mean {
            spec.normalization.0 = v;
        }
        if let Some(v) = self.backbone.std {
            spec.normalization.1 = v;
        }
        if let Some(v) = self.model.embedding_size {
            spec.embedding_size = v;
            spec.aca_hidden = (v / 2).max(1);
        }
        if let Some(v) = self.model.asa_channels {
            spec.asa_channels = v;
        }
        if let Some(v) = self.model.aca_hidden {
            spec.aca_hidden = v;
        }
        if let Some(v) = self.model.ca_reduction {
            spec.ca_reduction = v;
        }
        spec.toggles = self.ablation.toggles();
        spec.fusion = self.ablation.enable_fusion;
        spec.seed = self.seed;
        Ok(spec)
    }

    /// Training hyperparameters with the ablation switch for the classification term applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            use_classification_loss: self.train.use_classification_loss && self.ablation.enable_classification_loss,
            ..self.train.clone()
        }
    }

    pub fn require<'a>(&self, value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| AgmanError::Config(format!("missing required key `{key}`")))
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Applies one `dotted.path=value` override. The value is parsed as JSON
/// when possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| AgmanError::Usage(format!("override `{assignment}` is not of the form KEY=VALUE")))?;
    if key.is_empty() {
        return Err(AgmanError::Usage(format!("override `{assignment}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| AgmanError::Usage(format!("cannot set `{key}`: `{}` is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}
