//! Run configuration: one JSON document mirroring every module's config,
//! with dotted-path overrides and strict unknown-key rejection. A single root
//! seed drives the derived per-stage seeds so a command line plus a seed
//! reproduces a run exactly.

use serde::{Deserialize, Serialize};

use crate::error::{err_config, err_format, Result};
use crate::model::ModelConfig;
use crate::numerics::init::derive_seed;
use crate::pipeline::eval::EvalConfig;
use crate::pipeline::train::TrainConfig;
use crate::scenegen::SceneConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train: 64,
            n_test: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; stage seeds (scene generation, model init, training,
    /// evaluation) are derived from it and overwrite the per-stage fields.
    pub seed: u64,
    pub scene: SceneConfig,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| err_config!("{e}"))?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| err_format!("{e}"))
    }

    /// Applies the root seed to every stage and syncs cross-module couplings
    /// (the training TPGF switch configures the model architecture).
    pub fn resolve(&mut self) {
        self.scene.seed = derive_seed(self.seed, "scene");
        self.model.seed = derive_seed(self.seed, "model");
        self.train.seed = derive_seed(self.seed, "train");
        self.eval.seed = derive_seed(self.seed, "eval");
        self.model.tpgf_enabled = self.train.tpgf_enabled;
    }

    pub fn dataset_seed(&self) -> u64 {
        derive_seed(self.seed, "dataset")
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let stride = self.model.denoise.patch_stride();
        if self.scene.height % stride != 0 || self.scene.width % stride != 0 {
            return Err(err_config!(
                "scene {}x{} must be divisible by the patch stride r_g={stride}",
                self.scene.width,
                self.scene.height
            ));
        }
        if self.scene.speed_max >= self.model.denoise.r {
            return Err(err_config!(
                "speed_max {} must stay below the acceptance radius r={}",
                self.scene.speed_max,
                self.model.denoise.r
            ));
        }
        if self.eval.d_eval <= 0.0 {
            return Err(err_config!("d_eval must be positive"));
        }
        Ok(())
    }
}

/// Applies one `key=value` override onto a JSON document; the key is a dotted
/// path, the value parses as JSON when possible, else as a string.
pub fn apply_override(doc: &mut serde_json::Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| err_config!("override {assignment:?} must be KEY=VALUE"))?;
    let value: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if i + 1 == parts.len() {
            let obj = cursor
                .as_object_mut()
                .ok_or_else(|| err_config!("override path {path}: not an object at {part}"))?;
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cursor = cursor
            .as_object_mut()
            .ok_or_else(|| err_config!("override path {path}: not an object at {part}"))?
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("split never yields zero parts")
}

/// Loads a config from optional file text plus repeated overrides, rejecting
/// unknown keys.
pub fn load_config(file_text: Option<&str>, overrides: &[String]) -> Result<RunConfig> {
    let mut doc: serde_json::Value = match file_text {
        Some(text) => serde_json::from_str(text).map_err(|e| err_config!("config file: {e}"))?,
        None => serde_json::to_value(RunConfig::default()).map_err(|e| err_format!("{e}"))?,
    };
    for assignment in overrides {
        apply_override(&mut doc, assignment)?;
    }
    let cfg: RunConfig =
        serde_json::from_value(doc).map_err(|e| err_config!("config: {e}"))?;
    Ok(cfg)
}
