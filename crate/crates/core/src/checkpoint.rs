//! JSON checkpoints: a format version, the resolved run config, the model
//! config and schema, the outcome scaling and every named parameter tensor.

use std::path::Path;

use caetc_autodiff::ParamSet;
use serde::{Deserialize, Serialize};

use crate::data::Schema;
use crate::model::{Model, ModelConfig};
use crate::{CoreError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelConfig,
    pub schema: Schema,
    pub outcome_scale: f64,
    pub rmse_factor: f64,
    /// Free-form echo of the configuration that produced the parameters.
    pub config: serde_json::Value,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(model: &Model, outcome_scale: f64, rmse_factor: f64, config: serde_json::Value) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model: model.config.clone(),
            schema: model.schema,
            outcome_scale,
            rmse_factor,
            config,
            params: model.params.clone(),
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        Model::from_params(&self.model, &self.schema, &self.params)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| CoreError::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let version = serde_json::from_str::<serde_json::Value>(text)
            .map_err(|e| CoreError::Format(e.to_string()))?
            .get("format_version")
            .and_then(|v| v.as_u64());
        if version != Some(FORMAT_VERSION as u64) {
            return Err(CoreError::Format(format!(
                "unsupported checkpoint version {version:?}, expected {FORMAT_VERSION}"
            )));
        }
        serde_json::from_str(text).map_err(|e| CoreError::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_json(&text).map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))
    }
}
