//! Experiment configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use mbsl_core::datagen::GeneratorConfig;
use mbsl_core::grouping::GroupingConfig;
use mbsl_core::trainer::{ModelConfig, PipelineConfig, TrainConfig};
use mbsl_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs"),
        }
    }
}

/// Every section is optional; missing keys take the library defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: GeneratorConfig,
    pub grouping: GroupingConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// Read a TOML file, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let field = path.display().to_string();
        if is_json {
            serde_json::from_str(&text).map_err(|e| Error::Format {
                field,
                message: e.to_string(),
            })
        } else {
            Self::from_toml(&text).map_err(|e| match e {
                Error::Format { message, .. } => Error::Format { field, message },
                other => other,
            })
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format {
            field: "config".into(),
            message: e.to_string(),
        })
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            grouping: self.grouping.clone(),
            model: self.model.clone(),
            training: self.training.clone(),
        }
    }

    /// Checks that do not need the dataset itself.
    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        self.model.encoder_spec(self.dataset.fs)?;
        Ok(())
    }
}
