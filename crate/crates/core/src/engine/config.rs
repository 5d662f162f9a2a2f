use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{PromptTemplates, UpdateMode};
use crate::corpus::Variable;
use crate::embed::{EmbedderConfig, SamplingStrategy};
use crate::gateway::ModelEndpoint;

/// A rejected configuration field.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("invalid {field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    fn new(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

fn default_max_iterations() -> u32 {
    100
}

fn default_dimension() -> EmbedderConfig {
    EmbedderConfig::deterministic(384)
}

/// Inputs of one codebook development run.
///
/// The short keys follow the loop's usual notation: `b` budget, `n` batch
/// size, `k` minimum guide-set size, `m` target validation accuracy, `j`
/// validation items per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub variable: Variable,
    #[serde(rename = "b")]
    pub budget: usize,
    #[serde(rename = "n")]
    pub batch_size: usize,
    #[serde(rename = "k")]
    pub min_guide: usize,
    #[serde(rename = "m")]
    pub target: f64,
    #[serde(rename = "j")]
    pub val_per_class: usize,
    pub sampling: SamplingStrategy,
    pub seed: u64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: u32,
    #[serde(default)]
    pub keywords: Vec<String>,
    /// Pool size when keywords are given; defaults to `b + n`.
    #[serde(default)]
    pub upsample_size: Option<usize>,
    /// Also count correct labels with a flagged rationale as errors.
    #[serde(default)]
    pub rationale_only_errors: bool,
    #[serde(default)]
    pub update_mode: UpdateMode,
    pub model: ModelEndpoint,
    /// Endpoint for guideline synthesis; the annotation model when absent.
    #[serde(default)]
    pub synthesizer: Option<ModelEndpoint>,
    #[serde(default = "default_dimension")]
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub templates: Option<PromptTemplates>,
}

impl RunConfig {
    /// The interactive setting: b=150, n=5, k=30, m=0.9, j=20.
    pub fn hitl(variable: Variable, model: ModelEndpoint, seed: u64) -> Self {
        Self {
            variable,
            budget: 150,
            batch_size: 5,
            min_guide: 30,
            target: 0.9,
            val_per_class: 20,
            sampling: SamplingStrategy::Coverage,
            seed,
            max_iterations: default_max_iterations(),
            keywords: Vec::new(),
            upsample_size: None,
            rationale_only_errors: false,
            update_mode: UpdateMode::Replace,
            model,
            synthesizer: None,
            embedder: default_dimension(),
            templates: None,
        }
    }

    pub fn templates(&self) -> PromptTemplates {
        self.templates
            .clone()
            .unwrap_or_else(|| PromptTemplates::for_variable(&self.variable))
    }

    pub fn synthesizer_endpoint(&self) -> &ModelEndpoint {
        self.synthesizer.as_ref().unwrap_or(&self.model)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.variable
            .validate()
            .map_err(|e| ConfigError::new("variable", e.to_string()))?;
        if self.batch_size < 1 {
            return Err(ConfigError::new("n", "batch size must be at least 1"));
        }
        if self.min_guide < 1 {
            return Err(ConfigError::new("k", "minimum guide size must be at least 1"));
        }
        if self.budget < self.min_guide {
            return Err(ConfigError::new("b", format!("budget {} is below k = {}", self.budget, self.min_guide)));
        }
        if !(self.target > 0.0 && self.target <= 1.0) {
            return Err(ConfigError::new("m", format!("target accuracy {} is outside (0, 1]", self.target)));
        }
        if self.val_per_class < 1 {
            return Err(ConfigError::new("j", "validation items per class must be at least 1"));
        }
        if self.max_iterations < 1 {
            return Err(ConfigError::new("max_iterations", "must be at least 1"));
        }
        if self.upsample_size == Some(0) {
            return Err(ConfigError::new("upsample_size", "must be positive"));
        }
        self.model
            .validate()
            .map_err(|e| ConfigError::new("model", e.to_string()))?;
        if let Some(s) = &self.synthesizer {
            s.validate().map_err(|e| ConfigError::new("synthesizer", e.to_string()))?;
        }
        self.embedder
            .validate()
            .map_err(|e| ConfigError::new("embedder", e.to_string()))?;
        if let Some(t) = &self.templates {
            t.validate().map_err(|e| ConfigError::new("templates", e.to_string()))?;
        }
        Ok(())
    }
}
