//! Pipeline configuration file schema and validation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fairstyle_core::{DiscoveryConfig, OptimizerConfig};

/// A validation failure pointing at the offending config field.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationError {
    pub field: String,
    pub message: String,
}

impl ValidationError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

impl std::fmt::Display for ValidationError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl std::error::Error for ValidationError {}

/// Where style codes and images come from. Exactly one generator source.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSource {
    /// Path to a synthetic generator spec (JSON).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic_spec: Option<PathBuf>,
    /// Path to a model checkpoint, resolved through `adapter`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Adapter name for `checkpoint`; `synthetic` is built in.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<String>,
}

/// How one attribute gets its labels. Exactly one labeling source.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeSource {
    /// The generator's own planted classifier (synthetic generators only).
    Synthetic,
    /// A pixel-logistic classifier document.
    Classifier(PathBuf),
    /// A prompt pair scored through an embedding backend.
    Prompts(PromptConfig),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    pub positive: String,
    pub negative: String,
    /// Embedding backend: `hash` is the built-in deterministic backend.
    #[serde(default = "default_embedding_backend")]
    pub embedding_backend: String,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default)]
    pub embedding_seed: u64,
}

fn default_embedding_backend() -> String {
    "hash".to_string()
}

fn default_embedding_dim() -> usize {
    64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeConfig {
    pub name: String,
    pub source: AttributeSource,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditStage {
    #[serde(default = "default_audit_samples")]
    pub samples: usize,
    #[serde(default)]
    pub joints: Vec<Vec<String>>,
}

fn default_audit_samples() -> usize {
    10_000
}

impl Default for AuditStage {
    fn default() -> Self {
        Self { samples: default_audit_samples(), joints: Vec::new() }
    }
}

/// The full pipeline description: generator, attribute labeling sources,
/// per-stage configs, output directory, and the one global seed every stage
/// seed is derived from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub generator: GeneratorSource,
    pub attributes: Vec<AttributeConfig>,
    /// Explicit target channels per attribute name as `[layer, channel]`;
    /// attributes not listed here go through discovery.
    #[serde(default)]
    pub channels: BTreeMap<String, [usize; 2]>,
    #[serde(default)]
    pub discovery: DiscoveryConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub audit: AuditStage,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value), ValidationError> {
        let bytes = std::fs::read(path)
            .map_err(|e| ValidationError::new("config", format!("{}: {e}", path.display())))?;
        let value: serde_json::Value = serde_json::from_slice(&bytes)
            .map_err(|e| ValidationError::new("config", format!("invalid JSON: {e}")))?;
        let config: PipelineConfig = serde_json::from_value(value.clone())
            .map_err(|e| ValidationError::new("config", e.to_string()))?;
        config.validate()?;
        Ok((config, value))
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        let sources = [
            self.generator.synthetic_spec.is_some(),
            self.generator.checkpoint.is_some(),
        ];
        match sources.iter().filter(|s| **s).count() {
            0 => {
                return Err(ValidationError::new(
                    "generator",
                    "exactly one generator source required: set synthetic_spec or checkpoint",
                ))
            }
            1 => {}
            _ => {
                return Err(ValidationError::new(
                    "generator",
                    "synthetic_spec and checkpoint are mutually exclusive",
                ))
            }
        }
        if let Some(path) = &self.generator.synthetic_spec {
            if !path.exists() {
                return Err(ValidationError::new(
                    "generator.synthetic_spec",
                    format!("file not found: {}", path.display()),
                ));
            }
        }
        if let Some(path) = &self.generator.checkpoint {
            if self.generator.adapter.is_none() {
                return Err(ValidationError::new(
                    "generator.adapter",
                    "checkpoint requires an adapter name",
                ));
            }
            if !path.exists() {
                return Err(ValidationError::new(
                    "generator.checkpoint",
                    format!("file not found: {}", path.display()),
                ));
            }
        }

        if self.attributes.is_empty() {
            return Err(ValidationError::new("attributes", "at least one attribute required"));
        }
        for (i, attr) in self.attributes.iter().enumerate() {
            if attr.name.is_empty() {
                return Err(ValidationError::new(format!("attributes[{i}].name"), "empty name"));
            }
            if self.attributes[..i].iter().any(|a| a.name == attr.name) {
                return Err(ValidationError::new(
                    format!("attributes[{i}].name"),
                    format!("duplicate attribute '{}'", attr.name),
                ));
            }
            match &attr.source {
                AttributeSource::Synthetic => {
                    if self.generator.synthetic_spec.is_none() && self.generator.adapter.as_deref() != Some("synthetic") {
                        return Err(ValidationError::new(
                            format!("attributes[{i}].source"),
                            "synthetic labeling requires a synthetic generator",
                        ));
                    }
                }
                AttributeSource::Classifier(path) => {
                    if !path.exists() {
                        return Err(ValidationError::new(
                            format!("attributes[{i}].source.classifier"),
                            format!("file not found: {}", path.display()),
                        ));
                    }
                }
                AttributeSource::Prompts(p) => {
                    if p.positive.is_empty() || p.negative.is_empty() {
                        return Err(ValidationError::new(
                            format!("attributes[{i}].source.prompts"),
                            "prompts must be non-empty",
                        ));
                    }
                    if p.positive == p.negative {
                        return Err(ValidationError::new(
                            format!("attributes[{i}].source.prompts"),
                            "positive and negative prompts must differ",
                        ));
                    }
                    if p.embedding_backend != "hash" {
                        return Err(ValidationError::new(
                            format!("attributes[{i}].source.prompts.embedding_backend"),
                            format!("unknown embedding backend '{}'", p.embedding_backend),
                        ));
                    }
                }
            }
        }
        for name in self.channels.keys() {
            if !self.attributes.iter().any(|a| &a.name == name) {
                return Err(ValidationError::new(
                    format!("channels.{name}"),
                    "channel override names an unknown attribute",
                ));
            }
        }
        for (j, joint) in self.audit.joints.iter().enumerate() {
            for name in joint {
                if !self.attributes.iter().any(|a| &a.name == name) {
                    return Err(ValidationError::new(
                        format!("audit.joints[{j}]"),
                        format!("unknown attribute '{name}'"),
                    ));
                }
            }
        }
        Ok(())
    }
}
