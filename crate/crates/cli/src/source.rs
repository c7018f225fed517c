//! Resolves generators and attribute classifiers from CLI inputs.

use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};

use fairstyle_core::math::fnv1a;
use fairstyle_core::{
    as_classifier_adapter, make_synthetic, ChannelId, ClassifierAdapter, MockEmbeddingBackend,
    PixelLogisticClassifier, PromptPair, SyntheticBundle, SyntheticSpec,
};

use crate::config::{AttributeSource, PromptConfig};

/// A generator loaded from disk, with its planted classifiers when the
/// adapter provides them.
pub struct LoadedGenerator {
    pub bundle: SyntheticBundle,
    pub spec: SyntheticSpec,
}

/// Loads a generator through the named adapter. `synthetic` is the only
/// adapter compiled into this build; real-model adapters plug in through the
/// same registry.
pub fn load_generator(checkpoint: &Path, adapter: &str) -> Result<LoadedGenerator> {
    match adapter {
        "synthetic" => {
            let bytes = std::fs::read(checkpoint)
                .with_context(|| format!("reading generator spec {}", checkpoint.display()))?;
            let spec: SyntheticSpec = serde_json::from_slice(&bytes)
                .with_context(|| format!("parsing generator spec {}", checkpoint.display()))?;
            let bundle = make_synthetic(&spec)?;
            Ok(LoadedGenerator { bundle, spec })
        }
        other => bail!(
            "unknown generator adapter '{other}': this build provides 'synthetic'"
        ),
    }
}

/// A resolved labeling source for one attribute.
pub enum ResolvedClassifier {
    Pixel(PixelLogisticClassifier),
    Clip(fairstyle_core::ClipClassifier, PromptPair),
}

impl ResolvedClassifier {
    pub fn as_adapter(&self) -> &dyn ClassifierAdapter {
        match self {
            ResolvedClassifier::Pixel(c) => c,
            ResolvedClassifier::Clip(c, _) => c,
        }
    }

    pub fn prompts(&self) -> Option<&PromptPair> {
        match self {
            ResolvedClassifier::Pixel(_) => None,
            ResolvedClassifier::Clip(_, p) => Some(p),
        }
    }
}

/// Resolves one attribute's classifier against the generator's planted set,
/// an explicit classifier file, or a prompt pair.
pub fn resolve_classifier(
    loaded: &LoadedGenerator,
    name: &str,
    source: &AttributeSource,
) -> Result<ResolvedClassifier> {
    match source {
        AttributeSource::Synthetic => {
            let c = loaded
                .bundle
                .classifier(name)
                .ok_or_else(|| {
                    anyhow!(
                        "generator has no planted classifier named '{name}' (available: {})",
                        loaded
                            .bundle
                            .classifiers
                            .iter()
                            .map(|c| c.attribute.as_str())
                            .collect::<Vec<_>>()
                            .join(", ")
                    )
                })?
                .clone();
            Ok(ResolvedClassifier::Pixel(c))
        }
        AttributeSource::Classifier(path) => {
            let bytes = std::fs::read(path)
                .with_context(|| format!("reading classifier {}", path.display()))?;
            let mut c: PixelLogisticClassifier = serde_json::from_slice(&bytes)
                .with_context(|| format!("parsing classifier {}", path.display()))?;
            // The configured attribute name wins over the document's.
            c.attribute = name.to_string();
            Ok(ResolvedClassifier::Pixel(c))
        }
        AttributeSource::Prompts(p) => Ok(clip_classifier(name, p)?),
    }
}

pub fn clip_classifier(name: &str, p: &PromptConfig) -> Result<ResolvedClassifier> {
    let prompts = PromptPair::new(p.positive.clone(), p.negative.clone())?;
    let backend = Arc::new(MockEmbeddingBackend::hashed(p.embedding_dim, p.embedding_seed));
    let classifier =
        as_classifier_adapter(backend, prompts.clone()).with_attribute_name(name.to_string());
    Ok(ResolvedClassifier::Clip(classifier, prompts))
}

/// Parses `auto` or an explicit `(layer,channel);(layer,channel)` list.
pub fn parse_channels(arg: &str) -> Result<Option<Vec<ChannelId>>> {
    if arg.trim() == "auto" {
        return Ok(None);
    }
    let mut out = Vec::new();
    for part in arg.split(';') {
        let part = part.trim();
        let inner = part
            .strip_prefix('(')
            .and_then(|s| s.strip_suffix(')'))
            .ok_or_else(|| anyhow!("channel '{part}' is not of the form (layer,channel)"))?;
        let mut nums = inner.split(',').map(str::trim);
        let layer = nums
            .next()
            .ok_or_else(|| anyhow!("channel '{part}' is missing the layer index"))?
            .parse::<usize>()
            .with_context(|| format!("channel '{part}'"))?;
        let channel = nums
            .next()
            .ok_or_else(|| anyhow!("channel '{part}' is missing the channel index"))?
            .parse::<usize>()
            .with_context(|| format!("channel '{part}'"))?;
        if nums.next().is_some() {
            bail!("channel '{part}' has too many components");
        }
        out.push(ChannelId::new(layer, channel));
    }
    if out.is_empty() {
        bail!("empty channel list");
    }
    Ok(Some(out))
}

/// Stable hex hash of a canonical JSON value. serde_json maps are sorted, so
/// semantically identical configs hash identically.
pub fn config_hash(value: &serde_json::Value) -> String {
    format!("{:016x}", fnv1a(value.to_string().as_bytes()))
}
