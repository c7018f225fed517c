//! Identifies the style channel controlling a target attribute by perturbing
//! candidate channels and measuring classifier-score shifts over a shared
//! batch of style codes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{generate_batch, ClassifierAdapter, GeneratorAdapter};
use crate::error::{Error, Result};
use crate::style::{ChannelId, LayerKind, StyleCode, StyleLayout};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscoveryConfig {
    /// Style codes shared by every candidate channel.
    pub batch_size: usize,
    /// Perturbation added and subtracted at the candidate channel.
    pub perturbation: f64,
    /// Conv layers in the last K blocks are excluded from the sweep: they
    /// control very fine-grained features. tRGB layers are always excluded.
    pub exclude_last_blocks: usize,
    pub seed: u64,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            perturbation: 10.0,
            exclude_last_blocks: 4,
            seed: 0,
        }
    }
}

impl DiscoveryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("discovery batch size must be at least 1"));
        }
        if self.perturbation == 0.0 || !self.perturbation.is_finite() {
            return Err(Error::config("perturbation must be finite and non-zero"));
        }
        Ok(())
    }

    /// True when the sweep must skip this layer.
    pub fn layer_excluded(&self, layout: &StyleLayout, layer: usize) -> bool {
        let Some(info) = layout.layer(layer) else {
            return true;
        };
        if info.kind == LayerKind::TRgb {
            return true;
        }
        let blocks = layout.block_count();
        info.block >= blocks.saturating_sub(self.exclude_last_blocks)
    }

    /// Every channel the sweep will score, in (layer, channel) order.
    pub fn candidate_channels(&self, layout: &StyleLayout) -> Vec<ChannelId> {
        layout
            .channels()
            .filter(|ch| !self.layer_excluded(layout, ch.layer))
            .collect()
    }
}

/// Mean absolute classifier-score change for one perturbed channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelScore {
    pub channel: ChannelId,
    pub score: f64,
}

/// Result of a discovery sweep: the argmax channel plus the full ranking,
/// sorted by score descending with (layer, channel) breaking ties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryOutcome {
    pub best: ChannelId,
    pub ranking: Vec<ChannelScore>,
}

/// Scores one channel: `(1/N) * sum_k |C(G(s_k - c)) - C(G(s_k + c))|`,
/// perturbing only the given channel and using raw classifier scores rather
/// than thresholded labels.
///
/// tRGB channels are structurally excluded and rejected here; block-based
/// exclusions are a sweep concern, enforced by [`find_controlling_channel`].
pub fn score_channel(
    adapter: &dyn GeneratorAdapter,
    classifier: &dyn ClassifierAdapter,
    codes: &[StyleCode],
    channel: ChannelId,
    perturbation: f64,
) -> Result<ChannelScore> {
    if codes.is_empty() {
        return Err(Error::config("score_channel needs a non-empty code batch"));
    }
    if perturbation == 0.0 || !perturbation.is_finite() {
        return Err(Error::config("perturbation must be finite and non-zero"));
    }
    codes[0].layout().check_editable(channel)?;

    let one = |(index, code): (usize, &StyleCode)| -> Result<f64> {
        let mut minus = code.clone();
        minus.add(channel, -perturbation);
        let mut plus = code.clone();
        plus.add(channel, perturbation);
        let render = |c: &StyleCode| {
            adapter
                .render(c)
                .map_err(|e| Error::Generator { index, message: e.to_string() })
        };
        let score = |img: &crate::style::Image| {
            classifier.score(img).map_err(|e| Error::Classifier {
                attribute: classifier.attribute().to_string(),
                index,
                message: e.to_string(),
            })
        };
        let s_minus = score(&render(&minus)?)?;
        let s_plus = score(&render(&plus)?)?;
        Ok((s_minus - s_plus).abs())
    };

    let parallel = adapter.concurrent_inference() && classifier.concurrent_inference();
    let diffs: Vec<f64> = if parallel && codes.len() >= 64 {
        codes.par_iter().enumerate().map(one).collect::<Result<_>>()?
    } else {
        codes.iter().enumerate().map(one).collect::<Result<_>>()?
    };
    // Sequential sum in sample order keeps scores bit-reproducible.
    let total: f64 = diffs.iter().sum();
    Ok(ChannelScore { channel, score: total / codes.len() as f64 })
}

/// Sweeps every non-excluded channel with a shared batch of `config.batch_size`
/// style codes and returns the highest-scoring channel plus the full ranking.
/// Candidates may be evaluated concurrently; the ranking is deterministic
/// regardless of evaluation order.
pub fn find_controlling_channel(
    adapter: &dyn GeneratorAdapter,
    classifier: &dyn ClassifierAdapter,
    config: &DiscoveryConfig,
) -> Result<DiscoveryOutcome> {
    config.validate()?;
    let layout = adapter.layout();
    let candidates = config.candidate_channels(&layout);
    if candidates.is_empty() {
        return Err(Error::config(
            "all channels are excluded; relax the block exclusion or widen the layout",
        ));
    }

    // One shared batch: every candidate sees the same codes, so rankings are
    // comparable and ties are structural rather than sampling artifacts.
    let batch = generate_batch(adapter, config.batch_size, None, config.seed)?;

    let run = |ch: &ChannelId| {
        score_channel(adapter, classifier, &batch.codes, *ch, config.perturbation)
    };
    let parallel = adapter.concurrent_inference() && classifier.concurrent_inference();
    let mut ranking: Vec<ChannelScore> = if parallel && candidates.len() > 1 {
        candidates.par_iter().map(run).collect::<Result<_>>()?
    } else {
        candidates.iter().map(run).collect::<Result<_>>()?
    };

    ranking.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.channel.cmp(&b.channel))
    });
    Ok(DiscoveryOutcome { best: ranking[0].channel, ranking })
}
