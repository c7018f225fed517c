//! Fairstyle tensors: learned additive biases on style codes.
//!
//! Three variants exist. A scalar tensor shifts exactly one channel by a
//! constant. An affine-coupled tensor biases M target channels, each bias a
//! sample-dependent affine function of the *other* targets' normalized
//! values. A direction-scaled tensor adds `strength * direction`, where the
//! direction is a sparse style-space vector supplied by an external
//! direction-search tool.
//!
//! Tensors are sparse: they name the handful of channels they touch and
//! leave everything else untouched, exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::style::{ChannelId, StyleCode, StyleLayout};

/// Mean and standard deviation of one style channel over a sample batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub channel: ChannelId,
    pub mean: f64,
    pub std: f64,
    pub sample_count: usize,
}

impl ChannelStats {
    pub fn new(channel: ChannelId, mean: f64, std: f64, sample_count: usize) -> Result<Self> {
        let stats = Self { channel, mean, std, sample_count };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.std.is_finite() || self.std <= 0.0 {
            return Err(Error::DegenerateChannel {
                channel: self.channel,
                samples: self.sample_count,
            });
        }
        if self.sample_count < 2 {
            return Err(Error::config(format!(
                "channel stats for {} need at least 2 samples, got {}",
                self.channel, self.sample_count
            )));
        }
        if !self.mean.is_finite() {
            return Err(Error::config(format!(
                "channel stats for {} have non-finite mean",
                self.channel
            )));
        }
        Ok(())
    }
}

/// Coupling parameters (x, y) feeding one target's bias from one other
/// target's normalized channel value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub x: f64,
    pub y: f64,
}

impl Coupling {
    pub const ZERO: Coupling = Coupling { x: 0.0, y: 0.0 };
}

/// One target channel of an affine-coupled tensor. `couplings[j]` pairs with
/// the j-th *other* target, in target-list order with self skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTarget {
    pub channel: ChannelId,
    pub stats: ChannelStats,
    pub couplings: Vec<Coupling>,
}

/// A learned additive bias on style codes.
#[derive(Debug, Clone, PartialEq)]
pub enum FairStyleTensor {
    Scalar {
        channel: ChannelId,
        value: f64,
    },
    AffineCoupled {
        targets: Vec<AffineTarget>,
    },
    DirectionScaled {
        direction: BTreeMap<ChannelId, f64>,
        strength: f64,
    },
}

impl FairStyleTensor {
    pub fn scalar(channel: ChannelId, value: f64) -> Self {
        FairStyleTensor::Scalar { channel, value }
    }

    pub fn direction_scaled(direction: BTreeMap<ChannelId, f64>, strength: f64) -> Self {
        FairStyleTensor::DirectionScaled { direction, strength }
    }

    /// Builds the affine-coupled variant from flat parameters, ordered
    /// `(x, y)` per coupling, couplings grouped by target and then by the
    /// other target's position ascending. Length must be `2 * M * (M - 1)`.
    pub fn affine_from_params(
        channels: &[ChannelId],
        stats: &[ChannelStats],
        params: &[f64],
    ) -> Result<Self> {
        let m = channels.len();
        if m < 2 {
            return Err(Error::config(format!(
                "affine-coupled tensor needs at least 2 targets, got {m}"
            )));
        }
        if stats.len() != m {
            return Err(Error::config(format!(
                "expected {m} channel stats, got {}",
                stats.len()
            )));
        }
        let expected = 2 * m * (m - 1);
        if params.len() != expected {
            return Err(Error::config(format!(
                "affine-coupled tensor with {m} targets needs {expected} parameters, got {}",
                params.len()
            )));
        }
        let mut targets = Vec::with_capacity(m);
        let mut it = params.iter();
        for i in 0..m {
            let mut couplings = Vec::with_capacity(m - 1);
            for _ in 0..m - 1 {
                let x = *it.next().expect("length checked");
                let y = *it.next().expect("length checked");
                couplings.push(Coupling { x, y });
            }
            targets.push(AffineTarget {
                channel: channels[i],
                stats: stats[i],
                couplings,
            });
        }
        Ok(FairStyleTensor::AffineCoupled { targets })
    }

    /// Flat learnable parameters, inverse of [`affine_from_params`](Self::affine_from_params)
    /// for the affine variant; the scalar value / direction strength otherwise.
    pub fn flat_params(&self) -> Vec<f64> {
        match self {
            FairStyleTensor::Scalar { value, .. } => vec![*value],
            FairStyleTensor::AffineCoupled { targets } => {
                let mut out = Vec::with_capacity(2 * targets.len() * (targets.len() - 1));
                for t in targets {
                    for c in &t.couplings {
                        out.push(c.x);
                        out.push(c.y);
                    }
                }
                out
            }
            FairStyleTensor::DirectionScaled { strength, .. } => vec![*strength],
        }
    }

    /// Channels this tensor may touch.
    pub fn support(&self) -> Vec<ChannelId> {
        match self {
            FairStyleTensor::Scalar { channel, .. } => vec![*channel],
            FairStyleTensor::AffineCoupled { targets } => {
                targets.iter().map(|t| t.channel).collect()
            }
            FairStyleTensor::DirectionScaled { direction, .. } => {
                direction.keys().copied().collect()
            }
        }
    }

    /// True when applying the tensor is the identity for every sample.
    pub fn is_zero(&self) -> bool {
        match self {
            FairStyleTensor::Scalar { value, .. } => *value == 0.0,
            FairStyleTensor::AffineCoupled { targets } => targets
                .iter()
                .all(|t| t.couplings.iter().all(|c| c.x == 0.0 && c.y == 0.0)),
            FairStyleTensor::DirectionScaled { direction, strength } => {
                *strength == 0.0 || direction.values().all(|d| *d == 0.0)
            }
        }
    }

    /// Checks every channel address against a layout. tRGB layers can never
    /// carry bias.
    pub fn validate(&self, layout: &StyleLayout) -> Result<()> {
        match self {
            FairStyleTensor::Scalar { channel, .. } => {
                layout.check_editable(*channel)?;
            }
            FairStyleTensor::AffineCoupled { targets } => {
                if targets.len() < 2 {
                    return Err(Error::config(
                        "affine-coupled tensor needs at least 2 targets",
                    ));
                }
                for (i, t) in targets.iter().enumerate() {
                    layout.check_editable(t.channel)?;
                    t.stats.validate()?;
                    if t.stats.channel != t.channel {
                        return Err(Error::config(format!(
                            "stats for target {i} describe channel {} but target is {}",
                            t.stats.channel, t.channel
                        )));
                    }
                    if t.couplings.len() != targets.len() - 1 {
                        return Err(Error::config(format!(
                            "target {i} has {} couplings, expected {}",
                            t.couplings.len(),
                            targets.len() - 1
                        )));
                    }
                    for other in &targets[i + 1..] {
                        if other.channel == t.channel {
                            return Err(Error::config(format!(
                                "duplicate target channel {}",
                                t.channel
                            )));
                        }
                    }
                }
            }
            FairStyleTensor::DirectionScaled { direction, .. } => {
                if direction.is_empty() {
                    return Err(Error::config("direction-scaled tensor has empty direction"));
                }
                for ch in direction.keys() {
                    layout.check_editable(*ch)?;
                }
            }
        }
        Ok(())
    }

    /// Per-sample bias values over the tensor's support, computed from the
    /// given (pre-edit) style code.
    pub fn bias_values(&self, code: &StyleCode) -> Result<BTreeMap<ChannelId, f64>> {
        match self {
            FairStyleTensor::Scalar { channel, value } => {
                Ok(BTreeMap::from([(*channel, *value)]))
            }
            FairStyleTensor::AffineCoupled { targets } => {
                let channels: Vec<ChannelId> = targets.iter().map(|t| t.channel).collect();
                let stats: Vec<ChannelStats> = targets.iter().map(|t| t.stats).collect();
                let mut params = Vec::with_capacity(2 * channels.len() * (channels.len() - 1));
                for t in targets {
                    for c in &t.couplings {
                        params.push(c.x);
                        params.push(c.y);
                    }
                }
                crate::debias::multi_bias(code, &channels, &params, &stats)
            }
            FairStyleTensor::DirectionScaled { direction, strength } => Ok(direction
                .iter()
                .map(|(ch, d)| (*ch, strength * d))
                .collect()),
        }
    }
}

/// Returns a new style code equal to `code + tensor`. The input is never
/// mutated; channels outside the tensor's support are copied bit-exactly,
/// and zero biases are skipped so an all-zero tensor is the exact identity.
pub fn apply_fairstyle(code: &StyleCode, tensor: &FairStyleTensor) -> Result<StyleCode> {
    tensor.validate(code.layout())?;
    let bias = tensor.bias_values(code)?;
    let mut out = code.clone();
    for (channel, value) in bias {
        if value != 0.0 {
            out.add(channel, value);
        }
    }
    Ok(out)
}
