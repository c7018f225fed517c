//! On-disk formats and atomic writes.
//!
//! Fairstyle tensors persist as a JSON document with fields
//! `{variant, targets, parameters, channel_stats, generator_fingerprint,
//! attribute_names, created_at}`. Loading verifies the recorded generator
//! fingerprint (a hash of the layer count, widths, kinds, and blocks)
//! against the target generator and refuses mismatches.
//!
//! All JSON artifacts are written atomically: to a temporary file in the
//! destination directory, then renamed into place. An interrupted run never
//! leaves a partially written document.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::style::{ChannelId, StyleLayout};
use crate::tensor::{ChannelStats, FairStyleTensor};

/// Seconds since the Unix epoch, honoring `SOURCE_DATE_EPOCH` so
/// reproducible builds and tests can pin artifact timestamps.
pub fn unix_timestamp() -> u64 {
    if let Ok(epoch) = std::env::var("SOURCE_DATE_EPOCH") {
        if let Ok(v) = epoch.trim().parse::<u64>() {
            return v;
        }
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Writes bytes to `path` via a temporary sibling file and an atomic rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("cannot write to '{}'", path.display())))?;
    let mut tmp = path.to_path_buf();
    tmp.set_file_name(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, bytes)?;
    match std::fs::rename(&tmp, path) {
        Ok(()) => Ok(()),
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e.into())
        }
    }
}

/// Serializes a value as pretty JSON (with a trailing newline) and writes it
/// atomically.
pub fn atomic_write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct TargetAddress {
    layer: usize,
    channel: usize,
}

impl From<ChannelId> for TargetAddress {
    fn from(ch: ChannelId) -> Self {
        Self { layer: ch.layer, channel: ch.channel }
    }
}

impl From<TargetAddress> for ChannelId {
    fn from(t: TargetAddress) -> Self {
        ChannelId::new(t.layer, t.channel)
    }
}

/// The serialized tensor document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorFile {
    pub variant: String,
    targets: Vec<TargetAddress>,
    parameters: Vec<f64>,
    channel_stats: Vec<ChannelStats>,
    pub generator_fingerprint: String,
    pub attribute_names: Vec<String>,
    pub created_at: u64,
    /// Provenance of the producing run, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

const VARIANT_SCALAR: &str = "scalar";
const VARIANT_AFFINE: &str = "affine_coupled";
const VARIANT_DIRECTION: &str = "direction_scaled";

impl TensorFile {
    /// Packs a tensor for the given generator layout.
    ///
    /// Parameter packing per variant: scalar stores `[c]`; affine-coupled
    /// stores the flat coupling parameters (see
    /// [`FairStyleTensor::affine_from_params`]); direction-scaled stores
    /// `[strength]` followed by the direction values aligned with `targets`.
    pub fn pack(
        tensor: &FairStyleTensor,
        layout: &StyleLayout,
        attribute_names: Vec<String>,
    ) -> Result<Self> {
        tensor.validate(layout)?;
        let (variant, targets, parameters, channel_stats) = match tensor {
            FairStyleTensor::Scalar { channel, value } => (
                VARIANT_SCALAR,
                vec![TargetAddress::from(*channel)],
                vec![*value],
                Vec::new(),
            ),
            FairStyleTensor::AffineCoupled { targets } => (
                VARIANT_AFFINE,
                targets.iter().map(|t| TargetAddress::from(t.channel)).collect(),
                tensor.flat_params(),
                targets.iter().map(|t| t.stats).collect(),
            ),
            FairStyleTensor::DirectionScaled { direction, strength } => {
                let mut parameters = Vec::with_capacity(1 + direction.len());
                parameters.push(*strength);
                parameters.extend(direction.values());
                (
                    VARIANT_DIRECTION,
                    direction.keys().map(|ch| TargetAddress::from(*ch)).collect(),
                    parameters,
                    Vec::new(),
                )
            }
        };
        Ok(Self {
            variant: variant.to_string(),
            targets,
            parameters,
            channel_stats,
            generator_fingerprint: layout.fingerprint(),
            attribute_names,
            created_at: unix_timestamp(),
            config_hash: None,
            seed: None,
        })
    }

    pub fn with_provenance(mut self, config_hash: impl Into<String>, seed: u64) -> Self {
        self.config_hash = Some(config_hash.into());
        self.seed = Some(seed);
        self
    }

    /// Reconstructs the tensor, verifying the recorded fingerprint against
    /// the target layout.
    pub fn unpack(&self, layout: &StyleLayout) -> Result<FairStyleTensor> {
        let actual = layout.fingerprint();
        if self.generator_fingerprint != actual {
            return Err(Error::FingerprintMismatch {
                tensor: self.generator_fingerprint.clone(),
                generator: actual,
            });
        }
        let channels: Vec<ChannelId> = self.targets.iter().map(|t| ChannelId::from(*t)).collect();
        let tensor = match self.variant.as_str() {
            VARIANT_SCALAR => {
                if channels.len() != 1 || self.parameters.len() != 1 {
                    return Err(Error::config(
                        "scalar tensor document must have exactly one target and one parameter",
                    ));
                }
                FairStyleTensor::scalar(channels[0], self.parameters[0])
            }
            VARIANT_AFFINE => FairStyleTensor::affine_from_params(
                &channels,
                &self.channel_stats,
                &self.parameters,
            )?,
            VARIANT_DIRECTION => {
                if self.parameters.len() != channels.len() + 1 {
                    return Err(Error::config(format!(
                        "direction tensor document with {} targets needs {} parameters, got {}",
                        channels.len(),
                        channels.len() + 1,
                        self.parameters.len()
                    )));
                }
                let strength = self.parameters[0];
                let direction: BTreeMap<ChannelId, f64> = channels
                    .iter()
                    .copied()
                    .zip(self.parameters[1..].iter().copied())
                    .collect();
                if direction.len() != channels.len() {
                    return Err(Error::config("direction tensor document repeats a target"));
                }
                FairStyleTensor::direction_scaled(direction, strength)
            }
            other => {
                return Err(Error::config(format!("unknown tensor variant '{other}'")));
            }
        };
        tensor.validate(layout)?;
        Ok(tensor)
    }
}

/// Saves a tensor next to the metadata needed to reload and verify it.
pub fn save_tensor(
    path: &Path,
    tensor: &FairStyleTensor,
    layout: &StyleLayout,
    attribute_names: Vec<String>,
) -> Result<()> {
    let file = TensorFile::pack(tensor, layout, attribute_names)?;
    atomic_write_json(path, &file)
}

/// Loads a tensor document and verifies it against the target layout.
pub fn load_tensor(path: &Path, layout: &StyleLayout) -> Result<(FairStyleTensor, TensorFile)> {
    let file: TensorFile = read_json(path)?;
    let tensor = file.unpack(layout)?;
    Ok((tensor, file))
}
