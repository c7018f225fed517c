//! The style-space data model: channel addresses, layer layouts, per-sample
//! style codes, and the image value type passed to classifiers.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::fnv1a;

/// Address of one scalar style channel: layer index and channel index within
/// that layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChannelId {
    pub layer: usize,
    pub channel: usize,
}

impl ChannelId {
    pub fn new(layer: usize, channel: usize) -> Self {
        Self { layer, channel }
    }
}

impl std::fmt::Display for ChannelId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.layer, self.channel)
    }
}

/// Whether a style layer modulates a convolution or a tRGB (to-RGB) mapping.
/// tRGB layers are never perturbed or biased: editing them entangles
/// attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    TRgb,
}

/// Static description of one style layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub width: usize,
    pub kind: LayerKind,
    /// Synthesis-block index this layer belongs to. Block indices group the
    /// conv and tRGB layers of one resolution stage.
    pub block: usize,
}

/// Immutable description of a generator's style layers: widths, kinds, and
/// block membership. Shared by reference between style codes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleLayout {
    layers: Vec<LayerInfo>,
}

impl StyleLayout {
    pub fn new(layers: Vec<LayerInfo>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("style layout must have at least one layer"));
        }
        if let Some(i) = layers.iter().position(|l| l.width == 0) {
            return Err(Error::config(format!("layer {i} has zero width")));
        }
        Ok(Self { layers })
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> Option<&LayerInfo> {
        self.layers.get(index)
    }

    /// Number of blocks (highest block index + 1).
    pub fn block_count(&self) -> usize {
        self.layers.iter().map(|l| l.block + 1).max().unwrap_or(0)
    }

    pub fn contains(&self, channel: ChannelId) -> bool {
        self.layers
            .get(channel.layer)
            .is_some_and(|l| channel.channel < l.width)
    }

    /// Validates a channel address against this layout.
    pub fn check(&self, channel: ChannelId) -> Result<&LayerInfo> {
        let info = self.layers.get(channel.layer).ok_or_else(|| {
            Error::invalid_channel(
                channel,
                format!("layer index out of range (layout has {} layers)", self.layers.len()),
            )
        })?;
        if channel.channel >= info.width {
            return Err(Error::invalid_channel(
                channel,
                format!("channel index out of range (layer width is {})", info.width),
            ));
        }
        Ok(info)
    }

    /// Like [`check`](Self::check) but additionally rejects tRGB layers,
    /// which must never carry bias or perturbations.
    pub fn check_editable(&self, channel: ChannelId) -> Result<&LayerInfo> {
        let info = self.check(channel)?;
        if info.kind == LayerKind::TRgb {
            return Err(Error::invalid_channel(
                channel,
                "tRGB layers cannot carry bias",
            ));
        }
        Ok(info)
    }

    /// Iterates every channel address in the layout.
    pub fn channels(&self) -> impl Iterator<Item = ChannelId> + '_ {
        self.layers.iter().enumerate().flat_map(|(layer, info)| {
            (0..info.width).map(move |channel| ChannelId { layer, channel })
        })
    }

    /// Hash of the layer count, widths, kinds, and block indices. Persisted
    /// tensors record this and refuse to load against a different layout.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::with_capacity(8 + self.layers.len() * 24);
        bytes.extend_from_slice(&(self.layers.len() as u64).to_le_bytes());
        for l in &self.layers {
            bytes.extend_from_slice(&(l.width as u64).to_le_bytes());
            bytes.push(match l.kind {
                LayerKind::Conv => 0,
                LayerKind::TRgb => 1,
            });
            bytes.extend_from_slice(&(l.block as u64).to_le_bytes());
        }
        format!("{:016x}", fnv1a(&bytes))
    }
}

/// Builds the conventional block layout: each block contributes two conv
/// layers and one tRGB layer of the given width.
pub fn block_layout(block_widths: &[usize]) -> Result<StyleLayout> {
    let mut layers = Vec::with_capacity(block_widths.len() * 3);
    for (block, &width) in block_widths.iter().enumerate() {
        layers.push(LayerInfo { width, kind: LayerKind::Conv, block });
        layers.push(LayerInfo { width, kind: LayerKind::Conv, block });
        layers.push(LayerInfo { width, kind: LayerKind::TRgb, block });
    }
    StyleLayout::new(layers)
}

/// Per-layer style vectors for one sample, tied to the layout they were
/// sampled under.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleCode {
    layout: Arc<StyleLayout>,
    values: Vec<Vec<f64>>,
}

impl StyleCode {
    /// Vector lengths must match the layout's declared widths exactly.
    pub fn new(layout: Arc<StyleLayout>, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != layout.layer_count() {
            return Err(Error::config(format!(
                "style code has {} layers, layout declares {}",
                values.len(),
                layout.layer_count()
            )));
        }
        for (i, (v, info)) in values.iter().zip(layout.layers()).enumerate() {
            if v.len() != info.width {
                return Err(Error::config(format!(
                    "layer {i} has {} values, layout declares width {}",
                    v.len(),
                    info.width
                )));
            }
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &StyleLayout {
        &self.layout
    }

    pub fn layout_arc(&self) -> Arc<StyleLayout> {
        Arc::clone(&self.layout)
    }

    pub fn layer_values(&self, layer: usize) -> &[f64] {
        &self.values[layer]
    }

    pub fn value(&self, channel: ChannelId) -> Result<f64> {
        self.layout.check(channel)?;
        Ok(self.values[channel.layer][channel.channel])
    }

    pub(crate) fn add(&mut self, channel: ChannelId, delta: f64) {
        self.values[channel.layer][channel.channel] += delta;
    }

    #[cfg(test)]
    pub(crate) fn set(&mut self, channel: ChannelId, value: f64) {
        self.values[channel.layer][channel.channel] = value;
    }

    /// Exact (bitwise) equality of all channel values.
    pub fn bit_eq(&self, other: &StyleCode) -> bool {
        self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| {
                    a.len() == b.len()
                        && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }
}

/// A rendered sample: `channels` interleaved planes of `width * height`
/// real-valued pixels, row-major. Synthetic generators emit tiny
/// value-encoding grids; real adapters would emit RGB rasters.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::config(format!(
                "image data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Exact (bitwise) pixel equality.
    pub fn bit_eq(&self, other: &Image) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.channels == other.channels
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Encodes as a binary PGM (single channel) or PPM (three channels) with
    /// 16-bit depth. Values are squashed through the logistic so arbitrary
    /// real-valued grids map into the sample range deterministically.
    pub fn to_pnm(&self) -> Result<Vec<u8>> {
        let (magic, planes) = match self.channels {
            1 => ("P5", 1),
            3 => ("P6", 3),
            c => {
                return Err(Error::config(format!(
                    "cannot encode {c}-channel image as PNM (1 or 3 supported)"
                )))
            }
        };
        let mut out = format!("{magic}\n{} {}\n65535\n", self.width, self.height).into_bytes();
        for px in 0..self.width * self.height {
            for c in 0..planes {
                let v = self.data[px * self.channels + c];
                let q = (crate::math::sigmoid(v) * 65535.0).round().clamp(0.0, 65535.0) as u16;
                out.extend_from_slice(&q.to_be_bytes());
            }
        }
        Ok(out)
    }

    /// File extension matching [`to_pnm`](Self::to_pnm) output.
    pub fn pnm_extension(&self) -> &'static str {
        if self.channels == 3 {
            "ppm"
        } else {
            "pgm"
        }
    }
}
