//! Error type shared across the toolkit.

use thiserror::Error;

use crate::style::ChannelId;

#[derive(Debug, Error)]
pub enum Error {
    /// A channel address does not exist in the layout, or points at a layer
    /// that must not carry bias (tRGB layers).
    #[error("invalid channel ({layer}, {channel}): {reason}")]
    InvalidChannel {
        layer: usize,
        channel: usize,
        reason: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    /// A style channel with zero variance cannot be normalized.
    #[error("degenerate channel ({}, {}): zero variance over {samples} samples", channel.layer, channel.channel)]
    DegenerateChannel { channel: ChannelId, samples: usize },

    #[error("generator failed on sample {index}: {message}")]
    Generator { index: usize, message: String },

    #[error("classifier '{attribute}' failed on image {index}: {message}")]
    Classifier {
        attribute: String,
        index: usize,
        message: String,
    },

    #[error("unknown attribute '{0}'")]
    UnknownAttribute(String),

    #[error("generator fingerprint mismatch: tensor was built for {tensor}, generator reports {generator}")]
    FingerprintMismatch { tensor: String, generator: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid_channel(channel: ChannelId, reason: impl Into<String>) -> Self {
        Error::InvalidChannel {
            layer: channel.layer,
            channel: channel.channel,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(message: impl Into<String>) -> Self {
        Error::Config(message.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
