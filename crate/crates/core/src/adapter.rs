//! Adapter contracts through which generators and classifiers are driven,
//! plus seeded batch generation.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::derive_seed;
use crate::style::{Image, StyleCode, StyleLayout};
use crate::tensor::{apply_fairstyle, FairStyleTensor};

/// Drives a generator: latent seeds to style codes, style codes to images.
///
/// Implementations must be deterministic: the same latent seed always yields
/// the same style code, and rendering the same code yields the same image.
/// Any internal noise inputs must be derived from the latent seed.
pub trait GeneratorAdapter: Send + Sync {
    fn layout(&self) -> Arc<StyleLayout>;

    /// Samples the style code for one latent draw.
    fn style_code(&self, latent_seed: u64) -> Result<StyleCode>;

    /// Renders a style code to an image.
    fn render(&self, code: &StyleCode) -> Result<Image>;

    /// Whether concurrent inference calls are safe. The toolkit serializes
    /// calls to adapters that report `false`.
    fn concurrent_inference(&self) -> bool {
        false
    }
}

/// Scores one binary attribute on images: a probability in [0, 1] plus a
/// threshold converting scores to labels. Scoring must be deterministic.
pub trait ClassifierAdapter: Send + Sync {
    fn attribute(&self) -> &str;

    /// Presence probability of the attribute, in [0, 1].
    fn score(&self, image: &Image) -> Result<f64>;

    fn threshold(&self) -> f64 {
        0.5
    }

    /// Default labeling rule: score at or above the threshold means present.
    fn label(&self, image: &Image) -> Result<bool> {
        Ok(self.score(image)? >= self.threshold())
    }

    fn concurrent_inference(&self) -> bool {
        false
    }
}

impl<T: GeneratorAdapter + ?Sized> GeneratorAdapter for Arc<T> {
    fn layout(&self) -> Arc<StyleLayout> {
        (**self).layout()
    }
    fn style_code(&self, latent_seed: u64) -> Result<StyleCode> {
        (**self).style_code(latent_seed)
    }
    fn render(&self, code: &StyleCode) -> Result<Image> {
        (**self).render(code)
    }
    fn concurrent_inference(&self) -> bool {
        (**self).concurrent_inference()
    }
}

/// Output of [`generate_batch`]: the latent seeds that were drawn, the style
/// codes actually rendered (post-bias when a tensor was applied), and the
/// rendered images, all index-aligned.
#[derive(Debug, Clone)]
pub struct GeneratedBatch {
    pub latent_seeds: Vec<u64>,
    pub codes: Vec<StyleCode>,
    pub images: Vec<Image>,
}

impl GeneratedBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Latent seed for sample `index` of the batch identified by `seed`.
pub fn latent_seed_for(seed: u64, index: usize) -> u64 {
    derive_seed(seed, "latent", index as u64)
}

/// Generates `n` samples, applying `tensor` to each style code before
/// rendering when given. Reproducible for a fixed `(seed, tensor)` pair.
pub fn generate_batch(
    adapter: &dyn GeneratorAdapter,
    n: usize,
    tensor: Option<&FairStyleTensor>,
    seed: u64,
) -> Result<GeneratedBatch> {
    if n == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let layout = adapter.layout();
    if let Some(t) = tensor {
        t.validate(&layout)?;
    }

    let one = |k: usize| -> Result<(u64, StyleCode, Image)> {
        let latent = latent_seed_for(seed, k);
        let run = || -> Result<(StyleCode, Image)> {
            let code = adapter.style_code(latent)?;
            let code = match tensor {
                Some(t) => apply_fairstyle(&code, t)?,
                None => code,
            };
            let image = adapter.render(&code)?;
            Ok((code, image))
        };
        match run() {
            Ok((code, image)) => Ok((latent, code, image)),
            Err(Error::InvalidChannel { layer, channel, reason }) => {
                Err(Error::InvalidChannel { layer, channel, reason })
            }
            Err(e) => Err(Error::Generator { index: k, message: e.to_string() }),
        }
    };

    let results: Result<Vec<_>> = if adapter.concurrent_inference() && n >= 64 {
        (0..n).into_par_iter().map(one).collect()
    } else {
        (0..n).map(one).collect()
    };

    let mut latent_seeds = Vec::with_capacity(n);
    let mut codes = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    for (latent, code, image) in results? {
        latent_seeds.push(latent);
        codes.push(code);
        images.push(image);
    }
    Ok(GeneratedBatch { latent_seeds, codes, images })
}
