//! Embedding-similarity binary classification from prompt pairs: an image is
//! labeled present when it sits strictly closer (cosine distance in a shared
//! image/text embedding space) to the positive prompt than to the negative
//! one.

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapter::ClassifierAdapter;
use crate::error::{Error, Result};
use crate::math::{derive_seed, fnv1a, sigmoid};
use crate::style::Image;

/// A positive prompt describing the target attribute and a negative prompt
/// negating it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    positive: String,
    negative: String,
}

impl PromptPair {
    pub fn new(positive: impl Into<String>, negative: impl Into<String>) -> Result<Self> {
        let positive = positive.into();
        let negative = negative.into();
        if positive.is_empty() || negative.is_empty() {
            return Err(Error::config("prompts must be non-empty"));
        }
        if positive == negative {
            return Err(Error::config("positive and negative prompts must differ"));
        }
        Ok(Self { positive, negative })
    }

    pub fn positive(&self) -> &str {
        &self.positive
    }

    pub fn negative(&self) -> &str {
        &self.negative
    }

    /// The pair with roles reversed.
    pub fn swapped(&self) -> PromptPair {
        PromptPair { positive: self.negative.clone(), negative: self.positive.clone() }
    }
}

/// Joint image/text embedding backend. Embeddings must be unit-norm and
/// deterministic per input.
pub trait EmbeddingBackend: Send + Sync {
    fn embed_image(&self, image: &Image) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
    fn concurrent_inference(&self) -> bool {
        false
    }
}

/// Cosine distance between unit vectors: `1 - <a, b>`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

/// Outcome of one prompt-pair comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipDecision {
    pub label: bool,
    pub positive_distance: f64,
    pub negative_distance: f64,
}

/// Labels an image 1 iff it is strictly closer to the positive prompt than
/// to the negative prompt; ties (including exact equidistance) label 0.
pub fn clip_label(
    backend: &dyn EmbeddingBackend,
    image: &Image,
    prompts: &PromptPair,
) -> Result<ClipDecision> {
    let e_img = backend.embed_image(image)?;
    let e_pos = backend.embed_text(&prompts.positive)?;
    let e_neg = backend.embed_text(&prompts.negative)?;
    if e_pos.len() != e_img.len() || e_neg.len() != e_img.len() {
        return Err(Error::config(format!(
            "embedding dimensions disagree: image {} / positive {} / negative {}",
            e_img.len(),
            e_pos.len(),
            e_neg.len()
        )));
    }
    let positive_distance = cosine_distance(&e_img, &e_pos);
    let negative_distance = cosine_distance(&e_img, &e_neg);
    Ok(ClipDecision {
        label: positive_distance < negative_distance,
        positive_distance,
        negative_distance,
    })
}

/// A [`ClassifierAdapter`] wrapping a prompt pair. The score is the softmax
/// over negative distances, `sigmoid(d_neg - d_pos)`, so thresholding at 0.5
/// reproduces the strict-inequality distance decision: the label is 1
/// exactly when the score strictly exceeds one half.
pub struct ClipClassifier {
    backend: Arc<dyn EmbeddingBackend>,
    prompts: PromptPair,
    attribute: String,
}

impl ClipClassifier {
    pub fn prompts(&self) -> &PromptPair {
        &self.prompts
    }

    /// Renames the attribute (defaults to the positive prompt verbatim).
    pub fn with_attribute_name(mut self, name: impl Into<String>) -> Self {
        self.attribute = name.into();
        self
    }
}

/// Wraps a prompt pair as a classifier usable anywhere one is accepted:
/// discovery, auditing, and debiasing.
pub fn as_classifier_adapter(
    backend: Arc<dyn EmbeddingBackend>,
    prompts: PromptPair,
) -> ClipClassifier {
    let attribute = prompts.positive.clone();
    ClipClassifier { backend, prompts, attribute }
}

impl ClassifierAdapter for ClipClassifier {
    fn attribute(&self) -> &str {
        &self.attribute
    }

    fn score(&self, image: &Image) -> Result<f64> {
        let d = clip_label(self.backend.as_ref(), image, &self.prompts)?;
        Ok(sigmoid(d.negative_distance - d.positive_distance))
    }

    /// Strict thresholding, honoring the strict inequality of the distance
    /// rule: an exactly-ambivalent score of 0.5 labels 0.
    fn label(&self, image: &Image) -> Result<bool> {
        Ok(self.score(image)? > self.threshold())
    }

    fn concurrent_inference(&self) -> bool {
        self.backend.concurrent_inference()
    }
}

/// Deterministic test backend: hand-set embeddings for specific inputs, with
/// a seeded-hash unit vector as the fallback for everything else.
pub struct MockEmbeddingBackend {
    dim: usize,
    seed: u64,
    image_overrides: HashMap<u64, Vec<f64>>,
    text_overrides: HashMap<String, Vec<f64>>,
}

impl MockEmbeddingBackend {
    pub fn hashed(dim: usize, seed: u64) -> Self {
        assert!(dim >= 2, "mock embeddings need at least 2 dimensions");
        Self { dim, seed, image_overrides: HashMap::new(), text_overrides: HashMap::new() }
    }

    /// Pins the embedding of one exact image. The vector is normalized.
    pub fn with_image(mut self, image: &Image, embedding: Vec<f64>) -> Self {
        self.image_overrides
            .insert(image_key(image), normalize(embedding, self.dim));
        self
    }

    /// Pins the embedding of one exact prompt string. The vector is
    /// normalized.
    pub fn with_text(mut self, text: impl Into<String>, embedding: Vec<f64>) -> Self {
        self.text_overrides
            .insert(text.into(), normalize(embedding, self.dim));
        self
    }

    fn hashed_unit(&self, stream: &str, key: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, stream, key));
        let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        normalize(v, self.dim)
    }
}

fn normalize(v: Vec<f64>, dim: usize) -> Vec<f64> {
    assert_eq!(v.len(), dim, "embedding has wrong dimension");
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm > 0.0, "cannot normalize the zero vector");
    v.into_iter().map(|x| x / norm).collect()
}

fn image_key(image: &Image) -> u64 {
    let mut bytes = Vec::with_capacity(24 + image.data().len() * 8);
    bytes.extend_from_slice(&(image.width() as u64).to_le_bytes());
    bytes.extend_from_slice(&(image.height() as u64).to_le_bytes());
    bytes.extend_from_slice(&(image.channels() as u64).to_le_bytes());
    for v in image.data() {
        bytes.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fnv1a(&bytes)
}

impl EmbeddingBackend for MockEmbeddingBackend {
    fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
        let key = image_key(image);
        Ok(match self.image_overrides.get(&key) {
            Some(v) => v.clone(),
            None => self.hashed_unit("mock-image", key),
        })
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        Ok(match self.text_overrides.get(text) {
            Some(v) => v.clone(),
            None => self.hashed_unit("mock-text", fnv1a(text.as_bytes())),
        })
    }

    fn concurrent_inference(&self) -> bool {
        true
    }
}
