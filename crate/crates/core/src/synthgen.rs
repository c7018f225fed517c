//! Deterministic synthetic generator/classifier pairs with planted
//! channel-to-attribute causal structure and analytically known biases.
//!
//! The generator samples standard-normal style codes and renders tiny grids
//! whose pixels carry the values of the channels any planted rule reads;
//! classifiers recover those values and apply a logistic rule whose
//! threshold is chosen so each attribute's base rate matches its configured
//! bias level. The [`Oracle`] exposes the closed-form answers the tests
//! check against: exact base rates, the exact balancing offset per
//! attribute, and the exact decorrelating parameters for a planted
//! cross-attribute coupling.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapter::{ClassifierAdapter, GeneratorAdapter};
use crate::error::{Error, Result};
use crate::math::{derive_seed, normal_cdf, normal_pdf, normal_quantile, sigmoid};
use crate::style::{ChannelId, Image, LayerInfo, StyleCode, StyleLayout};
use crate::tensor::{ChannelStats, FairStyleTensor};

fn default_image_size() -> usize {
    8
}

fn default_slope() -> f64 {
    1.0
}

fn default_threshold() -> f64 {
    0.5
}

/// A channel that leaks into an attribute's score with less than causal
/// weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpuriousEffect {
    pub channel: ChannelId,
    pub weight: f64,
}

/// Planted rule for one attribute: a causal channel, a logistic slope, and a
/// base rate the threshold is solved for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeRule {
    pub name: String,
    pub causal_channel: ChannelId,
    #[serde(default = "default_slope")]
    pub slope: f64,
    /// Probability that the attribute is labeled present.
    pub base_rate: f64,
    #[serde(default)]
    pub spurious: Vec<SpuriousEffect>,
}

/// Shifts the target attribute's pre-activation by `gamma` times the source
/// attribute's causal channel value, planting joint bias between the two.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingRule {
    pub source: usize,
    pub target: usize,
    pub gamma: f64,
}

/// Serializable description of a synthetic generator/classifier pair, so
/// failing seeds are reproducible from the spec alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub layers: Vec<LayerInfo>,
    pub attributes: Vec<AttributeRule>,
    #[serde(default)]
    pub coupling: Option<CouplingRule>,
    #[serde(default)]
    pub noise_salt: u64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
}

impl SyntheticSpec {
    /// One attribute planted on channel (0, 3) of a six-block layout.
    pub fn single_attribute(name: &str, base_rate: f64, noise_salt: u64) -> Self {
        Self {
            layers: crate::style::block_layout(&[8; 6]).unwrap().layers().to_vec(),
            attributes: vec![AttributeRule {
                name: name.to_string(),
                causal_channel: ChannelId::new(0, 3),
                slope: default_slope(),
                base_rate,
                spurious: Vec::new(),
            }],
            coupling: None,
            noise_salt,
            image_size: default_image_size(),
        }
    }

    /// Two attributes on distinct early-block channels, the second coupled to
    /// the first's causal channel with strength `gamma`.
    pub fn correlated_pair(
        names: [&str; 2],
        base_rates: [f64; 2],
        gamma: f64,
        noise_salt: u64,
    ) -> Self {
        Self {
            layers: crate::style::block_layout(&[8; 6]).unwrap().layers().to_vec(),
            attributes: vec![
                AttributeRule {
                    name: names[0].to_string(),
                    causal_channel: ChannelId::new(0, 3),
                    slope: default_slope(),
                    base_rate: base_rates[0],
                    spurious: Vec::new(),
                },
                AttributeRule {
                    name: names[1].to_string(),
                    causal_channel: ChannelId::new(1, 5),
                    slope: default_slope(),
                    base_rate: base_rates[1],
                    spurious: Vec::new(),
                },
            ],
            coupling: Some(CouplingRule { source: 0, target: 1, gamma }),
            noise_salt,
            image_size: default_image_size(),
        }
    }
}

/// Logistic classifier over image pixels:
/// `score = sigmoid(slope * (sum_i w_i * pixel_i - offset))`.
///
/// This is both the planted synthetic classifier and the on-disk classifier
/// format the CLI loads from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelLogisticClassifier {
    pub attribute: String,
    pub weights: Vec<PixelWeight>,
    pub slope: f64,
    pub offset: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelWeight {
    pub pixel: usize,
    pub weight: f64,
}

impl ClassifierAdapter for PixelLogisticClassifier {
    fn attribute(&self) -> &str {
        &self.attribute
    }

    fn score(&self, image: &Image) -> Result<f64> {
        let data = image.data();
        let mut sum = 0.0;
        for w in &self.weights {
            let v = data.get(w.pixel).ok_or_else(|| {
                Error::config(format!(
                    "classifier '{}' reads pixel {} but the image has {} values",
                    self.attribute,
                    w.pixel,
                    data.len()
                ))
            })?;
            sum += w.weight * v;
        }
        Ok(sigmoid(self.slope * (sum - self.offset)))
    }

    fn threshold(&self) -> f64 {
        self.threshold
    }

    fn concurrent_inference(&self) -> bool {
        true
    }
}

/// A pixel whose value is a squashed mix of two style channels; fills the
/// grid positions no planted rule reads.
#[derive(Debug, Clone, Copy)]
struct TexturePixel {
    pixel: usize,
    source_a: ChannelId,
    source_b: ChannelId,
    weight_a: f64,
    weight_b: f64,
}

/// Deterministic synthetic generator: standard-normal style codes, rendered
/// as value-encoding grids. Pure function of (spec, latent seed), safe for
/// concurrent inference.
#[derive(Debug, Clone)]
pub struct SyntheticGenerator {
    layout: Arc<StyleLayout>,
    readouts: Vec<(ChannelId, usize)>,
    texture: Vec<TexturePixel>,
    image_size: usize,
    noise_salt: u64,
}

impl SyntheticGenerator {
    /// Pixel index carrying the given channel's value, if any rule reads it.
    pub fn readout_pixel(&self, channel: ChannelId) -> Option<usize> {
        self.readouts
            .iter()
            .find(|(ch, _)| *ch == channel)
            .map(|(_, px)| *px)
    }
}

impl GeneratorAdapter for SyntheticGenerator {
    fn layout(&self) -> Arc<StyleLayout> {
        Arc::clone(&self.layout)
    }

    fn style_code(&self, latent_seed: u64) -> Result<StyleCode> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(latent_seed, "synth-style", self.noise_salt));
        let values = self
            .layout
            .layers()
            .iter()
            .map(|info| {
                (0..info.width)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect::<Vec<f64>>()
            })
            .collect();
        StyleCode::new(Arc::clone(&self.layout), values)
    }

    fn render(&self, code: &StyleCode) -> Result<Image> {
        if code.layout() != self.layout.as_ref() {
            return Err(Error::config(
                "style code belongs to a different generator layout",
            ));
        }
        let mut data = vec![0.0f64; self.image_size * self.image_size];
        for (channel, pixel) in &self.readouts {
            data[*pixel] = code.value(*channel)?;
        }
        for t in &self.texture {
            let a = code.value(t.source_a)?;
            let b = code.value(t.source_b)?;
            data[t.pixel] = (t.weight_a * a + t.weight_b * b).tanh();
        }
        Image::new(self.image_size, self.image_size, 1, data)
    }

    fn concurrent_inference(&self) -> bool {
        true
    }
}

/// Closed-form answers about a synthetic spec: exact base rates, exact
/// balancing offsets, exact decorrelating parameters, and quadrature-grade
/// expected joint cells.
#[derive(Debug, Clone)]
pub struct Oracle {
    spec: SyntheticSpec,
    thresholds: Vec<f64>,
    sigmas: Vec<f64>,
}

impl Oracle {
    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    /// Configured probability that the attribute is labeled present.
    pub fn base_rate(&self, attribute: usize) -> f64 {
        self.spec.attributes[attribute].base_rate
    }

    /// Logistic threshold solved for the configured base rate.
    pub fn threshold(&self, attribute: usize) -> f64 {
        self.thresholds[attribute]
    }

    /// Standard deviation of the attribute's pre-activation.
    pub fn pre_activation_sigma(&self, attribute: usize) -> f64 {
        self.sigmas[attribute]
    }

    /// The scalar channel bias c* at which the attribute's label rate is
    /// exactly one half: adding c* shifts the pre-activation to be centered
    /// on the threshold.
    pub fn balancing_offset(&self, attribute: usize) -> f64 {
        self.thresholds[attribute]
    }

    /// KL (nats) of the attribute's unedited marginal from uniform.
    pub fn initial_marginal_kl(&self, attribute: usize) -> f64 {
        let b = self.base_rate(attribute);
        (1.0 - b) * (2.0 * (1.0 - b)).ln() + b * (2.0 * b).ln()
    }

    /// Exact channel statistics of any synthetic channel: standard normal.
    pub fn exact_stats(&self, channel: ChannelId) -> ChannelStats {
        ChannelStats { channel, mean: 0.0, std: 1.0, sample_count: usize::MAX }
    }

    /// For a planted coupling, the affine parameters that exactly decorrelate
    /// the pair and center both marginals, as flat `multi_bias` parameters
    /// over targets `[source causal, target causal]` with exact unit stats.
    pub fn decorrelating_params(&self) -> Option<([ChannelId; 2], [f64; 4])> {
        let coupling = self.spec.coupling?;
        let source_ch = self.spec.attributes[coupling.source].causal_channel;
        let target_ch = self.spec.attributes[coupling.target].causal_channel;
        let tau_s = self.thresholds[coupling.source];
        let tau_t = self.thresholds[coupling.target];
        // Bias on the source channel is the constant tau_s; bias on the
        // target channel cancels gamma times the edited source value.
        let params = [0.0, tau_s, -coupling.gamma, tau_t - coupling.gamma * tau_s];
        Some(([source_ch, target_ch], params))
    }

    /// The decorrelating parameters assembled into an affine-coupled tensor.
    pub fn decorrelating_tensor(&self) -> Option<FairStyleTensor> {
        let (channels, params) = self.decorrelating_params()?;
        let stats = [self.exact_stats(channels[0]), self.exact_stats(channels[1])];
        Some(
            FairStyleTensor::affine_from_params(&channels, &stats, &params)
                .expect("oracle parameters are well-formed"),
        )
    }

    /// Expected unedited joint cells for the coupled pair, in (source,
    /// target) attribute order: [FF, FT, TF, TT]. Computed by 1-D quadrature
    /// over the shared causal value.
    pub fn expected_joint_cells(&self) -> Option<[f64; 4]> {
        let coupling = self.spec.coupling?;
        let src = &self.spec.attributes[coupling.source];
        let tgt = &self.spec.attributes[coupling.target];
        let tau_s = self.thresholds[coupling.source];
        let tau_t = self.thresholds[coupling.target];
        let sigma_u = src
            .spurious
            .iter()
            .map(|s| s.weight * s.weight)
            .sum::<f64>()
            .sqrt();
        let sigma_v = (1.0
            + tgt.spurious.iter().map(|s| s.weight * s.weight).sum::<f64>())
        .sqrt();
        let gamma = coupling.gamma;

        // P(source present | causal value x) and same for target.
        let t_given = |x: f64| 1.0 - normal_cdf((tau_t - gamma * x) / sigma_v);
        let p11 = if sigma_u == 0.0 {
            simpson(|x| normal_pdf(x) * t_given(x), tau_s, 10.0, 4096)
        } else {
            let s_given = |x: f64| 1.0 - normal_cdf((tau_s - x) / sigma_u);
            simpson(|x| normal_pdf(x) * s_given(x) * t_given(x), -10.0, 10.0, 8192)
        };
        let b_s = src.base_rate;
        let b_t = tgt.base_rate;
        let p10 = b_s - p11;
        let p01 = b_t - p11;
        let p00 = 1.0 - b_s - b_t + p11;
        Some([p00, p01, p10, p11])
    }
}

/// Composite Simpson's rule with `n` (even) intervals.
fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    debug_assert!(n.is_multiple_of(2));
    let h = (b - a) / n as f64;
    let mut sum = f(a) + f(b);
    for i in 1..n {
        let x = a + h * i as f64;
        sum += f(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    sum * h / 3.0
}

/// A full synthetic fixture: generator, one classifier per attribute, and
/// the oracle with the ground-truth answers.
#[derive(Debug, Clone)]
pub struct SyntheticBundle {
    pub generator: SyntheticGenerator,
    pub classifiers: Vec<PixelLogisticClassifier>,
    pub oracle: Oracle,
}

impl SyntheticBundle {
    pub fn classifier_refs(&self) -> Vec<&dyn ClassifierAdapter> {
        self.classifiers
            .iter()
            .map(|c| c as &dyn ClassifierAdapter)
            .collect()
    }

    pub fn classifier(&self, name: &str) -> Option<&PixelLogisticClassifier> {
        self.classifiers.iter().find(|c| c.attribute == name)
    }
}

/// Builds the generator, per-attribute classifiers, and oracle from a spec.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<SyntheticBundle> {
    let layout = Arc::new(StyleLayout::new(spec.layers.clone())?);
    validate_spec(spec, &layout)?;

    // One pixel per channel any rule reads, in sorted channel order.
    let mut referenced: Vec<ChannelId> = Vec::new();
    for attr in &spec.attributes {
        referenced.push(attr.causal_channel);
        referenced.extend(attr.spurious.iter().map(|s| s.channel));
    }
    referenced.sort_unstable();
    referenced.dedup();

    let pixels = spec.image_size * spec.image_size;
    if referenced.len() > pixels {
        return Err(Error::config(format!(
            "image has {pixels} pixels but the rules reference {} channels",
            referenced.len()
        )));
    }
    let readouts: Vec<(ChannelId, usize)> = referenced
        .iter()
        .enumerate()
        .map(|(px, ch)| (*ch, px))
        .collect();
    let pixel_of: BTreeMap<ChannelId, usize> =
        readouts.iter().map(|(ch, px)| (*ch, *px)).collect();

    // Remaining pixels carry deterministic texture mixed from two channels.
    let all_channels: Vec<ChannelId> = layout.channels().collect();
    let mut texture = Vec::with_capacity(pixels - referenced.len());
    for px in referenced.len()..pixels {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(spec.noise_salt, "synth-texture", px as u64));
        let pick = |rng: &mut ChaCha8Rng| {
            let idx = rng.random_range(0..all_channels.len());
            all_channels[idx]
        };
        let uniform = |rng: &mut ChaCha8Rng| rng.random_range(-1.0..1.0);
        texture.push(TexturePixel {
            pixel: px,
            source_a: pick(&mut rng),
            source_b: pick(&mut rng),
            weight_a: uniform(&mut rng),
            weight_b: uniform(&mut rng),
        });
    }

    // Pre-activation spread and logistic threshold per attribute.
    let mut sigmas = Vec::with_capacity(spec.attributes.len());
    let mut thresholds = Vec::with_capacity(spec.attributes.len());
    for (i, attr) in spec.attributes.iter().enumerate() {
        let mut variance = 1.0 + attr.spurious.iter().map(|s| s.weight * s.weight).sum::<f64>();
        if let Some(c) = spec.coupling {
            if c.target == i {
                variance += c.gamma * c.gamma;
            }
        }
        let sigma = variance.sqrt();
        sigmas.push(sigma);
        thresholds.push(sigma * normal_quantile(1.0 - attr.base_rate));
    }

    let classifiers = spec
        .attributes
        .iter()
        .enumerate()
        .map(|(i, attr)| {
            let mut weights = vec![PixelWeight {
                pixel: pixel_of[&attr.causal_channel],
                weight: 1.0,
            }];
            for s in &attr.spurious {
                weights.push(PixelWeight { pixel: pixel_of[&s.channel], weight: s.weight });
            }
            if let Some(c) = spec.coupling {
                if c.target == i {
                    let source_ch = spec.attributes[c.source].causal_channel;
                    weights.push(PixelWeight { pixel: pixel_of[&source_ch], weight: c.gamma });
                }
            }
            PixelLogisticClassifier {
                attribute: attr.name.clone(),
                weights,
                slope: attr.slope,
                offset: thresholds[i],
                threshold: default_threshold(),
            }
        })
        .collect();

    let generator = SyntheticGenerator {
        layout: Arc::clone(&layout),
        readouts,
        texture,
        image_size: spec.image_size,
        noise_salt: spec.noise_salt,
    };
    let oracle = Oracle { spec: spec.clone(), thresholds, sigmas };

    Ok(SyntheticBundle { generator, classifiers, oracle })
}

fn validate_spec(spec: &SyntheticSpec, layout: &StyleLayout) -> Result<()> {
    if spec.attributes.is_empty() {
        return Err(Error::config("synthetic spec needs at least one attribute"));
    }
    if spec.image_size == 0 {
        return Err(Error::config("image size must be at least 1"));
    }
    let blocks = layout.block_count();
    if blocks <= 4 {
        return Err(Error::config(
            "synthetic layout needs more than 4 blocks so causal channels stay discoverable",
        ));
    }
    let discoverable_blocks = blocks - 4;

    for (i, attr) in spec.attributes.iter().enumerate() {
        if attr.name.is_empty() {
            return Err(Error::config(format!("attribute {i} has an empty name")));
        }
        if spec.attributes[..i].iter().any(|a| a.name == attr.name) {
            return Err(Error::config(format!("duplicate attribute name '{}'", attr.name)));
        }
        if !(attr.base_rate > 0.0 && attr.base_rate < 1.0) {
            return Err(Error::config(format!(
                "attribute '{}' base rate must lie strictly inside (0, 1)",
                attr.name
            )));
        }
        if !(attr.slope > 0.0 && attr.slope.is_finite()) {
            return Err(Error::config(format!(
                "attribute '{}' slope must be positive",
                attr.name
            )));
        }
        let info = layout.check_editable(attr.causal_channel)?;
        if info.block >= discoverable_blocks {
            return Err(Error::config(format!(
                "attribute '{}' causal channel sits in block {}, inside the last 4 blocks",
                attr.name, info.block
            )));
        }
        if spec.attributes[..i]
            .iter()
            .any(|a| a.causal_channel == attr.causal_channel)
        {
            return Err(Error::config(format!(
                "attribute '{}' reuses another attribute's causal channel",
                attr.name
            )));
        }
        for (j, s) in attr.spurious.iter().enumerate() {
            layout.check(s.channel)?;
            if !s.weight.is_finite() {
                return Err(Error::config(format!(
                    "attribute '{}' spurious weight {j} is not finite",
                    attr.name
                )));
            }
            if s.channel == attr.causal_channel {
                return Err(Error::config(format!(
                    "attribute '{}' lists its causal channel as spurious",
                    attr.name
                )));
            }
            if attr.spurious[..j].iter().any(|o| o.channel == s.channel) {
                return Err(Error::config(format!(
                    "attribute '{}' lists spurious channel {} twice",
                    attr.name, s.channel
                )));
            }
        }
    }

    if let Some(c) = spec.coupling {
        let m = spec.attributes.len();
        if c.source >= m || c.target >= m {
            return Err(Error::config("coupling attribute index out of range"));
        }
        if c.source == c.target {
            return Err(Error::config("coupling source and target must differ"));
        }
        if !c.gamma.is_finite() {
            return Err(Error::config("coupling strength must be finite"));
        }
        // The oracle's decorrelating parameters are exact only when the
        // coupled attributes read disjoint channel sets.
        let refs = |i: usize| -> Vec<ChannelId> {
            let a = &spec.attributes[i];
            let mut v = vec![a.causal_channel];
            v.extend(a.spurious.iter().map(|s| s.channel));
            v
        };
        let src = refs(c.source);
        for ch in refs(c.target) {
            if src.contains(&ch) {
                return Err(Error::config(format!(
                    "coupled attributes share channel {ch}; the pair must read disjoint channels"
                )));
            }
        }
    }
    Ok(())
}
