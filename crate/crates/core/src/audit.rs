//! Fairness auditing: batch labeling, empirical marginal/joint attribute
//! distributions, and KL divergence to the uniform distribution.
//!
//! Distributions are over the `2^M` label combinations of `M` binary
//! attributes. Cells are indexed with attribute 0 as the most significant
//! bit, so for two attributes the cell order is FF, FT, TF, TT — the order
//! used in joint-distribution tables. KL values are natural-log (nats).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{generate_batch, ClassifierAdapter, GeneratorAdapter};
use crate::error::{Error, Result};
use crate::math::wilson_interval;
use crate::style::Image;
use crate::tensor::FairStyleTensor;

/// Binary labels for a batch: one row per image, one column per attribute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    attribute_names: Vec<String>,
    rows: Vec<Vec<bool>>,
}

impl LabelMatrix {
    pub fn new(attribute_names: Vec<String>, rows: Vec<Vec<bool>>) -> Result<Self> {
        if attribute_names.is_empty() {
            return Err(Error::config("label matrix needs at least one attribute"));
        }
        if rows.is_empty() {
            return Err(Error::config("label matrix needs at least one row"));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != attribute_names.len()) {
            return Err(Error::config(format!(
                "label row has {} entries, expected {}",
                r.len(),
                attribute_names.len()
            )));
        }
        Ok(Self { attribute_names, rows })
    }

    pub fn attribute_names(&self) -> &[String] {
        &self.attribute_names
    }

    pub fn rows(&self) -> &[Vec<bool>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        self.attribute_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownAttribute(name.to_string()))
    }

    /// Fraction of rows labeled present for one attribute.
    pub fn label_mean(&self, name: &str) -> Result<f64> {
        let idx = self.attribute_index(name)?;
        let ones = self.rows.iter().filter(|r| r[idx]).count();
        Ok(ones as f64 / self.rows.len() as f64)
    }
}

/// Labels every image with every classifier. Classifier failures carry the
/// attribute name and image index.
pub fn label_batch(
    classifiers: &[&dyn ClassifierAdapter],
    images: &[Image],
) -> Result<LabelMatrix> {
    if classifiers.is_empty() {
        return Err(Error::config("label_batch needs at least one classifier"));
    }
    if images.is_empty() {
        return Err(Error::config("label_batch needs a non-empty batch"));
    }
    let label_one = |(index, image): (usize, &Image)| -> Result<Vec<bool>> {
        classifiers
            .iter()
            .map(|c| {
                c.label(image).map_err(|e| Error::Classifier {
                    attribute: c.attribute().to_string(),
                    index,
                    message: e.to_string(),
                })
            })
            .collect()
    };
    let parallel = classifiers.iter().all(|c| c.concurrent_inference());
    let rows: Result<Vec<Vec<bool>>> = if parallel && images.len() >= 64 {
        images.par_iter().enumerate().map(label_one).collect()
    } else {
        images.iter().enumerate().map(label_one).collect()
    };
    LabelMatrix::new(
        classifiers.iter().map(|c| c.attribute().to_string()).collect(),
        rows?,
    )
}

/// Cell index for a label combination; attribute 0 is the most significant bit.
pub fn cell_index(labels: &[bool]) -> usize {
    labels.iter().fold(0, |acc, &b| (acc << 1) | b as usize)
}

/// Human-readable cell key, e.g. `TF` for attribute 0 present, attribute 1
/// absent.
pub fn cell_key(index: usize, attribute_count: usize) -> String {
    (0..attribute_count)
        .map(|i| {
            if (index >> (attribute_count - 1 - i)) & 1 == 1 {
                'T'
            } else {
                'F'
            }
        })
        .collect()
}

/// One cell of an empirical attribute distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionCell {
    pub labels: String,
    pub count: u64,
    pub probability: f64,
    /// Wilson 95% confidence interval for the cell probability.
    pub ci95: [f64; 2],
}

/// Empirical distribution over the `2^M` label combinations of `M` binary
/// attributes. Carries raw counts alongside probabilities so downstream
/// tooling can recompute under other conventions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeDistribution {
    attribute_names: Vec<String>,
    sample_count: u64,
    cells: Vec<DistributionCell>,
}

impl AttributeDistribution {
    pub fn from_counts(attribute_names: Vec<String>, counts: Vec<u64>) -> Result<Self> {
        if attribute_names.is_empty() {
            return Err(Error::config("distribution needs at least one attribute"));
        }
        let m = attribute_names.len();
        if counts.len() != 1 << m {
            return Err(Error::config(format!(
                "distribution over {m} attributes needs {} cells, got {}",
                1usize << m,
                counts.len()
            )));
        }
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::config("distribution needs at least one sample"));
        }
        let cells = counts
            .iter()
            .enumerate()
            .map(|(i, &count)| {
                let (lo, hi) = wilson_interval(count, total);
                DistributionCell {
                    labels: cell_key(i, m),
                    count,
                    probability: count as f64 / total as f64,
                    ci95: [lo, hi],
                }
            })
            .collect();
        Ok(Self { attribute_names, sample_count: total, cells })
    }

    pub fn attribute_names(&self) -> &[String] {
        &self.attribute_names
    }

    pub fn attribute_count(&self) -> usize {
        self.attribute_names.len()
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> &[DistributionCell] {
        &self.cells
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    pub fn counts(&self) -> Vec<u64> {
        self.cells.iter().map(|c| c.count).collect()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.probability).collect()
    }

    pub fn probability_of(&self, labels: &[bool]) -> Result<f64> {
        if labels.len() != self.attribute_count() {
            return Err(Error::config(format!(
                "expected {} labels, got {}",
                self.attribute_count(),
                labels.len()
            )));
        }
        Ok(self.cells[cell_index(labels)].probability)
    }

    /// Collapses the joint distribution onto one attribute by summing counts,
    /// an exact count-level operation.
    pub fn marginalize(&self, name: &str) -> Result<AttributeDistribution> {
        let idx = self
            .attribute_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownAttribute(name.to_string()))?;
        let m = self.attribute_count();
        let mut counts = [0u64; 2];
        for (i, cell) in self.cells.iter().enumerate() {
            let bit = (i >> (m - 1 - idx)) & 1;
            counts[bit] += cell.count;
        }
        AttributeDistribution::from_counts(vec![name.to_string()], counts.to_vec())
    }

    /// Checks the structural invariants (cell count, probability range and
    /// normalization, count consistency). Useful after deserializing.
    pub fn validate(&self) -> Result<()> {
        let m = self.attribute_count();
        if m == 0 || self.cells.len() != 1 << m {
            return Err(Error::config("cell count does not match attribute count"));
        }
        let total: u64 = self.cells.iter().map(|c| c.count).sum();
        if total != self.sample_count || total == 0 {
            return Err(Error::config("cell counts do not sum to the sample count"));
        }
        let sum: f64 = self.cells.iter().map(|c| c.probability).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("probabilities sum to {sum}, not 1")));
        }
        if self.cells.iter().any(|c| c.probability < 0.0) {
            return Err(Error::config("negative cell probability"));
        }
        Ok(())
    }
}

/// Empirical distribution of a non-empty attribute subset, in subset order.
/// Zero-count cells are present with probability 0.
pub fn empirical_distribution(
    labels: &LabelMatrix,
    subset: &[&str],
) -> Result<AttributeDistribution> {
    if subset.is_empty() {
        return Err(Error::config("attribute subset must be non-empty"));
    }
    let indices: Vec<usize> = subset
        .iter()
        .map(|name| labels.attribute_index(name))
        .collect::<Result<_>>()?;
    let mut counts = vec![0u64; 1 << indices.len()];
    let mut row_labels = vec![false; indices.len()];
    for row in labels.rows() {
        for (slot, &idx) in row_labels.iter_mut().zip(&indices) {
            *slot = row[idx];
        }
        counts[cell_index(&row_labels)] += 1;
    }
    AttributeDistribution::from_counts(
        subset.iter().map(|s| s.to_string()).collect(),
        counts,
    )
}

/// KL divergence (nats) from a cell-probability vector to the uniform
/// distribution over the same cells. Zero-probability cells contribute 0.
pub(crate) fn kl_uniform_cells(probs: &[f64]) -> f64 {
    debug_assert!(probs.len().is_power_of_two());
    let m = probs.len().trailing_zeros() as f64;
    let log_cells = m * std::f64::consts::LN_2;
    let mut sum = 0.0;
    for &p in probs {
        // A non-finite cell must poison the result, not slip past the
        // zero-cell convention below.
        if !p.is_finite() {
            return f64::NAN;
        }
        if p > 0.0 {
            sum += p * (p.ln() + log_cells);
        }
    }
    // Non-negative in exact arithmetic; clamp rounding residue.
    sum.max(0.0)
}

/// KL divergence (nats) from an empirical distribution to uniform, using the
/// `0 * ln 0 = 0` convention. The uniform reference never vanishes, so the
/// result is always finite and non-negative.
pub fn kl_to_uniform(dist: &AttributeDistribution) -> f64 {
    let probs = dist.probabilities();
    kl_uniform_cells(&probs)
}

/// A distribution plus its divergence from uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub distribution: AttributeDistribution,
    pub kl_to_uniform: f64,
}

impl DistributionReport {
    fn new(distribution: AttributeDistribution) -> Self {
        let kl = kl_to_uniform(&distribution);
        Self { distribution, kl_to_uniform: kl }
    }
}

/// Full fairness audit of a generated batch: per-attribute marginals, the
/// requested joints, and KL-to-uniform for each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub generator_fingerprint: String,
    pub seed: u64,
    pub sample_count: usize,
    pub marginals: Vec<DistributionReport>,
    pub joints: Vec<DistributionReport>,
}

impl AuditReport {
    pub fn marginal(&self, name: &str) -> Option<&DistributionReport> {
        self.marginals
            .iter()
            .find(|r| r.distribution.attribute_names() == [name])
    }

    pub fn joint(&self, names: &[&str]) -> Option<&DistributionReport> {
        self.joints.iter().find(|r| {
            r.distribution.attribute_names().len() == names.len()
                && r.distribution
                    .attribute_names()
                    .iter()
                    .zip(names)
                    .all(|(a, b)| a == b)
        })
    }
}

/// Generates `n` images (with `tensor` applied when given), labels them with
/// every classifier, and assembles the audit report. Fully reproducible for
/// a fixed seed.
pub fn audit(
    adapter: &dyn GeneratorAdapter,
    classifiers: &[&dyn ClassifierAdapter],
    n: usize,
    tensor: Option<&FairStyleTensor>,
    joints: &[Vec<String>],
    seed: u64,
) -> Result<AuditReport> {
    if n == 0 {
        return Err(Error::config("audit needs at least one sample"));
    }
    let batch = generate_batch(adapter, n, tensor, seed)?;
    let labels = label_batch(classifiers, &batch.images)?;

    let marginals = labels
        .attribute_names()
        .to_vec()
        .iter()
        .map(|name| Ok(DistributionReport::new(empirical_distribution(&labels, &[name])?)))
        .collect::<Result<Vec<_>>>()?;
    let joint_reports = joints
        .iter()
        .map(|names| {
            let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
            Ok(DistributionReport::new(empirical_distribution(&labels, &refs)?))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(AuditReport {
        generator_fingerprint: adapter.layout().fingerprint(),
        seed,
        sample_count: n,
        marginals,
        joints: joint_reports,
    })
}

/// CSV rendering of a report: one row per distribution cell.
pub fn report_csv(report: &AuditReport) -> String {
    let mut out = String::from(
        "distribution,attributes,cell,count,probability,ci95_low,ci95_high,kl_to_uniform\n",
    );
    let mut push = |kind: &str, rep: &DistributionReport| {
        let attrs = rep.distribution.attribute_names().join("+");
        for cell in rep.distribution.cells() {
            out.push_str(&format!(
                "{kind},{attrs},{},{},{},{},{},{}\n",
                cell.labels,
                cell.count,
                cell.probability,
                cell.ci95[0],
                cell.ci95[1],
                rep.kl_to_uniform
            ));
        }
    };
    for rep in &report.marginals {
        push("marginal", rep);
    }
    for rep in &report.joints {
        push("joint", rep);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::style::Image;

    /// Test classifier that reads its score from one pixel.
    struct PixelScore {
        name: &'static str,
        pixel: usize,
    }

    impl ClassifierAdapter for PixelScore {
        fn attribute(&self) -> &str {
            self.name
        }
        fn score(&self, image: &Image) -> Result<f64> {
            Ok(image.data()[self.pixel])
        }
        fn concurrent_inference(&self) -> bool {
            true
        }
    }

    fn img(scores: &[f64]) -> Image {
        Image::new(scores.len(), 1, 1, scores.to_vec()).unwrap()
    }

    #[test]
    fn labels_threshold_at_half_inclusive() {
        let c0 = PixelScore { name: "a", pixel: 0 };
        let c1 = PixelScore { name: "b", pixel: 1 };
        let images = vec![img(&[0.9, 0.2]), img(&[0.5, 0.49])];
        let labels = label_batch(&[&c0, &c1], &images).unwrap();
        assert_eq!(labels.rows()[0], vec![true, false]);
        // Score exactly at the threshold labels as present.
        assert_eq!(labels.rows()[1], vec![true, false]);
    }

    #[test]
    fn counting_matches_hand_tallies() {
        let rows: Vec<Vec<bool>> = (0..100).map(|i| vec![i < 20]).collect();
        let labels = LabelMatrix::new(vec!["x".into()], rows).unwrap();
        let dist = empirical_distribution(&labels, &["x"]).unwrap();
        assert_eq!(dist.counts(), vec![80, 20]);
        assert_eq!(dist.probabilities(), vec![0.8, 0.2]);
    }

    #[test]
    fn exhaustive_two_coin_cells_are_quarter() {
        let rows = vec![
            vec![false, false],
            vec![false, true],
            vec![true, false],
            vec![true, true],
        ];
        let labels = LabelMatrix::new(vec!["a".into(), "b".into()], rows).unwrap();
        let dist = empirical_distribution(&labels, &["a", "b"]).unwrap();
        assert_eq!(dist.probabilities(), vec![0.25; 4]);
        assert_eq!(kl_to_uniform(&dist), 0.0);
    }

    #[test]
    fn unknown_attribute_is_an_error() {
        let labels = LabelMatrix::new(vec!["a".into()], vec![vec![true]]).unwrap();
        assert!(matches!(
            empirical_distribution(&labels, &["nope"]),
            Err(Error::UnknownAttribute(_))
        ));
    }

    // Marginalizing a male-eyeglasses joint table measured on the public
    // StyleGAN2 face model over eyeglasses reproduces its male marginal row
    // exactly.
    #[test]
    fn joint_table_marginalizes_to_reference_male_row() {
        let joint = AttributeDistribution::from_counts(
            vec!["male".into(), "eyeglasses".into()],
            vec![53, 5, 27, 15],
        )
        .unwrap();
        let male = joint.marginalize("male").unwrap();
        assert_eq!(male.probabilities(), vec![0.58, 0.42]);
    }

    #[test]
    fn kl_reference_values() {
        let uniform = AttributeDistribution::from_counts(
            vec!["a".into(), "b".into()],
            vec![25, 25, 25, 25],
        )
        .unwrap();
        assert_eq!(kl_to_uniform(&uniform), 0.0);

        let skewed =
            AttributeDistribution::from_counts(vec!["a".into()], vec![70, 30]).unwrap();
        assert!((kl_to_uniform(&skewed) - 0.082_282_878_505_051_8).abs() < 1e-12);

        let degenerate =
            AttributeDistribution::from_counts(vec!["a".into()], vec![100, 0]).unwrap();
        assert!((kl_to_uniform(&degenerate) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    // Reference joint cells measured on the StyleGAN2 face model
    // (FF=0.53, FT=0.05, TF=0.27, TT=0.15) give a nats KL close to the 0.2495
    // reported for the same model and attribute pair at a larger batch size;
    // only qualitative agreement is expected. This pins the log base.
    #[test]
    fn reference_joint_kl_is_consistent_in_nats() {
        let joint = AttributeDistribution::from_counts(
            vec!["male".into(), "eyeglasses".into()],
            vec![53, 5, 27, 15],
        )
        .unwrap();
        let kl = kl_to_uniform(&joint);
        assert!((kl - 0.2495).abs() < 0.02, "kl={kl}");
    }

    #[test]
    fn probabilities_sum_to_one() {
        let dist = AttributeDistribution::from_counts(
            vec!["a".into(), "b".into(), "c".into()],
            vec![1, 0, 3, 7, 2, 9, 4, 11],
        )
        .unwrap();
        dist.validate().unwrap();
        let sum: f64 = dist.probabilities().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert_eq!(dist.cell_count(), 8);
    }

    #[test]
    fn classifier_failure_names_attribute_and_index() {
        struct Failing;
        impl ClassifierAdapter for Failing {
            fn attribute(&self) -> &str {
                "broken"
            }
            fn score(&self, image: &Image) -> Result<f64> {
                if image.data()[0] > 0.5 {
                    Err(Error::config("saturated input"))
                } else {
                    Ok(0.0)
                }
            }
        }
        let images = vec![img(&[0.0]), img(&[0.9])];
        let err = label_batch(&[&Failing], &images).unwrap_err();
        match err {
            Error::Classifier { attribute, index, .. } => {
                assert_eq!(attribute, "broken");
                assert_eq!(index, 1);
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn csv_has_one_row_per_cell() {
        let dist =
            AttributeDistribution::from_counts(vec!["a".into()], vec![70, 30]).unwrap();
        let report = AuditReport {
            generator_fingerprint: "deadbeef".into(),
            seed: 1,
            sample_count: 100,
            marginals: vec![DistributionReport::new(dist)],
            joints: vec![],
        };
        let csv = report_csv(&report);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("marginal,a,F,70,0.7,"));
        assert!(lines[2].starts_with("marginal,a,T,30,0.3,"));
    }
}
