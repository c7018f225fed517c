//! Fairstyle tensor optimization.
//!
//! The generator-plus-classifier pipeline is treated as a black box: the
//! fairness loss is the KL divergence of the empirical attribute
//! distribution from uniform, and gradients are central finite differences
//! on a smoothed (classifier-score) version of that loss. Hard-label KL is
//! what traces record and what convergence is judged on; the smoothed loss
//! exists only to give the finite differences usable signal.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::adapter::{latent_seed_for, ClassifierAdapter, GeneratorAdapter};
use crate::audit::{
    empirical_distribution, kl_to_uniform, kl_uniform_cells, AttributeDistribution, LabelMatrix,
};
use crate::error::{Error, Result};
use crate::math::derive_seed;
use crate::style::{ChannelId, StyleCode};
use crate::tensor::{apply_fairstyle, ChannelStats, FairStyleTensor};

/// Whether each optimizer iteration draws a fresh batch or reuses one fixed
/// batch. Fresh batches match the iterative-generation procedure; the fixed
/// batch makes the loss deterministic in the parameters, which is what
/// gradient checks need.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedPolicy {
    FreshBatchPerIteration,
    FixedBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Samples generated per iteration.
    pub batch_size: usize,
    pub max_iterations: usize,
    /// Convergence tolerance on the hard-label KL; see [`TerminalStatus`].
    pub tolerance: f64,
    /// Central finite-difference step.
    pub fd_step: f64,
    /// Initial learning rate. Five consecutive loss increases halve it.
    pub learning_rate: f64,
    pub seed_policy: SeedPolicy,
    /// Sample count for the frozen channel statistics of the affine-coupled
    /// variant.
    pub stats_samples: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            max_iterations: 500,
            tolerance: 1e-3,
            fd_step: 0.05,
            learning_rate: 0.5,
            seed_policy: SeedPolicy::FreshBatchPerIteration,
            stats_samples: 1000,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("optimizer batch size must be at least 2"));
        }
        if self.max_iterations == 0 {
            return Err(Error::config("optimizer needs at least one iteration"));
        }
        if !self.tolerance.is_finite() || self.tolerance <= 0.0 {
            return Err(Error::config("tolerance must be positive"));
        }
        if !(self.fd_step > 0.0 && self.fd_step.is_finite()) {
            return Err(Error::config("finite-difference step must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.stats_samples < 2 {
            return Err(Error::config("statistics need at least 2 samples"));
        }
        Ok(())
    }
}

/// One optimizer iteration as recorded in the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub params: Vec<f64>,
    pub distribution: AttributeDistribution,
    /// Hard-label KL to uniform on this iteration's batch.
    pub kl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalStatus {
    /// Hard-label KL stayed below tolerance for 3 consecutive iterations.
    Converged,
    MaxIterations,
    /// A non-finite loss or parameter appeared; the best-so-far tensor is
    /// still returned, clearly not marked converged.
    Diverged,
}

/// Full optimization history. The reported tensor is the best-so-far by
/// recorded KL, so the terminal loss never exceeds the initial loss even
/// though individual steps may fluctuate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub status: TerminalStatus,
    pub iterations: Vec<IterationRecord>,
    pub best_iteration: usize,
    pub best_kl: f64,
    pub best_params: Vec<f64>,
}

impl OptimizationTrace {
    pub fn initial_kl(&self) -> Option<f64> {
        self.iterations.first().map(|r| r.kl)
    }
}

/// Central finite-difference gradient of `f` at `theta`.
pub fn fd_gradient<F>(f: F, theta: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut grad = Vec::with_capacity(theta.len());
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        probe[i] = theta[i] + step;
        let plus = f(&probe)?;
        probe[i] = theta[i] - step;
        let minus = f(&probe)?;
        probe[i] = theta[i];
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Simple-average mean and unbiased (1/(N-1)) standard deviation of one
/// style channel over `n` freshly sampled codes.
pub fn compute_channel_stats(
    adapter: &dyn GeneratorAdapter,
    channel: ChannelId,
    n: usize,
    seed: u64,
) -> Result<ChannelStats> {
    if n < 2 {
        return Err(Error::config("channel statistics need at least 2 samples"));
    }
    let layout = adapter.layout();
    layout.check(channel)?;

    let sample = |k: usize| -> Result<f64> {
        let code = adapter
            .style_code(latent_seed_for(seed, k))
            .map_err(|e| Error::Generator { index: k, message: e.to_string() })?;
        code.value(channel)
    };
    let values: Vec<f64> = if adapter.concurrent_inference() && n >= 64 {
        (0..n).into_par_iter().map(sample).collect::<Result<_>>()?
    } else {
        (0..n).map(sample).collect::<Result<_>>()?
    };

    // A constant channel has zero variance exactly; the summed estimate
    // below only sees rounding residue, so test for constancy directly.
    if values.iter().all(|v| *v == values[0]) {
        return Err(Error::DegenerateChannel { channel, samples: n });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    if variance == 0.0 {
        return Err(Error::DegenerateChannel { channel, samples: n });
    }
    ChannelStats::new(channel, mean, variance.sqrt(), n)
}

/// Pairwise coupling parameters: each target's bias is an affine function
/// of the *other* target's normalized channel value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairParams {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl PairParams {
    pub const ZERO: PairParams = PairParams { x1: 0.0, y1: 0.0, x2: 0.0, y2: 0.0 };

    /// Flat layout used by [`multi_bias`] and the affine-coupled tensor.
    pub fn flat(&self) -> [f64; 4] {
        [self.x2, self.y2, self.x1, self.y1]
    }
}

/// Bias values for two coupled target channels: the first target's bias is
/// driven by the second target's normalized value and vice versa.
pub fn pair_bias(
    code: &StyleCode,
    targets: [ChannelId; 2],
    params: &PairParams,
    stats: [&ChannelStats; 2],
) -> Result<BTreeMap<ChannelId, f64>> {
    if targets[0] == targets[1] {
        return Err(Error::config(format!("duplicate target channel {}", targets[0])));
    }
    for (i, s) in stats.iter().enumerate() {
        s.validate()?;
        if s.channel != targets[i] {
            return Err(Error::config(format!(
                "stats for target {i} describe channel {} but target is {}",
                s.channel, targets[i]
            )));
        }
    }
    let n1 = (code.value(targets[0])? - stats[0].mean) / stats[0].std;
    let n2 = (code.value(targets[1])? - stats[1].mean) / stats[1].std;
    let mut out = BTreeMap::new();
    out.insert(targets[0], params.x2 * n2 + params.y2);
    out.insert(targets[1], params.x1 * n1 + params.y1);
    Ok(out)
}

/// Generalized multi-target bias: target m receives the sum over every other
/// target k of `x[m,k] * normalized(s_k) + y[m,k]`.
///
/// `params` is flat with `2 * M * (M - 1)` entries: couplings grouped by
/// target, then by the other target's position ascending, `(x, y)` per
/// coupling. At `M = 2` this reduces exactly to [`pair_bias`].
pub fn multi_bias(
    code: &StyleCode,
    targets: &[ChannelId],
    params: &[f64],
    stats: &[ChannelStats],
) -> Result<BTreeMap<ChannelId, f64>> {
    let m = targets.len();
    if m < 2 {
        return Err(Error::config(format!(
            "multi_bias needs at least 2 targets, got {m}"
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
            "{m} targets need {expected} parameters, got {}",
            params.len()
        )));
    }
    for i in 0..m {
        stats[i].validate()?;
        if stats[i].channel != targets[i] {
            return Err(Error::config(format!(
                "stats for target {i} describe channel {} but target is {}",
                stats[i].channel, targets[i]
            )));
        }
        for j in i + 1..m {
            if targets[i] == targets[j] {
                return Err(Error::config(format!("duplicate target channel {}", targets[i])));
            }
        }
    }

    let mut normalized = Vec::with_capacity(m);
    for (t, s) in targets.iter().zip(stats) {
        normalized.push((code.value(*t)? - s.mean) / s.std);
    }

    let mut out = BTreeMap::new();
    let mut p = params.iter();
    for (mi, target) in targets.iter().enumerate() {
        let mut acc: Option<f64> = None;
        for (k, nk) in normalized.iter().enumerate() {
            if k == mi {
                continue;
            }
            let x = *p.next().expect("parameter count checked");
            let y = *p.next().expect("parameter count checked");
            let term = x * *nk + y;
            acc = Some(match acc {
                None => term,
                Some(a) => a + term,
            });
        }
        out.insert(*target, acc.expect("m >= 2"));
    }
    Ok(out)
}

/// Hard-label fairness loss: generates `n` samples with the tensor applied,
/// labels them, and returns the KL divergence of the joint distribution of
/// all classifier attributes from uniform.
pub fn fairness_loss(
    adapter: &dyn GeneratorAdapter,
    classifiers: &[&dyn ClassifierAdapter],
    tensor: &FairStyleTensor,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let eval = BatchEvaluator::new(adapter, classifiers, n, seed)?;
    Ok(eval.hard_eval(Some(tensor))?.1)
}

/// Smoothed fairness loss: distribution cells accumulate products of
/// classifier scores instead of hard labels, making the empirical KL a
/// smooth function of the tensor parameters. Optimizers differentiate this;
/// reported metrics always use [`fairness_loss`].
pub fn fairness_loss_soft(
    adapter: &dyn GeneratorAdapter,
    classifiers: &[&dyn ClassifierAdapter],
    tensor: &FairStyleTensor,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let eval = BatchEvaluator::new(adapter, classifiers, n, seed)?;
    eval.soft_kl(Some(tensor))
}

/// Pre-sampled pristine style codes for one batch; re-renders per candidate
/// tensor. Accumulation is sequential in sample order regardless of the
/// parallel rendering path, so losses are bit-reproducible.
struct BatchEvaluator<'a> {
    adapter: &'a dyn GeneratorAdapter,
    classifiers: &'a [&'a dyn ClassifierAdapter],
    codes: Vec<StyleCode>,
    parallel: bool,
}

impl<'a> BatchEvaluator<'a> {
    fn new(
        adapter: &'a dyn GeneratorAdapter,
        classifiers: &'a [&'a dyn ClassifierAdapter],
        n: usize,
        seed: u64,
    ) -> Result<Self> {
        if classifiers.is_empty() {
            return Err(Error::config("need at least one classifier"));
        }
        if n == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        let sample = |k: usize| {
            adapter
                .style_code(latent_seed_for(seed, k))
                .map_err(|e| Error::Generator { index: k, message: e.to_string() })
        };
        let parallel = adapter.concurrent_inference()
            && classifiers.iter().all(|c| c.concurrent_inference());
        let codes: Vec<StyleCode> = if parallel && n >= 64 {
            (0..n).into_par_iter().map(sample).collect::<Result<_>>()?
        } else {
            (0..n).map(sample).collect::<Result<_>>()?
        };
        Ok(Self { adapter, classifiers, codes, parallel })
    }

    /// Per-sample classifier scores with `tensor` applied before rendering.
    fn scores(&self, tensor: Option<&FairStyleTensor>) -> Result<Vec<Vec<f64>>> {
        let one = |(index, code): (usize, &StyleCode)| -> Result<Vec<f64>> {
            let edited = match tensor {
                Some(t) => apply_fairstyle(code, t)?,
                None => code.clone(),
            };
            let image = self
                .adapter
                .render(&edited)
                .map_err(|e| Error::Generator { index, message: e.to_string() })?;
            self.classifiers
                .iter()
                .map(|c| {
                    c.score(&image).map_err(|e| Error::Classifier {
                        attribute: c.attribute().to_string(),
                        index,
                        message: e.to_string(),
                    })
                })
                .collect()
        };
        if self.parallel && self.codes.len() >= 64 {
            self.codes.par_iter().enumerate().map(one).collect()
        } else {
            self.codes.iter().enumerate().map(one).collect()
        }
    }

    /// Hard-label empirical distribution over all attributes, plus its KL.
    fn hard_eval(&self, tensor: Option<&FairStyleTensor>) -> Result<(AttributeDistribution, f64)> {
        let scores = self.scores(tensor)?;
        let rows: Vec<Vec<bool>> = scores
            .iter()
            .map(|row| {
                row.iter()
                    .zip(self.classifiers)
                    .map(|(s, c)| *s >= c.threshold())
                    .collect()
            })
            .collect();
        let names: Vec<String> = self
            .classifiers
            .iter()
            .map(|c| c.attribute().to_string())
            .collect();
        let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        let labels = LabelMatrix::new(names.clone(), rows)?;
        let dist = empirical_distribution(&labels, &refs)?;
        let kl = kl_to_uniform(&dist);
        Ok((dist, kl))
    }

    /// Smoothed KL: each sample spreads mass over all cells according to the
    /// product of its per-attribute scores.
    fn soft_kl(&self, tensor: Option<&FairStyleTensor>) -> Result<f64> {
        let scores = self.scores(tensor)?;
        let m = self.classifiers.len();
        let mut cells = vec![0.0f64; 1 << m];
        for row in &scores {
            for (mask, cell) in cells.iter_mut().enumerate() {
                let mut w = 1.0;
                for (t, p) in row.iter().enumerate() {
                    let bit = (mask >> (m - 1 - t)) & 1;
                    w *= if bit == 1 { *p } else { 1.0 - *p };
                }
                *cell += w;
            }
        }
        let n = scores.len() as f64;
        for cell in &mut cells {
            *cell /= n;
        }
        Ok(kl_uniform_cells(&cells))
    }

}

/// Shared gradient-descent loop over a flat parameter vector. The tensor for
/// a parameter vector is produced by `make_tensor`; the returned tensor is
/// the best-so-far by recorded hard-label KL.
fn optimize_params(
    adapter: &dyn GeneratorAdapter,
    classifiers: &[&dyn ClassifierAdapter],
    config: &OptimizerConfig,
    dim: usize,
    make_tensor: &dyn Fn(&[f64]) -> Result<FairStyleTensor>,
) -> Result<(FairStyleTensor, OptimizationTrace)> {
    config.validate()?;

    let mut theta = vec![0.0f64; dim];
    let mut lr = config.learning_rate;
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut best_params = theta.clone();
    let mut best_kl = f64::INFINITY;
    let mut best_iteration = 0usize;
    let mut below_tol = 0usize;
    let mut increases = 0usize;
    let mut prev_kl = f64::INFINITY;
    let mut status = TerminalStatus::MaxIterations;

    for iter in 0..config.max_iterations {
        let batch_index = match config.seed_policy {
            SeedPolicy::FreshBatchPerIteration => iter as u64,
            SeedPolicy::FixedBatch => 0,
        };
        let batch_seed = derive_seed(config.seed, "debias-iter", batch_index);
        let eval = BatchEvaluator::new(adapter, classifiers, config.batch_size, batch_seed)?;

        let tensor = make_tensor(&theta)?;
        let (dist, kl) = eval.hard_eval(Some(&tensor))?;
        records.push(IterationRecord {
            iteration: iter,
            params: theta.clone(),
            distribution: dist,
            kl,
        });

        if !kl.is_finite() || theta.iter().any(|p| !p.is_finite()) {
            status = TerminalStatus::Diverged;
            break;
        }
        if kl < best_kl {
            best_kl = kl;
            best_params = theta.clone();
            best_iteration = iter;
        }

        below_tol = if kl < config.tolerance { below_tol + 1 } else { 0 };
        if below_tol >= 3 {
            status = TerminalStatus::Converged;
            break;
        }

        if iter > 0 && kl > prev_kl {
            increases += 1;
            if increases >= 5 {
                lr *= 0.5;
                increases = 0;
            }
        } else {
            increases = 0;
        }
        prev_kl = kl;

        let grad = fd_gradient(
            |p| {
                let t = make_tensor(p)?;
                eval.soft_kl(Some(&t))
            },
            &theta,
            config.fd_step,
        )?;
        if grad.iter().any(|g| !g.is_finite()) {
            status = TerminalStatus::Diverged;
            break;
        }
        for (p, g) in theta.iter_mut().zip(&grad) {
            *p -= lr * g;
        }
    }

    let tensor = make_tensor(&best_params)?;
    let trace = OptimizationTrace {
        status,
        iterations: records,
        best_iteration,
        best_kl,
        best_params,
    };
    Ok((tensor, trace))
}

/// One-dimensional descent on a single channel's scalar bias, initialized at
/// zero. Returns the scalar tensor minimizing the fairness loss.
pub fn optimize_single(
    adapter: &dyn GeneratorAdapter,
    classifier: &dyn ClassifierAdapter,
    channel: ChannelId,
    config: &OptimizerConfig,
) -> Result<(FairStyleTensor, OptimizationTrace)> {
    adapter.layout().check_editable(channel)?;
    optimize_params(adapter, &[classifier], config, 1, &|p| {
        Ok(FairStyleTensor::scalar(channel, p[0]))
    })
}

/// Joint debiasing of `M >= 2` attributes with the affine-coupled tensor.
/// Channel statistics are computed once up front over
/// `config.stats_samples` fresh codes and frozen for the whole run; all
/// `2 * M * (M - 1)` coupling parameters start at zero. The loss is the KL
/// of the joint distribution over all `2^M` cells.
pub fn optimize_multi(
    adapter: &dyn GeneratorAdapter,
    classifiers: &[&dyn ClassifierAdapter],
    targets: &[ChannelId],
    config: &OptimizerConfig,
) -> Result<(FairStyleTensor, OptimizationTrace)> {
    config.validate()?;
    let m = targets.len();
    if m < 2 {
        return Err(Error::config("joint debiasing needs at least 2 targets"));
    }
    if classifiers.len() != m {
        return Err(Error::config(format!(
            "got {} classifiers for {m} target channels",
            classifiers.len()
        )));
    }
    let layout = adapter.layout();
    for t in targets {
        layout.check_editable(*t)?;
    }

    let stats: Vec<ChannelStats> = targets
        .iter()
        .enumerate()
        .map(|(i, ch)| {
            compute_channel_stats(
                adapter,
                *ch,
                config.stats_samples,
                derive_seed(config.seed, "stats", i as u64),
            )
        })
        .collect::<Result<_>>()?;

    let dim = 2 * m * (m - 1);
    let targets = targets.to_vec();
    optimize_params(adapter, classifiers, config, dim, &|p| {
        FairStyleTensor::affine_from_params(&targets, &stats, p)
    })
}

/// One-dimensional descent on the strength of a supplied style-space
/// direction, labeled by the given (typically text-based) classifier.
pub fn optimize_text_direction(
    adapter: &dyn GeneratorAdapter,
    text_classifier: &dyn ClassifierAdapter,
    direction: &BTreeMap<ChannelId, f64>,
    config: &OptimizerConfig,
) -> Result<(FairStyleTensor, OptimizationTrace)> {
    if direction.is_empty() || direction.values().all(|d| *d == 0.0) {
        return Err(Error::config("text-direction debiasing needs a non-zero direction"));
    }
    let layout = adapter.layout();
    for ch in direction.keys() {
        layout.check_editable(*ch)?;
    }
    let direction = direction.clone();
    optimize_params(adapter, &[text_classifier], config, 1, &|p| {
        Ok(FairStyleTensor::direction_scaled(direction.clone(), p[0]))
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::style::{block_layout, StyleLayout};
    use crate::synthgen::{make_synthetic, SyntheticSpec};

    fn code_with(layout: Arc<StyleLayout>, entries: &[(ChannelId, f64)]) -> StyleCode {
        let values = layout.layers().iter().map(|l| vec![0.0; l.width]).collect();
        let mut code = StyleCode::new(layout, values).unwrap();
        for (ch, v) in entries {
            code.set(*ch, *v);
        }
        code
    }

    fn pair_setup() -> (Arc<StyleLayout>, [ChannelId; 2], [ChannelStats; 2]) {
        let layout = Arc::new(block_layout(&[8, 8]).unwrap());
        let t1 = ChannelId::new(0, 2);
        let t2 = ChannelId::new(3, 5);
        let s1 = ChannelStats::new(t1, 1.0, 2.0, 100).unwrap();
        let s2 = ChannelStats::new(t2, -0.5, 0.5, 100).unwrap();
        (layout, [t1, t2], [s1, s2])
    }

    #[test]
    fn pair_bias_zero_params_is_zero() {
        let (layout, targets, stats) = pair_setup();
        let code = code_with(layout, &[(targets[0], 3.0), (targets[1], 1.0)]);
        let bias = pair_bias(&code, targets, &PairParams::ZERO, [&stats[0], &stats[1]]).unwrap();
        assert_eq!(bias[&targets[0]], 0.0);
        assert_eq!(bias[&targets[1]], 0.0);
    }

    #[test]
    fn pair_bias_centered_sample_uses_intercept_only() {
        let (layout, targets, stats) = pair_setup();
        // s2 at its mean: the normalized term vanishes.
        let code = code_with(layout, &[(targets[0], 0.0), (targets[1], -0.5)]);
        let params = PairParams { x1: 0.0, y1: 0.0, x2: 1.0, y2: 0.0 };
        let bias = pair_bias(&code, targets, &params, [&stats[0], &stats[1]]).unwrap();
        assert_eq!(bias[&targets[0]], 0.0);
    }

    #[test]
    fn pair_bias_one_sigma_above_mean() {
        let (layout, targets, stats) = pair_setup();
        // s2 = mean + std.
        let code = code_with(layout, &[(targets[0], 0.0), (targets[1], 0.0)]);
        let params = PairParams { x1: 0.0, y1: 0.0, x2: 1.0, y2: 0.5 };
        let bias = pair_bias(&code, targets, &params, [&stats[0], &stats[1]]).unwrap();
        assert!((bias[&targets[0]] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn multi_bias_reduces_to_pair_bias_at_two_targets() {
        let (layout, targets, stats) = pair_setup();
        let code = code_with(layout, &[(targets[0], 2.7), (targets[1], -1.3)]);
        let params = PairParams { x1: 0.4, y1: -0.2, x2: -1.1, y2: 0.9 };
        let from_pair = pair_bias(&code, targets, &params, [&stats[0], &stats[1]]).unwrap();
        let from_multi = multi_bias(&code, &targets, &params.flat(), &stats).unwrap();
        for t in &targets {
            assert_eq!(from_pair[t].to_bits(), from_multi[t].to_bits());
        }
    }

    #[test]
    fn multi_bias_three_targets_substitution() {
        let layout = Arc::new(block_layout(&[8, 8]).unwrap());
        let targets = [ChannelId::new(0, 0), ChannelId::new(0, 1), ChannelId::new(1, 2)];
        let stats: Vec<ChannelStats> = targets
            .iter()
            .map(|t| ChannelStats::new(*t, 1.0, 0.5, 50).unwrap())
            .collect();
        // Sample where target 1 sits two sigmas above its mean.
        let code = code_with(
            Arc::clone(&layout),
            &[(targets[0], 1.0), (targets[1], 2.0), (targets[2], 1.0)],
        );
        // Only x for (target 0 <- target 1) nonzero.
        let mut params = vec![0.0; 12];
        params[0] = 1.0;
        let bias = multi_bias(&code, &targets, &params, &stats).unwrap();
        assert!((bias[&targets[0]] - 2.0).abs() < 1e-15);
        assert_eq!(bias[&targets[1]], 0.0);
        assert_eq!(bias[&targets[2]], 0.0);

        let zero = multi_bias(&code, &targets, &[0.0; 12], &stats).unwrap();
        assert!(zero.values().all(|b| *b == 0.0));
    }

    #[test]
    fn multi_bias_cardinality_errors() {
        let (layout, targets, stats) = pair_setup();
        let code = code_with(layout, &[]);
        assert!(multi_bias(&code, &targets, &[0.0; 3], &stats).is_err());
        assert!(multi_bias(&code, &targets[..1], &[0.0; 2], &stats[..1]).is_err());
    }

    #[test]
    fn channel_stats_two_point_example() {
        // Adapter producing alternating constants 1 and 3 for one channel.
        struct TwoPoint(Arc<StyleLayout>);
        impl GeneratorAdapter for TwoPoint {
            fn layout(&self) -> Arc<StyleLayout> {
                Arc::clone(&self.0)
            }
            fn style_code(&self, latent_seed: u64) -> crate::error::Result<StyleCode> {
                let values = self
                    .0
                    .layers()
                    .iter()
                    .map(|l| vec![if latent_seed.is_multiple_of(2) { 1.0 } else { 3.0 }; l.width])
                    .collect();
                StyleCode::new(Arc::clone(&self.0), values)
            }
            fn render(&self, _code: &StyleCode) -> crate::error::Result<crate::style::Image> {
                crate::style::Image::new(1, 1, 1, vec![0.0])
            }
        }
        let layout = Arc::new(block_layout(&[4]).unwrap());
        let adapter = TwoPoint(Arc::clone(&layout));
        // Find a seed whose first two latent draws have opposite parity.
        let seed = (0..100u64)
            .find(|s| {
                latent_seed_for(*s, 0).is_multiple_of(2) != latent_seed_for(*s, 1).is_multiple_of(2)
            })
            .unwrap();
        let stats = compute_channel_stats(&adapter, ChannelId::new(0, 0), 2, seed).unwrap();
        assert!((stats.mean - 2.0).abs() < 1e-15);
        assert!((stats.std - 2.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn constant_channel_is_degenerate() {
        struct Constant(Arc<StyleLayout>);
        impl GeneratorAdapter for Constant {
            fn layout(&self) -> Arc<StyleLayout> {
                Arc::clone(&self.0)
            }
            fn style_code(&self, _latent_seed: u64) -> crate::error::Result<StyleCode> {
                let values = self.0.layers().iter().map(|l| vec![4.2; l.width]).collect();
                StyleCode::new(Arc::clone(&self.0), values)
            }
            fn render(&self, _code: &StyleCode) -> crate::error::Result<crate::style::Image> {
                crate::style::Image::new(1, 1, 1, vec![0.0])
            }
        }
        let layout = Arc::new(block_layout(&[4]).unwrap());
        let err = compute_channel_stats(&Constant(layout), ChannelId::new(0, 0), 100, 0);
        assert!(matches!(err, Err(Error::DegenerateChannel { .. })));
    }

    #[test]
    fn synthetic_channel_stats_match_sampling_law() {
        let spec = SyntheticSpec::single_attribute("attr", 0.2, 5);
        let bundle = make_synthetic(&spec).unwrap();
        let ch = spec.attributes[0].causal_channel;
        let stats = compute_channel_stats(&bundle.generator, ch, 1000, 11).unwrap();
        assert!(stats.mean.abs() < 0.1, "mean={}", stats.mean);
        assert!((stats.std - 1.0).abs() < 0.1, "std={}", stats.std);
    }

    #[test]
    fn fairness_loss_matches_direct_kl_for_planted_bias() {
        let spec = SyntheticSpec::single_attribute("attr", 0.2, 9);
        let bundle = make_synthetic(&spec).unwrap();
        let classifier: &dyn ClassifierAdapter = &bundle.classifiers[0];
        let zero = FairStyleTensor::scalar(spec.attributes[0].causal_channel, 0.0);
        let loss = fairness_loss(&bundle.generator, &[classifier], &zero, 20_000, 3).unwrap();
        // KL({0.8, 0.2} || U) by direct evaluation.
        let expected = 0.8 * (1.6f64).ln() + 0.2 * (0.4f64).ln();
        assert!((loss - expected).abs() < 0.02, "loss={loss} expected={expected}");
    }

    #[test]
    fn fairness_loss_near_zero_when_already_fair() {
        let spec = SyntheticSpec::single_attribute("attr", 0.5, 9);
        let bundle = make_synthetic(&spec).unwrap();
        let classifier: &dyn ClassifierAdapter = &bundle.classifiers[0];
        let zero = FairStyleTensor::scalar(spec.attributes[0].causal_channel, 0.0);
        let loss = fairness_loss(&bundle.generator, &[classifier], &zero, 20_000, 3).unwrap();
        assert!(loss < 1e-3, "loss={loss}");
    }

    #[test]
    fn oracle_balancing_offset_zeroes_the_loss() {
        let spec = SyntheticSpec::single_attribute("attr", 0.2, 9);
        let bundle = make_synthetic(&spec).unwrap();
        let classifier: &dyn ClassifierAdapter = &bundle.classifiers[0];
        let star = FairStyleTensor::scalar(
            spec.attributes[0].causal_channel,
            bundle.oracle.balancing_offset(0),
        );
        let loss = fairness_loss(&bundle.generator, &[classifier], &star, 20_000, 3).unwrap();
        assert!(loss < 1e-3, "loss={loss}");
    }

    #[test]
    fn fd_gradient_matches_independent_quadratic() {
        let f = |p: &[f64]| Ok(3.0 * p[0] * p[0] + 2.0 * p[0] * p[1] + p[1] * p[1]);
        let grad = fd_gradient(f, &[1.0, -2.0], 1e-5).unwrap();
        assert!((grad[0] - 2.0).abs() < 1e-6);
        assert!((grad[1] - (-2.0)).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        let mut config = OptimizerConfig::default();
        config.validate().unwrap();
        config.batch_size = 1;
        assert!(config.validate().is_err());
        let mut config = OptimizerConfig { fd_step: 0.0, ..Default::default() };
        assert!(config.validate().is_err());
        config.fd_step = 0.05;
        config.tolerance = -1.0;
        assert!(config.validate().is_err());
    }

    #[test]
    fn already_fair_generator_converges_immediately_with_near_zero_offset() {
        let spec = SyntheticSpec::single_attribute("attr", 0.5, 21);
        let bundle = make_synthetic(&spec).unwrap();
        let classifier: &dyn ClassifierAdapter = &bundle.classifiers[0];
        let config = OptimizerConfig {
            batch_size: 512,
            max_iterations: 40,
            tolerance: 5e-3,
            seed: 17,
            ..Default::default()
        };
        let (tensor, trace) = optimize_single(
            &bundle.generator,
            classifier,
            spec.attributes[0].causal_channel,
            &config,
        )
        .unwrap();
        assert_eq!(trace.status, TerminalStatus::Converged);
        match tensor {
            FairStyleTensor::Scalar { value, .. } => {
                assert!(value.abs() < 0.15, "expected near-zero offset, got {value}")
            }
            other => panic!("unexpected tensor {other:?}"),
        }
    }

    #[test]
    fn trace_terminal_never_exceeds_initial() {
        let spec = SyntheticSpec::single_attribute("attr", 0.25, 33);
        let bundle = make_synthetic(&spec).unwrap();
        let classifier: &dyn ClassifierAdapter = &bundle.classifiers[0];
        let config = OptimizerConfig {
            batch_size: 256,
            max_iterations: 25,
            seed: 5,
            ..Default::default()
        };
        let (_, trace) = optimize_single(
            &bundle.generator,
            classifier,
            spec.attributes[0].causal_channel,
            &config,
        )
        .unwrap();
        assert!(trace.best_kl <= trace.initial_kl().unwrap());
        assert!(trace.iterations.iter().all(|r| r.kl >= 0.0));
        let iters: Vec<usize> = trace.iterations.iter().map(|r| r.iteration).collect();
        assert!(iters.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn text_direction_on_planted_unit_vector_matches_scalar_path() {
        let spec = SyntheticSpec::single_attribute("attr", 0.2, 33);
        let bundle = make_synthetic(&spec).unwrap();
        let classifier: &dyn ClassifierAdapter = &bundle.classifiers[0];
        let channel = spec.attributes[0].causal_channel;
        let config = OptimizerConfig {
            batch_size: 1024,
            max_iterations: 60,
            seed: 4,
            ..Default::default()
        };
        let direction = BTreeMap::from([(channel, 1.0)]);
        let (dir_tensor, _) =
            optimize_text_direction(&bundle.generator, classifier, &direction, &config).unwrap();
        let (scalar_tensor, _) =
            optimize_single(&bundle.generator, classifier, channel, &config).unwrap();
        let alpha = match dir_tensor {
            FairStyleTensor::DirectionScaled { strength, .. } => strength,
            other => panic!("unexpected tensor {other:?}"),
        };
        let c = match scalar_tensor {
            FairStyleTensor::Scalar { value, .. } => value,
            other => panic!("unexpected tensor {other:?}"),
        };
        // alpha * unit direction is the same family as the scalar tensor, on
        // identical seeds the runs coincide.
        assert!((alpha - c).abs() < 1e-12, "alpha={alpha} c={c}");
    }

    #[test]
    fn non_finite_scores_mark_the_run_diverged() {
        // A classifier that returns NaN once the channel bias grows: the
        // optimizer must stop with Diverged and still hand back the
        // best-so-far tensor.
        struct Unstable<'a> {
            inner: &'a dyn ClassifierAdapter,
            pixel: usize,
        }
        impl ClassifierAdapter for Unstable<'_> {
            fn attribute(&self) -> &str {
                self.inner.attribute()
            }
            fn score(&self, image: &crate::style::Image) -> Result<f64> {
                let raw = image.data()[self.pixel];
                if raw.abs() > 1.5 {
                    Ok(f64::NAN)
                } else {
                    self.inner.score(image)
                }
            }
            fn concurrent_inference(&self) -> bool {
                true
            }
        }

        let spec = SyntheticSpec::single_attribute("attr", 0.2, 8);
        let bundle = make_synthetic(&spec).unwrap();
        let channel = spec.attributes[0].causal_channel;
        let pixel = bundle.generator.readout_pixel(channel).unwrap();
        let classifier = Unstable { inner: &bundle.classifiers[0], pixel };
        let config = OptimizerConfig {
            batch_size: 64,
            max_iterations: 50,
            learning_rate: 5.0,
            seed: 2,
            ..Default::default()
        };
        let (_, trace) =
            optimize_single(&bundle.generator, &classifier, channel, &config).unwrap();
        assert_eq!(trace.status, TerminalStatus::Diverged);
        assert!(trace.iterations.len() < config.max_iterations);
    }

    #[test]
    fn zero_direction_rejected() {
        let spec = SyntheticSpec::single_attribute("attr", 0.2, 33);
        let bundle = make_synthetic(&spec).unwrap();
        let classifier: &dyn ClassifierAdapter = &bundle.classifiers[0];
        let config = OptimizerConfig::default();
        let empty = BTreeMap::new();
        assert!(optimize_text_direction(&bundle.generator, classifier, &empty, &config).is_err());
        let zeros = BTreeMap::from([(spec.attributes[0].causal_channel, 0.0)]);
        assert!(optimize_text_direction(&bundle.generator, classifier, &zeros, &config).is_err());
    }

    #[test]
    fn layers_edit_guard_checked_up_front() {
        let spec = SyntheticSpec::single_attribute("attr", 0.2, 33);
        let bundle = make_synthetic(&spec).unwrap();
        let classifier: &dyn ClassifierAdapter = &bundle.classifiers[0];
        let trgb_layer = bundle
            .generator
            .layout()
            .layers()
            .iter()
            .position(|l| l.kind == crate::style::LayerKind::TRgb)
            .unwrap();
        let config = OptimizerConfig::default();
        assert!(optimize_single(
            &bundle.generator,
            classifier,
            ChannelId::new(trgb_layer, 0),
            &config
        )
        .is_err());
    }
}
