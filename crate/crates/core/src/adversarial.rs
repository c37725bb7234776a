//! L-infinity projected gradient ascent on the training loss, and sweeps of
//! accuracy and aliasing over the attack radius.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aliasing::ThresholdRule;
use crate::error::{Error, Result};
use crate::instrumentation::{analyze_sample, enumerate_downsample_points, sample_record, Spread};
use crate::nn::ops::{softmax_cross_entropy, Reduction};
use crate::nn::{rank_of_label, ImageSet, Network, Tensor};

const ATTACK_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub steps: usize,
    /// Defaults to `2.5 * epsilon / steps`.
    pub step_size: Option<f64>,
    /// Inputs are clamped to this range after every step.
    pub clip_range: Option<(f64, f64)>,
    /// Start from a uniform point of the epsilon-ball instead of the input.
    pub random_start: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.0,
            steps: 100,
            step_size: None,
            clip_range: None,
            random_start: false,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self {
            epsilon,
            ..self.clone()
        }
    }

    pub fn effective_step_size(&self) -> f64 {
        self.step_size.unwrap_or(2.5 * self.epsilon / self.steps.max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::invalid(format!(
                "epsilon must be finite and non-negative, got {}",
                self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(Error::invalid("attack needs at least one step"));
        }
        let step = self.effective_step_size();
        if !step.is_finite() || step < 0.0 || (self.epsilon > 0.0 && step == 0.0) {
            return Err(Error::invalid(format!("invalid step size {step}")));
        }
        if let Some((lo, hi)) = self.clip_range {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::invalid(format!("invalid clip range ({lo}, {hi})")));
            }
        }
        Ok(())
    }
}

fn nudge_inward(v: f32, up: bool) -> f32 {
    // One ulp down when `up` (upper bound), one ulp up otherwise.
    if v == 0.0 {
        let tiny = f32::from_bits(1);
        return if up { -tiny } else { tiny };
    }
    let bits = v.to_bits();
    let grows = (v > 0.0) == up;
    f32::from_bits(if grows { bits - 1 } else { bits + 1 })
}

/// Per-coordinate box `[lo, hi]` in single precision that lies inside
/// `[x0 - eps, x0 + eps]` when measured in double precision.
fn ball(x0: f32, eps: f64) -> (f32, f32) {
    let centre = x0 as f64;
    let mut hi = (centre + eps) as f32;
    while hi as f64 - centre > eps {
        hi = nudge_inward(hi, true);
    }
    let mut lo = (centre - eps) as f32;
    while centre - lo as f64 > eps {
        lo = nudge_inward(lo, false);
    }
    (lo, hi)
}

fn project(x: &mut [f32], bounds: &[(f32, f32)], clip: Option<(f32, f32)>) {
    for (v, &(lo, hi)) in x.iter_mut().zip(bounds) {
        *v = v.clamp(lo, hi);
        if let Some((a, b)) = clip {
            *v = v.clamp(a, b).clamp(lo, hi);
        }
    }
}

/// Attacks every sample of `input` against its label. Sample `i` of the
/// batch draws its random start from stream `stream_offset + i`.
fn pgd_batch(
    network: &Network<f32>,
    input: &Tensor<f32>,
    labels: &[usize],
    config: &AttackConfig,
    stream_offset: u64,
) -> Result<Tensor<f32>> {
    config.validate()?;
    if labels.len() != input.batch() {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            input.batch()
        )));
    }
    if config.epsilon == 0.0 {
        return Ok(input.clone());
    }
    let eps = config.epsilon;
    let step = config.effective_step_size() as f32;
    let clip = config.clip_range.map(|(a, b)| (a as f32, b as f32));
    let bounds: Vec<(f32, f32)> = input.data().iter().map(|&v| ball(v, eps)).collect();

    let mut x = input.clone();
    if config.random_start {
        let len = input.sample_len();
        for (i, chunk) in x.data_mut().chunks_mut(len).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(stream_offset + i as u64);
            for v in chunk.iter_mut() {
                *v += rng.random_range(-eps..=eps) as f32;
            }
        }
    }
    project(x.data_mut(), &bounds, clip);

    for s in 0..config.steps {
        let (logits, cache) = network.forward_eval_cached(&x)?;
        let loss = softmax_cross_entropy(&logits, labels, Reduction::Sum)?;
        let (grad, _) = network.backward(&cache, &loss.grad_logits, false)?;
        if !grad.is_finite() {
            return Err(Error::AttackDiverged(s));
        }
        for (v, &g) in x.data_mut().iter_mut().zip(grad.data()) {
            if g > 0.0 {
                *v += step;
            } else if g < 0.0 {
                *v -= step;
            }
        }
        project(x.data_mut(), &bounds, clip);
    }
    Ok(x)
}

/// Untargeted PGD: `x <- P(x + step * sign(grad loss))`, with the projection
/// onto the epsilon-ball around the input (and the optional clip range)
/// applied after every step. `sign(0) = 0`.
pub fn pgd_attack(
    network: &Network<f32>,
    input: &Tensor<f32>,
    labels: &[usize],
    config: &AttackConfig,
) -> Result<Tensor<f32>> {
    if !network.has_running_stats() {
        return Err(Error::NoRunningStats);
    }
    pgd_batch(network, input, labels, config, 0)
}

/// Largest coordinate of `|a - b|`, in double precision.
pub fn linf_distance(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .fold(0.0, f64::max)
}

/// Metrics under attack at one radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub top1: f64,
    pub top5: f64,
    /// Largest perturbation over all attacked samples.
    pub max_perturbation: f64,
    /// Spread of per-sample aliased + aliased-tangled shares, per point.
    pub per_point: Vec<Spread>,
    /// Same, for the equal-weight mean over points.
    pub pooled: Option<Spread>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub points: Vec<String>,
    pub samples: usize,
    pub rows: Vec<SweepRow>,
}

/// Attacks the first `sample_limit` samples (all when `None`) at every
/// radius in `epsilons` and measures accuracy and aliasing on the result.
pub fn adversarial_sweep(
    network: &Network<f32>,
    data: &ImageSet,
    epsilons: &[f64],
    rule: &ThresholdRule,
    base: &AttackConfig,
    sample_limit: Option<usize>,
) -> Result<SweepTable> {
    if epsilons.is_empty() {
        return Err(Error::invalid("epsilon list is empty"));
    }
    if !epsilons.contains(&0.0) {
        return Err(Error::invalid("epsilon list must include 0 (the clean reference)"));
    }
    if sample_limit == Some(0) || data.is_empty() {
        return Err(Error::invalid("nothing to attack: no samples selected"));
    }
    if !network.has_running_stats() {
        return Err(Error::NoRunningStats);
    }
    for &eps in epsilons {
        base.with_epsilon(eps).validate()?;
    }
    let n = sample_limit.map_or(data.len(), |l| l.min(data.len()));
    let k5 = data.n_classes().min(5);
    let points: Vec<String> = enumerate_downsample_points(network)
        .into_iter()
        .map(|p| p.name)
        .collect();
    let indices: Vec<usize> = (0..n).collect();

    let mut rows = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let config = base.with_epsilon(eps);
        let mut records = Vec::with_capacity(n);
        let mut max_perturbation = 0.0f64;
        for chunk in indices.chunks(ATTACK_BATCH) {
            let (clean, labels) = data.batch(chunk);
            let adv = pgd_batch(network, &clean, &labels, &config, chunk[0] as u64)?;
            max_perturbation = max_perturbation.max(linf_distance(&adv, &clean));
            let sample_len = adv.sample_len();
            let [_, c, h, w] = adv.dims();
            let analyzed = chunk
                .par_iter()
                .enumerate()
                .map(|(pos, &index)| {
                    let x = adv.data()[pos * sample_len..(pos + 1) * sample_len].to_vec();
                    let input = Tensor::new([1, c, h, w], x)?;
                    let analysis = analyze_sample(network, &input, labels[pos], rule)?;
                    let in_top5 = rank_of_label(&analysis.logits, labels[pos]) < k5;
                    Ok((sample_record(index, labels[pos], &analysis), in_top5))
                })
                .collect::<Result<Vec<_>>>()?;
            records.extend(analyzed);
        }
        let top1 = records.iter().filter(|(r, _)| r.correct).count();
        let top5 = records.iter().filter(|(_, t5)| *t5).count();
        let per_point = (0..points.len())
            .map(|p| {
                let shares: Vec<f64> = records
                    .iter()
                    .map(|(r, _)| r.per_point_fractions[p].aliased_total())
                    .collect();
                Spread::of(&shares).expect("at least one sample")
            })
            .collect();
        let pooled_shares: Vec<f64> = records
            .iter()
            .filter_map(|(r, _)| r.pooled_fractions.map(|f| f.aliased_total()))
            .collect();
        rows.push(SweepRow {
            epsilon: eps,
            top1: top1 as f64 / n as f64,
            top5: top5 as f64 / n as f64,
            max_perturbation,
            per_point,
            pooled: Spread::of(&pooled_shares),
        });
    }
    Ok(SweepTable {
        points,
        samples: n,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ball_is_exact_in_double_precision() {
        for &x0 in &[0.0f32, 0.1, -0.3, 1.0e-8, 7.25, -1.0] {
            for &eps in &[0.01, 0.02, 0.05, 1e-9, 0.3] {
                let (lo, hi) = ball(x0, eps);
                assert!(hi as f64 - x0 as f64 <= eps, "{x0} {eps}");
                assert!(x0 as f64 - lo as f64 <= eps, "{x0} {eps}");
                assert!(lo <= x0 && x0 <= hi);
            }
        }
    }

    #[test]
    fn default_step_size() {
        let c = AttackConfig::default().with_epsilon(0.04);
        assert!((c.effective_step_size() - 0.001).abs() < 1e-15);
        assert!(AttackConfig::default().with_epsilon(-0.1).validate().is_err());
        let zero_steps = AttackConfig {
            steps: 0,
            ..AttackConfig::default()
        };
        assert!(zero_steps.validate().is_err());
    }
}
