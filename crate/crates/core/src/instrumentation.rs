//! Aliasing measurements inside a network.
//!
//! Every strided convolution or pooling layer is re-run densely (stride 1)
//! and then downsampled, which leaves the forward pass bit-for-bit
//! unchanged while exposing the signal right before downsampling. Each
//! channel of that signal is classified independently.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aliasing::{
    aggregate, classify, mean_fractions, tally, CategoryCounts, CategoryGrid, Fractions, ThresholdRule, Weighting,
};
use crate::error::{Error, Result};
use crate::nn::{rank_of_label, DenseCapture, ImageSet, Network, Tensor};
use crate::spectral::{dft2, RealGrid};

/// Where a downsampling step sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointPath {
    /// Strided stem convolution.
    Stem,
    /// Strided pooling after the stem.
    Pool,
    /// Main branch of a residual block.
    Main,
    /// Projection shortcut of a residual block.
    Skip,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DownsamplePointId {
    pub stage: usize,
    pub path: PointPath,
    /// `"0"` for the stem, `"m"` for the stem pool, `"s"` / `"*s"` for the
    /// main / skip path of stage `s`.
    pub name: String,
}

impl DownsamplePointId {
    pub fn new(stage: usize, path: PointPath) -> Self {
        let name = match path {
            PointPath::Stem => "0".to_string(),
            PointPath::Pool => "m".to_string(),
            PointPath::Main => stage.to_string(),
            PointPath::Skip => format!("*{stage}"),
        };
        Self { stage, path, name }
    }
}

impl fmt::Display for DownsamplePointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Per-channel signals before (`pre`, dense evaluation) and after (`post`)
/// one downsampling step, for a single sample.
#[derive(Clone, Debug, PartialEq)]
pub struct DownsampleTrace {
    pub point: DownsamplePointId,
    pub factor: usize,
    pub pre: Vec<RealGrid>,
    pub post: Vec<RealGrid>,
}

/// Category counts at one point for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointReport {
    pub point: DownsamplePointId,
    pub factor: usize,
    pub per_channel: Vec<CategoryCounts>,
    pub pooled: CategoryCounts,
    pub fractions: Fractions,
}

/// Full result of analyzing one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleAnalysis {
    pub logits: Vec<f32>,
    pub predicted: usize,
    pub correct: bool,
    /// `[point][channel]`.
    pub grids: Vec<Vec<CategoryGrid>>,
    pub points: Vec<PointReport>,
}

/// Points in forward order; empty for fully connected models.
pub fn enumerate_downsample_points(network: &Network<f32>) -> Vec<DownsamplePointId> {
    network.downsample_points()
}

fn require_eval_ready(network: &Network<f32>) -> Result<()> {
    if network.has_running_stats() {
        Ok(())
    } else {
        Err(Error::NoRunningStats)
    }
}

fn check_single(input: &Tensor<f32>) -> Result<()> {
    if input.batch() != 1 {
        return Err(Error::Shape(format!(
            "instrumented passes take one sample at a time, got a batch of {}",
            input.batch()
        )));
    }
    Ok(())
}

fn channel_grids(t: &Tensor<f32>) -> Result<Vec<RealGrid>> {
    (0..t.channels())
        .map(|c| {
            let values = t.plane(0, c).iter().map(|&v| v as f64).collect();
            RealGrid::new(t.height(), t.width(), values)
        })
        .collect()
}

fn to_trace(capture: DenseCapture<f32>) -> Result<DownsampleTrace> {
    Ok(DownsampleTrace {
        pre: channel_grids(&capture.pre)?,
        post: channel_grids(&capture.post)?,
        point: capture.point,
        factor: capture.factor,
    })
}

/// Eval-mode logits of a batch-1 `input` together with one trace per
/// downsampling point.
pub fn capture_traces(network: &Network<f32>, input: &Tensor<f32>) -> Result<(Vec<f32>, Vec<DownsampleTrace>)> {
    require_eval_ready(network)?;
    check_single(input)?;
    let (logits, captures) = network.forward_traced(input)?;
    let traces = captures.into_iter().map(to_trace).collect::<Result<_>>()?;
    Ok((logits.into_data(), traces))
}

/// Classifies every channel of every point for one sample.
pub fn analyze_sample(
    network: &Network<f32>,
    input: &Tensor<f32>,
    label: usize,
    rule: &ThresholdRule,
) -> Result<SampleAnalysis> {
    let (logits, traces) = capture_traces(network, input)?;
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} outside {} classes",
            logits.len()
        )));
    }
    let predicted = (0..logits.len())
        .find(|&c| rank_of_label(&logits, c) == 0)
        .expect("some class ranks first");
    let mut grids = Vec::with_capacity(traces.len());
    let mut points = Vec::with_capacity(traces.len());
    for trace in traces {
        let channel_grids = trace
            .pre
            .iter()
            .map(|pre| classify(&dft2(pre), trace.factor, rule))
            .collect::<Result<Vec<_>>>()?;
        let per_channel: Vec<CategoryCounts> = channel_grids.iter().map(tally).collect();
        let pooled: CategoryCounts = per_channel.iter().copied().sum();
        points.push(PointReport {
            fractions: pooled.fractions().unwrap_or_default(),
            point: trace.point,
            factor: trace.factor,
            per_channel,
            pooled,
        });
        grids.push(channel_grids);
    }
    Ok(SampleAnalysis {
        correct: predicted == label,
        logits,
        predicted,
        grids,
        points,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: f64,
}

/// One downsampling point pooled over channels and samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointAggregate {
    pub name: String,
    pub stage: usize,
    pub path: PointPath,
    pub r: usize,
    pub counts: CategoryCounts,
    pub fractions: Fractions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub label: usize,
    pub predicted: usize,
    pub correct: bool,
    /// Channel-pooled counts per point, in point order.
    pub per_point_counts: Vec<CategoryCounts>,
    pub per_point_fractions: Vec<Fractions>,
    /// Equal-weight mean of the per-point fractions; absent without points.
    pub pooled_fractions: Option<Fractions>,
}

/// Median and 1st/99th percentiles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub p1: f64,
    pub p99: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Self> {
        Some(Self {
            median: percentile(values, 50.0)?,
            p1: percentile(values, 1.0)?,
            p99: percentile(values, 99.0)?,
        })
    }
}

/// Samples grouped by whether the model classified them correctly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub samples: usize,
    /// Mean of the per-sample pooled fractions.
    pub mean: Option<Fractions>,
    /// Spread of the per-sample pooled aliased + aliased-tangled share.
    pub aliased_total: Option<Spread>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessSplit {
    pub correct: GroupSummary,
    pub incorrect: GroupSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub model: String,
    pub dataset: String,
    pub divisor: f64,
    pub accuracy: Accuracy,
    pub points: Vec<PointAggregate>,
    /// Points weighted equally; absent for models without downsampling.
    pub outer_equal_weight: Option<Fractions>,
    pub split: CorrectnessSplit,
    pub samples: Vec<SampleRecord>,
}

impl AnalysisReport {
    /// Rebuilds every aggregate from the per-sample records.
    pub fn recompute_aggregates(&mut self) -> Result<()> {
        let n_points = self.points.len();
        let mut pooled = vec![CategoryCounts::default(); n_points];
        for s in &self.samples {
            if s.per_point_counts.len() != n_points {
                return Err(Error::Malformed(format!(
                    "sample {} has {} point records, the report has {n_points} points",
                    s.index,
                    s.per_point_counts.len()
                )));
            }
            for (acc, &c) in pooled.iter_mut().zip(&s.per_point_counts) {
                *acc += c;
            }
        }
        for (point, counts) in self.points.iter_mut().zip(pooled) {
            point.counts = counts;
            point.fractions = counts.fractions().unwrap_or_default();
        }
        self.outer_equal_weight = outer(&self.points);
        self.split = split(&self.samples);
        Ok(())
    }
}

fn outer(points: &[PointAggregate]) -> Option<Fractions> {
    let counts: Vec<CategoryCounts> = points.iter().map(|p| p.counts).collect();
    aggregate(&counts, Weighting::EqualPerGroup).ok()
}

fn group(samples: &[&SampleRecord]) -> GroupSummary {
    let pooled: Vec<Fractions> = samples.iter().filter_map(|s| s.pooled_fractions).collect();
    let aliased: Vec<f64> = pooled.iter().map(Fractions::aliased_total).collect();
    GroupSummary {
        samples: samples.len(),
        mean: (!pooled.is_empty()).then(|| mean_fractions(&pooled)),
        aliased_total: Spread::of(&aliased),
    }
}

fn split(samples: &[SampleRecord]) -> CorrectnessSplit {
    let (correct, incorrect): (Vec<&SampleRecord>, Vec<&SampleRecord>) = samples.iter().partition(|s| s.correct);
    CorrectnessSplit {
        correct: group(&correct),
        incorrect: group(&incorrect),
    }
}

/// Percentile `q` (in `[0, 100]`) with linear interpolation between order
/// statistics; `None` for an empty slice.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (q.clamp(0.0, 100.0) / 100.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// Per-sample summary used by reports and sweeps.
pub(crate) fn sample_record(index: usize, label: usize, analysis: &SampleAnalysis) -> SampleRecord {
    let per_point_fractions: Vec<Fractions> = analysis.points.iter().map(|p| p.fractions).collect();
    SampleRecord {
        index,
        label,
        predicted: analysis.predicted,
        correct: analysis.correct,
        per_point_counts: analysis.points.iter().map(|p| p.pooled).collect(),
        pooled_fractions: (!per_point_fractions.is_empty()).then(|| mean_fractions(&per_point_fractions)),
        per_point_fractions,
    }
}

/// Analyzes the first `sample_limit` samples (all when `None`).
///
/// `model` and `dataset` are free-form identities copied into the report.
pub fn analyze_dataset(
    network: &Network<f32>,
    data: &ImageSet,
    rule: &ThresholdRule,
    sample_limit: Option<usize>,
    model: &str,
    dataset: &str,
) -> Result<AnalysisReport> {
    if sample_limit == Some(0) {
        return Err(Error::invalid("sample limit must be positive"));
    }
    if data.is_empty() {
        return Err(Error::invalid("cannot analyze an empty dataset"));
    }
    require_eval_ready(network)?;
    let n = sample_limit.map_or(data.len(), |l| l.min(data.len()));
    let k5 = data.n_classes().min(5);

    let results = (0..n)
        .into_par_iter()
        .map(|i| {
            let (input, labels) = data.batch(&[i]);
            let analysis = analyze_sample(network, &input, labels[0], rule)?;
            let top5 = rank_of_label(&analysis.logits, labels[0]) < k5;
            Ok((sample_record(i, labels[0], &analysis), analysis.points, top5))
        })
        .collect::<Result<Vec<_>>>()?;

    let point_ids = enumerate_downsample_points(network);
    let mut points: Vec<PointAggregate> = point_ids
        .iter()
        .map(|id| PointAggregate {
            name: id.name.clone(),
            stage: id.stage,
            path: id.path,
            r: 0,
            counts: CategoryCounts::default(),
            fractions: Fractions::default(),
        })
        .collect();
    let mut samples = Vec::with_capacity(n);
    let (mut top1, mut top5) = (0usize, 0usize);
    for (record, reports, in_top5) in results {
        for (agg, report) in points.iter_mut().zip(&reports) {
            agg.r = report.factor;
        }
        top1 += record.correct as usize;
        top5 += in_top5 as usize;
        samples.push(record);
    }

    let mut report = AnalysisReport {
        model: model.to_string(),
        dataset: dataset.to_string(),
        divisor: rule.divisor(),
        accuracy: Accuracy {
            top1: top1 as f64 / n as f64,
            top5: top5 as f64 / n as f64,
        },
        points,
        outer_equal_weight: None,
        split: split(&[]),
        samples,
    };
    report.recompute_aggregates()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_names_follow_convention() {
        assert_eq!(DownsamplePointId::new(0, PointPath::Stem).name, "0");
        assert_eq!(DownsamplePointId::new(0, PointPath::Pool).name, "m");
        assert_eq!(DownsamplePointId::new(2, PointPath::Main).name, "2");
        assert_eq!(DownsamplePointId::new(2, PointPath::Skip).name, "*2");
    }

    #[test]
    fn percentile_interpolates() {
        let v = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(percentile(&v, 50.0), Some(2.5));
        assert_eq!(percentile(&v, 0.0), Some(1.0));
        assert_eq!(percentile(&v, 100.0), Some(4.0));
        assert!((percentile(&v, 1.0).unwrap() - 1.03).abs() < 1e-12);
        assert_eq!(percentile(&[], 50.0), None);
    }
}
