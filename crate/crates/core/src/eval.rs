//! Rank-1 recall at IoU thresholds and the intersection-ratio histogram.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Interval;

pub const ANC_THRESHOLDS: [f64; 3] = [0.1, 0.3, 0.5];
pub const CHARADES_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// `|a ∩ b| / |a ∪ b|`, 0 when the union has zero length.
pub fn interval_iou(a: Interval, b: Interval) -> f64 {
    let inter = a.intersection_len(&b);
    let union = a.len() + b.len() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `n_bins + 1` equally spaced edges over `[0, 1]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Instances dropped because their ground truth has zero length.
    pub skipped: usize,
}

impl Histogram {
    /// Fraction of counted instances falling in bins that start at or after `lo`.
    pub fn mass_from(&self, lo: f64) -> f64 {
        let total: usize = self.counts.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let upper: usize = self
            .counts
            .iter()
            .zip(&self.edges)
            .filter(|(_, &e)| e >= lo - 1e-12)
            .map(|(c, _)| c)
            .sum();
        upper as f64 / total as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_start,bin_end,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", self.edges[i], self.edges[i + 1], c);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallAt {
    pub threshold: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall: Vec<RecallAt>,
    pub n_instances: usize,
    pub mean_iou: f64,
    pub histogram: Option<Histogram>,
}

impl EvalReport {
    pub fn recall_at(&self, threshold: f64) -> Option<f64> {
        self.recall
            .iter()
            .find(|r| (r.threshold - threshold).abs() < 1e-12)
            .map(|r| r.recall)
    }

    /// Plain-text table: one header row of thresholds and one value row.
    pub fn table(&self, label: &str) -> String {
        let mut s = format!("{:<12}", "method");
        for r in &self.recall {
            let _ = write!(s, " | R1@{:<5}", r.threshold);
        }
        let _ = write!(s, " | mIoU\n{:<12}", label);
        for r in &self.recall {
            let _ = write!(s, " | {:>8.2}", 100.0 * r.recall);
        }
        let _ = writeln!(s, " | {:>6.2}", 100.0 * self.mean_iou);
        s
    }
}

fn check_aligned(predictions: &[Interval], gts: &[Interval]) -> Result<()> {
    if predictions.len() != gts.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} ground-truth intervals",
            predictions.len(),
            gts.len()
        )));
    }
    Ok(())
}

/// Fraction of instances whose IoU strictly exceeds each threshold.
pub fn rank1_at_iou(predictions: &[Interval], gts: &[Interval], thresholds: &[f64]) -> Result<EvalReport> {
    check_aligned(predictions, gts)?;
    let ious: Vec<f64> = predictions
        .iter()
        .zip(gts)
        .map(|(&p, &g)| interval_iou(p, g))
        .collect();
    let n = ious.len();
    let frac = |count: usize| if n == 0 { 0.0 } else { count as f64 / n as f64 };
    let recall = thresholds
        .iter()
        .map(|&th| RecallAt {
            threshold: th,
            recall: frac(ious.iter().filter(|&&iou| iou > th).count()),
        })
        .collect();
    Ok(EvalReport {
        recall,
        n_instances: n,
        mean_iou: if n == 0 { 0.0 } else { ious.iter().sum::<f64>() / n as f64 },
        histogram: None,
    })
}

/// `|pred ∩ gt| / |gt|` clamped to `[0, 1]`; 0 for an empty ground truth.
pub fn intersection_ratio(pred: Interval, gt: Interval) -> f64 {
    if gt.len() <= 0.0 {
        return 0.0;
    }
    (pred.intersection_len(&gt) / gt.len()).clamp(0.0, 1.0)
}

/// [`intersection_ratio`] per instance, binned into `n_bins` equal bins on
/// `[0, 1]`. Ratio 1.0 lands in the last bin.
pub fn intersection_ratio_histogram(predictions: &[Interval], gts: &[Interval], n_bins: usize) -> Result<Histogram> {
    check_aligned(predictions, gts)?;
    if n_bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let mut counts = vec![0; n_bins];
    let mut skipped = 0;
    for (p, g) in predictions.iter().zip(gts) {
        if g.len() <= 0.0 {
            skipped += 1;
            continue;
        }
        let r = intersection_ratio(*p, *g);
        let bin = ((r * n_bins as f64) as usize).min(n_bins - 1);
        counts[bin] += 1;
    }
    let edges = (0..=n_bins).map(|i| i as f64 / n_bins as f64).collect();
    Ok(Histogram {
        edges,
        counts,
        skipped,
    })
}

/// Recall table plus histogram in one report.
pub fn evaluate(predictions: &[Interval], gts: &[Interval], thresholds: &[f64], n_bins: usize) -> Result<EvalReport> {
    let mut report = rank1_at_iou(predictions, gts, thresholds)?;
    report.histogram = Some(intersection_ratio_histogram(predictions, gts, n_bins)?);
    Ok(report)
}
