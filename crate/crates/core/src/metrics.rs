//! Precision and success curves over a tracked sequence.
//!
//! Precision at threshold `d` is the fraction of frames whose center error
//! is at most `d` pixels, for `d = 0, 1, ..., 50`. Success at threshold `t`
//! is the fraction of frames whose overlap is strictly greater than `t`,
//! for `t = 0, 0.05, ..., 1`; the AUC is the mean of the success curve.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{iou, BoundingBox};

pub const PRECISION_THRESHOLDS: usize = 51;
pub const SUCCESS_THRESHOLDS: usize = 21;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetric {
    pub center_error: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_frame: Vec<FrameMetric>,
    pub precision_curve: Vec<f64>,
    pub success_curve: Vec<f64>,
    pub auc: f64,
    /// Frames per second, when timing was measured.
    pub fps: Option<f64>,
}

pub fn success_threshold(i: usize) -> f64 {
    i as f64 * 0.05
}

pub fn compute_metrics(pred: &[BoundingBox], gt: &[BoundingBox], fps: Option<f64>) -> Result<MetricReport> {
    if pred.len() != gt.len() || pred.is_empty() {
        return invalid(format!("{} predictions for {} ground-truth boxes", pred.len(), gt.len()));
    }
    let per_frame: Vec<FrameMetric> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| FrameMetric { center_error: p.center_distance(g), iou: iou(p, g) })
        .collect();
    Ok(report_from_frames(per_frame, fps))
}

/// Curves over an arbitrary pool of frames, e.g. several sequences.
pub fn report_from_frames(per_frame: Vec<FrameMetric>, fps: Option<f64>) -> MetricReport {
    let n = per_frame.len() as f64;
    let precision_curve = (0..PRECISION_THRESHOLDS)
        .map(|d| per_frame.iter().filter(|f| f.center_error <= d as f64).count() as f64 / n)
        .collect();
    let success_curve: Vec<f64> = (0..SUCCESS_THRESHOLDS)
        .map(|i| per_frame.iter().filter(|f| f.iou > success_threshold(i)).count() as f64 / n)
        .collect();
    let auc = success_curve.iter().sum::<f64>() / SUCCESS_THRESHOLDS as f64;
    MetricReport { per_frame, precision_curve, success_curve, auc, fps }
}

impl MetricReport {
    pub fn mean_iou(&self) -> f64 {
        self.per_frame.iter().map(|f| f.iou).sum::<f64>() / self.per_frame.len() as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric report serializes")
    }

    /// `kind,threshold,value` rows for both curves.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("curve,threshold,value\n");
        for (d, v) in self.precision_curve.iter().enumerate() {
            s += &format!("precision,{d},{v}\n");
        }
        for (i, v) in self.success_curve.iter().enumerate() {
            s += &format!("success,{},{v}\n", success_threshold(i));
        }
        s
    }
}
