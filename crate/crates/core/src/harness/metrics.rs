//! Box overlap and single-object detection accuracy.

use serde::{Deserialize, Serialize};

use super::model::Prediction;
use super::synth::ToyAnnotation;
use super::HarnessError;

/// Intersection over union of two centre-form boxes `(cx, cy, w, h)`.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let span = |c: f64, s: f64| (c - s / 2.0, c + s / 2.0);
    let (ax0, ax1) = span(a[0], a[2]);
    let (ay0, ay1) = span(a[1], a[3]);
    let (bx0, bx1) = span(b[0], b[2]);
    let (by0, by1) = span(b[1], b[3]);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Fraction with IoU at or above the threshold and objectness ≥ 0.5.
    pub accuracy: f64,
    pub mean_iou: f64,
    pub count: usize,
}

pub fn evaluate(
    results: &[(Prediction, ToyAnnotation)],
    iou_threshold: f64,
) -> Result<EvalReport, HarnessError> {
    if results.is_empty() {
        return Err(HarnessError::EmptyTestSet);
    }
    let mut hits = 0usize;
    let mut iou_sum = 0.0;
    for (p, a) in results {
        let v = iou(p.boxp, a.as_box());
        iou_sum += v;
        if v >= iou_threshold && p.objectness >= 0.5 {
            hits += 1;
        }
    }
    let n = results.len();
    Ok(EvalReport {
        accuracy: hits as f64 / n as f64,
        mean_iou: iou_sum / n as f64,
        count: n,
    })
}
