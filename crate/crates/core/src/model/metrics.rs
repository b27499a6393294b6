use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

/// Evaluation summary. Fractions lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    /// Cloud-level accuracy for classification, point-level for
    /// segmentation.
    pub overall_accuracy: f64,
    /// Accuracy restricted to each (shape) class label.
    pub per_class_accuracy: BTreeMap<usize, f64>,
    pub mean_per_class_iou: Option<f64>,
    pub samples: usize,
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}

/// Accuracy per true label.
pub fn per_class_accuracy(predicted: &[usize], truth: &[usize]) -> BTreeMap<usize, f64> {
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&p, &t) in predicted.iter().zip(truth) {
        let e = counts.entry(t).or_default();
        e.0 += (p == t) as usize;
        e.1 += 1;
    }
    counts.into_iter().map(|(k, (h, n))| (k, h as f64 / n as f64)).collect()
}

/// Mean IoU over `parts` for one shape. A part absent from both prediction
/// and ground truth counts as IoU 1.
pub fn shape_iou(predicted: &[usize], truth: &[usize], parts: &BTreeSet<usize>) -> f64 {
    if parts.is_empty() {
        return 1.0;
    }
    let mut total = 0.0;
    for &part in parts {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&p, &t) in predicted.iter().zip(truth) {
            let (a, b) = (p == part, t == part);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    total / parts.len() as f64
}

/// One segmented shape: its class and per-point predicted and true parts.
pub struct SegmentedShape<'a> {
    pub class: usize,
    pub predicted: &'a [usize],
    pub truth: &'a [usize],
}

/// Shape IoUs averaged within each class, then across classes. A class's
/// part set is every part label occurring in its ground truth.
pub fn mean_per_class_iou(shapes: &[SegmentedShape<'_>]) -> f64 {
    let mut parts: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for s in shapes {
        parts.entry(s.class).or_default().extend(s.truth.iter().copied());
    }
    let mut per_class: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for s in shapes {
        let e = per_class.entry(s.class).or_default();
        e.0 += shape_iou(s.predicted, s.truth, &parts[&s.class]);
        e.1 += 1;
    }
    if per_class.is_empty() {
        return 0.0;
    }
    per_class.values().map(|(sum, n)| sum / *n as f64).sum::<f64>() / per_class.len() as f64
}

/// Sample standard deviation (n − 1 denominator); zero for fewer than two
/// values.
pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    // deviations from the first value make equal inputs exactly zero
    let d: Vec<f64> = values.iter().map(|v| v - values[0]).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}
