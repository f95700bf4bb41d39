//! Labeling metrics: per-pixel accuracy, average per-class accuracy
//! (mean recall over classes present in the truth) and the full confusion
//! matrix. Void truth pixels are excluded everywhere.

use crate::dataset::{LabelMap, VOID_LABEL};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Metrics {
    /// truth-major `n_classes x n_classes` counts.
    pub confusion: Vec<u64>,
    pub n_classes: usize,
    pub valid_pixels: u64,
    pub pixel_accuracy: f64,
    pub class_accuracy: f64,
}

impl Metrics {
    pub fn confusion_at(&self, truth: usize, pred: usize) -> u64 {
        self.confusion[truth * self.n_classes + pred]
    }
}

pub fn evaluate(pred: &LabelMap, truth: &LabelMap, n_classes: usize) -> Result<Metrics> {
    if pred.width() != truth.width() || pred.height() != truth.height() {
        return Err(Error::shape(format!(
            "prediction {}x{} vs truth {}x{}",
            pred.width(),
            pred.height(),
            truth.width(),
            truth.height()
        )));
    }
    let mut confusion = vec![0u64; n_classes * n_classes];
    let mut valid = 0u64;
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        if t == VOID_LABEL {
            continue;
        }
        if t as usize >= n_classes {
            return Err(Error::invalid(format!(
                "truth label {t} out of range for {n_classes} classes"
            )));
        }
        if p == VOID_LABEL || p as usize >= n_classes {
            return Err(Error::invalid(format!(
                "prediction label {p} out of range for {n_classes} classes"
            )));
        }
        confusion[t as usize * n_classes + p as usize] += 1;
        valid += 1;
    }
    if valid == 0 {
        return Err(Error::NoValidPixels);
    }
    let correct: u64 = (0..n_classes).map(|c| confusion[c * n_classes + c]).sum();
    let mut class_sum = 0.0;
    let mut classes_present = 0;
    for c in 0..n_classes {
        let row: u64 = confusion[c * n_classes..(c + 1) * n_classes].iter().sum();
        if row > 0 {
            class_sum += confusion[c * n_classes + c] as f64 / row as f64;
            classes_present += 1;
        }
    }
    Ok(Metrics {
        confusion,
        n_classes,
        valid_pixels: valid,
        pixel_accuracy: correct as f64 / valid as f64,
        class_accuracy: class_sum / classes_present as f64,
    })
}

/// Accumulates confusion matrices across images and derives the summary
/// numbers from the merged counts.
pub fn merge_metrics(parts: &[Metrics]) -> Result<Metrics> {
    let Some(first) = parts.first() else {
        return Err(Error::Empty("no metrics to merge".into()));
    };
    let n = first.n_classes;
    let mut confusion = vec![0u64; n * n];
    for m in parts {
        if m.n_classes != n {
            return Err(Error::shape("metrics with differing class counts"));
        }
        for (acc, v) in confusion.iter_mut().zip(&m.confusion) {
            *acc += v;
        }
    }
    let valid: u64 = confusion.iter().sum();
    let correct: u64 = (0..n).map(|c| confusion[c * n + c]).sum();
    let mut class_sum = 0.0;
    let mut present = 0;
    for c in 0..n {
        let row: u64 = confusion[c * n..(c + 1) * n].iter().sum();
        if row > 0 {
            class_sum += confusion[c * n + c] as f64 / row as f64;
            present += 1;
        }
    }
    Ok(Metrics {
        confusion,
        n_classes: n,
        valid_pixels: valid,
        pixel_accuracy: correct as f64 / valid as f64,
        class_accuracy: class_sum / present as f64,
    })
}
