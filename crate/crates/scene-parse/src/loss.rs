//! Class distributions and the losses defined over them. Logs are clamped
//! at 1e-12 uniformly so a vanishing probability never produces -inf.

use crate::error::{Error, Result};

pub(crate) const LOG_CLAMP: f64 = 1e-12;

/// A normalized probability vector over classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    probs: Vec<f64>,
}

impl ClassDistribution {
    /// Validates entries in [0,1] summing to 1 within 1e-9.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("class distribution".into()));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("distribution entry outside [0,1]"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "distribution sums to {sum}, not 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn one_hot(n: usize, class: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[class] = 1.0;
        Self { probs }
    }

    /// Normalized histogram from raw counts. Errors if all counts are zero.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Empty("histogram has no counts".into()));
        }
        Ok(Self {
            probs: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest entry; ties go to the lowest class index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Shannon entropy in nats, with 0 ln 0 := 0.
    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }
}

/// Numerically stable softmax (max-shifted exponentials).
pub fn softmax(logits: &[f64]) -> Result<ClassDistribution> {
    if logits.is_empty() {
        return Err(Error::Empty("softmax input".into()));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(ClassDistribution {
        probs: exps.into_iter().map(|e| e / sum).collect(),
    })
}

/// -sum target_a ln(pred_a), predictions clamped at 1e-12.
pub fn cross_entropy(pred: &ClassDistribution, target: &ClassDistribution) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape(format!(
            "cross entropy over {} vs {} classes",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred
        .probs
        .iter()
        .zip(&target.probs)
        .map(|(&p, &t)| -t * p.max(LOG_CLAMP).ln())
        .sum())
}

/// sum d_a ln(d_a / d_hat_a); terms with d_a = 0 contribute 0.
pub fn kl_divergence(true_dist: &ClassDistribution, pred: &ClassDistribution) -> Result<f64> {
    if true_dist.len() != pred.len() {
        return Err(Error::shape(format!(
            "kl divergence over {} vs {} classes",
            true_dist.len(),
            pred.len()
        )));
    }
    Ok(true_dist
        .probs
        .iter()
        .zip(&pred.probs)
        .filter(|(&d, _)| d > 0.0)
        .map(|(&d, &p)| d * (d / p.max(LOG_CLAMP)).ln())
        .sum())
}
