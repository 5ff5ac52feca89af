//! Evaluation metrics: Euclidean distance, mean distance, and p-k accuracy.
//!
//! A sample is correct at tolerance k iff its distance is strictly smaller
//! than k pixels. Samples flagged invalid (e.g. blink-masked) are excluded
//! from both numerator and denominator.

use crate::error::{Error, Result};

/// Ground truth and prediction for one sample, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPrediction {
    pub gt: (f64, f64),
    pub pred: (f64, f64),
    pub valid: bool,
}

impl LabeledPrediction {
    pub fn new(gt: (f64, f64), pred: (f64, f64)) -> Self {
        LabeledPrediction {
            gt,
            pred,
            valid: true,
        }
    }

    fn check(&self) -> Result<()> {
        for v in [self.gt.0, self.gt.1, self.pred.0, self.pred.1] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::argument(format!(
                    "coordinate {v} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

pub fn euclidean(gt: (f64, f64), pred: (f64, f64)) -> f64 {
    let dx = gt.0 - pred.0;
    let dy = gt.1 - pred.1;
    (dx * dx + dy * dy).sqrt()
}

fn valid_samples(samples: &[LabeledPrediction]) -> Result<Vec<&LabeledPrediction>> {
    let valid: Vec<&LabeledPrediction> = samples.iter().filter(|s| s.valid).collect();
    if valid.is_empty() {
        return Err(Error::argument("no valid samples"));
    }
    for s in &valid {
        s.check()?;
    }
    Ok(valid)
}

/// Fraction of valid samples with distance strictly below `k` pixels.
pub fn pk_accuracy(samples: &[LabeledPrediction], k: f64) -> Result<f64> {
    let valid = valid_samples(samples)?;
    let correct = valid
        .iter()
        .filter(|s| euclidean(s.gt, s.pred) < k)
        .count();
    Ok(correct as f64 / valid.len() as f64)
}

/// Mean Euclidean distance over valid samples.
pub fn mean_distance(samples: &[LabeledPrediction]) -> Result<f64> {
    let valid = valid_samples(samples)?;
    let sum: f64 = valid.iter().map(|s| euclidean(s.gt, s.pred)).sum();
    Ok(sum / valid.len() as f64)
}

/// Text report: "p5=<v> p10=<v> dist=<v> n=<count>".
pub fn format_report(pk: &[(u32, f64)], dist: f64, n: usize) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    for (k, v) in pk {
        write!(out, "p{k}={v:.6} ").unwrap();
    }
    write!(out, "dist={dist:.6} n={n}").unwrap();
    out
}
