//! Classification metrics, the annualized economic-benefit calculator and
//! aggregation across repeated runs.

use serde::{Deserialize, Serialize};

/// Annual cost of untreated depression attributable to missed cases, in
/// billions of dollars.
pub const UNTREATED_BASE: f64 = 139.95;
/// Annual treatment spending, in billions of dollars.
pub const TREATMENT_BASE: f64 = 304.0;
/// Share of treatment spending wasted on a false positive.
pub const FP_SHARE: f64 = 0.2;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("metrics need at least one prediction")]
    Empty,
    #[error("{predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    /// Precision or recall with an empty denominator counts as 0, as does F1
    /// when both are 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

/// Metrics on the positive class from hard predictions.
pub fn confusion_metrics(predicted: &[bool], labels: &[u8]) -> Result<Metrics, EvalError> {
    if predicted.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predicted.len(),
            labels: labels.len(),
        });
    }
    if predicted.is_empty() {
        return Err(EvalError::Empty);
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &y) in predicted.iter().zip(labels) {
        match (p, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(Metrics::from_counts(tp, fp, fn_))
}

/// Metrics from probabilities, predicting depressed when `p > 0.5`.
pub fn compute_metrics(probabilities: &[f64], labels: &[u8]) -> Result<Metrics, EvalError> {
    let predicted: Vec<bool> = probabilities.iter().map(|&p| p > 0.5).collect();
    confusion_metrics(&predicted, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EconRow {
    pub benefit: f64,
    pub cost: f64,
    pub net: f64,
}

/// Upper-bound benefit of true positives minus the cost of false positives,
/// in billions of dollars per year. A classifier that flags nobody gets the
/// literal value `-TREATMENT_BASE * FP_SHARE`, not 0.
pub fn econ_analysis(precision: f64, recall: f64) -> EconRow {
    let benefit = UNTREATED_BASE * recall;
    let cost = TREATMENT_BASE * FP_SHARE * (1.0 - precision);
    EconRow {
        benefit,
        cost,
        net: benefit - cost,
    }
}

/// Mean and sample standard deviation (0 for a single run).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One line of an experiment table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub precision_mean: f64,
    pub precision_std: f64,
    pub recall_mean: f64,
    pub recall_std: f64,
    pub benefit: f64,
    pub cost: f64,
    pub net: f64,
}

impl MetricsRow {
    /// Aggregates runs; the economics use the mean precision and recall.
    pub fn from_runs(model: impl Into<String>, runs: &[Metrics]) -> Self {
        let col = |f: fn(&Metrics) -> f64| mean_std(&runs.iter().map(f).collect::<Vec<_>>());
        let (f1_mean, f1_std) = col(|m| m.f1);
        let (precision_mean, precision_std) = col(|m| m.precision);
        let (recall_mean, recall_std) = col(|m| m.recall);
        let econ = econ_analysis(precision_mean, recall_mean);
        Self {
            model: model.into(),
            f1_mean,
            f1_std,
            precision_mean,
            precision_std,
            recall_mean,
            recall_std,
            benefit: econ.benefit,
            cost: econ.cost,
            net: econ.net,
        }
    }
}
