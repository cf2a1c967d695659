//! Repeated training runs over ablation, observation-window and sample-rate
//! variants, summarized as metric rows.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::eval::{Metrics, MetricsRow};
use crate::model::{evaluate, prepare_corpus, train, Ablation, ModelConfig, ModelError, TrainConfig};
use crate::sensor::PatientRecord;

pub const CSV_HEADER: [&str; 10] = [
    "model",
    "f1_mean",
    "f1_std",
    "precision_mean",
    "precision_std",
    "recall_mean",
    "recall_std",
    "benefit",
    "cost",
    "net",
];

/// One row of the suite: a model variant trained on one data setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub ablation: Ablation,
    pub window_days: f64,
    pub rate_hz: u32,
}

impl ExperimentConfig {
    pub fn new(name: impl Into<String>, ablation: Ablation, window_days: f64, rate_hz: u32) -> Self {
        Self {
            name: name.into(),
            ablation,
            window_days,
            rate_hz,
        }
    }
}

/// Every ablation at the base setting, then the window and rate variants of
/// the full model.
pub fn default_experiments(base: &ModelConfig, windows_weeks: &[u32], rates_hz: &[u32]) -> Vec<ExperimentConfig> {
    let mut out: Vec<ExperimentConfig> = Ablation::ALL
        .iter()
        .map(|&a| {
            let name = if a == Ablation::None { "TempPNet".to_string() } else { format!("TempPNet-{}", a.name()) };
            ExperimentConfig::new(name, a, base.window_days, base.rate_hz)
        })
        .collect();
    for &w in windows_weeks {
        out.push(ExperimentConfig::new(format!("window-{w}w"), Ablation::None, 7.0 * f64::from(w), base.rate_hz));
    }
    for &r in rates_hz {
        out.push(ExperimentConfig::new(format!("rate-{r}hz"), Ablation::None, base.window_days, r));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteOutput {
    pub rows: Vec<MetricsRow>,
    /// Per-seed test metrics of every row.
    pub runs: Vec<Vec<Metrics>>,
    /// Why skipped configurations were skipped.
    pub notes: Vec<String>,
}

/// Whole weeks covering the latest test in the corpus.
pub fn corpus_span_days(corpus: &[PatientRecord]) -> f64 {
    let last = corpus
        .iter()
        .flat_map(|p| p.tests.iter().map(|t| t.test_time_days))
        .fold(0.0, f64::max);
    7.0 * (last / 7.0).ceil().max(1.0)
}

/// Checks whether a configuration can run on the corpus.
fn infeasibility(corpus: &[PatientRecord], exp: &ExperimentConfig) -> Option<String> {
    let span = corpus_span_days(corpus);
    if exp.window_days > span {
        return Some(format!(
            "{}: window of {} days exceeds the corpus span of {span} days",
            exp.name, exp.window_days
        ));
    }
    for p in corpus {
        for t in &p.tests {
            if t.rate_hz % exp.rate_hz != 0 {
                return Some(format!(
                    "{}: recordings at {} Hz cannot be block-averaged to {} Hz",
                    exp.name, t.rate_hz, exp.rate_hz
                ));
            }
        }
    }
    None
}

/// Trains every feasible configuration once per seed and reports test
/// metrics as mean ± std rows.
pub fn run_experiment_suite(
    corpus: &[PatientRecord],
    experiments: &[ExperimentConfig],
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    seeds: &[u64],
) -> Result<SuiteOutput, ModelError> {
    if seeds.is_empty() {
        return Err(ModelError::InvalidInput("at least one seed is required".into()));
    }
    let mut out = SuiteOutput {
        rows: Vec::new(),
        runs: Vec::new(),
        notes: Vec::new(),
    };
    for exp in experiments {
        if let Some(note) = infeasibility(corpus, exp) {
            out.notes.push(note);
            continue;
        }
        let model_config = ModelConfig {
            ablation: exp.ablation,
            window_days: exp.window_days,
            rate_hz: exp.rate_hz,
            ..base_model.clone()
        };
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let outcome = train(corpus, &model_config, &TrainConfig { seed, ..base_train.clone() })?;
            let test: Vec<PatientRecord> = outcome.split.test.iter().map(|&i| corpus[i].clone()).collect();
            let (metrics, _) = evaluate(&outcome.model, &prepare_corpus(&test, &model_config)?)?;
            runs.push(metrics);
        }
        out.rows.push(MetricsRow::from_runs(exp.name.clone(), &runs));
        out.runs.push(runs);
    }
    Ok(out)
}

pub fn write_rows_csv<W: Write>(writer: W, rows: &[MetricsRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record(&[
            r.model.clone(),
            format!("{:.6}", r.f1_mean),
            format!("{:.6}", r.f1_std),
            format!("{:.6}", r.precision_mean),
            format!("{:.6}", r.precision_std),
            format!("{:.6}", r.recall_mean),
            format!("{:.6}", r.recall_std),
            format!("{:.6}", r.benefit),
            format!("{:.6}", r.cost),
            format!("{:.6}", r.net),
        ])?;
    }
    w.flush()?;
    Ok(())
}
