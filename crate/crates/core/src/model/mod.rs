//! The full network: encoder, symptom prototypes, trend prototypes with
//! start-time inference, and the signed classification layer; plus its
//! objective, training loop, ablations and checkpoint format.

mod checkpoint;
mod train;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, BatchStats, Graph, Tensor, Var};
use crate::encoder::{self, BnMode, EncoderConfig};
use crate::prototype::{self, PrototypeConfig, StartNetVars};
use crate::sensor::{self, Mat3, PatientRecord, SensorError, MODEL_RATE_HZ};

pub use checkpoint::{
    file_digest, load_checkpoint, read_checkpoint_bytes, save_checkpoint, write_checkpoint_bytes,
    CHECKPOINT_VERSION,
};
pub use train::{
    evaluate, split_corpus, train, EpochRecord, Split, TrainConfig, TrainOutcome,
};

/// `σ(Σ depression strengths − Σ non-depression strengths)`; the first
/// `k` strengths belong to depression trends.
pub fn depression_probability(strengths: &[f64], k: usize) -> f64 {
    let (pos, neg) = strengths.split_at(k);
    crate::autodiff::sigmoid(pos.iter().sum::<f64>() - neg.iter().sum::<f64>())
}

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error("unknown ablation `{0}` (expected none, no_t0, last_severity or avg_severity)")]
    UnknownAblation(String),
    #[error("{0}")]
    InvalidInput(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Model variants compared in the ablation study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Trend prototypes evaluated at the raw test times.
    NoT0,
    /// Logistic regression on the last severity column.
    LastSeverity,
    /// Logistic regression on the per-symptom mean severity.
    AvgSeverity,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Self::None, Self::NoT0, Self::LastSeverity, Self::AvgSeverity];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::NoT0 => "no_t0",
            Self::LastSeverity => "last_severity",
            Self::AvgSeverity => "avg_severity",
        }
    }

    pub fn uses_trends(self) -> bool {
        matches!(self, Self::None | Self::NoT0)
    }

    pub fn infers_start_time(self) -> bool {
        self == Self::None
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| ModelError::UnknownAblation(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub prototypes: PrototypeConfig,
    pub lambda_s: f64,
    pub lambda_t: f64,
    /// n_T, the observation window in days.
    pub window_days: f64,
    /// Sample rate of the encoder input.
    pub rate_hz: u32,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            prototypes: PrototypeConfig::default(),
            lambda_s: 0.1,
            lambda_t: 0.1,
            window_days: sensor::DEFAULT_WINDOW_DAYS,
            rate_hz: MODEL_RATE_HZ,
            ablation: Ablation::None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let p = &self.prototypes;
        let bad = |msg: String| Err(ModelError::InvalidInput(msg));
        if p.gamma >= 0.0 {
            return bad(format!("gamma must be negative, got {}", p.gamma));
        }
        if p.horizon_days <= 0.0 || self.window_days <= 0.0 {
            return bad("horizon and window must be positive".into());
        }
        if p.num_symptoms == 0 || p.trends_per_class == 0 || p.time_dim == 0 {
            return bad("M, K and n_d must be positive".into());
        }
        if self.rate_hz == 0 || self.encoder.patches_per_segment() == 0 {
            return bad(format!(
                "encoder input of {} samples is too short for the conv chain",
                self.encoder.input_len
            ));
        }
        Ok(())
    }
}

/// A test ready for the encoder: three `3 × input_len` segments, flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedPatient {
    pub patient_id: String,
    pub label: u8,
    pub times: Vec<f64>,
    /// `tests × 3 segments × 3 axes × input_len`.
    pub inputs: Vec<f64>,
    pub input_len: usize,
}

impl PreparedPatient {
    pub fn num_tests(&self) -> usize {
        self.times.len()
    }

    pub fn test_input(&self, i: usize) -> &[f64] {
        let per = 9 * self.input_len;
        &self.inputs[i * per..(i + 1) * per]
    }

    /// Copy with each test rotated by its own matrix.
    pub fn rotated(&self, rotations: &[Mat3]) -> Self {
        let l = self.input_len;
        let mut out = self.clone();
        for (i, r) in rotations.iter().enumerate() {
            for seg in 0..3 {
                let base = (i * 3 + seg) * 3 * l;
                for c in 0..l {
                    let v = [self.inputs[base + c], self.inputs[base + l + c], self.inputs[base + 2 * l + c]];
                    let w = sensor::mat_vec(r, v);
                    for a in 0..3 {
                        out.inputs[base + a * l + c] = w[a];
                    }
                }
            }
        }
        out
    }
}

/// Resamples to the model rate and shapes every segment. Tests after the
/// observation window are left out; the rest are ordered by time.
pub fn prepare_patient(patient: &PatientRecord, config: &ModelConfig) -> Result<PreparedPatient, ModelError> {
    if patient.tests.is_empty() {
        return Err(ModelError::InvalidInput(format!(
            "patient {} has no walking tests",
            patient.patient_id
        )));
    }
    let mut tests: Vec<_> = patient
        .tests
        .iter()
        .filter(|t| t.test_time_days <= config.window_days)
        .collect();
    tests.sort_by(|a, b| a.test_time_days.total_cmp(&b.test_time_days));
    let len = config.encoder.input_len;
    let mut inputs = Vec::with_capacity(tests.len() * 9 * len);
    let mut times = Vec::with_capacity(tests.len());
    for t in tests {
        let t = if t.rate_hz == config.rate_hz {
            t.clone()
        } else {
            t.resampled(config.rate_hz)?
        };
        for seg in &t.segments {
            inputs.extend(sensor::shape_segment(seg, len));
        }
        times.push(t.test_time_days);
    }
    Ok(PreparedPatient {
        patient_id: patient.patient_id.clone(),
        label: patient.label,
        times,
        inputs,
        input_len: len,
    })
}

pub fn prepare_corpus(corpus: &[PatientRecord], config: &ModelConfig) -> Result<Vec<PreparedPatient>, ModelError> {
    corpus.iter().map(|p| prepare_patient(p, config)).collect()
}

/// Graph handles for one patient's forward pass.
#[derive(Clone, Debug)]
pub struct PatientGraph {
    /// `(M, N)` clamped severities.
    pub severity: Var,
    /// `(2K)` trend strengths, when the variant has trends.
    pub strengths: Option<Var>,
    /// `(2K)` start times, when inferred.
    pub start_times: Option<Var>,
    /// Scalar logit of P(depressed).
    pub logit: Var,
}

pub struct BatchGraph {
    pub patients: Vec<PatientGraph>,
    /// `(T, n_e, n_o)` feature matrices of every test in the batch.
    pub features: Var,
    /// `(T, n_o, M)` patch scores.
    pub patch_scores: Var,
    pub stats: Vec<BatchStats>,
    pub shapes: Vec<(usize, usize)>,
}

/// Scalar pieces of the objective.
#[derive(Clone, Copy, Debug)]
pub struct LossGraph {
    pub total: Var,
    pub nll: Var,
    pub r_s: Var,
    pub r_t: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TempPNet {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

/// Everything one prediction is based on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub patient_id: String,
    pub probability: f64,
    pub logit: f64,
    pub times: Vec<f64>,
    /// `M × N`, row-major.
    pub severity: Vec<f64>,
    pub strengths: Vec<f64>,
    pub start_times: Vec<f64>,
    /// `N × n_o × M`.
    pub patch_scores: Vec<f64>,
}

impl Prediction {
    pub fn predicted_label(&self) -> u8 {
        u8::from(self.probability > 0.5)
    }
}

impl TempPNet {
    /// Freshly initialized network; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        encoder::init_params(&config.encoder, &mut rng, &mut params, &mut buffers);
        let ne = config.encoder.embedding_dim();
        prototype::init_symptom_params(&config.prototypes, ne, &mut rng, &mut params);
        if config.ablation.uses_trends() {
            prototype::init_trend_params(&config.prototypes, &mut rng, &mut params);
        }
        if config.ablation.infers_start_time() {
            prototype::init_start_params(&config.prototypes, ne, &mut rng, &mut params);
        }
        if !config.ablation.uses_trends() {
            let m = config.prototypes.num_symptoms;
            params.insert(HEAD_WEIGHT.into(), Tensor::zeros([m]));
            params.insert(HEAD_BIAS.into(), Tensor::zeros([1]));
        }
        Ok(Self {
            config,
            params,
            buffers,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Registers every parameter on `g`.
    pub fn register(&self, g: &mut Graph) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(k, t)| (k.clone(), g.param(t.clone())))
            .collect()
    }

    /// Builds the forward computation for a batch of patients. In training
    /// mode batchnorm uses the statistics of every segment in the batch.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        vars: &BTreeMap<String, Var>,
        batch: &[&PreparedPatient],
        train: bool,
    ) -> Result<BatchGraph, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::InvalidInput("empty batch".into()));
        }
        let len = self.config.encoder.input_len;
        let total: usize = batch.iter().map(|p| p.num_tests()).sum();
        let mut data = Vec::with_capacity(total * 9 * len);
        for p in batch {
            if p.input_len != len {
                return Err(ModelError::InvalidInput(format!(
                    "patient {} prepared for input length {}, model expects {len}",
                    p.patient_id, p.input_len
                )));
            }
            data.extend_from_slice(&p.inputs);
        }
        let x = g.constant(Tensor::new([3 * total, 3, len], data)?);
        let mode = if train { BnMode::Train } else { BnMode::Eval(&self.buffers) };
        let enc = encoder::forward(&self.config.encoder, g, vars, x, mode)?;
        let features = encoder::concat_segments(g, enc.patches)?;
        let pc = &self.config.prototypes;
        let (patch_scores, severity_all) =
            prototype::severity_graph(g, features, vars[prototype::SYMPTOM_PROTOTYPES], pc.gamma)?;

        let mut patients = Vec::with_capacity(batch.len());
        let mut offset = 0;
        for p in batch {
            let n = p.num_tests();
            let rows = g.slice(severity_all, 0, offset, offset + n)?;
            offset += n;
            let severity = g.transpose(rows)?;
            patients.push(self.patient_head(g, vars, severity, &p.times)?);
        }
        Ok(BatchGraph {
            patients,
            features,
            patch_scores,
            stats: enc.stats,
            shapes: enc.shapes,
        })
    }

    fn patient_head(
        &self,
        g: &mut Graph,
        vars: &BTreeMap<String, Var>,
        severity: Var,
        times: &[f64],
    ) -> Result<PatientGraph, ModelError> {
        let pc = &self.config.prototypes;
        let ablation = self.config.ablation;
        if ablation.uses_trends() {
            let start_times = if ablation.infers_start_time() {
                let net = StartNetVars::from_map(vars);
                Some(prototype::start_times_graph(g, severity, times, net, pc.horizon_days)?)
            } else {
                None
            };
            let trend = prototype::trend_strengths_graph(
                g,
                severity,
                times,
                start_times,
                vars[prototype::TREND_PROTOTYPES],
                vars[prototype::TREND_OMEGA],
                vars[prototype::TREND_THETA],
                pc.likelihood_scale,
            )?;
            let k = pc.trends_per_class;
            let signs: Vec<f64> = (0..2 * k).map(|i| if i < k { 1.0 } else { -1.0 }).collect();
            let signs = g.constant(Tensor::vector(signs));
            let signed = g.mul(trend.strengths, signs)?;
            let logit = g.sum(signed);
            Ok(PatientGraph {
                severity,
                strengths: Some(trend.strengths),
                start_times,
                logit,
            })
        } else {
            let m = pc.num_symptoms;
            let n = times.len();
            let feature = if ablation == Ablation::LastSeverity {
                let last = g.slice(severity, 1, n - 1, n)?;
                g.reshape(last, &[m])?
            } else {
                let sum = g.sum_axis(severity, 1)?;
                g.scale(sum, 1.0 / n as f64)
            };
            let weighted = g.mul(feature, vars[HEAD_WEIGHT])?;
            let z = g.sum(weighted);
            let b = g.reshape(vars[HEAD_BIAS], &[])?;
            let logit = g.add(z, b)?;
            Ok(PatientGraph {
                severity,
                strengths: None,
                start_times: None,
                logit,
            })
        }
    }

    /// Mean negative log-likelihood plus both regularizers. Class-specific
    /// terms cover the patients present and contribute 0 for an absent class.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        patients: &[PatientGraph],
        labels: &[u8],
    ) -> Result<LossGraph, ModelError> {
        if patients.is_empty() || patients.len() != labels.len() {
            return Err(ModelError::InvalidInput(format!(
                "{} patients with {} labels",
                patients.len(),
                labels.len()
            )));
        }
        let n = patients.len();
        let k = self.config.prototypes.trends_per_class;
        let mut nll_terms = Vec::with_capacity(n);
        let mut avg_pos = Vec::new();
        let mut avg_neg = Vec::new();
        let mut rt_pos = Vec::new();
        let mut rt_neg = Vec::new();
        for (pg, &y) in patients.iter().zip(labels) {
            let signed = if y == 1 { pg.logit } else { g.neg(pg.logit) };
            let ll = g.log_sigmoid(signed);
            nll_terms.push(g.reshape(ll, &[1])?);

            let cols = g.shape(pg.severity)[1];
            let sum = g.sum_axis(pg.severity, 1)?;
            let avg = g.scale(sum, 1.0 / cols as f64);
            let m = g.shape(avg)[0];
            let avg = g.reshape(avg, &[1, m])?;
            if y == 1 { avg_pos.push(avg) } else { avg_neg.push(avg) }

            if let Some(s) = pg.strengths {
                let pos = g.slice(s, 0, 0, k)?;
                let neg = g.slice(s, 0, k, 2 * k)?;
                let (right, wrong) = if y == 1 { (pos, neg) } else { (neg, pos) };
                let max_wrong = g.max_axis(wrong, 0)?;
                let min_right = g.min_axis(right, 0)?;
                let gap = g.sub(max_wrong, min_right)?;
                let gap = g.reshape(gap, &[1])?;
                if y == 1 { rt_pos.push(gap) } else { rt_neg.push(gap) }
            }
        }
        let all = g.concat(&nll_terms, 0)?;
        let mean_ll = g.mean(all);
        let nll = g.neg(mean_ll);

        let zero = g.constant(Tensor::scalar(0.0));
        let class_mean = |g: &mut Graph, rows: &[Var]| -> Result<Option<Var>, AutodiffError> {
            if rows.is_empty() {
                return Ok(None);
            }
            let stacked = g.concat(rows, 0)?;
            let sum = g.sum_axis(stacked, 0)?;
            Ok(Some(g.scale(sum, 1.0 / rows.len() as f64)))
        };
        let a_neg = class_mean(g, &avg_neg)?;
        let a_pos = class_mean(g, &avg_pos)?;
        let diff = match (a_neg, a_pos) {
            (Some(a), Some(b)) => g.sub(a, b)?,
            (Some(a), None) => a,
            (None, Some(b)) => g.neg(b),
            (None, None) => zero,
        };
        let r_s = g.mean(diff);

        let mut rt_parts = Vec::new();
        for gaps in [&rt_pos, &rt_neg] {
            if !gaps.is_empty() {
                let stacked = g.concat(gaps, 0)?;
                rt_parts.push(g.mean(stacked));
            }
        }
        let r_t = match rt_parts.as_slice() {
            [] => zero,
            [a] => *a,
            [a, b] => g.add(*a, *b)?,
            _ => unreachable!(),
        };

        let ws = g.scale(r_s, self.config.lambda_s);
        let wt = g.scale(r_t, self.config.lambda_t);
        let reg = g.add(ws, wt)?;
        let total = g.add(nll, reg)?;
        Ok(LossGraph { total, nll, r_s, r_t })
    }

    /// Inference-mode predictions, computed in chunks of `chunk` patients.
    pub fn predict_prepared(&self, patients: &[PreparedPatient], chunk: usize) -> Result<Vec<Prediction>, ModelError> {
        let mut out = Vec::with_capacity(patients.len());
        for group in patients.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let vars = self.register(&mut g);
            let refs: Vec<&PreparedPatient> = group.iter().collect();
            let bg = self.forward_graph(&mut g, &vars, &refs, false)?;
            let scores = g.value(bg.patch_scores).clone();
            let per_test = scores.len() / scores.shape()[0].max(1);
            let mut offset = 0;
            for (p, pg) in group.iter().zip(&bg.patients) {
                let n = p.num_tests();
                let logit = g.value(pg.logit).item();
                out.push(Prediction {
                    patient_id: p.patient_id.clone(),
                    probability: crate::autodiff::sigmoid(logit),
                    logit,
                    times: p.times.clone(),
                    severity: g.value(pg.severity).to_vec(),
                    strengths: pg.strengths.map(|v| g.value(v).to_vec()).unwrap_or_default(),
                    start_times: pg.start_times.map(|v| g.value(v).to_vec()).unwrap_or_default(),
                    patch_scores: scores.data()[offset * per_test..(offset + n) * per_test].to_vec(),
                });
                offset += n;
            }
        }
        Ok(out)
    }

    pub fn predict(&self, patient: &PatientRecord) -> Result<Prediction, ModelError> {
        let prepared = prepare_patient(patient, &self.config)?;
        Ok(self.predict_prepared(std::slice::from_ref(&prepared), 1)?.remove(0))
    }

    /// Inference-mode feature matrix `(n_e, n_o)` of one prepared test.
    pub fn encode_test(&self, input: &[f64]) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let vars = self.register(&mut g);
        let len = self.config.encoder.input_len;
        let x = g.constant(Tensor::new([3, 3, len], input.to_vec())?);
        let enc = encoder::forward(&self.config.encoder, &mut g, &vars, x, BnMode::Eval(&self.buffers))?;
        let f = encoder::concat_segments(&mut g, enc.patches)?;
        let t = g.value(f);
        Ok(t.reshaped([t.shape()[1], t.shape()[2]])?)
    }
}
