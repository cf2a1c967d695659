//! Per-patient interpretation: ranked trend prototypes with their curves,
//! the most severe symptom's prototype traced back to the training patch it
//! resembles most, and gradient-based importance over that patch's input.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::encoder::{self, BnMode, ReceptiveField};
use crate::gait::{detect_peaks, PeakConfig};
use crate::model::{prepare_patient, ModelError, PreparedPatient, Prediction, TempPNet};
use crate::prototype::{self, time_encode, trend_value};
use crate::sensor::{PatientRecord, Task, Vec3};

/// Scores above this count as inside the empirical receptive field.
pub const IMPORTANCE_EPS: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum InterpretError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Invalid(String),
    #[error("unknown patient {0}")]
    UnknownPatient(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// The walking test and patch most similar to a symptom prototype.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceLocation {
    /// Index into the searched patients.
    pub patient: usize,
    pub patient_id: String,
    /// Test index in time order.
    pub test: usize,
    /// Patch index over all three segments.
    pub patch: usize,
    pub score: f64,
}

/// Exhaustive argmax of symptom `m`'s patch score over patients, tests and
/// patches; ties go to the lowest `(patient, test, patch)`.
pub fn locate_prototype_source(
    model: &TempPNet,
    patients: &[PreparedPatient],
    m: usize,
) -> Result<SourceLocation, InterpretError> {
    let num_m = model.config.prototypes.num_symptoms;
    if m >= num_m {
        return Err(InterpretError::Invalid(format!("symptom {m} outside 0..{num_m}")));
    }
    if patients.is_empty() {
        return Err(InterpretError::Invalid("no patients to search".into()));
    }
    let n_o = model.config.encoder.num_patches();
    let predictions = model.predict_prepared(patients, 16)?;
    let mut best: Option<SourceLocation> = None;
    for (u, pred) in predictions.iter().enumerate() {
        for i in 0..pred.times.len() {
            for o in 0..n_o {
                let score = pred.patch_scores[(i * n_o + o) * num_m + m];
                if best.as_ref().is_none_or(|b| score > b.score) {
                    best = Some(SourceLocation {
                        patient: u,
                        patient_id: pred.patient_id.clone(),
                        test: i,
                        patch: o,
                        score,
                    });
                }
            }
        }
    }
    Ok(best.expect("at least one test"))
}

/// Gradient importance of every input sample of the segment holding a patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub segment: Task,
    /// `‖∂h_o/∂a_l‖_F` for every sample `l` of the segment.
    pub scores: Vec<f64>,
    /// Contiguous span (exclusive end) where scores exceed [`IMPORTANCE_EPS`].
    pub field: Option<(usize, usize)>,
}

/// Frobenius norm of the Jacobian of patch embedding `o` with respect to
/// each input sample, in inference mode. `input` is one prepared test
/// (`3 segments × 3 axes × input_len`).
pub fn importance_scores(model: &TempPNet, input: &[f64], o: usize) -> Result<Importance, InterpretError> {
    let ec = &model.config.encoder;
    let len = ec.input_len;
    if input.len() != 9 * len {
        return Err(InterpretError::Invalid(format!(
            "test input has {} values, expected {}",
            input.len(),
            9 * len
        )));
    }
    let per = ec.patches_per_segment();
    if o >= ec.num_patches() {
        return Err(InterpretError::Invalid(format!("patch {o} outside 0..{}", ec.num_patches())));
    }
    let seg = o / per;
    let local = o % per;
    let mut g = Graph::new();
    let vars = model.register(&mut g);
    let x = g.param(Tensor::new([1, 3, len], input[seg * 3 * len..(seg + 1) * 3 * len].to_vec()).map_err(ModelError::from)?);
    let enc = encoder::forward(ec, &mut g, &vars, x, BnMode::Eval(&model.buffers)).map_err(ModelError::from)?;
    let ne = ec.embedding_dim();
    let mut sq = vec![0.0; len];
    for e in 0..ne {
        let mut seed = vec![0.0; ne * per];
        seed[e * per + local] = 1.0;
        let seed = Tensor::new([1, ne, per], seed).map_err(ModelError::from)?;
        let grads = g.backward_seeded(&[(enc.patches, seed)]).map_err(ModelError::from)?;
        let dx = grads.get_or_zeros(x);
        for c in 0..3 {
            for (l, acc) in sq.iter_mut().enumerate() {
                let d = dx.data()[c * len + l];
                *acc += d * d;
            }
        }
    }
    let scores: Vec<f64> = sq.into_iter().map(f64::sqrt).collect();
    let first = scores.iter().position(|&s| s > IMPORTANCE_EPS);
    let last = scores.iter().rposition(|&s| s > IMPORTANCE_EPS);
    Ok(Importance {
        segment: Task::ALL[seg],
        scores,
        field: first.zip(last).map(|(a, b)| (a, b + 1)),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedTrend {
    pub k: usize,
    pub depression: bool,
    pub strength: f64,
    /// Inferred start time; absent when the model does not infer one.
    pub start_time: Option<f64>,
}

/// Trend prototype `k` sampled on its own timeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendCurve {
    pub k: usize,
    pub t_days: Vec<f64>,
    /// `values[j][m]` is symptom `m` at `t_days[j]`.
    pub values: Vec<Vec<f64>>,
    /// The patient's tests on the same timeline, `t_i − t0`.
    pub patient_days: Vec<f64>,
}

/// Walking-pattern proxies of one segment: the mean interval between
/// acceleration-magnitude peaks, and cadence times the magnitude's standard
/// deviation as a stand-in for walking speed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GaitSummary {
    pub stride_interval_s: Option<f64>,
    pub speed_proxy: Option<f64>,
}

pub fn gait_summary(samples: &[Vec3], rate_hz: f64) -> GaitSummary {
    let mag: Vec<f64> = samples.iter().map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()).collect();
    let peaks = detect_peaks(&mag, PeakConfig::default());
    if peaks.len() < 2 {
        return GaitSummary::default();
    }
    let interval = (peaks[peaks.len() - 1] - peaks[0]) as f64 / (peaks.len() - 1) as f64 / rate_hz;
    let n = mag.len() as f64;
    let mean = mag.iter().sum::<f64>() / n;
    let sd = (mag.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n).sqrt();
    GaitSummary {
        stride_interval_s: Some(interval),
        speed_proxy: Some(sd / interval),
    }
}

/// Mean of each proxy over the walking segments of non-depressed patients.
pub fn usual_gait(corpus: &[PatientRecord]) -> GaitSummary {
    let (mut si, mut sp) = (Vec::new(), Vec::new());
    for p in corpus.iter().filter(|p| p.label == 0) {
        for t in &p.tests {
            for seg in [Task::Outbound, Task::Return] {
                let s = gait_summary(t.segment(seg), f64::from(t.rate_hz));
                si.extend(s.stride_interval_s);
                sp.extend(s.speed_proxy);
            }
        }
    }
    let avg = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    GaitSummary {
        stride_interval_s: avg(&si),
        speed_proxy: avg(&sp),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymptomView {
    pub m: usize,
    pub source: SourceLocation,
    /// Field implied by the kernel and pooling arithmetic.
    pub receptive_field: ReceptiveField,
    pub importance: Importance,
    /// The source segment as fed to the encoder, `3 × input_len`.
    pub signal: [Vec<f64>; 3],
    pub source_gait: GaitSummary,
    pub usual_gait: GaitSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpretationReport {
    pub patient_id: String,
    pub probability: f64,
    pub predicted_label: u8,
    pub times: Vec<f64>,
    /// Strongest first; lower index breaks ties.
    pub trends: Vec<RankedTrend>,
    pub top_trend: Option<TrendCurve>,
    /// The patient's severity series of every symptom, `M × N`.
    pub severity: Vec<Vec<f64>>,
    pub top_symptom: SymptomView,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub samples_per_day: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self { samples_per_day: 4 }
    }
}

fn rank_trends(model: &TempPNet, pred: &Prediction) -> Vec<RankedTrend> {
    let pc = &model.config.prototypes;
    let mut out: Vec<RankedTrend> = pred
        .strengths
        .iter()
        .enumerate()
        .map(|(k, &s)| RankedTrend {
            k,
            depression: pc.is_depression_trend(k),
            strength: s,
            start_time: pred.start_times.get(k).copied(),
        })
        .collect();
    out.sort_by(|a, b| b.strength.total_cmp(&a.strength).then(a.k.cmp(&b.k)));
    out
}

/// Samples trend `k` at `samples_per_day` points per day over
/// `[0, horizon + window]`, both ends included.
pub fn trend_curve(model: &TempPNet, k: usize, samples_per_day: usize, patient_times: &[f64], t0: Option<f64>) -> Result<TrendCurve, InterpretError> {
    let pc = &model.config.prototypes;
    if samples_per_day == 0 {
        return Err(InterpretError::Invalid("samples per day must be positive".into()));
    }
    let protos = model
        .params
        .get(prototype::TREND_PROTOTYPES)
        .ok_or_else(|| InterpretError::Invalid("model has no trend prototypes".into()))?;
    let omega = model.params[prototype::TREND_OMEGA].data();
    let theta = model.params[prototype::TREND_THETA].data();
    let per = pc.num_symptoms * 2 * pc.time_dim;
    let proto = &protos.data()[k * per..(k + 1) * per];
    let span = pc.horizon_days + model.config.window_days;
    let steps = (span * samples_per_day as f64).round() as usize;
    let t_days: Vec<f64> = (0..=steps).map(|j| j as f64 / samples_per_day as f64).collect();
    let values = t_days
        .iter()
        .map(|&t| trend_value(proto, &time_encode(t, omega, theta)).1)
        .collect();
    let shift = t0.unwrap_or(0.0);
    Ok(TrendCurve {
        k,
        t_days,
        values,
        patient_days: patient_times.iter().map(|t| t - shift).collect(),
    })
}

/// Indices of the tests the model sees, in time order.
fn model_tests(patient: &PatientRecord, window_days: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..patient.tests.len())
        .filter(|&i| patient.tests[i].test_time_days <= window_days)
        .collect();
    idx.sort_by(|&a, &b| patient.tests[a].test_time_days.total_cmp(&patient.tests[b].test_time_days));
    idx
}

/// Builds the report for `patient_id`; symptom prototypes are traced back
/// through the whole corpus.
pub fn interpret_patient(
    model: &TempPNet,
    corpus: &[PatientRecord],
    patient_id: &str,
    options: ReportOptions,
) -> Result<InterpretationReport, InterpretError> {
    let record = corpus
        .iter()
        .find(|p| p.patient_id == patient_id)
        .ok_or_else(|| InterpretError::UnknownPatient(patient_id.to_string()))?;
    let pred = model.predict(record)?;
    let (m_count, n) = (model.config.prototypes.num_symptoms, pred.times.len());
    let severity: Vec<Vec<f64>> = (0..m_count).map(|m| pred.severity[m * n..(m + 1) * n].to_vec()).collect();

    let trends = rank_trends(model, &pred);
    let top_trend = match trends.first() {
        Some(t) => Some(trend_curve(model, t.k, options.samples_per_day, &pred.times, t.start_time)?),
        None => None,
    };

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let m = (0..m_count).fold(0, |best, m| if mean(&severity[m]) > mean(&severity[best]) { m } else { best });
    let prepared: Vec<PreparedPatient> = corpus
        .iter()
        .map(|p| prepare_patient(p, &model.config))
        .collect::<Result<_, _>>()?;
    let source = locate_prototype_source(model, &prepared, m)?;
    let input = prepared[source.patient].test_input(source.test);
    let importance = importance_scores(model, input, source.patch)?;
    let len = model.config.encoder.input_len;
    let seg = importance.segment as usize;
    let base = seg * 3 * len;
    let signal = [0, 1, 2].map(|c| input[base + c * len..base + (c + 1) * len].to_vec());
    let src = &corpus[source.patient];
    let test = &src.tests[model_tests(src, model.config.window_days)[source.test]];
    let source_gait = gait_summary(test.segment(importance.segment), f64::from(test.rate_hz));
    let receptive_field = encoder::receptive_field(&model.config.encoder, source.patch).map_err(ModelError::from)?;

    Ok(InterpretationReport {
        patient_id: pred.patient_id.clone(),
        probability: pred.probability,
        predicted_label: pred.predicted_label(),
        times: pred.times.clone(),
        trends,
        top_trend,
        severity,
        top_symptom: SymptomView {
            m,
            source,
            receptive_field,
            importance,
            signal,
            source_gait,
            usual_gait: usual_gait(corpus),
        },
    })
}

/// Writes `report.json`, `trend_<k>.csv/.svg` for the top trend and
/// `symptom_<m>.csv/.svg` for the top symptom into `out_dir`.
pub fn render_report(
    model: &TempPNet,
    corpus: &[PatientRecord],
    patient_id: &str,
    out_dir: &Path,
    options: ReportOptions,
) -> Result<InterpretationReport, InterpretError> {
    let report = interpret_patient(model, corpus, patient_id, options)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    if let Some(curve) = &report.top_trend {
        fs::write(out_dir.join(format!("trend_{}.csv", curve.k)), trend_csv(curve))?;
        fs::write(out_dir.join(format!("trend_{}.svg", curve.k)), trend_svg(curve))?;
    }
    let sym = &report.top_symptom;
    fs::write(out_dir.join(format!("symptom_{}.csv", sym.m)), symptom_csv(sym))?;
    fs::write(out_dir.join(format!("symptom_{}.svg", sym.m)), symptom_svg(sym))?;
    Ok(report)
}

pub fn trend_csv(curve: &TrendCurve) -> String {
    let m = curve.values.first().map_or(0, Vec::len);
    let mut out = String::from("t_days");
    for i in 0..m {
        write!(out, ",severity_{i}").unwrap();
    }
    out.push('\n');
    for (t, row) in curve.t_days.iter().zip(&curve.values) {
        write!(out, "{t}").unwrap();
        for v in row {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn symptom_csv(view: &SymptomView) -> String {
    let mut out = String::from("sample_index,x,y,z,importance\n");
    for (l, imp) in view.importance.scores.iter().enumerate() {
        writeln!(out, "{l},{},{},{},{imp}", view.signal[0][l], view.signal[1][l], view.signal[2][l]).unwrap();
    }
    out
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 320.0;
const PAD: f64 = 40.0;
const COLORS: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn polyline(xs: &[f64], ys: &[f64], (x0, x1): (f64, f64), (y0, y1): (f64, f64), color: &str) -> String {
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0).max(1e-12) * (WIDTH - 2.0 * PAD);
    let sy = |y: f64| HEIGHT - PAD - (y - y0) / (y1 - y0).max(1e-12) * (HEIGHT - 2.0 * PAD);
    let pts: Vec<String> = xs.iter().zip(ys).map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
    format!("<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n", pts.join(" "))
}

fn svg_frame(title: &str, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\">\n\
         <rect x=\"{PAD}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>\n\
         <text x=\"{PAD}\" y=\"{}\" font-size=\"14\">{title}</text>\n{body}</svg>\n",
        WIDTH - 2.0 * PAD,
        HEIGHT - 2.0 * PAD,
        PAD - 10.0
    )
}

pub fn trend_svg(curve: &TrendCurve) -> String {
    let x_range = (curve.t_days[0], *curve.t_days.last().expect("non-empty"));
    let m = curve.values.first().map_or(0, Vec::len);
    let mut body = String::new();
    for i in 0..m {
        let ys: Vec<f64> = curve.values.iter().map(|r| r[i]).collect();
        body += &polyline(&curve.t_days, &ys, x_range, (0.0, 1.0), COLORS[i % COLORS.len()]);
    }
    svg_frame(&format!("trend prototype {} (severity vs. days)", curve.k), &body)
}

pub fn symptom_svg(view: &SymptomView) -> String {
    let n = view.importance.scores.len();
    let xs: Vec<f64> = (0..n).map(|l| l as f64).collect();
    let lo = view.signal.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = view.signal.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut body = String::new();
    if let Some((a, b)) = view.importance.field {
        let scale = (WIDTH - 2.0 * PAD) / (n.max(2) - 1) as f64;
        writeln!(
            body,
            "<rect x=\"{:.2}\" y=\"{PAD}\" width=\"{:.2}\" height=\"{}\" fill=\"#fdd\"/>",
            PAD + a as f64 * scale,
            (b - a - 1) as f64 * scale,
            HEIGHT - 2.0 * PAD
        )
        .unwrap();
    }
    for (c, axis) in view.signal.iter().enumerate() {
        body += &polyline(&xs, axis, (0.0, (n.max(2) - 1) as f64), (lo, hi), COLORS[c]);
    }
    let peak = view.importance.scores.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        let ys: Vec<f64> = view.importance.scores.iter().map(|s| s / peak).collect();
        body += &polyline(&xs, &ys, (0.0, (n.max(2) - 1) as f64), (0.0, 1.0), "#d62728");
    }
    svg_frame(
        &format!("symptom prototype {} ({} segment)", view.m, view.importance.segment.name()),
        &body,
    )
}
