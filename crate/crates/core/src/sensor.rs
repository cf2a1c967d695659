//! Walking-test data model and preprocessing: global-frame rotation,
//! resampling, fixed-length shaping, rotation augmentation, survey labels and
//! JSON Lines corpus I/O.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];
/// Orientation quaternion in `[x, y, z, w]` order.
pub type Quaternion = [f64; 4];

/// Quaternions further than this from unit norm are treated as corrupt.
pub const QUATERNION_NORM_TOLERANCE: f64 = 1e-3;
/// Default observation window in days.
pub const DEFAULT_WINDOW_DAYS: f64 = 14.0;
/// Rate the model consumes.
pub const MODEL_RATE_HZ: u32 = 10;
/// Samples per segment at [`MODEL_RATE_HZ`].
pub const SEGMENT_LEN: usize = 300;
/// Highest attainable score on the depression items of the survey.
pub const MAX_SURVEY_SCORE: u32 = 24;
/// Scores strictly above this are labelled depressed.
pub const SURVEY_THRESHOLD: u32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum SensorError {
    #[error("quaternion has zero norm")]
    ZeroQuaternion,
    #[error("cannot resample from {from} Hz to {to} Hz: rates must be positive and divisible")]
    ResampleRate { from: u32, to: u32 },
    #[error("survey score {0} is outside 0..={MAX_SURVEY_SCORE}")]
    ScoreOutOfRange(i64),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("patient {patient}: test at day {t_days} lies outside the {window_days}-day observation window")]
    OutsideWindow {
        patient: String,
        t_days: f64,
        window_days: f64,
    },
    #[error("patient {0} appears in more than one block of the corpus")]
    DuplicatePatient(String),
    #[error("patient {0} has conflicting labels")]
    LabelConflict(String),
}

/// One raw reading: local-frame acceleration (g) and device orientation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawSample {
    pub accel_local: Vec3,
    pub quaternion: Option<Quaternion>,
}

/// The three tasks of a walking test, in concatenation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Outbound,
    Return,
    Rest,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Outbound, Task::Return, Task::Rest];

    pub fn name(self) -> &'static str {
        match self {
            Task::Outbound => "outbound",
            Task::Return => "return",
            Task::Rest => "rest",
        }
    }
}

/// One walking test: global-frame acceleration for each task segment.
#[derive(Clone, Debug, PartialEq)]
pub struct WalkingTest {
    /// Days since the patient's first test.
    pub test_time_days: f64,
    pub rate_hz: u32,
    /// Outbound, return and rest, in that order.
    pub segments: [Vec<Vec3>; 3],
}

impl WalkingTest {
    pub fn segment(&self, task: Task) -> &[Vec3] {
        &self.segments[task as usize]
    }

    pub fn map_samples(&self, f: impl Fn(Vec3) -> Vec3) -> Self {
        Self {
            test_time_days: self.test_time_days,
            rate_hz: self.rate_hz,
            segments: self
                .segments
                .clone()
                .map(|s| s.into_iter().map(&f).collect()),
        }
    }

    pub fn resampled(&self, to_hz: u32) -> Result<Self, SensorError> {
        let mut segments: [Vec<Vec3>; 3] = Default::default();
        for (dst, src) in segments.iter_mut().zip(&self.segments) {
            *dst = resample(src, self.rate_hz, to_hz)?;
        }
        Ok(Self {
            test_time_days: self.test_time_days,
            rate_hz: to_hz,
            segments,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    /// Ordered by time, the first at day 0.
    pub tests: Vec<WalkingTest>,
    /// 1 = depressed.
    pub label: u8,
}

impl PatientRecord {
    pub fn times(&self) -> Vec<f64> {
        self.tests.iter().map(|t| t.test_time_days).collect()
    }

    pub fn is_depressed(&self) -> bool {
        self.label == 1
    }
}

fn norm3(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn mat_vec(r: &Mat3, v: Vec3) -> Vec3 {
    [
        r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
        r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
        r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
    ]
}

/// Rotation matrix of the quaternion `[x, y, z, w]`, normalized first.
pub fn quaternion_to_rotation(q: Quaternion) -> Result<Mat3, SensorError> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(SensorError::ZeroQuaternion);
    }
    let [x, y, z, w] = q.map(|v| v / n);
    Ok([
        [
            w * w + x * x - y * y - z * z,
            2.0 * x * y - 2.0 * w * z,
            2.0 * x * z + 2.0 * w * y,
        ],
        [
            2.0 * x * y + 2.0 * w * z,
            w * w - x * x + y * y - z * z,
            2.0 * y * z - 2.0 * w * x,
        ],
        [
            2.0 * x * z - 2.0 * w * y,
            2.0 * y * z + 2.0 * w * x,
            w * w - x * x - y * y + z * z,
        ],
    ])
}

/// Rotates each sample into the global frame with its own orientation.
///
/// Samples without a quaternion, or whose quaternion is more than
/// [`QUATERNION_NORM_TOLERANCE`] off unit norm, are dropped; the second
/// element of the result counts them.
pub fn to_global_frame(samples: &[RawSample]) -> (Vec<Vec3>, usize) {
    let mut out = Vec::with_capacity(samples.len());
    let mut dropped = 0;
    for s in samples {
        let rotation = s.quaternion.and_then(|q| {
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
                return None;
            }
            quaternion_to_rotation(q).ok()
        });
        match rotation {
            Some(r) => out.push(mat_vec(&r, s.accel_local)),
            None => dropped += 1,
        }
    }
    (out, dropped)
}

/// Decimates by averaging non-overlapping blocks of `from_hz / to_hz`
/// samples; a trailing partial block is averaged as-is.
pub fn resample(segment: &[Vec3], from_hz: u32, to_hz: u32) -> Result<Vec<Vec3>, SensorError> {
    if from_hz == 0 || to_hz == 0 || from_hz % to_hz != 0 {
        return Err(SensorError::ResampleRate {
            from: from_hz,
            to: to_hz,
        });
    }
    let block = (from_hz / to_hz) as usize;
    Ok(segment
        .chunks(block)
        .map(|chunk| {
            let mut acc = [0.0; 3];
            for s in chunk {
                for a in 0..3 {
                    acc[a] += s[a];
                }
            }
            acc.map(|v| v / chunk.len() as f64)
        })
        .collect())
}

/// Lays a segment out as a `3 × len` channel-major matrix, zero-padding on
/// the right or dropping trailing samples.
pub fn shape_segment(segment: &[Vec3], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; 3 * len];
    for (l, s) in segment.iter().take(len).enumerate() {
        for a in 0..3 {
            out[a * len + l] = s[a];
        }
    }
    out
}

/// Quaternion with a random axis drawn from normalized `Uniform(0, 1)`
/// components and a rotation angle drawn from `Uniform(0, 2π)`.
pub fn sample_random_quaternion<R: Rng + ?Sized>(rng: &mut R) -> Quaternion {
    loop {
        let axis: Vec3 = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let n = norm3(axis);
        if n == 0.0 {
            continue;
        }
        let theta = rng.random_range(0.0..2.0 * PI);
        return quaternion_from_axis_angle(axis.map(|v| v / n), theta);
    }
}

/// Quaternion of a rotation by `theta` about the unit vector `axis`.
pub fn quaternion_from_axis_angle(axis: Vec3, theta: f64) -> Quaternion {
    let (s, c) = (theta / 2.0).sin_cos();
    [axis[0] * s, axis[1] * s, axis[2] * s, c]
}

/// Applies one random rotation to every sample of all three segments.
pub fn augment_rotation<R: Rng + ?Sized>(test: &WalkingTest, rng: &mut R) -> WalkingTest {
    let r = quaternion_to_rotation(sample_random_quaternion(rng)).expect("unit quaternion");
    test.map_samples(|v| mat_vec(&r, v))
}

/// Depressed (1) when the survey score exceeds [`SURVEY_THRESHOLD`].
pub fn label_from_survey(score: i64) -> Result<u8, SensorError> {
    if !(0..=MAX_SURVEY_SCORE as i64).contains(&score) {
        return Err(SensorError::ScoreOutOfRange(score));
    }
    Ok(u8::from(score > SURVEY_THRESHOLD as i64))
}

/// Per-segment orientation arrays of a corpus line. Entries may be `null`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentQuaternions {
    #[serde(default)]
    pub outbound: Vec<Option<Quaternion>>,
    #[serde(default, rename = "return")]
    pub return_: Vec<Option<Quaternion>>,
    #[serde(default)]
    pub rest: Vec<Option<Quaternion>>,
}

/// One line of the corpus file: a single walking test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusLine {
    pub patient_id: String,
    pub label: u8,
    pub t_days: f64,
    pub rate_hz: u32,
    pub outbound: Vec<Vec3>,
    #[serde(rename = "return")]
    pub return_: Vec<Vec3>,
    pub rest: Vec<Vec3>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quaternions: Option<SegmentQuaternions>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadOptions {
    pub window_days: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            window_days: DEFAULT_WINDOW_DAYS,
        }
    }
}

/// Summary of what ingestion discarded.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub dropped_samples: usize,
}

fn line_to_test(line: CorpusLine) -> (WalkingTest, usize) {
    let mut dropped = 0;
    let raw = [line.outbound, line.return_, line.rest];
    let segments = match line.quaternions {
        None => raw,
        Some(q) => {
            let quats = [q.outbound, q.return_, q.rest];
            let mut out: [Vec<Vec3>; 3] = Default::default();
            for (i, (samples, qs)) in raw.into_iter().zip(quats).enumerate() {
                let samples: Vec<RawSample> = samples
                    .into_iter()
                    .enumerate()
                    .map(|(l, accel_local)| RawSample {
                        accel_local,
                        quaternion: qs.get(l).copied().flatten(),
                    })
                    .collect();
                let (global, d) = to_global_frame(&samples);
                dropped += d;
                out[i] = global;
            }
            out
        }
    };
    (
        WalkingTest {
            test_time_days: line.t_days,
            rate_hz: line.rate_hz,
            segments,
        },
        dropped,
    )
}

/// Reads a JSON Lines corpus. Each patient's lines must form one contiguous
/// block with a consistent label. Test times are re-based so that each
/// patient's first test is at day 0, and patients are returned sorted by id.
pub fn load_corpus(
    path: &Path,
    options: LoadOptions,
) -> Result<(Vec<PatientRecord>, LoadReport), SensorError> {
    let reader = BufReader::new(File::open(path)?);
    let mut patients: BTreeMap<String, PatientRecord> = BTreeMap::new();
    let mut current: Option<String> = None;
    let mut report = LoadReport::default();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CorpusLine = serde_json::from_str(&line).map_err(|e| SensorError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if parsed.label > 1 {
            return Err(SensorError::Parse {
                line: line_no,
                msg: format!("label must be 0 or 1, got {}", parsed.label),
            });
        }
        if !parsed.t_days.is_finite() || parsed.t_days < 0.0 || parsed.rate_hz == 0 {
            return Err(SensorError::Parse {
                line: line_no,
                msg: "t_days must be finite and non-negative, rate_hz positive".into(),
            });
        }
        let finite = [&parsed.outbound, &parsed.return_, &parsed.rest]
            .iter()
            .all(|seg| seg.iter().flatten().all(|v| v.is_finite()));
        if !finite {
            return Err(SensorError::Parse {
                line: line_no,
                msg: "non-finite sample".into(),
            });
        }
        let id = parsed.patient_id.clone();
        let label = parsed.label;
        if current.as_deref() != Some(id.as_str()) && patients.contains_key(&id) {
            return Err(SensorError::DuplicatePatient(id));
        }
        current = Some(id.clone());
        let (test, dropped) = line_to_test(parsed);
        report.dropped_samples += dropped;
        let record = patients.entry(id.clone()).or_insert_with(|| PatientRecord {
            patient_id: id.clone(),
            tests: Vec::new(),
            label,
        });
        if record.label != label {
            return Err(SensorError::LabelConflict(id));
        }
        record.tests.push(test);
    }
    let mut out = Vec::with_capacity(patients.len());
    for (_, mut record) in patients {
        record
            .tests
            .sort_by(|a, b| a.test_time_days.total_cmp(&b.test_time_days));
        let first = record.tests[0].test_time_days;
        for t in &mut record.tests {
            t.test_time_days -= first;
            if t.test_time_days > options.window_days {
                return Err(SensorError::OutsideWindow {
                    patient: record.patient_id.clone(),
                    t_days: t.test_time_days,
                    window_days: options.window_days,
                });
            }
        }
        out.push(record);
    }
    Ok((out, report))
}

pub fn patient_to_lines(patient: &PatientRecord) -> Vec<CorpusLine> {
    patient
        .tests
        .iter()
        .map(|t| CorpusLine {
            patient_id: patient.patient_id.clone(),
            label: patient.label,
            t_days: t.test_time_days,
            rate_hz: t.rate_hz,
            outbound: t.segments[0].clone(),
            return_: t.segments[1].clone(),
            rest: t.segments[2].clone(),
            quaternions: None,
        })
        .collect()
}

/// Writes global-frame records in the corpus format, one line per test.
pub fn write_corpus(path: &Path, patients: &[PatientRecord]) -> Result<(), SensorError> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in patients {
        for line in patient_to_lines(p) {
            let json = serde_json::to_string(&line).map_err(|e| SensorError::Parse {
                line: 0,
                msg: e.to_string(),
            })?;
            writeln!(w, "{json}")?;
        }
    }
    w.flush()?;
    Ok(())
}
