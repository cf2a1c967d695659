//! Synthetic walking-test corpora with planted, class-dependent symptom
//! trajectories.
//!
//! Each patient has a baseline gait (step frequency, stride and bounce
//! amplitudes). A latent severity in [0, 1] slows the steps and shortens
//! the strides. Depressed patients follow rising severity trajectories;
//! non-depressed patients follow falling or flat, fluctuating ones. Test
//! times are drawn within the observation window, so a patient's first test
//! can fall anywhere along their trajectory.

use std::f64::consts::PI;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::sensor::{write_corpus, PatientRecord, SensorError, Vec3, WalkingTest};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Baseline gait of one synthetic patient and how severity degrades it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaitProfile {
    /// Steps per second at severity 0.
    pub step_hz: f64,
    /// Forward acceleration amplitude (g) at severity 0.
    pub stride_amp: f64,
    /// Vertical acceleration amplitude (g) at severity 0.
    pub bounce_amp: f64,
    /// Standard deviation of additive sensor noise (g).
    pub noise: f64,
    /// Fractional step-frequency loss at severity 1.
    pub freq_coupling: f64,
    /// Fractional amplitude loss at severity 1.
    pub amp_coupling: f64,
}

impl GaitProfile {
    pub fn step_hz_at(&self, severity: f64) -> f64 {
        self.step_hz * (1.0 - self.freq_coupling * severity.clamp(0.0, 1.0))
    }

    pub fn amplitude_factor(&self, severity: f64) -> f64 {
        1.0 - self.amp_coupling * severity.clamp(0.0, 1.0)
    }

    /// Cadence times stride length, up to a constant.
    pub fn speed_proxy(&self, severity: f64) -> f64 {
        self.step_hz_at(severity) * self.stride_amp * self.amplitude_factor(severity)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Rise,
    RiseWithDips,
    Fall,
    FlatFluctuate,
}

impl TrajectoryKind {
    pub fn is_depressed(self) -> bool {
        matches!(self, Self::Rise | Self::RiseWithDips)
    }
}

/// Severity over the observation window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverityTrajectory {
    pub kind: TrajectoryKind,
    pub start: f64,
    pub end: f64,
    /// Depth of the dips or amplitude of the fluctuation.
    pub wobble: f64,
    /// Centres of the dips, or the fluctuation period, in days.
    pub wobble_days: Vec<f64>,
    pub window_days: f64,
}

impl SeverityTrajectory {
    /// Severity at day `t`, clamped to [0, 1].
    pub fn at(&self, t: f64) -> f64 {
        let frac = (t / self.window_days).clamp(0.0, 1.0);
        let base = self.start + (self.end - self.start) * frac;
        let v = match self.kind {
            TrajectoryKind::Rise | TrajectoryKind::Fall => base,
            TrajectoryKind::RiseWithDips => {
                base - self
                    .wobble_days
                    .iter()
                    .map(|c| self.wobble * (-(t - c).powi(2) / 2.0).exp())
                    .sum::<f64>()
            }
            TrajectoryKind::FlatFluctuate => {
                let period = self.wobble_days.first().copied().unwrap_or(7.0);
                base + self.wobble * (2.0 * PI * t / period).sin()
            }
        };
        v.clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub window_days: f64,
    pub rate_hz: u32,
    pub max_tests: usize,
    /// Nominal walking-segment duration; actual lengths vary by ±10 %.
    pub walk_seconds: f64,
    pub rest_seconds: f64,
    pub step_hz_range: (f64, f64),
    pub stride_amp_range: (f64, f64),
    pub bounce_amp_range: (f64, f64),
    pub noise: f64,
    pub freq_coupling: f64,
    pub amp_coupling: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            window_days: 14.0,
            rate_hz: 10,
            max_tests: 8,
            walk_seconds: 30.0,
            rest_seconds: 30.0,
            step_hz_range: (1.8, 2.0),
            stride_amp_range: (0.15, 0.45),
            bounce_amp_range: (0.15, 0.45),
            noise: 0.05,
            freq_coupling: 0.5,
            amp_coupling: 0.5,
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo..hi)
}

pub fn sample_profile<R: Rng + ?Sized>(config: &SynthConfig, rng: &mut R) -> GaitProfile {
    GaitProfile {
        step_hz: uniform(rng, config.step_hz_range),
        stride_amp: uniform(rng, config.stride_amp_range),
        bounce_amp: uniform(rng, config.bounce_amp_range),
        noise: config.noise,
        freq_coupling: config.freq_coupling,
        amp_coupling: config.amp_coupling,
    }
}

/// Draws a class-consistent trajectory: rising kinds for depressed patients,
/// falling or flat ones otherwise.
pub fn sample_trajectory<R: Rng + ?Sized>(depressed: bool, window_days: f64, rng: &mut R) -> SeverityTrajectory {
    let kind = match (depressed, rng.random_bool(0.5)) {
        (true, true) => TrajectoryKind::Rise,
        (true, false) => TrajectoryKind::RiseWithDips,
        (false, true) => TrajectoryKind::Fall,
        (false, false) => TrajectoryKind::FlatFluctuate,
    };
    let (start, end, wobble, wobble_days) = match kind {
        TrajectoryKind::Rise => (uniform(rng, (0.2, 0.45)), uniform(rng, (0.7, 0.95)), 0.0, vec![]),
        TrajectoryKind::RiseWithDips => {
            let dips = (0..2).map(|_| rng.random_range(0.0..window_days)).collect();
            (uniform(rng, (0.2, 0.45)), uniform(rng, (0.7, 0.95)), uniform(rng, (0.1, 0.2)), dips)
        }
        TrajectoryKind::Fall => (uniform(rng, (0.45, 0.7)), uniform(rng, (0.0, 0.2)), 0.0, vec![]),
        TrajectoryKind::FlatFluctuate => {
            let level = uniform(rng, (0.05, 0.35));
            (level, level, uniform(rng, (0.0, 0.1)), vec![uniform(rng, (3.0, 7.0))])
        }
    };
    SeverityTrajectory {
        kind,
        start,
        end,
        wobble,
        wobble_days,
        window_days,
    }
}

/// One walking segment: oscillations at the step frequency (vertical and
/// forward) and half of it (lateral sway), plus gravity and noise.
fn walking_segment<R: Rng + ?Sized>(
    profile: &GaitProfile,
    severity: f64,
    rate_hz: u32,
    len: usize,
    rng: &mut R,
) -> Vec<Vec3> {
    let f = profile.step_hz_at(severity);
    let a = profile.amplitude_factor(severity);
    let phase = rng.random_range(0.0..2.0 * PI);
    let noise = Normal::new(0.0, profile.noise).expect("noise std");
    (0..len)
        .map(|l| {
            let t = l as f64 / f64::from(rate_hz);
            let w = 2.0 * PI * f * t + phase;
            [
                a * profile.stride_amp * (w + PI / 2.0).sin() + noise.sample(rng),
                0.3 * a * profile.stride_amp * (0.5 * w).sin() + noise.sample(rng),
                1.0 + a * profile.bounce_amp * w.sin() + noise.sample(rng),
            ]
        })
        .collect()
}

fn rest_segment<R: Rng + ?Sized>(profile: &GaitProfile, len: usize, rng: &mut R) -> Vec<Vec3> {
    let noise = Normal::new(0.0, 0.2 * profile.noise).expect("noise std");
    (0..len)
        .map(|_| [noise.sample(rng), noise.sample(rng), 1.0 + noise.sample(rng)])
        .collect()
}

/// Synthesizes one test at day `t` of the trajectory.
pub fn generate_test<R: Rng + ?Sized>(
    config: &SynthConfig,
    profile: &GaitProfile,
    severity: f64,
    t_days: f64,
    rng: &mut R,
) -> WalkingTest {
    let nominal = config.walk_seconds * f64::from(config.rate_hz);
    let mut walk_len = || (nominal * rng.random_range(0.9..1.1)).round() as usize;
    let (l1, l2) = (walk_len(), walk_len());
    let rest_len = (config.rest_seconds * f64::from(config.rate_hz)).round() as usize;
    WalkingTest {
        test_time_days: t_days,
        rate_hz: config.rate_hz,
        segments: [
            walking_segment(profile, severity, config.rate_hz, l1, rng),
            walking_segment(profile, severity, config.rate_hz, l2, rng),
            rest_segment(profile, rest_len, rng),
        ],
    }
}

/// Ground truth behind one generated patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientTruth {
    pub patient_id: String,
    pub label: u8,
    pub profile: GaitProfile,
    pub trajectory: SeverityTrajectory,
    /// Trajectory days of the tests before re-basing.
    pub absolute_days: Vec<f64>,
    pub severities: Vec<f64>,
}

/// Generates one patient: 1..=max_tests distinct test days drawn uniformly in
/// the window, sorted, evaluated on the trajectory, then re-based so the
/// first test is day 0.
pub fn generate_patient<R: Rng + ?Sized>(
    config: &SynthConfig,
    patient_id: String,
    profile: GaitProfile,
    trajectory: SeverityTrajectory,
    rng: &mut R,
) -> (PatientRecord, PatientTruth) {
    let n = rng.random_range(1..=config.max_tests);
    let mut days: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..config.window_days)).collect();
    days.sort_by(f64::total_cmp);
    days.dedup();
    let severities: Vec<f64> = days.iter().map(|&t| trajectory.at(t)).collect();
    let tests = days
        .iter()
        .zip(&severities)
        .map(|(&t, &s)| generate_test(config, &profile, s, t - days[0], rng))
        .collect();
    let label = u8::from(trajectory.kind.is_depressed());
    (
        PatientRecord {
            patient_id: patient_id.clone(),
            tests,
            label,
        },
        PatientTruth {
            patient_id,
            label,
            profile,
            trajectory,
            absolute_days: days,
            severities,
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub patients: usize,
    pub balance: f64,
    pub depressed: usize,
    pub config: SynthConfig,
    pub truth: Vec<PatientTruth>,
}

/// Generates a corpus in memory. Classes are exact counts
/// (`round(n·balance)` depressed) in a seeded random order; each patient
/// draws from its own RNG stream.
pub fn generate_corpus(
    n_patients: usize,
    balance: f64,
    seed: u64,
    config: &SynthConfig,
) -> Result<(Vec<PatientRecord>, Manifest), SynthError> {
    if !(0.0..=1.0).contains(&balance) {
        return Err(SynthError::Invalid(format!("balance {balance} outside [0, 1]")));
    }
    let depressed = (n_patients as f64 * balance).round() as usize;
    if n_patients < 2 || depressed == 0 || depressed == n_patients {
        return Err(SynthError::Invalid(format!(
            "{n_patients} patients at balance {balance} do not cover both classes"
        )));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<bool> = (0..n_patients).map(|i| i < depressed).collect();
    labels.shuffle(&mut master);
    let width = n_patients.to_string().len().max(3);
    let mut records = Vec::with_capacity(n_patients);
    let mut truth = Vec::with_capacity(n_patients);
    for (i, &is_depressed) in labels.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let profile = sample_profile(config, &mut rng);
        let trajectory = sample_trajectory(is_depressed, config.window_days, &mut rng);
        let id = format!("P{:0width$}", i + 1);
        let (record, t) = generate_patient(config, id, profile, trajectory, &mut rng);
        records.push(record);
        truth.push(t);
    }
    let manifest = Manifest {
        seed,
        patients: n_patients,
        balance,
        depressed,
        config: config.clone(),
        truth,
    };
    Ok((records, manifest))
}

/// Manifest path written next to a corpus file.
pub fn manifest_path(corpus: &Path) -> PathBuf {
    let mut name = corpus.file_stem().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    corpus.with_file_name(name)
}

/// Writes the corpus and its manifest.
pub fn write_generated(path: &Path, records: &[PatientRecord], manifest: &Manifest) -> Result<PathBuf, SynthError> {
    write_corpus(path, records)?;
    let mpath = manifest_path(path);
    let mut f = File::create(&mpath)?;
    serde_json::to_writer_pretty(&mut f, manifest)?;
    f.write_all(b"\n")?;
    Ok(mpath)
}
