//! Handcrafted gait features and two simple reference classifiers over them.

use std::path::Path;

use crate::eval::{confusion_metrics, Metrics};
use crate::sensor::{PatientRecord, Vec3, WalkingTest};

pub const FEATURE_NAMES: [&str; 20] = [
    "u_x", "u_y", "u_z", "sigma_x", "sigma_y", "sigma_z", "u_v", "sigma_v", "alpha_x", "alpha_y",
    "alpha_z", "beta_x", "beta_y", "beta_z", "alpha_d", "beta_d", "V_x", "V_y", "V_z", "V_v",
];

/// Axes whose stride variability is computed, in feature order.
pub const STRIDE_AXES: [&str; 4] = ["x", "y", "z", "v"];

#[derive(Debug, thiserror::Error)]
pub enum GaitError {
    #[error("feature extraction needs at least 3 samples, got {0}")]
    TooShort(usize),
    #[error("training split contains a single class")]
    SingleClass,
    #[error("{0}")]
    Invalid(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PeakConfig {
    /// Minimum index distance between two accepted peaks.
    pub min_separation: usize,
}

impl Default for PeakConfig {
    fn default() -> Self {
        Self { min_separation: 3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureConfig {
    pub peaks: PeakConfig,
    /// Append the rest segment to outbound and return.
    pub include_rest: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            peaks: PeakConfig::default(),
            include_rest: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureVector {
    /// Values in [`FEATURE_NAMES`] order.
    pub values: [f64; 20],
    /// Per [`STRIDE_AXES`] entry: fewer than 3 peaks were found, so the
    /// variability was set to 0.
    pub too_few_peaks: [bool; 4],
}

impl FeatureVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        FEATURE_NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| self.values[i])
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard deviation around `m` with an explicit divisor.
fn spread(xs: &[f64], m: f64, divisor: usize) -> f64 {
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / divisor as f64).sqrt()
}

/// Strict local maxima above the series mean. Candidates closer than the
/// minimum separation are resolved in favour of the larger value, ties going
/// to the lower index. Returned in ascending order.
pub fn detect_peaks(series: &[f64], config: PeakConfig) -> Vec<usize> {
    if series.len() < 3 {
        return Vec::new();
    }
    let threshold = mean(series);
    let mut candidates: Vec<usize> = (1..series.len() - 1)
        .filter(|&i| series[i] > series[i - 1] && series[i] > series[i + 1] && series[i] > threshold)
        .collect();
    candidates.sort_by(|&a, &b| series[b].total_cmp(&series[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for c in candidates {
        if kept.iter().all(|&k| k.abs_diff(c) >= config.min_separation) {
            kept.push(c);
        }
    }
    kept.sort_unstable();
    kept
}

/// Sample standard deviation of the intervals between peaks, in seconds.
/// `None` when fewer than three peaks leave the statistic undefined.
pub fn stride_variability(peaks: &[usize], rate_hz: f64) -> Option<f64> {
    if peaks.len() < 3 {
        return None;
    }
    let dt: Vec<f64> = peaks
        .windows(2)
        .map(|w| (w[1] - w[0]) as f64 / rate_hz)
        .collect();
    Some(spread(&dt, mean(&dt), peaks.len() - 2))
}

fn norm(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Computes all twenty features of one sample sequence.
pub fn extract_features(
    samples: &[Vec3],
    rate_hz: f64,
    config: PeakConfig,
) -> Result<FeatureVector, GaitError> {
    let l = samples.len();
    if l < 3 {
        return Err(GaitError::TooShort(l));
    }
    let axis = |a: usize| samples.iter().map(|s| s[a]).collect::<Vec<_>>();
    let axes = [axis(0), axis(1), axis(2)];
    let magnitude: Vec<f64> = samples.iter().map(|&s| norm(s)).collect();
    let jerk: Vec<Vec3> = samples
        .windows(2)
        .map(|w| [w[1][0] - w[0][0], w[1][1] - w[0][1], w[1][2] - w[0][2]])
        .collect();
    let jerk_axes: Vec<Vec<f64>> = (0..3).map(|a| jerk.iter().map(|d| d[a]).collect()).collect();
    let jerk_mag: Vec<f64> = jerk.iter().map(|&d| norm(d)).collect();

    let mut values = [0.0; 20];
    for a in 0..3 {
        let u = mean(&axes[a]);
        values[a] = u;
        values[3 + a] = spread(&axes[a], u, l - 1);
        let alpha = mean(&jerk_axes[a]);
        values[8 + a] = alpha;
        values[11 + a] = spread(&jerk_axes[a], alpha, l - 2);
    }
    let u_v = mean(&magnitude);
    values[6] = u_v;
    values[7] = spread(&magnitude, u_v, l - 1);
    let alpha_d = mean(&jerk_mag);
    values[14] = alpha_d;
    values[15] = spread(&jerk_mag, alpha_d, l - 2);

    let mut too_few_peaks = [false; 4];
    for (i, series) in [&axes[0], &axes[1], &axes[2], &magnitude].into_iter().enumerate() {
        match stride_variability(&detect_peaks(series, config), rate_hz) {
            Some(v) => values[16 + i] = v,
            None => too_few_peaks[i] = true,
        }
    }
    Ok(FeatureVector {
        values,
        too_few_peaks,
    })
}

/// Walking samples of a test: outbound then return, optionally then rest.
pub fn walking_samples(test: &WalkingTest, include_rest: bool) -> Vec<Vec3> {
    let mut out = test.segments[0].clone();
    out.extend_from_slice(&test.segments[1]);
    if include_rest {
        out.extend_from_slice(&test.segments[2]);
    }
    out
}

pub fn test_features(test: &WalkingTest, config: FeatureConfig) -> Result<FeatureVector, GaitError> {
    extract_features(
        &walking_samples(test, config.include_rest),
        f64::from(test.rate_hz),
        config.peaks,
    )
}

/// Patient-level features: the mean of the per-test feature vectors.
pub fn patient_features(patient: &PatientRecord, config: FeatureConfig) -> Result<Vec<f64>, GaitError> {
    let mut acc = vec![0.0; 20];
    for test in &patient.tests {
        let f = test_features(test, config)?;
        for (a, v) in acc.iter_mut().zip(f.values) {
            *a += v;
        }
    }
    let n = patient.tests.len().max(1) as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Writes one row per walking test with the twenty named feature columns.
pub fn write_features_csv(
    path: &Path,
    corpus: &[PatientRecord],
    config: FeatureConfig,
) -> Result<usize, GaitError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["patient_id", "t_days"];
    header.extend(FEATURE_NAMES);
    header.push("too_few_peaks");
    w.write_record(&header)?;
    let mut rows = 0;
    for p in corpus {
        for t in &p.tests {
            let f = test_features(t, config)?;
            let mut rec = vec![p.patient_id.clone(), t.test_time_days.to_string()];
            rec.extend(f.values.iter().map(|v| v.to_string()));
            let flagged: Vec<&str> = STRIDE_AXES
                .iter()
                .zip(f.too_few_peaks)
                .filter_map(|(a, flag)| flag.then_some(*a))
                .collect();
            rec.push(flagged.join("|"));
            w.write_record(&rec)?;
            rows += 1;
        }
    }
    w.flush()?;
    Ok(rows)
}

/// Z-score parameters estimated on a training split. Constant columns keep
/// unit scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let d = rows.first().map_or(0, Vec::len);
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std = (0..d)
            .map(|j| {
                let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

fn check_training_set(x: &[Vec<f64>], y: &[u8]) -> Result<(), GaitError> {
    if x.len() != y.len() || x.is_empty() {
        return Err(GaitError::Invalid(format!(
            "{} feature rows for {} labels",
            x.len(),
            y.len()
        )));
    }
    if y.iter().all(|&v| v == y[0]) {
        return Err(GaitError::SingleClass);
    }
    Ok(())
}

/// Majority vote of the `k` nearest training rows (Euclidean). Equal
/// distances are ordered by training index; a split vote predicts 0.
pub fn knn_predict(train_x: &[Vec<f64>], train_y: &[u8], query: &[f64], k: usize) -> u8 {
    let mut dist: Vec<(f64, usize)> = train_x
        .iter()
        .enumerate()
        .map(|(i, r)| (r.iter().zip(query).map(|(a, b)| (a - b).powi(2)).sum(), i))
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let k = k.min(dist.len());
    let positives = dist[..k].iter().filter(|(_, i)| train_y[*i] == 1).count();
    u8::from(2 * positives > k)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogisticConfig {
    pub l2: f64,
    pub learning_rate: f64,
    pub iterations: usize,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            l2: 1e-2,
            learning_rate: 0.1,
            iterations: 2000,
        }
    }
}

/// L2-regularized logistic regression fitted by full-batch gradient descent.
/// Returns the weights with the bias last.
pub fn fit_logistic(x: &[Vec<f64>], y: &[u8], config: LogisticConfig) -> Result<Vec<f64>, GaitError> {
    check_training_set(x, y)?;
    let d = x[0].len();
    let n = x.len() as f64;
    let mut w = vec![0.0; d + 1];
    for _ in 0..config.iterations {
        let mut grad = vec![0.0; d + 1];
        for (row, &label) in x.iter().zip(y) {
            let z = row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[d];
            let err = crate::autodiff::sigmoid(z) - f64::from(label);
            for j in 0..d {
                grad[j] += err * row[j] / n;
            }
            grad[d] += err / n;
        }
        for j in 0..d {
            grad[j] += config.l2 * w[j];
        }
        for (wj, g) in w.iter_mut().zip(&grad) {
            *wj -= config.learning_rate * g;
        }
    }
    Ok(w)
}

pub fn logistic_predict(weights: &[f64], row: &[f64]) -> f64 {
    let d = row.len();
    crate::autodiff::sigmoid(row.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>() + weights[d])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceResult {
    pub knn: Metrics,
    pub logistic: Metrics,
}

/// Standardizes with training statistics, then scores 5-NN and logistic
/// regression on the test rows.
pub fn reference_classify(
    train_x: &[Vec<f64>],
    train_y: &[u8],
    test_x: &[Vec<f64>],
    test_y: &[u8],
) -> Result<ReferenceResult, GaitError> {
    check_training_set(train_x, train_y)?;
    let scaler = Standardizer::fit(train_x);
    let tr: Vec<Vec<f64>> = train_x.iter().map(|r| scaler.transform(r)).collect();
    let te: Vec<Vec<f64>> = test_x.iter().map(|r| scaler.transform(r)).collect();
    let knn: Vec<bool> = te.iter().map(|q| knn_predict(&tr, train_y, q, 5) == 1).collect();
    let w = fit_logistic(&tr, train_y, LogisticConfig::default())?;
    let logit: Vec<bool> = te.iter().map(|q| logistic_predict(&w, q) > 0.5).collect();
    let map = |e: crate::eval::EvalError| GaitError::Invalid(e.to_string());
    Ok(ReferenceResult {
        knn: confusion_metrics(&knn, test_y).map_err(map)?,
        logistic: confusion_metrics(&logit, test_y).map_err(map)?,
    })
}
