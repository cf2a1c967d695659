//! Symptom prototypes, the symptom progression matrix, functional time
//! encoding, trend prototypes with their logistic-normal likelihood, and the
//! recurrent network that infers each trend's latent start time.
//!
//! The `*_graph` functions build differentiable computations; the plain
//! functions evaluate the same formulas directly and serve interpretation and
//! sampling.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, AutodiffError, Graph, Tensor, Var};

/// Severities are clamped to `[SEVERITY_MIN, 1 - SEVERITY_MIN]` before any
/// inverse sigmoid.
pub const SEVERITY_MIN: f64 = 1e-6;

pub const SYMPTOM_PROTOTYPES: &str = "symptom.prototypes";
pub const TREND_PROTOTYPES: &str = "trend.prototypes";
pub const TREND_OMEGA: &str = "trend.omega";
pub const TREND_THETA: &str = "trend.theta";
pub const START_OMEGA: &str = "start.omega";
pub const START_THETA: &str = "start.theta";
pub const GRU_W_IH: &str = "start.gru.w_ih";
pub const GRU_W_HH: &str = "start.gru.w_hh";
pub const GRU_B_IH: &str = "start.gru.b_ih";
pub const GRU_B_HH: &str = "start.gru.b_hh";
pub const START_READOUT: &str = "start.readout";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeConfig {
    /// M.
    pub num_symptoms: usize,
    /// K; there are K depression and K non-depression trend prototypes.
    pub trends_per_class: usize,
    /// n_d, the number of frequencies in a time encoding.
    pub time_dim: usize,
    /// Strictly negative offset keeping symptom scores below 1.
    pub gamma: f64,
    /// n_w, the furthest a trend may have started before the first test.
    pub horizon_days: f64,
    /// Initial frequencies are log-spaced between these periods.
    pub min_period_days: f64,
    pub max_period_days: f64,
    /// Standard deviation of the initial prototype entries.
    pub init_scale: f64,
    /// How the trend log-likelihood enters the existing strength.
    #[serde(default)]
    pub likelihood_scale: LikelihoodScale,
}

/// Scaling of the summed trend log-likelihood before the sigmoid.
///
/// `Sum` uses the joint log-density of all `M × N` entries. Its magnitude
/// grows with the number of entries, so the sigmoid saturates for realistic
/// `M` and `N` and the strengths stop passing gradient. `PerEntry` divides
/// by `M·N`, i.e. it uses the mean log-density per entry.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodScale {
    Sum,
    #[default]
    PerEntry,
}

impl LikelihoodScale {
    pub fn factor(self, entries: usize) -> f64 {
        match self {
            Self::Sum => 1.0,
            Self::PerEntry => 1.0 / entries.max(1) as f64,
        }
    }
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        Self {
            num_symptoms: 8,
            trends_per_class: 5,
            time_dim: 64,
            gamma: -1e-4,
            horizon_days: 5.0,
            min_period_days: 0.5,
            max_period_days: 28.0,
            init_scale: 0.1,
            likelihood_scale: LikelihoodScale::default(),
        }
    }
}

impl PrototypeConfig {
    pub fn num_trends(&self) -> usize {
        2 * self.trends_per_class
    }

    /// Trend prototypes `0..K` describe depression, `K..2K` non-depression.
    pub fn is_depression_trend(&self, k: usize) -> bool {
        k < self.trends_per_class
    }
}

/// Angular frequencies whose periods are log-spaced from `max_period` down to
/// `min_period` days.
pub fn initial_frequencies(n: usize, min_period: f64, max_period: f64) -> Vec<f64> {
    (0..n)
        .map(|j| {
            let frac = if n > 1 { j as f64 / (n - 1) as f64 } else { 0.0 };
            let period = max_period * (min_period / max_period).powf(frac);
            2.0 * PI / period
        })
        .collect()
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

fn uniform_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn init_symptom_params<R: Rng + ?Sized>(
    config: &PrototypeConfig,
    embedding_dim: usize,
    rng: &mut R,
    params: &mut BTreeMap<String, Tensor>,
) {
    let (m, ne) = (config.num_symptoms, embedding_dim);
    let p = normal_vec(rng, m * ne, config.init_scale);
    params.insert(SYMPTOM_PROTOTYPES.into(), Tensor::new([m, ne], p).expect("shape"));
}

fn insert_time_encoding<R: Rng + ?Sized>(
    config: &PrototypeConfig,
    rng: &mut R,
    params: &mut BTreeMap<String, Tensor>,
    omega: &str,
    theta: &str,
) {
    let nd = config.time_dim;
    let w = initial_frequencies(nd, config.min_period_days, config.max_period_days);
    params.insert(omega.into(), Tensor::vector(w));
    params.insert(theta.into(), Tensor::vector(uniform_vec(rng, nd, 0.0, 2.0 * PI)));
}

pub fn init_trend_params<R: Rng + ?Sized>(
    config: &PrototypeConfig,
    rng: &mut R,
    params: &mut BTreeMap<String, Tensor>,
) {
    let (k2, m, nd) = (config.num_trends(), config.num_symptoms, config.time_dim);
    let p = normal_vec(rng, k2 * m * 2 * nd, config.init_scale);
    params.insert(TREND_PROTOTYPES.into(), Tensor::new([k2, m, 2 * nd], p).expect("shape"));
    insert_time_encoding(config, rng, params, TREND_OMEGA, TREND_THETA);
}

/// GRU weights are uniform in ±1/√hidden, as is the per-prototype readout.
pub fn init_start_params<R: Rng + ?Sized>(
    config: &PrototypeConfig,
    hidden: usize,
    rng: &mut R,
    params: &mut BTreeMap<String, Tensor>,
) {
    let input = config.num_symptoms + 2 * config.time_dim;
    let b = 1.0 / (hidden as f64).sqrt();
    let mut put = |name: &str, shape: Vec<usize>, rng: &mut R| {
        let n = shape.iter().product();
        params.insert(name.into(), Tensor::new(shape, uniform_vec(rng, n, -b, b)).expect("shape"));
    };
    put(GRU_W_IH, vec![3 * hidden, input], rng);
    put(GRU_W_HH, vec![3 * hidden, hidden], rng);
    put(GRU_B_IH, vec![3 * hidden], rng);
    put(GRU_B_HH, vec![3 * hidden], rng);
    put(START_READOUT, vec![config.num_trends(), hidden], rng);
    insert_time_encoding(config, rng, params, START_OMEGA, START_THETA);
}

// ---------------------------------------------------------------------------
// Plain evaluation

pub fn clamp_severity(s: f64) -> f64 {
    s.clamp(SEVERITY_MIN, 1.0 - SEVERITY_MIN)
}

pub fn logit(z: f64) -> f64 {
    z.ln() - (-z).ln_1p()
}

/// `√(1/n_d)·[cos(ω t + θ), sin(ω t + θ)]`; unit norm for any parameters.
pub fn time_encode(t: f64, omega: &[f64], theta: &[f64]) -> Vec<f64> {
    let scale = (1.0 / omega.len() as f64).sqrt();
    let args: Vec<f64> = omega.iter().zip(theta).map(|(w, th)| w * t + th).collect();
    args.iter()
        .map(|a| scale * a.cos())
        .chain(args.iter().map(|a| scale * a.sin()))
        .collect()
}

/// Pre-sigmoid trend mean `p_k Φ(t)` and the trend itself, per symptom.
/// `prototype` is `M × 2n_d`, row-major.
pub fn trend_value(prototype: &[f64], phi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let pre: Vec<f64> = prototype
        .chunks(phi.len())
        .map(|row| row.iter().zip(phi).map(|(a, b)| a * b).sum())
        .collect();
    let post = pre.iter().map(|&v| sigmoid(v)).collect();
    (pre, post)
}

/// Log density of a logistic-normal vector with identity covariance:
/// `Σ log(1/(z(1−z))) − (M/2)·log 2π − ½‖logit(z) − μ‖²`.
pub fn logistic_normal_logpdf(z: &[f64], mu: &[f64]) -> f64 {
    let m = z.len() as f64;
    let mut total = -0.5 * m * (2.0 * PI).ln();
    for (&zi, &mi) in z.iter().zip(mu) {
        let zi = clamp_severity(zi);
        total -= zi.ln() + (-zi).ln_1p();
        total -= 0.5 * (logit(zi) - mi).powi(2);
    }
    total
}

/// Per-patch scores `exp(γ − ‖h_o − p‖²)` of a `n_e × n_o` feature matrix.
pub fn patch_scores(features: &[f64], n_o: usize, prototype: &[f64], gamma: f64) -> Vec<f64> {
    (0..n_o)
        .map(|o| {
            let d: f64 = prototype
                .iter()
                .enumerate()
                .map(|(e, p)| (features[e * n_o + o] - p).powi(2))
                .sum();
            (gamma - d).exp()
        })
        .collect()
}

/// Trend existing strength for an `M × N` severity matrix, given the start
/// time `t0` and the trend's prototype (`M × 2n_d`).
pub fn trend_strength(
    severity: &[f64],
    num_symptoms: usize,
    times: &[f64],
    t0: f64,
    prototype: &[f64],
    omega: &[f64],
    theta: &[f64],
    scale: LikelihoodScale,
) -> f64 {
    let n = times.len();
    let ll: f64 = times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let column: Vec<f64> = (0..num_symptoms).map(|m| severity[m * n + i]).collect();
            let (mu, _) = trend_value(prototype, &time_encode(t - t0, omega, theta));
            logistic_normal_logpdf(&column, &mu)
        })
        .sum();
    sigmoid(ll * scale.factor(num_symptoms * n))
}

/// Draws an `M × N` severity matrix from a trend prototype: aligned means
/// plus standard normal noise (omitted when `noise` is false), then the
/// sigmoid.
#[allow(clippy::too_many_arguments)]
pub fn sample_progression<R: Rng + ?Sized>(
    prototype: &[f64],
    num_symptoms: usize,
    omega: &[f64],
    theta: &[f64],
    t0: f64,
    times: &[f64],
    rng: &mut R,
    noise: bool,
) -> Vec<f64> {
    let n = times.len();
    let mut out = vec![0.0; num_symptoms * n];
    for (i, &t) in times.iter().enumerate() {
        let (mu, _) = trend_value(prototype, &time_encode(t - t0, omega, theta));
        for m in 0..num_symptoms {
            let eps = if noise {
                Normal::new(0.0, 1.0).expect("unit normal").sample(rng)
            } else {
                0.0
            };
            out[m * n + i] = sigmoid(mu[m] + eps);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Differentiable construction

/// Patch scores `(T, n_o, M)` and clamped severities `(T, M)` for a batch of
/// feature matrices `(T, n_e, n_o)` and prototypes `(M, n_e)`.
pub fn severity_graph(
    g: &mut Graph,
    features: Var,
    prototypes: Var,
    gamma: f64,
) -> Result<(Var, Var), AutodiffError> {
    let s = g.shape(features).to_vec();
    let (t, ne, no) = (s[0], s[1], s[2]);
    let m = g.shape(prototypes)[0];
    let h = g.permute(features, &[0, 2, 1])?;
    let h = g.reshape(h, &[t * no, ne])?;
    let hsq = g.square(h);
    let hh = g.sum_axis(hsq, 1)?;
    let hh = g.reshape(hh, &[t * no, 1])?;
    let psq = g.square(prototypes);
    let pp = g.sum_axis(psq, 1)?;
    let pt = g.transpose(prototypes)?;
    let cross = g.matmul(h, pt)?;
    let cross = g.scale(cross, -2.0);
    let d = g.add(hh, cross)?;
    let d = g.add(d, pp)?;
    let scores = g.affine(d, -1.0, gamma);
    let scores = g.exp(scores);
    let scores = g.reshape(scores, &[t, no, m])?;
    let severity = g.max_axis(scores, 1)?;
    let severity = g.clamp(severity, SEVERITY_MIN, 1.0 - SEVERITY_MIN);
    Ok((scores, severity))
}

/// Time encoding of `times` (any shape ending in a length-1 axis and the time
/// axis, e.g. `(B, 1, N)`), giving `(…, 2n_d, N)`.
pub fn time_encoding_graph(
    g: &mut Graph,
    times: Var,
    omega: Var,
    theta: Var,
) -> Result<Var, AutodiffError> {
    let nd = g.shape(omega)[0];
    let w = g.reshape(omega, &[nd, 1])?;
    let th = g.reshape(theta, &[nd, 1])?;
    let arg = g.mul(w, times)?;
    let arg = g.add(arg, th)?;
    let c = g.cos(arg);
    let s = g.sin(arg);
    let axis = g.shape(arg).len() - 2;
    let phi = g.concat(&[c, s], axis)?;
    Ok(g.scale(phi, (1.0 / nd as f64).sqrt()))
}

/// Differentiable handles of the start-time network.
#[derive(Clone, Copy, Debug)]
pub struct StartNetVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
    pub readout: Var,
    pub omega: Var,
    pub theta: Var,
}

impl StartNetVars {
    pub fn from_map(vars: &BTreeMap<String, Var>) -> Self {
        Self {
            w_ih: vars[GRU_W_IH],
            w_hh: vars[GRU_W_HH],
            b_ih: vars[GRU_B_IH],
            b_hh: vars[GRU_B_HH],
            readout: vars[START_READOUT],
            omega: vars[START_OMEGA],
            theta: vars[START_THETA],
        }
    }
}

/// Start times `t0 = −n_w·σ(w_kᵀ h_N)` for every trend prototype, where the
/// GRU reads each severity column concatenated with its time encoding.
pub fn start_times_graph(
    g: &mut Graph,
    severity: Var,
    times: &[f64],
    net: StartNetVars,
    horizon_days: f64,
) -> Result<Var, AutodiffError> {
    let m = g.shape(severity)[0];
    let hidden = g.shape(net.w_hh)[1];
    let mut h = g.constant(Tensor::zeros([hidden]));
    for (i, &t) in times.iter().enumerate() {
        let col = g.slice(severity, 1, i, i + 1)?;
        let col = g.reshape(col, &[m])?;
        let tv = g.constant(Tensor::new([1, 1], vec![t])?);
        let phi = time_encoding_graph(g, tv, net.omega, net.theta)?;
        let nd2 = g.shape(phi)[0];
        let phi = g.reshape(phi, &[nd2])?;
        let x = g.concat(&[col, phi], 0)?;
        h = g.gru_cell(x, h, net.w_ih, net.w_hh, net.b_ih, net.b_hh)?;
    }
    let hc = g.reshape(h, &[hidden, 1])?;
    let z = g.matmul(net.readout, hc)?;
    let k2 = g.shape(z)[0];
    let z = g.reshape(z, &[k2])?;
    let z = g.sigmoid(z);
    Ok(g.scale(z, -horizon_days))
}

pub struct TrendOutput {
    /// `(2K)` existing strengths.
    pub strengths: Var,
    /// `(2K)` log-likelihoods before the sigmoid.
    pub log_lik: Var,
}

/// Trend existing strengths of every prototype `(2K, M, 2n_d)` for one
/// clamped severity matrix `(M, N)`. Without start times the trends are
/// evaluated at the raw test times.
pub fn trend_strengths_graph(
    g: &mut Graph,
    severity: Var,
    times: &[f64],
    start_times: Option<Var>,
    prototypes: Var,
    omega: Var,
    theta: Var,
    scale: LikelihoodScale,
) -> Result<TrendOutput, AutodiffError> {
    let (m, n) = (g.shape(severity)[0], g.shape(severity)[1]);
    let ps = g.shape(prototypes).to_vec();
    let (k2, nd2) = (ps[0], ps[2]);
    let tc = g.constant(Tensor::new([1, 1, n], times.to_vec())?);
    let aligned = match start_times {
        Some(t0) => {
            let t0 = g.reshape(t0, &[k2, 1, 1])?;
            g.sub(tc, t0)?
        }
        None => tc,
    };
    let phi = time_encoding_graph(g, aligned, omega, theta)?;
    let b = g.shape(phi)[0];
    let phi = g.reshape(phi, &[b, 1, nd2, n])?;
    let p = g.reshape(prototypes, &[k2, m, nd2, 1])?;
    let prod = g.mul(p, phi)?;
    let mean = g.sum_axis(prod, 2)?;

    let log_s = g.log(severity);
    let one_minus = g.affine(severity, -1.0, 1.0);
    let log_1m = g.log(one_minus);
    let logit = g.sub(log_s, log_1m)?;
    let both = g.add(log_s, log_1m)?;
    let barrier = g.sum(both);
    let barrier = g.neg(barrier);

    let resid = g.sub(logit, mean)?;
    let sq = g.square(resid);
    let sq = g.sum_axis(sq, 2)?;
    let sq = g.sum_axis(sq, 1)?;
    let normalizer = -0.5 * (n * m) as f64 * (2.0 * PI).ln();
    let ll = g.affine(sq, -0.5, normalizer);
    let log_lik = g.add(ll, barrier)?;
    let scaled = g.scale(log_lik, scale.factor(m * n));
    let strengths = g.sigmoid(scaled);
    Ok(TrendOutput { strengths, log_lik })
}
