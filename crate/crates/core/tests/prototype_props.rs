//! Symptom scores, time encoding, the logistic-normal density, start-time
//! inference and trend strengths against direct evaluations and
//! finite differences.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use temppnet::autodiff::check::{max_relative_error, numeric_gradient, DEFAULT_STEP};
use temppnet::autodiff::{sigmoid, Graph, Tensor};
use temppnet::prototype::*;

fn std_logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn normal_logpdf(x: f64, mu: f64) -> f64 {
    -0.5 * (2.0 * PI).ln() - 0.5 * (x - mu).powi(2)
}

fn small_config() -> PrototypeConfig {
    PrototypeConfig {
        num_symptoms: 2,
        trends_per_class: 1,
        time_dim: 2,
        ..PrototypeConfig::default()
    }
}

const HIDDEN: usize = 3;

fn small_params(seed: u64) -> BTreeMap<String, Tensor> {
    let config = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    init_trend_params(&config, &mut rng, &mut params);
    init_start_params(&config, HIDDEN, &mut rng, &mut params);
    // Larger prototypes than the initial scale so every term is exercised.
    let p = params.get_mut(TREND_PROTOTYPES).unwrap();
    *p = Tensor::new(p.shape().to_vec(), (0..p.len()).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap();
    params
}

fn random_severity(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.05..0.95)).collect()
}

/// Strengths `(2K)`, start times `(2K)` and log-likelihoods `(2K)`.
fn evaluate(params: &BTreeMap<String, Tensor>, severity: &[f64], times: &[f64], scale: LikelihoodScale) -> [Vec<f64>; 3] {
    let m = small_config().num_symptoms;
    let mut g = Graph::new();
    let vars: BTreeMap<String, _> = params.iter().map(|(k, t)| (k.clone(), g.param(t.clone()))).collect();
    let s = g.constant(Tensor::new([m, times.len()], severity.to_vec()).unwrap());
    let t0 = start_times_graph(&mut g, s, times, StartNetVars::from_map(&vars), 5.0).unwrap();
    let out = trend_strengths_graph(&mut g, s, times, Some(t0), vars[TREND_PROTOTYPES], vars[TREND_OMEGA], vars[TREND_THETA], scale).unwrap();
    [g.value(out.strengths).to_vec(), g.value(t0).to_vec(), g.value(out.log_lik).to_vec()]
}

#[test]
fn symptom_scores_follow_the_distance() {
    let h = [0.2, -0.4, 1.0, 0.7];
    let s = patch_scores(&h, 2, &[0.2, 1.0], -1e-4);
    assert!((s[0] - (-1e-4f64).exp()).abs() < 1e-15);
    let s = patch_scores(&[0.0, 1.0], 1, &[1.0, 1.0], -1e-12);
    assert!((s[0] - (-1.0f64).exp()).abs() < 1e-10);
    assert!((s[0] - 0.3679).abs() < 1e-4);
}

#[test]
fn severities_are_the_clamped_patch_maximum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (t, ne, no, m) = (3, 4, 5, 2);
    let feats: Vec<f64> = (0..t * ne * no).map(|_| rng.random_range(-1.0..1.0)).collect();
    let protos: Vec<f64> = (0..m * ne).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = Graph::new();
    let f = g.constant(Tensor::new([t, ne, no], feats.clone()).unwrap());
    let p = g.constant(Tensor::new([m, ne], protos.clone()).unwrap());
    let (scores, severity) = severity_graph(&mut g, f, p, -1e-4).unwrap();
    let (scores, severity) = (g.value(scores).clone(), g.value(severity).clone());
    for i in 0..t {
        let h = &feats[i * ne * no..(i + 1) * ne * no];
        for k in 0..m {
            let direct = patch_scores(h, no, &protos[k * ne..(k + 1) * ne], -1e-4);
            let max = direct.iter().cloned().fold(f64::MIN, f64::max);
            for (o, d) in direct.iter().enumerate() {
                assert!((scores.at(&[i, o, k]) - d).abs() < 1e-12);
            }
            let s = severity.at(&[i, k]);
            assert!((s - clamp_severity(max)).abs() < 1e-12);
            assert!(s > 0.0 && s < 1.0);
        }
    }
}

proptest! {
    #[test]
    fn time_encodings_have_unit_norm(
        t in -1e3f64..1e3,
        params in prop::collection::vec((-50.0f64..50.0, 0.0f64..6.3), 1..70),
    ) {
        let (omega, theta): (Vec<f64>, Vec<f64>) = params.into_iter().unzip();
        let phi = time_encode(t, &omega, &theta);
        prop_assert_eq!(phi.len(), 2 * omega.len());
        prop_assert!((phi.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    /// `‖Φ′(t)‖ = √(mean ω²) ≤ ‖ω‖∞`, so small steps move Φ no further.
    #[test]
    fn time_encodings_are_lipschitz(
        t in -100.0f64..100.0,
        eps in 1e-6f64..1e-3,
        params in prop::collection::vec((-20.0f64..20.0, 0.0f64..6.3), 1..20),
    ) {
        let (omega, theta): (Vec<f64>, Vec<f64>) = params.into_iter().unzip();
        let a = time_encode(t, &omega, &theta);
        let b = time_encode(t + eps, &omega, &theta);
        let step = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let bound = omega.iter().fold(0.0f64, |m, w| m.max(w.abs())) * eps;
        prop_assert!(step <= bound * (1.0 + 1e-9) + 1e-15);
    }

    #[test]
    fn logistic_normal_matches_change_of_variables(
        entries in prop::collection::vec((0.001f64..0.999, -4.0f64..4.0), 1..10),
    ) {
        let (z, mu): (Vec<f64>, Vec<f64>) = entries.into_iter().unzip();
        let direct: f64 = z
            .iter()
            .zip(&mu)
            .map(|(&zi, &mi)| normal_logpdf((zi / (1.0 - zi)).ln(), mi) - (zi * (1.0 - zi)).ln())
            .sum();
        prop_assert!((logistic_normal_logpdf(&z, &mu) - direct).abs() < 1e-12);
    }

    #[test]
    fn zero_mean_density_is_symmetric(z in 0.001f64..0.999) {
        prop_assert!((logistic_normal_logpdf(&[z], &[0.0]) - logistic_normal_logpdf(&[1.0 - z], &[0.0])).abs() < 1e-12);
    }
}

#[test]
fn quarter_period_trend_value() {
    let phi = time_encode(1.0, &[PI / 2.0], &[0.0]);
    let (pre, post) = trend_value(&[1.0, 0.0], &phi);
    assert!(pre[0].abs() < 1e-15);
    assert!((post[0] - 0.5).abs() < 1e-15);
}

#[test]
fn density_hand_value() {
    let lp = logistic_normal_logpdf(&[0.5], &[0.0]);
    assert!((lp.exp() - 4.0 / (2.0 * PI).sqrt()).abs() < 1e-9);
    assert!((lp - 0.4674).abs() < 1e-4);
}

/// Composite Simpson's rule on 10⁴ intervals of (0, 1).
#[test]
fn density_integrates_to_one() {
    let n = 10_000;
    let h = 1.0 / n as f64;
    let f = |z: f64| if z <= 0.0 || z >= 1.0 { 0.0 } else { logistic_normal_logpdf(&[z], &[0.0]).exp() };
    let mut total = f(0.0) + f(1.0);
    for i in 1..n {
        total += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    let integral = total * h / 3.0;
    assert!((integral - 1.0).abs() < 1e-3, "{integral}");
}

/// Histogram of `σ(x)`, `x ~ N(0,1)`, around ½ recovers the density there.
#[test]
fn density_matches_transformed_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let draws = 400_000;
    let width = 0.02;
    let hits = (0..draws)
        .map(|_| std_logistic(rng.sample(StandardNormal)))
        .filter(|z| (z - 0.5).abs() < width / 2.0)
        .count();
    let estimate = hits as f64 / (draws as f64 * width);
    let expected = 4.0 / (2.0 * PI).sqrt();
    let se = (hits as f64).sqrt() / (draws as f64 * width);
    assert!((estimate - expected).abs() < 4.0 * se + 0.01, "{estimate} vs {expected}");
}

#[test]
fn zero_readout_starts_halfway_back() {
    let mut params = small_params(3);
    let r = params.get_mut(START_READOUT).unwrap();
    *r = Tensor::zeros(r.shape().to_vec());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let [_, t0, _] = evaluate(&params, &random_severity(&mut rng, 6), &[0.0, 1.5, 4.0], LikelihoodScale::PerEntry);
    assert!(t0.iter().all(|&t| (t + 2.5).abs() < 1e-15));
}

#[test]
fn start_times_stay_inside_the_horizon() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut distinct = 0;
    for trial in 0..1000 {
        let params = small_params(trial);
        let n = rng.random_range(1..6);
        let mut times: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..14.0)).collect();
        times.sort_by(f64::total_cmp);
        let [s, t0, _] = evaluate(&params, &random_severity(&mut rng, 2 * n), &times, LikelihoodScale::PerEntry);
        assert!(t0.iter().all(|&t| t > -5.0 && t < 0.0));
        assert!(s.iter().all(|&v| v > 0.0 && v < 1.0));
        distinct += usize::from(t0[0] != t0[1]);
    }
    assert_eq!(distinct, 1000);
}

#[test]
fn graph_strengths_match_direct_evaluation() {
    let config = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..20 {
        let params = small_params(100 + trial);
        let times = [0.0, 0.7, 3.1, 9.0];
        let severity = random_severity(&mut rng, 8);
        for scale in [LikelihoodScale::Sum, LikelihoodScale::PerEntry] {
            let [s, t0, ll] = evaluate(&params, &severity, &times, scale);
            let protos = &params[TREND_PROTOTYPES];
            let per = config.num_symptoms * 2 * config.time_dim;
            for k in 0..config.num_trends() {
                let p = &protos.data()[k * per..(k + 1) * per];
                let direct = trend_strength(&severity, 2, &times, t0[k], p, params[TREND_OMEGA].data(), params[TREND_THETA].data(), scale);
                assert!((s[k] - direct).abs() < 1e-12);
                // The summed log-likelihood, term by term.
                let mut total = 0.0;
                for (i, &t) in times.iter().enumerate() {
                    let (mu, _) = trend_value(p, &time_encode(t - t0[k], params[TREND_OMEGA].data(), params[TREND_THETA].data()));
                    for m in 0..2 {
                        let z = severity[m * 4 + i];
                        total += normal_logpdf((z / (1.0 - z)).ln(), mu[m]) - (z * (1.0 - z)).ln();
                    }
                }
                assert!((ll[k] - total).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn single_entry_strength_hand_value() {
    let s = trend_strength(&[0.5], 1, &[0.0], 0.0, &[0.0, 0.0], &[1.0], &[0.0], LikelihoodScale::Sum);
    let ll = 4f64.ln() - 0.5 * (2.0 * PI).ln();
    assert!((ll - 0.4674).abs() < 1e-4);
    assert!((s - std_logistic(ll)).abs() < 1e-15);
    assert!((s - 0.6148).abs() < 1e-4);
}

/// `z` and `1 − z` share the barrier `−log z(1−z)`, but their logits sit on
/// opposite sides of zero, so the one on the far side of the mean is less
/// likely.
#[test]
fn strength_decreases_with_distance_from_the_trend() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let omega = [0.4, 1.3];
    let theta = [0.1, 2.0];
    for _ in 0..500 {
        let proto: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let times = [0.0, 2.0, 6.0];
        let t0 = rng.random_range(-5.0..0.0);
        let mut s = random_severity(&mut rng, 6);
        let i = rng.random_range(0..3);
        let m = rng.random_range(0..2);
        let (mu, _) = trend_value(&proto, &time_encode(times[i] - t0, &omega, &theta));
        if mu[m].abs() < 1e-3 {
            continue;
        }
        // Put the entry on the mean's side, then mirror it.
        let z = std_logistic(mu[m].signum() * rng.random_range(0.1..3.0));
        s[m * 3 + i] = z;
        let mut far = s.clone();
        far[m * 3 + i] = 1.0 - z;
        for scale in [LikelihoodScale::Sum, LikelihoodScale::PerEntry] {
            let near = trend_strength(&s, 2, &times, t0, &proto, &omega, &theta, scale);
            let away = trend_strength(&far, 2, &times, t0, &proto, &omega, &theta, scale);
            assert!(near > away, "{near} vs {away}");
        }
    }
}

#[test]
fn alignment_depends_only_on_elapsed_time() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let omega = [0.4, 1.3, 7.0];
    let theta = [0.1, 2.0, 4.0];
    for _ in 0..200 {
        let proto: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let s = random_severity(&mut rng, 8);
        let times = [0.0, 1.0, 2.5, 8.0];
        let t0 = rng.random_range(-5.0..0.0);
        let shift = rng.random_range(-30.0..30.0);
        let moved: Vec<f64> = times.iter().map(|t| t + shift).collect();
        let a = trend_strength(&s, 2, &times, t0, &proto, &omega, &theta, LikelihoodScale::Sum);
        let b = trend_strength(&s, 2, &moved, t0 + shift, &proto, &omega, &theta, LikelihoodScale::Sum);
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn sampled_medians_follow_the_trend() {
    let omega = [0.3, 1.1];
    let theta = [0.2, 0.4];
    let proto = [0.5, -0.2, 0.3, 0.9, -1.0, 0.4, 0.0, 0.7];
    let times = [0.0, 2.0, 5.5];
    let t0 = -1.5;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let draws = 100_000;
    let mut columns = vec![Vec::with_capacity(draws); 6];
    for _ in 0..draws {
        let s = sample_progression(&proto, 2, &omega, &theta, t0, &times, &mut rng, true);
        for (c, v) in columns.iter_mut().zip(s) {
            assert!(v > 0.0 && v < 1.0);
            c.push(v);
        }
    }
    for (idx, c) in columns.iter_mut().enumerate() {
        let (m, i) = (idx / 3, idx % 3);
        let (_, trend) = trend_value(&proto, &time_encode(times[i] - t0, &omega, &theta));
        c.sort_by(f64::total_cmp);
        let median = c[draws / 2];
        // The median's standard error is about 1/(2 f(median) √n).
        let density = logistic_normal_logpdf(&[trend[m]], &[(trend[m] / (1.0 - trend[m])).ln()]).exp();
        let se = 1.0 / (2.0 * density * (draws as f64).sqrt());
        assert!((median - trend[m]).abs() < 4.0 * se, "{median} vs {}", trend[m]);
    }
}

/// Gradients of the strengths through the trend prototypes, both time
/// encodings and the start-time network.
#[test]
fn strength_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for scale in [LikelihoodScale::Sum, LikelihoodScale::PerEntry] {
        let params = small_params(9);
        let names: Vec<String> = params.keys().cloned().collect();
        let tensors: Vec<Tensor> = names.iter().map(|n| params[n].clone()).collect();
        let severity = random_severity(&mut rng, 6);
        let times = [0.0, 1.2, 4.5];
        let weights = [0.7, -1.3];
        let objective = |ts: &[Tensor]| {
            let p: BTreeMap<String, Tensor> = names.iter().cloned().zip(ts.iter().cloned()).collect();
            let [s, _, _] = evaluate(&p, &severity, &times, scale);
            s.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };

        let mut g = Graph::new();
        let vars: BTreeMap<String, _> = params.iter().map(|(k, t)| (k.clone(), g.param(t.clone()))).collect();
        let s = g.constant(Tensor::new([2, 3], severity.clone()).unwrap());
        let t0 = start_times_graph(&mut g, s, &times, StartNetVars::from_map(&vars), 5.0).unwrap();
        let out = trend_strengths_graph(&mut g, s, &times, Some(t0), vars[TREND_PROTOTYPES], vars[TREND_OMEGA], vars[TREND_THETA], scale).unwrap();
        let w = g.constant(Tensor::vector(weights.to_vec()));
        let weighted = g.mul(out.strengths, w).unwrap();
        let loss = g.sum(weighted);
        let grads = g.backward(loss).unwrap();
        for (i, name) in names.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[name]).to_vec();
            assert!(analytic.iter().any(|v| *v != 0.0), "{name} has no gradient");
            let numeric = numeric_gradient(objective, &tensors, i, DEFAULT_STEP);
            let err = max_relative_error(&analytic, &numeric, 1e-8);
            assert!(err < 1e-4, "{scale:?}: {name} relative error {err}");
        }
    }
}

#[test]
fn strengths_use_the_logistic_sigmoid() {
    for x in [-30.0, -1.0, 0.0, 0.3, 25.0] {
        assert!((sigmoid(x) - std_logistic(x)).abs() < 1e-15);
    }
}
