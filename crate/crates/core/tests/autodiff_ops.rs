//! Finite-difference checks for every differentiable operation, plus the
//! structural properties of the engine.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use temppnet::autodiff::check::{max_relative_error, numeric_gradient, DEFAULT_STEP};
use temppnet::autodiff::{Graph, Tensor, Var};

const TRIALS: usize = 100;
const TOLERANCE: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Checks `build` against central differences on `TRIALS` random draws. The
/// scalar under test is `Σ out ⊙ w` for a random fixed weighting `w`.
fn check_op(
    name: &str,
    seed: u64,
    make_inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    build: impl Fn(&mut Graph, &[Var]) -> Var,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let inputs = make_inputs(&mut rng);
        let out_shape = {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let out = build(&mut g, &vars);
            g.shape(out).to_vec()
        };
        let weights = random(&mut rng, &out_shape, -1.0, 1.0);
        let objective = |ts: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
            let out = build(&mut g, &vars);
            g.value(out)
                .data()
                .iter()
                .zip(weights.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        for (i, v) in vars.iter().enumerate() {
            let analytic = grads.get_or_zeros(*v).to_vec();
            let numeric = numeric_gradient(objective, &inputs, i, DEFAULT_STEP);
            worst = worst.max(max_relative_error(&analytic, &numeric, 1e-7));
        }
    }
    assert!(worst < TOLERANCE, "{name}: worst relative error {worst:e}");
}

#[test]
fn elementwise_unary_ops() {
    type Build = fn(&mut Graph, Var) -> Var;
    let ops: [(&str, Build, f64, f64); 11] = [
        ("leaky_relu", |g, x| g.leaky_relu(x), -2.0, 2.0),
        ("sigmoid", |g, x| g.sigmoid(x), -4.0, 4.0),
        ("log_sigmoid", |g, x| g.log_sigmoid(x), -6.0, 6.0),
        ("exp", |g, x| g.exp(x), -2.0, 2.0),
        ("log", |g, x| g.log(x), 0.2, 3.0),
        ("square", |g, x| g.square(x), -2.0, 2.0),
        ("tanh", |g, x| g.tanh(x), -3.0, 3.0),
        ("cos", |g, x| g.cos(x), -4.0, 4.0),
        ("sin", |g, x| g.sin(x), -4.0, 4.0),
        ("affine", |g, x| g.affine(x, -1.7, 0.3), -2.0, 2.0),
        ("clamp", |g, x| g.clamp(x, -0.5, 0.5), -1.0, 1.0),
    ];
    for (i, (name, op, lo, hi)) in ops.into_iter().enumerate() {
        check_op(
            name,
            100 + i as u64,
            |r| vec![random(r, &[2, 3], lo, hi)],
            |g, v| op(g, v[0]),
        );
    }
}

#[test]
fn broadcasting_binary_ops() {
    check_op(
        "add",
        1,
        |r| vec![random(r, &[3, 1, 4], -1.0, 1.0), random(r, &[2, 1], -1.0, 1.0)],
        |g, v| g.add(v[0], v[1]).unwrap(),
    );
    check_op(
        "sub",
        2,
        |r| vec![random(r, &[4], -1.0, 1.0), random(r, &[3, 4], -1.0, 1.0)],
        |g, v| g.sub(v[0], v[1]).unwrap(),
    );
    check_op(
        "mul",
        3,
        |r| vec![random(r, &[2, 3], -1.0, 1.0), random(r, &[2, 3], -1.0, 1.0)],
        |g, v| g.mul(v[0], v[1]).unwrap(),
    );
    check_op(
        "mul_scalar_broadcast",
        4,
        |r| vec![random(r, &[], -1.0, 1.0), random(r, &[2, 2], -1.0, 1.0)],
        |g, v| g.mul(v[0], v[1]).unwrap(),
    );
}

#[test]
fn reductions() {
    check_op("sum", 5, |r| vec![random(r, &[3, 2], -1.0, 1.0)], |g, v| g.sum(v[0]));
    check_op(
        "sum_axis",
        6,
        |r| vec![random(r, &[2, 3, 4], -1.0, 1.0)],
        |g, v| g.sum_axis(v[0], 1).unwrap(),
    );
    check_op(
        "max_axis",
        7,
        |r| vec![random(r, &[3, 5], -1.0, 1.0)],
        |g, v| g.max_axis(v[0], 1).unwrap(),
    );
    check_op(
        "min_axis",
        8,
        |r| vec![random(r, &[4, 3], -1.0, 1.0)],
        |g, v| g.min_axis(v[0], 0).unwrap(),
    );
}

#[test]
fn shape_ops() {
    check_op(
        "concat",
        9,
        |r| vec![random(r, &[2, 3], -1.0, 1.0), random(r, &[2, 2], -1.0, 1.0)],
        |g, v| g.concat(&[v[0], v[1]], 1).unwrap(),
    );
    check_op(
        "slice",
        10,
        |r| vec![random(r, &[3, 5, 2], -1.0, 1.0)],
        |g, v| g.slice(v[0], 1, 1, 4).unwrap(),
    );
    check_op(
        "permute_reshape",
        11,
        |r| vec![random(r, &[2, 3, 4], -1.0, 1.0)],
        |g, v| {
            let p = g.permute(v[0], &[2, 0, 1]).unwrap();
            g.reshape(p, &[4, 6]).unwrap()
        },
    );
}

#[test]
fn matmul_gradient() {
    check_op(
        "matmul",
        12,
        |r| vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[4, 2], -1.0, 1.0)],
        |g, v| g.matmul(v[0], v[1]).unwrap(),
    );
}

#[test]
fn conv_pool_gradients() {
    check_op(
        "conv1d",
        13,
        |r| {
            vec![
                random(r, &[2, 3, 12], -1.0, 1.0),
                random(r, &[4, 3, 3], -1.0, 1.0),
                random(r, &[4], -1.0, 1.0),
            ]
        },
        |g, v| g.conv1d(v[0], v[1], Some(v[2])).unwrap(),
    );
    check_op(
        "maxpool1d",
        14,
        |r| vec![random(r, &[2, 3, 9], -1.0, 1.0)],
        |g, v| g.maxpool1d(v[0]).unwrap(),
    );
}

#[test]
fn batchnorm_gradients() {
    check_op(
        "batchnorm1d_train",
        15,
        |r| {
            vec![
                random(r, &[2, 3, 5], -1.0, 1.0),
                random(r, &[3], 0.5, 1.5),
                random(r, &[3], -0.5, 0.5),
            ]
        },
        |g, v| g.batchnorm1d_train(v[0], v[1], v[2]).unwrap().0,
    );
    check_op(
        "batchnorm1d_eval",
        16,
        |r| {
            vec![
                random(r, &[2, 3, 5], -1.0, 1.0),
                random(r, &[3], 0.5, 1.5),
                random(r, &[3], -0.5, 0.5),
            ]
        },
        |g, v| {
            g.batchnorm1d_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.0, 2.0])
                .unwrap()
        },
    );
}

#[test]
fn gru_cell_gradient() {
    check_op(
        "gru_cell",
        17,
        |r| {
            vec![
                random(r, &[3], -1.0, 1.0),
                random(r, &[4], -1.0, 1.0),
                random(r, &[12, 3], -1.0, 1.0),
                random(r, &[12, 4], -1.0, 1.0),
                random(r, &[12], -0.5, 0.5),
                random(r, &[12], -0.5, 0.5),
            ]
        },
        |g, v| g.gru_cell(v[0], v[1], v[2], v[3], v[4], v[5]).unwrap(),
    );
}

#[test]
fn sum_of_squares_gradient_is_twice_input() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let sq = g.square(x);
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn sigmoid_of_dot_matches_finite_differences() {
    let w = Tensor::new(vec![1, 3], vec![0.3, -0.8, 1.1]).unwrap();
    let x = Tensor::new(vec![3, 1], vec![0.5, 0.25, -1.5]).unwrap();
    let f = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let (a, b) = (g.constant(ts[0].clone()), g.constant(ts[1].clone()));
        let d = g.matmul(a, b).unwrap();
        let s = g.sigmoid(d);
        g.value(s).item()
    };
    let mut g = Graph::new();
    let (a, b) = (g.param(w.clone()), g.constant(x.clone()));
    let d = g.matmul(a, b).unwrap();
    let s = g.sigmoid(d);
    let loss = g.sum(s);
    let grads = g.backward(loss).unwrap();
    let numeric = numeric_gradient(f, &[w, x], 0, DEFAULT_STEP);
    let err = max_relative_error(grads.raw(a).unwrap(), &numeric, 1e-12);
    assert!(err < 1e-6, "relative error {err:e}");
}

#[test]
fn max_routes_gradient_to_unique_argmax() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![0.1, 0.9, -0.3]));
    let m = g.max_axis(x, 0).unwrap();
    let grads = g.backward(m).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn max_ties_resolve_to_lowest_index() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![0.5, 0.5, 0.5]));
    let m = g.max_axis(x, 0).unwrap();
    let grads = g.backward(m).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn gradients_accumulate_across_uses() {
    // f = x * x + 3x → f' = 2x + 3
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(2.0));
    let xx = g.mul(x, x).unwrap();
    let three_x = g.scale(x, 3.0);
    let f = g.add(xx, three_x).unwrap();
    let grads = g.backward(f).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 7.0);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(g.backward(x).is_err());
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    let c = g.constant(Tensor::zeros(vec![4]));
    let msg = g.add(a, c).unwrap_err().to_string();
    assert!(msg.contains("add") && msg.contains("[4]"), "{msg}");
}

#[test]
fn sigmoid_midpoint() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(0.0));
    let s = g.sigmoid(x);
    assert_eq!(g.value(s).item(), 0.5);
}

#[test]
fn conv_and_pool_lengths() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(vec![1, 3, 300]));
    let w = g.constant(Tensor::zeros(vec![256, 3, 8]));
    let c = g.conv1d(x, w, None).unwrap();
    assert_eq!(g.shape(c), &[1, 256, 293]);
    let p = g.maxpool1d(c).unwrap();
    assert_eq!(g.shape(p), &[1, 256, 146]);
}

#[test]
fn conv_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = random(&mut rng, &[2, 3, 10], -1.0, 1.0);
    let w = random(&mut rng, &[4, 3, 3], -1.0, 1.0);
    let b = random(&mut rng, &[4], -1.0, 1.0);
    let mut g = Graph::new();
    let (vx, vw, vb) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv1d(vx, vw, Some(vb)).unwrap();
    let y = g.value(y);
    for bi in 0..2 {
        for o in 0..4 {
            for t in 0..8 {
                let mut acc = b.data()[o];
                for c in 0..3 {
                    for j in 0..3 {
                        acc += w.at(&[o, c, j]) * x.at(&[bi, c, t + j]);
                    }
                }
                assert!((y.at(&[bi, o, t]) - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn eval_batchnorm_is_affine() {
    // With frozen statistics, f(a x + b y) = a f(x) + b f(y) whenever a + b = 1.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[2, 3, 6], -2.0, 2.0);
    let y = random(&mut rng, &[2, 3, 6], -2.0, 2.0);
    let gamma = Tensor::vector(vec![0.7, 1.3, -0.4]);
    let beta = Tensor::vector(vec![0.2, -0.1, 0.5]);
    let (mean, var) = ([0.3, -0.2, 0.05], [1.5, 0.4, 2.2]);
    let apply = |input: &Tensor| {
        let mut g = Graph::new();
        let v = g.constant(input.clone());
        let (gv, bv) = (g.constant(gamma.clone()), g.constant(beta.clone()));
        let out = g.batchnorm1d_eval(v, gv, bv, &mean, &var).unwrap();
        g.value(out).to_vec()
    };
    let (a, b) = (0.3, 0.7);
    let mix: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect();
    let lhs = apply(&Tensor::new(vec![2, 3, 6], mix).unwrap());
    let (fx, fy) = (apply(&x), apply(&y));
    for i in 0..lhs.len() {
        assert!((lhs[i] - (a * fx[i] + b * fy[i])).abs() < 1e-12);
    }
}

#[test]
fn train_batchnorm_survives_constant_input() {
    let mut g = Graph::new();
    let x = g.param(Tensor::full(vec![1, 2, 4], 3.0));
    let gamma = g.param(Tensor::full(vec![2], 1.0));
    let beta = g.param(Tensor::zeros(vec![2]));
    let (y, stats) = g.batchnorm1d_train(x, gamma, beta).unwrap();
    assert!(g.value(y).all_finite());
    assert_eq!(stats.mean, vec![3.0, 3.0]);
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(x).unwrap().all_finite());
}

#[test]
fn seeded_backward_is_a_vector_jacobian_product() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![0.5, -1.0]));
    let y = g.square(x);
    let grads = g
        .backward_seeded(&[(y, Tensor::vector(vec![3.0, 2.0]))])
        .unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[3.0, -4.0]);
}
