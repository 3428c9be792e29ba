//! Analytic derivatives against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wdlab::curvature;
use wdlab::linalg::{self, Matrix};
use wdlab::loss::{self, LossKind, Targets};
use wdlab::nn::{self, Activation, Mode, NetworkParams, NetworkSpec};

const H: f64 = 1e-6;

fn central(f: impl Fn(&[f64]) -> f64, at: &[f64]) -> Vec<f64> {
    let mut x = at.to_vec();
    (0..at.len())
        .map(|i| {
            let v = x[i];
            x[i] = v + H;
            let up = f(&x);
            x[i] = v - H;
            let down = f(&x);
            x[i] = v;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.5..1.5))
}

fn batch_loss(spec: &NetworkSpec, theta: &[f64], x: &Matrix, y: &[usize]) -> f64 {
    let p = NetworkParams::unflatten(spec, theta).unwrap();
    let (logits, _) = nn::forward(spec, &p, x, Mode::Train).unwrap();
    loss::loss_and_grad(LossKind::CrossEntropySoftmax, &logits, Targets::Labels(y)).unwrap().0
}

#[test]
fn backward_matches_finite_differences_with_and_without_bn() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (bn, bias) in [(false, false), (false, true), (true, false), (true, true)] {
        let spec = NetworkSpec::mlp(&[5, 7, 6, 4], Activation::Relu, bn).with_bias(bias);
        let params = NetworkParams::init(&spec, &mut rng).unwrap();
        let x = gaussian(12, 5, &mut rng);
        let y: Vec<usize> = (0..12).map(|_| rng.random_range(0..4)).collect();
        let trace = nn::forward_trace(&spec, &params, &x, Mode::Train).unwrap();
        let (_, d) = loss::loss_and_grad(LossKind::CrossEntropySoftmax, trace.logits(), Targets::Labels(&y)).unwrap();
        let analytic = nn::backward(&spec, &params, &trace, &d).unwrap().flatten();
        let numeric = central(|t| batch_loss(&spec, t, &x, &y), &params.flatten());
        let err = linalg::rel_err(&analytic, &numeric);
        assert!(err <= 1e-5, "bn={bn} bias={bias}: rel err {err:e}");
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = gaussian(6, 4, &mut rng);
    let labels: Vec<usize> = (0..6).map(|r| r % 4).collect();
    let targets = gaussian(6, 4, &mut rng);
    for kind in [LossKind::CrossEntropySoftmax, LossKind::SquaredError] {
        let value = |z: &[f64]| {
            let m = Matrix::from_vec(6, 4, z.to_vec()).unwrap();
            let t = match kind {
                LossKind::CrossEntropySoftmax => Targets::Labels(&labels),
                LossKind::SquaredError => Targets::Values(&targets),
            };
            loss::loss_and_grad(kind, &m, t).unwrap().0
        };
        let t = match kind {
            LossKind::CrossEntropySoftmax => Targets::Labels(&labels),
            LossKind::SquaredError => Targets::Values(&targets),
        };
        let (_, g) = loss::loss_and_grad(kind, &logits, t).unwrap();
        let err = linalg::rel_err(g.as_slice(), &central(value, logits.as_slice()));
        assert!(err <= 1e-6, "{kind:?}: rel err {err:e}");
    }
}

#[test]
fn gn_norm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spec = NetworkSpec::mlp(&[4, 5, 3], Activation::Relu, false);
    let params = NetworkParams::init(&spec, &mut rng).unwrap();
    let x = gaussian(20, 4, &mut rng);
    let analytic = curvature::gn_norm_gradient(&spec, &params, &x, 10_000).unwrap();
    let numeric = central(
        |t| curvature::gn_norm(&spec, &NetworkParams::unflatten(&spec, t).unwrap(), &x).unwrap(),
        &params.flatten(),
    );
    let err = linalg::rel_err(&analytic, &numeric);
    assert!(err <= 1e-5, "rel err {err:e}");
}

#[test]
fn input_jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let spec = NetworkSpec::mlp(&[4, 6, 3], Activation::Relu, false).with_bias(true);
    let params = NetworkParams::init(&spec, &mut rng).unwrap();
    let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let j = nn::input_jacobian(&spec, &params, &x, Mode::Train).unwrap();
    for out in 0..3 {
        let f = |v: &[f64]| {
            let m = Matrix::from_vec(1, 4, v.to_vec()).unwrap();
            nn::forward(&spec, &params, &m, Mode::Train).unwrap().0.get(0, out)
        };
        let err = linalg::rel_err(j.row(out), &central(f, &x));
        assert!(err <= 1e-6, "output {out}: rel err {err:e}");
    }
}
