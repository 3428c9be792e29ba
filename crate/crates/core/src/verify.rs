//! Randomized oracle checks of the identities the library relies on.
//!
//! Each check draws its own networks and inputs from a seeded generator and
//! reports the worst relative error it saw against a fixed tolerance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curvature::{self, CurvatureKind, Metric};
use crate::diagnostics;
use crate::error::{Error, Result};
use crate::harness::data::whiten;
use crate::linalg::{self, Matrix};
use crate::loss::{self, LossKind, Targets};
use crate::nn::{self, Activation, Mode, NetworkParams, NetworkSpec, DEFAULT_PARAM_CAP};
use crate::optim;

pub const DEFAULT_TRIALS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub seed: u64,
}

impl CheckReport {
    fn new(name: &str, trials: usize, max_rel_error: f64, tolerance: f64, seed: u64) -> Self {
        CheckReport {
            name: name.to_string(),
            trials,
            max_rel_error,
            tolerance,
            pass: max_rel_error <= tolerance,
            seed,
        }
    }
}

pub type CheckFn = fn(usize, u64) -> Result<CheckReport>;

/// Every registered check, by name.
pub const CHECKS: [(&str, CheckFn); 9] = [
    ("lemma1", check_lemma1),
    ("gn_norm_identities", check_gn_norm_identities),
    ("theorem_jacobian", check_theorem_jacobian),
    ("equivalences", check_equivalences),
    ("bn_scale_invariance", check_bn_scale_invariance),
    ("update_rules", check_update_rules),
    ("curvature_scaling", check_curvature_scaling),
    ("gn_gradient", check_gn_gradient),
    ("kfac_linear_exactness", check_kfac_linear_exactness),
];

/// Runs every check (or only `only`) with `trials` trials each.
pub fn run_all(seed: u64, trials: usize, only: Option<&str>) -> Result<Vec<CheckReport>> {
    let selected: Vec<_> = CHECKS.iter().filter(|(name, _)| only.is_none_or(|o| o == *name)).collect();
    if selected.is_empty() {
        let names: Vec<&str> = CHECKS.iter().map(|(n, _)| *n).collect();
        return Err(Error::Config(format!("unknown check {:?}; known: {}", only.unwrap_or(""), names.join(", "))));
    }
    selected.par_iter().map(|(_, f)| f(trials, seed)).collect()
}

fn max_over_trials(trials: usize, seed: u64, salt: u64, mut trial: impl FnMut(usize, &mut ChaCha8Rng) -> Result<f64>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let e = trial(t, &mut rng)?;
        // NaN must not hide behind max
        worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
    }
    Ok(worst)
}

fn random_dims(rng: &mut ChaCha8Rng, layers: std::ops::RangeInclusive<usize>, widths: std::ops::RangeInclusive<usize>) -> Vec<usize> {
    let n = rng.random_range(layers);
    (0..=n).map(|_| rng.random_range(widths.clone())).collect()
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Inputs whose every pre-activation has magnitude at least `margin`.
fn generic_inputs(
    spec: &NetworkSpec,
    params: &NetworkParams,
    n: usize,
    margin: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Matrix>> {
    for _ in 0..200 {
        let x = gaussian(rng, n, spec.input_dim());
        let trace = nn::forward_trace(spec, params, &x, Mode::Train)?;
        if trace.pre.iter().all(|p| p.as_slice().iter().all(|v| v.abs() >= margin)) {
            return Ok(Some(x));
        }
    }
    Ok(None)
}

/// A bias-free net with generic inputs, redrawn until both exist.
fn generic_net(
    rng: &mut ChaCha8Rng,
    layers: std::ops::RangeInclusive<usize>,
    widths: std::ops::RangeInclusive<usize>,
    act: Activation,
    n: usize,
    margin: f64,
) -> Result<(NetworkSpec, NetworkParams, Matrix)> {
    loop {
        let spec = NetworkSpec::mlp(&random_dims(rng, layers.clone(), widths.clone()), act, false);
        let params = NetworkParams::init(&spec, rng)?;
        if let Some(x) = generic_inputs(&spec, &params, n, margin, rng)? {
            return Ok((spec, params, x));
        }
    }
}

fn random_activation(rng: &mut ChaCha8Rng) -> Activation {
    if rng.random_bool(0.5) {
        Activation::Relu
    } else {
        Activation::Identity
    }
}

fn scalar_rel(a: f64, b: f64) -> f64 {
    linalg::rel_err(&[a], &[b])
}

/// Jacobian sources for Lemma 1, replaceable to inject faults.
pub struct JacobianBackend {
    pub input: fn(&NetworkSpec, &NetworkParams, &Matrix) -> Result<Vec<Matrix>>,
    pub param: fn(&NetworkSpec, &NetworkParams, &Matrix) -> Result<Vec<Matrix>>,
}

impl Default for JacobianBackend {
    fn default() -> Self {
        JacobianBackend {
            input: |s, p, x| nn::input_jacobians(s, p, x, Mode::Train),
            param: |s, p, x| nn::param_jacobians(s, p, x, Mode::Train, DEFAULT_PARAM_CAP),
        }
    }
}

/// `f = J_x x` and `f = J_θ θ / (L+1)` on bias-free rectified and linear nets.
pub fn check_lemma1(trials: usize, seed: u64) -> Result<CheckReport> {
    check_lemma1_with(trials, seed, &JacobianBackend::default())
}

pub fn check_lemma1_with(trials: usize, seed: u64, backend: &JacobianBackend) -> Result<CheckReport> {
    let worst = max_over_trials(trials, seed, 1, |_, rng| {
        let act = random_activation(rng);
        let (spec, params, x) = generic_net(rng, 1..=4, 2..=16, act, 4, 1e-6)?;
        let (f, _) = nn::forward(&spec, &params, &x, Mode::Train)?;
        let jx = (backend.input)(&spec, &params, &x)?;
        let jt = (backend.param)(&spec, &params, &x)?;
        let theta = params.flatten();
        let l1 = (spec.depth() + 1) as f64;
        let mut e: f64 = 0.0;
        for i in 0..x.rows() {
            let via_x = jx[i].matvec(x.row(i))?;
            let via_t: Vec<f64> = jt[i].matvec(&theta)?.into_iter().map(|v| v / l1).collect();
            e = e.max(linalg::rel_err(&via_x, f.row(i))).max(linalg::rel_err(&via_t, f.row(i)));
        }
        Ok(e)
    })?;
    Ok(CheckReport::new("lemma1", trials, worst, 1e-9, seed))
}

/// GN norm identities against dense quadratic forms.
pub fn check_gn_norm_identities(trials: usize, seed: u64) -> Result<CheckReport> {
    let worst = max_over_trials(trials, seed, 2, |_, rng| {
        let act = random_activation(rng);
        let (spec, params, x) = generic_net(rng, 1..=4, 2..=10, act, 6, 1e-6)?;
        let g = curvature::dense_curvature(CurvatureKind::GaussNewton, &spec, &params, &x, LossKind::SquaredError, None, DEFAULT_PARAM_CAP)?;
        let theta = params.flatten();
        let dense = linalg::dot(&theta, &g.matvec(&theta)?);
        let mut e = scalar_rel(curvature::gn_norm(&spec, &params, &x)?, dense);
        let kfac = curvature::kfac_gn_norm(&spec, &params, &x)?;
        e = e.max(scalar_rel(kfac, curvature::block_diagonal_quadratic_form(&spec, &params, &g)?));
        if act == Activation::Identity {
            let (f, _) = nn::forward(&spec, &params, &x, Mode::Train)?;
            let mean_sq = linalg::frobenius_norm_sq(&f) / x.rows() as f64;
            e = e.max(scalar_rel(kfac, (spec.depth() + 1) as f64 * mean_sq));
        }
        Ok(e)
    })?;
    Ok(CheckReport::new("gn_norm_identities", trials, worst, 1e-8, seed))
}

fn theorem_trial(rng: &mut ChaCha8Rng, whitened: bool) -> Result<f64> {
    let spec = NetworkSpec::mlp(&random_dims(rng, 1..=4, 2..=8), Activation::Identity, false);
    let params = NetworkParams::init(&spec, rng)?;
    let d = spec.input_dim();
    let raw = gaussian(rng, 4 * d + 8, d);
    let x = if whitened {
        whiten(&raw)?
    } else {
        // shifted and stretched: neither centered nor isotropic
        Matrix::from_fn(raw.rows(), d, |r, c| 3.0 * raw.get(r, c) + 1.0)
    };
    let lhs = curvature::kfac_gn_norm(&spec, &params, &x)?;
    let rhs = (spec.depth() + 1) as f64 * diagnostics::jacobian_frob_norm(&spec, &params, &x, Mode::Train)?;
    Ok(scalar_rel(lhs, rhs))
}

/// `‖θ‖²_{G_KFAC} = (L+1)‖J_x‖²_F` on linear nets with whitened inputs.
pub fn check_theorem_jacobian(trials: usize, seed: u64) -> Result<CheckReport> {
    let worst = max_over_trials(trials, seed, 3, |_, rng| theorem_trial(rng, true))?;
    Ok(CheckReport::new("theorem_jacobian", trials, worst, 1e-8, seed))
}

/// Smallest violation of the Jacobian identity over non-whitened batches.
pub fn theorem_jacobian_control(trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut least = f64::INFINITY;
    for _ in 0..trials {
        least = least.min(theorem_trial(&mut rng, false)?);
    }
    Ok(least)
}

/// Exact Fisher against the generalized GN (cross-entropy) and GN (squared error).
pub fn check_equivalences(trials: usize, seed: u64) -> Result<CheckReport> {
    let worst = max_over_trials(trials, seed, 4, |t, rng| {
        let mut dims = random_dims(rng, 1..=3, 2..=6);
        // a single class makes the cross-entropy Hessian vanish
        *dims.last_mut().unwrap() = if t % 10 == 0 { 1 } else { rng.random_range(2..=4) };
        let spec = NetworkSpec::mlp(&dims, Activation::Relu, false).with_bias(rng.random_bool(0.5));
        let params = NetworkParams::init(&spec, rng)?;
        let x = gaussian(rng, 4, spec.input_dim());
        let dense = |kind, lk| curvature::dense_curvature(kind, &spec, &params, &x, lk, None, DEFAULT_PARAM_CAP);
        let ce = linalg::rel_err(
            dense(CurvatureKind::FisherExact, LossKind::CrossEntropySoftmax)?.as_slice(),
            dense(CurvatureKind::GeneralizedGn, LossKind::CrossEntropySoftmax)?.as_slice(),
        );
        let se = linalg::rel_err(
            dense(CurvatureKind::FisherExact, LossKind::SquaredError)?.as_slice(),
            dense(CurvatureKind::GaussNewton, LossKind::SquaredError)?.as_slice(),
        );
        Ok(ce.max(se))
    })?;
    Ok(CheckReport::new("equivalences", trials, worst, 1e-9, seed))
}

/// A BN network with a near-zero BN epsilon, so scale invariance is exact to rounding.
fn random_bn_net(
    rng: &mut ChaCha8Rng,
    widths: std::ops::RangeInclusive<usize>,
    allow_bias: bool,
) -> Result<(NetworkSpec, NetworkParams)> {
    let dims = random_dims(rng, 2..=4, widths);
    let bias = allow_bias && rng.random_bool(0.5);
    let spec = NetworkSpec::mlp(&dims, Activation::Relu, true)
        .with_bias(bias)
        .with_bn_epsilon(1e-16);
    let params = NetworkParams::init(&spec, rng)?;
    Ok((spec, params))
}

/// Logits are unchanged when a BN-covered layer is scaled by α > 0.
pub fn check_bn_scale_invariance(trials: usize, seed: u64) -> Result<CheckReport> {
    let worst = max_over_trials(trials, seed, 5, |_, rng| {
        let (spec, params) = random_bn_net(rng, 2..=12, true)?;
        let x = gaussian(rng, 8, spec.input_dim());
        let (base, _) = nn::forward(&spec, &params, &x, Mode::Train)?;
        let mut e: f64 = 0.0;
        for l in (0..spec.num_layers()).filter(|&l| spec.bn_covered(l)) {
            for alpha in [0.5, 2.0, 10.0] {
                let scaled = nn::scale_layer(&params, l, alpha)?;
                let (out, _) = nn::forward(&spec, &scaled, &x, Mode::Train)?;
                e = e.max(linalg::rel_err(out.as_slice(), base.as_slice()));
            }
        }
        Ok(e)
    })?;
    Ok(CheckReport::new("bn_scale_invariance", trials, worst, 1e-9, seed))
}

fn layer_slice(spec: &NetworkSpec, theta: &[f64], l: usize) -> Vec<f64> {
    let off = spec.layer_offset(l);
    theta[off..off + spec.layer_shape(l).0 * spec.layer_shape(l).1].to_vec()
}

fn layer_grad(spec: &NetworkSpec, params: &NetworkParams, x: &Matrix, y: &[usize], l: usize) -> Result<Vec<f64>> {
    let trace = nn::forward_trace(spec, params, x, Mode::Train)?;
    let (_, dl) = loss::loss_and_grad(LossKind::CrossEntropySoftmax, trace.logits(), Targets::Labels(y))?;
    let g = nn::backward(spec, params, &trace, &dl)?;
    Ok(g.weights[l].as_slice().to_vec())
}

fn layer_curvature(kind: CurvatureKind, spec: &NetworkSpec, params: &NetworkParams, x: &Matrix, l: usize) -> Result<Matrix> {
    let c = curvature::dense_curvature(kind, spec, params, x, LossKind::CrossEntropySoftmax, None, DEFAULT_PARAM_CAP)?;
    Ok(curvature::layer_block(spec, &c, l))
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = linalg::norm2(v);
    v.iter().map(|x| x / n).collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

pub const UPDATE_RULE_ETAS: [f64; 3] = [1e-2, 5e-3, 2.5e-3];

/// Slopes of the one-step discrepancy between actual normalized updates
/// (SGD and the dense damped natural-gradient step) and their first-order
/// predictions, as functions of η.
pub fn update_rule_slopes(rng: &mut ChaCha8Rng, kind: CurvatureKind) -> Result<(f64, f64)> {
    loop {
        let (spec, params) = random_bn_net(rng, 3..=6, false)?;
        let n = 16;
        let x = gaussian(rng, n, spec.input_dim());
        let k = spec.output_dim();
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let covered: Vec<usize> = (0..spec.num_layers()).filter(|&l| spec.bn_covered(l)).collect();
        let l = covered[rng.random_range(0..covered.len())];

        let norm0 = linalg::frobenius_norm_sq(&params.weights[l]).sqrt();
        let p_hat = nn::scale_layer(&params, l, 1.0 / norm0)?;
        let theta_hat = unit(&layer_slice(&spec, &p_hat.flatten(), l));
        let g_hat = layer_grad(&spec, &p_hat, &x, &y, l)?;
        let g_norm = linalg::norm2(&g_hat);
        if g_norm < 1e-6 {
            continue;
        }

        // SGD at ρ with ‖∇L(θ̂)‖/ρ² = 1, so the normalized step is η-sized
        let rho = g_norm.sqrt();
        let p = nn::scale_layer(&p_hat, l, rho)?;
        let theta = layer_slice(&spec, &p.flatten(), l);
        let g = layer_grad(&spec, &p, &x, &y, l)?;
        let mut sgd_disc = Vec::new();
        for eta in UPDATE_RULE_ETAS {
            let stepped: Vec<f64> = theta.iter().zip(&g).map(|(t, gi)| t - eta * gi).collect();
            let pred = optim::predict_normalized_sgd_step(&theta_hat, rho, &g_hat, eta)?;
            sgd_disc.push(distance(&unit(&stepped), &pred));
        }

        // damped natural gradient, damping sized so the normalized step is at most η
        let c_hat = layer_curvature(kind, &spec, &p_hat, &x, l)?;
        let per_param = linalg::trace(&c_hat)? / c_hat.rows() as f64;
        let rho = 2.0;
        let lambda = per_param.max(g_norm) / (rho * rho);
        let p = nn::scale_layer(&p_hat, l, rho)?;
        let theta = layer_slice(&spec, &p.flatten(), l);
        let g = layer_grad(&spec, &p, &x, &y, l)?;
        let c = layer_curvature(kind, &spec, &p, &x, l)?;
        let d = linalg::damped_inverse(&c, lambda)?.matvec(&g)?;
        let mut kfac_disc = Vec::new();
        for eta in UPDATE_RULE_ETAS {
            let stepped: Vec<f64> = theta.iter().zip(&d).map(|(t, di)| t - eta * di).collect();
            let pred = optim::predict_normalized_kfac_step(&theta_hat, rho, &c_hat, lambda, &g_hat, eta)?;
            kfac_disc.push(distance(&unit(&stepped), &pred));
        }
        return Ok((log_log_slope(&UPDATE_RULE_ETAS, &sgd_disc), log_log_slope(&UPDATE_RULE_ETAS, &kfac_disc)));
    }
}

/// Discrepancies shrink like η²: fitted log-log slope within 2 ± 0.2.
pub fn check_update_rules(trials: usize, seed: u64) -> Result<CheckReport> {
    let worst = max_over_trials(trials, seed, 6, |t, rng| {
        let kind = if t % 2 == 0 {
            CurvatureKind::GaussNewton
        } else {
            CurvatureKind::FisherExact
        };
        let (s1, s2) = update_rule_slopes(rng, kind)?;
        Ok((s1 - 2.0).abs().max((s2 - 2.0).abs()))
    })?;
    Ok(CheckReport::new("update_rules", trials, worst, 0.2, seed))
}

/// `C(αθ_l) = α⁻² C(θ_l)` for BN-covered layers.
pub fn check_curvature_scaling(trials: usize, seed: u64) -> Result<CheckReport> {
    let worst = max_over_trials(trials, seed, 7, |t, rng| {
        let (spec, params) = random_bn_net(rng, 2..=6, true)?;
        let x = gaussian(rng, 6, spec.input_dim());
        let covered: Vec<usize> = (0..spec.num_layers()).filter(|&l| spec.bn_covered(l)).collect();
        let l = covered[rng.random_range(0..covered.len())];
        let kind = if t % 2 == 0 {
            CurvatureKind::FisherExact
        } else {
            CurvatureKind::GaussNewton
        };
        let alpha = if t % 3 == 0 { 2.0 } else { rng.random_range(0.5..4.0) };
        let base = layer_curvature(kind, &spec, &params, &x, l)?;
        let scaled = layer_curvature(kind, &spec, &nn::scale_layer(&params, l, alpha)?, &x, l)?;
        Ok(linalg::rel_err(scaled.scale(alpha * alpha).as_slice(), base.as_slice()))
    })?;
    Ok(CheckReport::new("curvature_scaling", trials, worst, 1e-8, seed))
}

/// Analytic GN-norm gradient against central finite differences.
pub fn check_gn_gradient(trials: usize, seed: u64) -> Result<CheckReport> {
    let worst = max_over_trials(trials, seed, 8, |t, rng| {
        let act = random_activation(rng);
        let (spec, mut params, x) = generic_net(rng, 1..=3, 2..=8, act, 4, 1e-2)?;
        if t == 0 {
            params = NetworkParams::zeros(&spec);
        }
        let analytic = curvature::gn_norm_gradient(&spec, &params, &x, DEFAULT_PARAM_CAP)?;
        let theta = params.flatten();
        let h = 1e-6;
        let mut fd = vec![0.0; theta.len()];
        for i in 0..theta.len() {
            let mut tp = theta.clone();
            tp[i] += h;
            let mut tm = theta.clone();
            tm[i] -= h;
            let fp = curvature::gn_norm(&spec, &NetworkParams::unflatten(&spec, &tp)?, &x)?;
            let fm = curvature::gn_norm(&spec, &NetworkParams::unflatten(&spec, &tm)?, &x)?;
            fd[i] = (fp - fm) / (2.0 * h);
        }
        if t == 0 {
            // at θ = 0 the gradient is exactly zero
            return Ok(linalg::norm2(&analytic));
        }
        Ok(linalg::rel_err(&analytic, &fd))
    })?;
    Ok(CheckReport::new("gn_gradient", trials, worst, 1e-5, seed))
}

fn kfac_block_error(spec: &NetworkSpec, params: &NetworkParams, x: &Matrix) -> Result<f64> {
    let g = curvature::dense_curvature(CurvatureKind::GaussNewton, spec, params, x, LossKind::SquaredError, None, DEFAULT_PARAM_CAP)?;
    let factors = curvature::estimate_kfac_factors(Metric::Gn, spec, params, x, LossKind::SquaredError, None)?;
    let mut e: f64 = 0.0;
    for (l, f) in factors.iter().enumerate() {
        let approx = linalg::kron(&f.s, &f.a);
        e = e.max(linalg::rel_err(approx.as_slice(), curvature::layer_block(spec, &g, l).as_slice()));
    }
    Ok(e)
}

/// `S_l ⊗ A_l` equals the dense GN diagonal block on linear nets.
pub fn check_kfac_linear_exactness(trials: usize, seed: u64) -> Result<CheckReport> {
    let worst = max_over_trials(trials, seed, 9, |_, rng| {
        let spec = NetworkSpec::mlp(&random_dims(rng, 1..=4, 2..=7), Activation::Identity, false);
        let params = NetworkParams::init(&spec, rng)?;
        let x = gaussian(rng, 6, spec.input_dim());
        kfac_block_error(&spec, &params, &x)
    })?;
    Ok(CheckReport::new("kfac_linear_exactness", trials, worst, 1e-8, seed))
}

/// Smallest Kronecker-block mismatch over ReLU nets, where exactness is not claimed.
pub fn kfac_relu_control(trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut least = f64::INFINITY;
    for _ in 0..trials {
        let (spec, params, x) = generic_net(&mut rng, 2..=3, 3..=7, Activation::Relu, 6, 1e-6)?;
        least = least.min(kfac_block_error(&spec, &params, &x)?);
    }
    Ok(least)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_exact_power_law() {
        let x = [1e-2, 5e-3, 2.5e-3];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v * v).collect();
        assert!((log_log_slope(&x, &y) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn checks_pass_on_few_trials() {
        for (name, f) in CHECKS {
            let r = f(5, 11).unwrap();
            assert!(r.pass, "{name}: {r:?}");
            assert_eq!(r.name, name);
        }
    }

    #[test]
    fn unknown_check_is_rejected() {
        assert!(matches!(run_all(0, 1, Some("nope")), Err(Error::Config(_))));
        assert_eq!(run_all(0, 2, Some("lemma1")).unwrap().len(), 1);
    }

    #[test]
    fn corrupted_backward_fails_lemma1() {
        let bad = JacobianBackend {
            input: |s, p, x| nn::input_jacobians(s, p, x, Mode::Train),
            param: |s, p, x| {
                let mut j = nn::param_jacobians(s, p, x, Mode::Train, DEFAULT_PARAM_CAP)?;
                for m in &mut j {
                    m.scale_in_place(1.01);
                }
                Ok(j)
            },
        };
        assert!(!check_lemma1_with(5, 0, &bad).unwrap().pass);
    }

    #[test]
    fn negative_controls_violate() {
        assert!(theorem_jacobian_control(10, 1).unwrap() > 1e-6);
        assert!(kfac_relu_control(10, 2).unwrap() > 1e-8);
    }
}
