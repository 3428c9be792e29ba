//! Fisher and Gauss-Newton curvature: dense matrices over the flattened
//! parameters, Kronecker factors for K-FAC, and norms measured in these metrics.
//!
//! Expectations are taken over the rows of the batch passed in. BN statistics
//! are the batch statistics of that batch, held fixed when differentiating, so
//! each example contributes its own linearization `J_θ`.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, DampingMode, KronPreconditioner, Matrix};
use crate::loss::{self, LossKind};
use crate::nn::{self, BackwardOptions, BnGrad, ForwardTrace, Mode, NetworkParams, NetworkSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureKind {
    /// Monte Carlo Fisher with `samples` model-sampled targets per example.
    FisherSampled { samples: usize },
    /// Fisher with the expectation over targets computed exactly.
    FisherExact,
    /// `E[J^T J]`.
    GaussNewton,
    /// `E[J^T H J]` with `H` the output-layer loss Hessian.
    GeneralizedGn,
}

/// Statistics used for K-FAC factors and curvature traces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Fisher,
    Gn,
}

/// Accumulates `C = Σ w_r · u_r v_r^T` through stacked rows and a single GEMM.
struct OuterAccumulator {
    left: Vec<f64>,
    right: Vec<f64>,
    rows: usize,
    dim: usize,
}

impl OuterAccumulator {
    fn new(dim: usize) -> Self {
        OuterAccumulator {
            left: Vec::new(),
            right: Vec::new(),
            rows: 0,
            dim,
        }
    }

    fn push(&mut self, weight: f64, u: &[f64], v: &[f64]) {
        self.left.extend(u.iter().map(|x| x * weight));
        self.right.extend_from_slice(v);
        self.rows += 1;
    }

    fn finish(self) -> Result<Matrix> {
        let l = Matrix::from_vec(self.rows, self.dim, self.left)?;
        let r = Matrix::from_vec(self.rows, self.dim, self.right)?;
        let mut c = l.t_matmul(&r)?;
        c.symmetrize();
        Ok(c)
    }
}

/// `J^T v` for a `k x P` Jacobian.
fn jt_vec(j: &Matrix, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; j.cols()];
    for (c, &vc) in v.iter().enumerate() {
        if vc != 0.0 {
            for (o, x) in out.iter_mut().zip(j.row(c)) {
                *o += vc * x;
            }
        }
    }
    out
}

/// Dense curvature over the canonical θ flattening (`P x P`).
pub fn dense_curvature(
    kind: CurvatureKind,
    spec: &NetworkSpec,
    params: &NetworkParams,
    x: &Matrix,
    loss_kind: LossKind,
    rng: Option<&mut dyn RngCore>,
    cap: usize,
) -> Result<Matrix> {
    let jacs = nn::param_jacobians(spec, params, x, Mode::Train, cap)?;
    let logits = nn::forward_trace(spec, params, x, Mode::Train)?.logits().clone();
    curvature_from_jacobians(kind, &jacs, &logits, loss_kind, rng)
}

fn curvature_from_jacobians(
    kind: CurvatureKind,
    jacs: &[Matrix],
    logits: &Matrix,
    loss_kind: LossKind,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Matrix> {
    let n = jacs.len();
    let p = jacs.first().map_or(0, |j| j.cols());
    let k = logits.cols();
    let inv_n = 1.0 / n as f64;
    let mut acc = OuterAccumulator::new(p);
    match kind {
        CurvatureKind::GaussNewton => {
            for j in jacs {
                for c in 0..k {
                    acc.push(inv_n, j.row(c), j.row(c));
                }
            }
        }
        CurvatureKind::GeneralizedGn => {
            for (i, j) in jacs.iter().enumerate() {
                let h = loss::output_hessian(loss_kind, logits.row(i));
                let hj = h.matmul(j)?;
                for c in 0..k {
                    acc.push(inv_n, j.row(c), hj.row(c));
                }
            }
        }
        CurvatureKind::FisherExact => {
            for (i, j) in jacs.iter().enumerate() {
                match loss_kind {
                    LossKind::CrossEntropySoftmax => {
                        let prob = loss::softmax(logits.row(i));
                        for (y, &py) in prob.iter().enumerate() {
                            let resid: Vec<f64> = prob
                                .iter()
                                .enumerate()
                                .map(|(c, &pc)| if c == y { 1.0 - pc } else { -pc })
                                .collect();
                            let g = jt_vec(j, &resid);
                            acc.push(inv_n * py, &g, &g);
                        }
                    }
                    LossKind::SquaredError => {
                        // Unit-variance Gaussian: the 2k points ±√k e_c with
                        // weight 1/(2k) reproduce the noise covariance exactly.
                        let r = (k as f64).sqrt();
                        let w = inv_n / (2 * k) as f64;
                        for c in 0..k {
                            for sign in [1.0, -1.0] {
                                let mut eps = vec![0.0; k];
                                eps[c] = sign * r;
                                let g = jt_vec(j, &eps);
                                acc.push(w, &g, &g);
                            }
                        }
                    }
                }
            }
        }
        CurvatureKind::FisherSampled { samples } => {
            let rng = rng
                .as_deref_mut()
                .ok_or_else(|| Error::domain("sampled Fisher needs a random number generator"))?;
            if samples == 0 {
                return Err(Error::domain("sampled Fisher needs at least one sample"));
            }
            let w = inv_n / samples as f64;
            for (i, j) in jacs.iter().enumerate() {
                match loss_kind {
                    LossKind::CrossEntropySoftmax => {
                        let prob = loss::softmax(logits.row(i));
                        let pm = Matrix::from_fn(samples, k, |_, c| prob[c]);
                        for y in loss::sample_targets(&pm, rng)? {
                            let resid: Vec<f64> = prob
                                .iter()
                                .enumerate()
                                .map(|(c, &pc)| if c == y { 1.0 - pc } else { -pc })
                                .collect();
                            let g = jt_vec(j, &resid);
                            acc.push(w, &g, &g);
                        }
                    }
                    LossKind::SquaredError => {
                        for _ in 0..samples {
                            let eps: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
                            let g = jt_vec(j, &eps);
                            acc.push(w, &g, &g);
                        }
                    }
                }
            }
        }
    }
    acc.finish()
}

/// The diagonal block of a dense curvature matrix belonging to layer `l`.
pub fn layer_block(spec: &NetworkSpec, c: &Matrix, l: usize) -> Matrix {
    let off = spec.layer_offset(l);
    let size = spec.layer_param_count(l);
    Matrix::from_fn(size, size, |r, col| c.get(off + r, off + col))
}

/// Per-layer Kronecker factors `A_l` (input second moments) and `S_l`
/// (pre-activation gradient second moments).
#[derive(Clone, Debug, PartialEq)]
pub struct FactorPair {
    pub a: Matrix,
    pub s: Matrix,
}

fn activation_factor(a: &Matrix, homogeneous: bool) -> Result<Matrix> {
    let n = a.rows() as f64;
    let mut m = if homogeneous {
        let aug = Matrix::from_fn(a.rows(), a.cols() + 1, |r, c| {
            if c < a.cols() {
                a.get(r, c)
            } else {
                1.0
            }
        });
        aug.t_matmul(&aug)?
    } else {
        a.t_matmul(a)?
    };
    m.scale_in_place(1.0 / n);
    m.symmetrize();
    Ok(m)
}

/// Fresh K-FAC factors from a batch.
///
/// With biases, `A_l` is built from inputs augmented by a constant 1 so the
/// bias column is preconditioned together with `W_l`.
pub fn estimate_kfac_factors(
    metric: Metric,
    spec: &NetworkSpec,
    params: &NetworkParams,
    x: &Matrix,
    loss_kind: LossKind,
    rng: Option<&mut dyn RngCore>,
) -> Result<Vec<FactorPair>> {
    let trace = nn::forward_trace(spec, params, x, Mode::Train)?;
    kfac_factors_from_trace(metric, spec, params, &trace, loss_kind, rng)
}

pub fn kfac_factors_from_trace(
    metric: Metric,
    spec: &NetworkSpec,
    params: &NetworkParams,
    trace: &ForwardTrace,
    loss_kind: LossKind,
    rng: Option<&mut dyn RngCore>,
) -> Result<Vec<FactorPair>> {
    let n = trace.batch_size();
    let inv_n = 1.0 / n as f64;
    let s_factors: Vec<Matrix> = match metric {
        Metric::Gn => {
            let jac = nn::output_s_jacobians(spec, params, trace)?;
            (0..spec.num_layers())
                .map(|l| {
                    let mut s = Matrix::zeros(spec.layer_shape(l).0, spec.layer_shape(l).0);
                    for per_class in &jac {
                        s.axpy(1.0, &per_class[l].t_matmul(&per_class[l])?)?;
                    }
                    s.scale_in_place(inv_n);
                    s.symmetrize();
                    Ok(s)
                })
                .collect::<Result<_>>()?
        }
        Metric::Fisher => {
            let rng = rng.ok_or_else(|| Error::domain("Fisher factors need a random number generator"))?;
            let logits = trace.logits();
            let seed = match loss_kind {
                LossKind::CrossEntropySoftmax => {
                    let p = loss::softmax_rows(logits);
                    let y = loss::sample_targets(&p, rng)?;
                    let mut g = p;
                    for (r, &yr) in y.iter().enumerate() {
                        g.add_at(r, yr, -1.0);
                    }
                    g
                }
                LossKind::SquaredError => Matrix::from_fn(n, logits.cols(), |_, _| StandardNormal.sample(rng)),
            };
            let g = nn::backward_with(
                spec,
                params,
                trace,
                &seed,
                BackwardOptions {
                    bn: BnGrad::FixedStats,
                    weight_grads: false,
                    input_grad: false,
                },
            )?;
            g.s_grads
                .iter()
                .map(|ds| {
                    let mut s = ds.t_matmul(ds)?;
                    s.scale_in_place(inv_n);
                    s.symmetrize();
                    Ok(s)
                })
                .collect::<Result<_>>()?
        }
    };
    s_factors
        .into_iter()
        .enumerate()
        .map(|(l, s)| {
            Ok(FactorPair {
                a: activation_factor(trace.input(l), spec.use_bias)?,
                s,
            })
        })
        .collect()
}

/// Running K-FAC curvature state owned by one optimizer.
#[derive(Clone, Debug)]
pub struct KfacFactors {
    pub layers: Vec<FactorPair>,
    /// Damped inverses as of the last inversion.
    pub inverses: Vec<Option<KronPreconditioner>>,
    pub lambda: f64,
    pub damping: DampingMode,
    /// Number of factor refreshes so far.
    pub stats_updates: usize,
    /// Steps since the factors were last refreshed.
    pub stats_age: usize,
    /// Steps since the inverses were last recomputed.
    pub inverse_age: usize,
}

impl KfacFactors {
    pub fn new(lambda: f64, damping: DampingMode) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::domain(format!("K-FAC damping must be positive, got {lambda}")));
        }
        Ok(KfacFactors {
            layers: Vec::new(),
            inverses: Vec::new(),
            lambda,
            damping,
            stats_updates: 0,
            stats_age: 0,
            inverse_age: 0,
        })
    }

    /// Folds fresh factors in; the first refresh adopts them as-is.
    pub fn absorb(&mut self, fresh: Vec<FactorPair>, decay: f64) -> Result<()> {
        if self.layers.is_empty() {
            self.layers = fresh;
        } else {
            self.layers = blend_factors(&self.layers, &fresh, decay)?;
        }
        self.stats_updates += 1;
        self.stats_age = 0;
        Ok(())
    }

    pub fn invert(&mut self) -> Result<()> {
        self.inverses = self
            .layers
            .iter()
            .map(|f| {
                let pre = KronPreconditioner::new(&f.a, &f.s, self.lambda, self.damping)?;
                Ok(Some(pre))
            })
            .collect::<Result<_>>()?;
        self.inverse_age = 0;
        Ok(())
    }

    /// `S_l ⊗ A_l` assembled densely, in the canonical θ order of layer `l`.
    pub fn dense_block(&self, l: usize) -> Matrix {
        let f = &self.layers[l];
        linalg::kron(&f.s, &f.a)
    }
}

fn blend_factors(old: &[FactorPair], fresh: &[FactorPair], decay: f64) -> Result<Vec<FactorPair>> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::domain(format!("EMA decay must lie in [0, 1), got {decay}")));
    }
    if old.len() != fresh.len() {
        return Err(Error::structural("factor lists have different lengths"));
    }
    old.iter()
        .zip(fresh)
        .map(|(o, f)| {
            let mut a = o.a.scale(decay);
            a.axpy(1.0 - decay, &f.a)?;
            let mut s = o.s.scale(decay);
            s.axpy(1.0 - decay, &f.s)?;
            Ok(FactorPair { a, s })
        })
        .collect()
}

/// `decay · old + (1 − decay) · fresh`, factor by factor.
pub fn update_factors_ema(state: &KfacFactors, fresh: &[FactorPair], decay: f64) -> Result<KfacFactors> {
    let mut out = state.clone();
    out.layers = blend_factors(&state.layers, fresh, decay)?;
    out.stats_updates += 1;
    out.stats_age = 0;
    Ok(out)
}

fn require_homogeneous(spec: &NetworkSpec, what: &str) -> Result<()> {
    if spec.use_bias {
        return Err(Error::Contract(format!("{what} requires a bias-free network")));
    }
    if spec.has_bn() {
        return Err(Error::Contract(format!("{what} requires a network without BN")));
    }
    Ok(())
}

fn mean_sq_output(out: &Matrix) -> f64 {
    linalg::frobenius_norm_sq(out) / out.rows() as f64
}

/// `‖θ‖²_G = (L+1)² E‖f(x)‖²` for bias-free rectified or linear networks.
pub fn gn_norm(spec: &NetworkSpec, params: &NetworkParams, x: &Matrix) -> Result<f64> {
    require_homogeneous(spec, "gn_norm")?;
    let (logits, _) = nn::forward(spec, params, x, Mode::Train)?;
    let l1 = (spec.depth() + 1) as f64;
    Ok(l1 * l1 * mean_sq_output(&logits))
}

/// `Σ_l θ_l^T G_ll θ_l` via exact per-layer quadratic forms `E‖J_{θ_l} θ_l‖²`.
pub fn kfac_gn_norm(spec: &NetworkSpec, params: &NetworkParams, x: &Matrix) -> Result<f64> {
    let trace = nn::forward_trace(spec, params, x, Mode::Train)?;
    let mut total = 0.0;
    for l in 0..spec.num_layers() {
        let tb = params.biases.as_ref().map(|b| b[l].as_slice());
        let jvp = nn::layer_jvp(spec, params, &trace, l, &params.weights[l], tb)?;
        total += mean_sq_output(&jvp);
    }
    Ok(total)
}

/// `Σ_l θ_l^T C_ll θ_l` for an assembled dense curvature matrix.
pub fn block_diagonal_quadratic_form(spec: &NetworkSpec, params: &NetworkParams, c: &Matrix) -> Result<f64> {
    let theta = params.flatten();
    let mut total = 0.0;
    for l in 0..spec.num_layers() {
        let off = spec.layer_offset(l);
        let size = spec.layer_param_count(l);
        let t = &theta[off..off + size];
        let block = layer_block(spec, c, l);
        total += linalg::dot(t, &block.matvec(t)?);
    }
    Ok(total)
}

/// `∂‖θ‖²_G/∂θ = 2(L+1) G θ`, from the dense Gauss-Newton matrix.
pub fn gn_norm_gradient(spec: &NetworkSpec, params: &NetworkParams, x: &Matrix, cap: usize) -> Result<Vec<f64>> {
    require_homogeneous(spec, "gn_norm_gradient")?;
    let g = dense_curvature(
        CurvatureKind::GaussNewton,
        spec,
        params,
        x,
        LossKind::SquaredError,
        None,
        cap,
    )?;
    let l1 = (spec.depth() + 1) as f64;
    let gt = g.matvec(&params.flatten())?;
    Ok(gt.into_iter().map(|v| 2.0 * l1 * v).collect())
}

/// Per-layer traces of the layer blocks of the exact Fisher and GN matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTraces {
    pub fisher: Vec<f64>,
    pub gn: Vec<f64>,
}

/// Traces of every layer's Fisher and GN blocks, computed without forming them.
///
/// Each example contributes `(‖a‖² [+1]) · tr(J_s^T M J_s)` where `J_s` is the
/// logit Jacobian of the layer's pre-activations and `M` is `I` (GN) or the
/// output Hessian (exact Fisher).
pub fn layer_traces(
    spec: &NetworkSpec,
    params: &NetworkParams,
    x: &Matrix,
    loss_kind: LossKind,
) -> Result<LayerTraces> {
    let trace = nn::forward_trace(spec, params, x, Mode::Train)?;
    let jac = nn::output_s_jacobians(spec, params, &trace)?;
    let n = trace.batch_size();
    let k = spec.output_dim();
    let logits = trace.logits();
    let hessians: Vec<Matrix> = (0..n).map(|i| loss::output_hessian(loss_kind, logits.row(i))).collect();
    let mut out = LayerTraces {
        fisher: vec![0.0; spec.num_layers()],
        gn: vec![0.0; spec.num_layers()],
    };
    for l in 0..spec.num_layers() {
        let a = trace.input(l);
        let (mut f_sum, mut g_sum) = (0.0, 0.0);
        for i in 0..n {
            let mut a_sq = linalg::dot(a.row(i), a.row(i));
            if spec.use_bias {
                a_sq += 1.0;
            }
            let mut gram = Matrix::zeros(k, k);
            for c in 0..k {
                for c2 in c..k {
                    let v = linalg::dot(jac[c][l].row(i), jac[c2][l].row(i));
                    gram.set(c, c2, v);
                    gram.set(c2, c, v);
                }
            }
            let gn_i = gram.diag().iter().sum::<f64>();
            let h = &hessians[i];
            let f_i: f64 = h.as_slice().iter().zip(gram.as_slice()).map(|(x, y)| x * y).sum();
            g_sum += a_sq * gn_i;
            f_sum += a_sq * f_i;
        }
        out.fisher[l] = f_sum / n as f64;
        out.gn[l] = g_sum / n as f64;
    }
    Ok(out)
}

/// Trace of `C(θ̂_l)`, the layer block at unit-norm weights, via
/// `C(θ̂_l) = ‖θ_l‖² C(θ_l)` for scale-invariant layers.
pub fn normalized_trace(
    metric: Metric,
    spec: &NetworkSpec,
    params: &NetworkParams,
    x: &Matrix,
    loss_kind: LossKind,
    l: usize,
) -> Result<f64> {
    if l >= spec.num_layers() {
        return Err(Error::structural(format!("no layer {l}")));
    }
    let norm_sq = linalg::frobenius_norm_sq(&params.weights[l]);
    if norm_sq == 0.0 {
        return Err(Error::degenerate(format!("layer {l} has zero norm")));
    }
    let t = layer_traces(spec, params, x, loss_kind)?;
    let raw = match metric {
        Metric::Fisher => t.fisher[l],
        Metric::Gn => t.gn[l],
    };
    Ok(norm_sq * raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_layer(w: f64) -> (NetworkSpec, NetworkParams) {
        let spec = NetworkSpec::mlp(&[1, 1], Activation::Identity, false);
        let params = NetworkParams {
            weights: vec![Matrix::from_rows(&[&[w]]).unwrap()],
            biases: None,
        };
        (spec, params)
    }

    fn pm_one() -> Matrix {
        Matrix::from_rows(&[&[1.0], &[-1.0]]).unwrap()
    }

    #[test]
    fn single_layer_gauss_newton() {
        let (spec, params) = scalar_layer(2.0);
        let g = dense_curvature(
            CurvatureKind::GaussNewton,
            &spec,
            &params,
            &pm_one(),
            LossKind::SquaredError,
            None,
            100,
        )
        .unwrap();
        assert_eq!(g.as_slice(), &[1.0]);
    }

    #[test]
    fn gn_norm_cases() {
        let (spec, params) = scalar_layer(2.0);
        assert_eq!(gn_norm(&spec, &params, &pm_one()).unwrap(), 4.0);
        assert_eq!(gn_norm(&spec, &NetworkParams::zeros(&spec), &pm_one()).unwrap(), 0.0);
        let grad = gn_norm_gradient(&spec, &params, &pm_one(), 100).unwrap();
        assert_eq!(grad, vec![4.0]);
        let zero = gn_norm_gradient(&spec, &NetworkParams::zeros(&spec), &pm_one(), 100).unwrap();
        assert_eq!(zero, vec![0.0]);
        // single block: both norms are θ^T G θ
        assert_eq!(kfac_gn_norm(&spec, &params, &pm_one()).unwrap(), 4.0);
    }

    #[test]
    fn gn_norm_rejects_biases_and_bn() {
        let spec = NetworkSpec::mlp(&[2, 3, 1], Activation::Relu, false).with_bias(true);
        let params = NetworkParams::zeros(&spec);
        let x = Matrix::zeros(2, 2);
        assert!(matches!(gn_norm(&spec, &params, &x), Err(Error::Contract(_))));
        let spec = NetworkSpec::mlp(&[2, 3, 1], Activation::Relu, true);
        let params = NetworkParams::zeros(&spec);
        assert!(matches!(gn_norm(&spec, &params, &x), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_inputs_give_zero_first_activation_factor() {
        let spec = NetworkSpec::mlp(&[3, 4, 2], Activation::Relu, false);
        let params = NetworkParams::init(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let f = estimate_kfac_factors(Metric::Gn, &spec, &params, &Matrix::zeros(5, 3), LossKind::CrossEntropySoftmax, None)
            .unwrap();
        assert_eq!(f[0].a.max_abs(), 0.0);
    }

    #[test]
    fn ema_cases() {
        let f = |v: f64| FactorPair {
            a: Matrix::identity(2).scale(v),
            s: Matrix::identity(1).scale(2.0 * v),
        };
        let mut st = KfacFactors::new(1e-3, DampingMode::Factored).unwrap();
        st.layers = vec![f(5.0)];
        let out = update_factors_ema(&st, &[f(3.0)], 0.0).unwrap();
        assert_eq!(out.layers, vec![f(3.0)]);
        let out = update_factors_ema(&st, &[f(5.0)], 0.7).unwrap();
        assert!(out.layers[0].a.sub(&f(5.0).a).unwrap().max_abs() < 1e-15);

        st.layers = vec![f(0.0)];
        let one = update_factors_ema(&st, &[f(1.0)], 0.95).unwrap();
        let two = update_factors_ema(&one, &[f(1.0)], 0.95).unwrap();
        let expected = 1.0 - 0.95f64.powi(2);
        assert!((two.layers[0].a.get(0, 0) - expected).abs() < 1e-15);
        assert!((two.layers[0].s.get(0, 0) - 2.0 * expected).abs() < 1e-15);

        let bad = FactorPair {
            a: Matrix::identity(3),
            s: Matrix::identity(1),
        };
        assert!(matches!(update_factors_ema(&st, &[bad], 0.5), Err(Error::Structural(_))));
        assert!(update_factors_ema(&st, &[f(1.0)], 1.0).is_err());
    }

    #[test]
    fn single_layer_trace_is_product_of_factor_traces() {
        let spec = NetworkSpec::mlp(&[3, 2], Activation::Identity, false);
        let params = NetworkParams::init(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = Matrix::identity(3);
        let t = layer_traces(&spec, &params, &x, LossKind::SquaredError).unwrap();
        let f = estimate_kfac_factors(Metric::Gn, &spec, &params, &x, LossKind::SquaredError, None).unwrap();
        let expected = linalg::trace(&f[0].s).unwrap() * linalg::trace(&f[0].a).unwrap();
        assert!((t.gn[0] - expected).abs() < 1e-14);
        let norm_sq = linalg::frobenius_norm_sq(&params.weights[0]);
        let nt = normalized_trace(Metric::Gn, &spec, &params, &x, LossKind::SquaredError, 0).unwrap();
        assert!((nt - norm_sq * expected).abs() < 1e-13);
    }

    #[test]
    fn normalized_trace_rejects_zero_layer() {
        let spec = NetworkSpec::mlp(&[3, 2], Activation::Identity, false);
        let r = normalized_trace(
            Metric::Gn,
            &spec,
            &NetworkParams::zeros(&spec),
            &Matrix::identity(3),
            LossKind::SquaredError,
            0,
        );
        assert!(matches!(r, Err(Error::Degenerate(_))));
    }

    #[test]
    fn sampled_fisher_requires_rng() {
        let (spec, params) = scalar_layer(1.0);
        let r = dense_curvature(
            CurvatureKind::FisherSampled { samples: 3 },
            &spec,
            &params,
            &pm_one(),
            LossKind::SquaredError,
            None,
            10,
        );
        assert!(matches!(r, Err(Error::Domain(_))));
    }
}
