//! Fully-connected networks with optional batch normalization.
//!
//! Layer `l` (for `l = 0..=L`) computes `s_l = a_l W_l^T (+ b_l)` where `a_0`
//! is the input batch. Hidden layers optionally normalize `s_l` with batch
//! statistics (no affine parameters) and then apply the activation; the output
//! layer is always plain linear. A network with `L + 1` weight matrices has
//! depth `L`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Default cap on the flattened parameter count for dense Jacobians and curvature.
pub const DEFAULT_PARAM_CAP: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative as a function of the activation output. ReLU'(0) = 0.
    #[inline]
    fn slope_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Batch normalization without trainable scale and shift (fixed at 1 and 0).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormConfig {
    /// Added to the biased batch variance under the square root.
    pub epsilon: f64,
    /// Decay of the running statistics used in eval mode.
    pub running_decay: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            epsilon: 1e-8,
            running_decay: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// `[d, hidden..., k]`.
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    /// One flag per hidden layer; the output layer never has BN.
    pub use_bn: Vec<bool>,
    pub use_bias: bool,
    #[serde(default)]
    pub bn: BatchNormConfig,
}

impl NetworkSpec {
    /// Bias-free MLP with the same BN setting on every hidden layer.
    pub fn mlp(layer_dims: &[usize], activation: Activation, bn: bool) -> Self {
        let hidden = layer_dims.len().saturating_sub(2);
        NetworkSpec {
            layer_dims: layer_dims.to_vec(),
            activation,
            use_bn: vec![bn; hidden],
            use_bias: false,
            bn: BatchNormConfig::default(),
        }
    }

    pub fn with_bias(mut self, use_bias: bool) -> Self {
        self.use_bias = use_bias;
        self
    }

    pub fn with_bn_epsilon(mut self, epsilon: f64) -> Self {
        self.bn.epsilon = epsilon;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::structural("a network needs at least one weight layer"));
        }
        if self.layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::structural("layer widths must be positive"));
        }
        if self.use_bn.len() != self.layer_dims.len() - 2 {
            return Err(Error::structural(format!(
                "use_bn has {} flags for {} hidden layers",
                self.use_bn.len(),
                self.layer_dims.len() - 2
            )));
        }
        if !(self.bn.epsilon > 0.0) {
            return Err(Error::domain("BN epsilon must be positive"));
        }
        Ok(())
    }

    /// Number of weight matrices, `L + 1`.
    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    /// The depth `L`.
    pub fn depth(&self) -> usize {
        self.num_layers() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// `(out, in)` of weight matrix `l`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.layer_dims[l + 1], self.layer_dims[l])
    }

    /// Whether layer `l`'s pre-activations are batch normalized.
    pub fn bn_covered(&self, l: usize) -> bool {
        l < self.use_bn.len() && self.use_bn[l]
    }

    pub fn has_bn(&self) -> bool {
        self.use_bn.iter().any(|&b| b)
    }

    /// Parameters in layer `l`, bias included.
    pub fn layer_param_count(&self, l: usize) -> usize {
        let (o, i) = self.layer_shape(l);
        o * i + if self.use_bias { o } else { 0 }
    }

    pub fn param_count(&self) -> usize {
        (0..self.num_layers()).map(|l| self.layer_param_count(l)).sum()
    }

    /// Offset of layer `l` in the canonical flattening.
    pub fn layer_offset(&self, l: usize) -> usize {
        (0..l).map(|m| self.layer_param_count(m)).sum()
    }
}

/// Weights `W_l` (out x in) and optional biases.
///
/// The canonical flattening of θ lists, layer by layer, `W_l` in row-major
/// order followed by `b_l` when biases are enabled.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub weights: Vec<Matrix>,
    pub biases: Option<Vec<Vec<f64>>>,
}

impl NetworkParams {
    /// Gaussian init, std `√(2/in)` for ReLU and `√(1/in)` for linear nets; zero biases.
    pub fn init<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let gain = match spec.activation {
            Activation::Relu => 2.0,
            Activation::Identity => 1.0,
        };
        let weights = (0..spec.num_layers())
            .map(|l| {
                let (o, i) = spec.layer_shape(l);
                let normal = Normal::new(0.0, (gain / i as f64).sqrt()).expect("positive std");
                Matrix::from_fn(o, i, |_, _| normal.sample(rng))
            })
            .collect();
        let biases = spec.use_bias.then(|| {
            (0..spec.num_layers())
                .map(|l| vec![0.0; spec.layer_shape(l).0])
                .collect()
        });
        Ok(NetworkParams { weights, biases })
    }

    pub fn zeros(spec: &NetworkSpec) -> Self {
        let weights = (0..spec.num_layers())
            .map(|l| {
                let (o, i) = spec.layer_shape(l);
                Matrix::zeros(o, i)
            })
            .collect();
        let biases = spec.use_bias.then(|| {
            (0..spec.num_layers())
                .map(|l| vec![0.0; spec.layer_shape(l).0])
                .collect()
        });
        NetworkParams { weights, biases }
    }

    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        spec.validate()?;
        if self.weights.len() != spec.num_layers() {
            return Err(Error::structural(format!(
                "{} weight matrices for {} layers",
                self.weights.len(),
                spec.num_layers()
            )));
        }
        for (l, w) in self.weights.iter().enumerate() {
            if w.shape() != spec.layer_shape(l) {
                return Err(Error::structural(format!(
                    "layer {l} weight is {:?}, spec needs {:?}",
                    w.shape(),
                    spec.layer_shape(l)
                )));
            }
        }
        match (&self.biases, spec.use_bias) {
            (Some(b), true) => {
                for (l, bl) in b.iter().enumerate() {
                    if bl.len() != spec.layer_shape(l).0 {
                        return Err(Error::structural(format!("layer {l} bias has wrong length")));
                    }
                }
            }
            (None, false) => {}
            _ => return Err(Error::structural("bias presence disagrees with the spec")),
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in 0..self.weights.len() {
            out.extend_from_slice(self.weights[l].as_slice());
            if let Some(b) = &self.biases {
                out.extend_from_slice(&b[l]);
            }
        }
        out
    }

    pub fn unflatten(spec: &NetworkSpec, theta: &[f64]) -> Result<Self> {
        if theta.len() != spec.param_count() {
            return Err(Error::structural(format!(
                "θ has {} entries, spec needs {}",
                theta.len(),
                spec.param_count()
            )));
        }
        let mut params = NetworkParams::zeros(spec);
        let mut at = 0;
        for l in 0..spec.num_layers() {
            let w = params.weights[l].as_mut_slice();
            w.copy_from_slice(&theta[at..at + w.len()]);
            at += w.len();
            if let Some(b) = &mut params.biases {
                let n = b[l].len();
                b[l].copy_from_slice(&theta[at..at + n]);
                at += n;
            }
        }
        Ok(params)
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self
                .biases
                .as_ref()
                .is_none_or(|b| b.iter().flatten().all(|v| v.is_finite()))
    }
}

/// Returns a copy with `W_l` multiplied by `alpha`.
pub fn scale_layer(params: &NetworkParams, l: usize, alpha: f64) -> Result<NetworkParams> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::domain(format!("scale factor must be positive, got {alpha}")));
    }
    if l >= params.weights.len() {
        return Err(Error::structural(format!("no layer {l}")));
    }
    let mut out = params.clone();
    out.weights[l].scale_in_place(alpha);
    Ok(out)
}

/// `‖W_l‖₂` of each flattened weight matrix.
pub fn layer_norms(params: &NetworkParams) -> Vec<f64> {
    params
        .weights
        .iter()
        .map(|w| linalg::frobenius_norm_sq(w).sqrt())
        .collect()
}

/// Running BN statistics for eval mode, one entry per layer (`None` when not covered).
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub mean: Vec<Option<Vec<f64>>>,
    pub var: Vec<Option<Vec<f64>>>,
}

impl BnState {
    pub fn new(spec: &NetworkSpec) -> Self {
        let per_layer = |fill: f64| {
            (0..spec.num_layers())
                .map(|l| spec.bn_covered(l).then(|| vec![fill; spec.layer_shape(l).0]))
                .collect()
        };
        BnState {
            mean: per_layer(0.0),
            var: per_layer(1.0),
        }
    }

    /// Folds the batch statistics of a train-mode trace into the running averages.
    pub fn update(&mut self, spec: &NetworkSpec, trace: &ForwardTrace) {
        let decay = spec.bn.running_decay;
        for (l, bn) in trace.bn.iter().enumerate() {
            let (Some(bn), Some(mean), Some(var)) = (bn, &mut self.mean[l], &mut self.var[l])
            else {
                continue;
            };
            if !bn.from_batch {
                continue;
            }
            for j in 0..mean.len() {
                mean[j] = decay * mean[j] + (1.0 - decay) * bn.mean[j];
                var[j] = decay * var[j] + (1.0 - decay) * bn.var[j];
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (m, v) in self.mean.iter().zip(&self.var) {
            if let (Some(m), Some(v)) = (m, v) {
                out.extend_from_slice(m);
                out.extend_from_slice(v);
            }
        }
        out
    }

    pub fn unflatten(spec: &NetworkSpec, values: &[f64]) -> Result<Self> {
        let mut state = BnState::new(spec);
        let mut at = 0;
        for l in 0..spec.num_layers() {
            if let (Some(m), Some(v)) = (&mut state.mean[l], &mut state.var[l]) {
                let n = m.len();
                if at + 2 * n > values.len() {
                    return Err(Error::structural("too few BN running statistics"));
                }
                m.copy_from_slice(&values[at..at + n]);
                v.copy_from_slice(&values[at + n..at + 2 * n]);
                at += 2 * n;
            }
        }
        if at != values.len() {
            return Err(Error::structural("too many BN running statistics"));
        }
        Ok(state)
    }

    pub fn len(&self) -> usize {
        self.mean.iter().flatten().map(|m| 2 * m.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Where BN statistics come from during a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Mode<'a> {
    /// Statistics of the current batch.
    Train,
    /// Stored running statistics.
    Eval(&'a BnState),
}

#[derive(Clone, Debug)]
pub struct BnTrace {
    pub mean: Vec<f64>,
    /// Biased batch variance (or running variance in eval mode).
    pub var: Vec<f64>,
    /// `sqrt(var + eps)`.
    pub std: Vec<f64>,
    /// `(s - mean) / std`.
    pub normalized: Matrix,
    pub from_batch: bool,
}

/// Everything backprop and K-FAC need from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `a_0 = X, a_1, ..., a_L`, then the logits at index `L + 1`.
    pub activations: Vec<Matrix>,
    /// Pre-activations `s_l`, before BN.
    pub pre: Vec<Matrix>,
    pub bn: Vec<Option<BnTrace>>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.activations[0].rows()
    }

    /// Input activations `a_l` of layer `l`.
    pub fn input(&self, l: usize) -> &Matrix {
        &self.activations[l]
    }

    pub fn logits(&self) -> &Matrix {
        self.activations.last().unwrap()
    }
}

fn batch_norm(s: &Matrix, eps: f64, stats: Option<(&[f64], &[f64])>) -> BnTrace {
    let (n, m) = s.shape();
    let (mean, var, from_batch) = match stats {
        Some((mean, var)) => (mean.to_vec(), var.to_vec(), false),
        None => {
            let mut mean = vec![0.0; m];
            for r in 0..n {
                for (acc, v) in mean.iter_mut().zip(s.row(r)) {
                    *acc += v;
                }
            }
            mean.iter_mut().for_each(|v| *v /= n as f64);
            let mut var = vec![0.0; m];
            for r in 0..n {
                for ((acc, v), mu) in var.iter_mut().zip(s.row(r)).zip(&mean) {
                    *acc += (v - mu) * (v - mu);
                }
            }
            var.iter_mut().for_each(|v| *v /= n as f64);
            (mean, var, true)
        }
    };
    let std: Vec<f64> = var.iter().map(|v| (v + eps).sqrt()).collect();
    let mut normalized = s.clone();
    for r in 0..n {
        for ((x, mu), sd) in normalized.row_mut(r).iter_mut().zip(&mean).zip(&std) {
            *x = (*x - mu) / sd;
        }
    }
    BnTrace {
        mean,
        var,
        std,
        normalized,
        from_batch,
    }
}

fn add_bias(s: &mut Matrix, b: &[f64]) {
    for r in 0..s.rows() {
        for (x, bj) in s.row_mut(r).iter_mut().zip(b) {
            *x += bj;
        }
    }
}

/// Runs the network on the rows of `x`.
pub fn forward(
    spec: &NetworkSpec,
    params: &NetworkParams,
    x: &Matrix,
    mode: Mode<'_>,
) -> Result<(Matrix, ForwardTrace)> {
    let trace = forward_trace(spec, params, x, mode)?;
    Ok((trace.logits().clone(), trace))
}

/// Like [`forward`] but only returns the trace (logits are its last activation).
pub fn forward_trace(
    spec: &NetworkSpec,
    params: &NetworkParams,
    x: &Matrix,
    mode: Mode<'_>,
) -> Result<ForwardTrace> {
    params.check(spec)?;
    if x.cols() != spec.input_dim() {
        return Err(Error::structural(format!(
            "input has {} columns, network expects {}",
            x.cols(),
            spec.input_dim()
        )));
    }
    let n = x.rows();
    if n == 0 {
        return Err(Error::degenerate("empty batch"));
    }
    if matches!(mode, Mode::Train) && spec.has_bn() && n < 2 {
        return Err(Error::degenerate(
            "batch normalization in train mode needs at least 2 examples",
        ));
    }
    let last = spec.depth();
    let mut activations = Vec::with_capacity(last + 2);
    let mut pre = Vec::with_capacity(last + 1);
    let mut bns = Vec::with_capacity(last + 1);
    activations.push(x.clone());
    for l in 0..=last {
        let mut s = activations[l].matmul_t(&params.weights[l])?;
        if let Some(b) = &params.biases {
            add_bias(&mut s, &b[l]);
        }
        if l == last {
            activations.push(s.clone());
            pre.push(s);
            bns.push(None);
            break;
        }
        let bn = if spec.bn_covered(l) {
            let stats = match mode {
                Mode::Train => None,
                Mode::Eval(state) => match (&state.mean[l], &state.var[l]) {
                    (Some(m), Some(v)) => Some((m.as_slice(), v.as_slice())),
                    _ => return Err(Error::structural(format!("no running statistics for layer {l}"))),
                },
            };
            Some(batch_norm(&s, spec.bn.epsilon, stats))
        } else {
            None
        };
        let z = bn.as_ref().map_or(&s, |b| &b.normalized);
        let act = spec.activation;
        let a = Matrix::from_vec(
            z.rows(),
            z.cols(),
            z.as_slice().iter().map(|&v| act.apply(v)).collect(),
        )?;
        activations.push(a);
        pre.push(s);
        bns.push(bn);
    }
    Ok(ForwardTrace {
        activations,
        pre,
        bn: bns,
    })
}

/// How backprop treats BN statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnGrad {
    /// Differentiate through the batch mean and variance.
    ThroughBatchStats,
    /// Treat the statistics as constants, giving per-example linearizations.
    FixedStats,
}

#[derive(Clone, Copy, Debug)]
pub struct BackwardOptions {
    pub bn: BnGrad,
    pub weight_grads: bool,
    pub input_grad: bool,
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Option<Vec<Vec<f64>>>,
    /// Per-example `∂L/∂s_l`, one `n x out_l` matrix per layer.
    pub s_grads: Vec<Matrix>,
    /// `∂L/∂X` when requested.
    pub input: Option<Matrix>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in 0..self.weights.len() {
            out.extend_from_slice(self.weights[l].as_slice());
            if let Some(b) = &self.biases {
                out.extend_from_slice(&b[l]);
            }
        }
        out
    }
}

/// Gradient of a loss whose derivative with respect to the logits is `dlogits`.
///
/// Train-mode traces are differentiated through the batch statistics.
pub fn backward(
    spec: &NetworkSpec,
    params: &NetworkParams,
    trace: &ForwardTrace,
    dlogits: &Matrix,
) -> Result<Gradients> {
    backward_with(
        spec,
        params,
        trace,
        dlogits,
        BackwardOptions {
            bn: BnGrad::ThroughBatchStats,
            weight_grads: true,
            input_grad: false,
        },
    )
}

pub fn backward_with(
    spec: &NetworkSpec,
    params: &NetworkParams,
    trace: &ForwardTrace,
    dlogits: &Matrix,
    opts: BackwardOptions,
) -> Result<Gradients> {
    let n = trace.batch_size();
    if dlogits.shape() != (n, spec.output_dim()) {
        return Err(Error::structural(format!(
            "dL/dlogits is {:?}, expected {:?}",
            dlogits.shape(),
            (n, spec.output_dim())
        )));
    }
    if trace.pre.len() != spec.num_layers() {
        return Err(Error::structural("trace does not belong to this network"));
    }
    let layers = spec.num_layers();
    let mut weights = vec![Matrix::zeros(0, 0); layers];
    let mut biases = params.biases.as_ref().map(|_| vec![Vec::new(); layers]);
    let mut s_grads = vec![Matrix::zeros(0, 0); layers];
    let mut input = None;
    let mut ds = dlogits.clone();
    for l in (0..layers).rev() {
        if opts.weight_grads {
            weights[l] = ds.t_matmul(trace.input(l))?;
            if let Some(b) = &mut biases {
                let mut g = vec![0.0; ds.cols()];
                for r in 0..n {
                    for (acc, v) in g.iter_mut().zip(ds.row(r)) {
                        *acc += v;
                    }
                }
                b[l] = g;
            }
        }
        if l == 0 {
            if opts.input_grad {
                input = Some(ds.matmul(&params.weights[0])?);
            }
            s_grads[0] = ds;
            break;
        }
        let mut da = ds.matmul(&params.weights[l])?;
        let act = spec.activation;
        for (g, &a) in da.as_mut_slice().iter_mut().zip(trace.activations[l].as_slice()) {
            *g *= act.slope_from_output(a);
        }
        let below = l - 1;
        let next = match &trace.bn[below] {
            None => da,
            Some(bn) => bn_backward(bn, &da, opts.bn),
        };
        s_grads[l] = std::mem::replace(&mut ds, next);
    }
    Ok(Gradients {
        weights,
        biases,
        s_grads,
        input,
    })
}

fn bn_backward(bn: &BnTrace, dz: &Matrix, mode: BnGrad) -> Matrix {
    let (n, m) = dz.shape();
    let mut ds = dz.clone();
    if mode == BnGrad::FixedStats || !bn.from_batch {
        for r in 0..n {
            for (g, sd) in ds.row_mut(r).iter_mut().zip(&bn.std) {
                *g /= sd;
            }
        }
        return ds;
    }
    let mut mean_dz = vec![0.0; m];
    let mut mean_dz_xhat = vec![0.0; m];
    for r in 0..n {
        for j in 0..m {
            let g = dz.get(r, j);
            mean_dz[j] += g;
            mean_dz_xhat[j] += g * bn.normalized.get(r, j);
        }
    }
    let inv_n = 1.0 / n as f64;
    for r in 0..n {
        for j in 0..m {
            let xh = bn.normalized.get(r, j);
            let g = dz.get(r, j) - mean_dz[j] * inv_n - xh * mean_dz_xhat[j] * inv_n;
            ds.set(r, j, g / bn.std[j]);
        }
    }
    ds
}

/// Seeds `∂/∂logits = e_c` on every row.
fn class_seed(n: usize, k: usize, c: usize) -> Matrix {
    let mut seed = Matrix::zeros(n, k);
    for r in 0..n {
        seed.set(r, c, 1.0);
    }
    seed
}

/// Per-example `∂f_c/∂s_l` for every class `c`, with BN statistics held fixed.
///
/// Returns `out[c]` = the `n x out_l` matrix of layer-`l` pre-activation
/// gradients of logit `c`, for all layers.
pub fn output_s_jacobians(
    spec: &NetworkSpec,
    params: &NetworkParams,
    trace: &ForwardTrace,
) -> Result<Vec<Vec<Matrix>>> {
    let n = trace.batch_size();
    let k = spec.output_dim();
    (0..k)
        .map(|c| {
            let g = backward_with(
                spec,
                params,
                trace,
                &class_seed(n, k, c),
                BackwardOptions {
                    bn: BnGrad::FixedStats,
                    weight_grads: false,
                    input_grad: false,
                },
            )?;
            Ok(g.s_grads)
        })
        .collect()
}

/// Input-output Jacobians `J_x` (k x d) of every row of `x`.
pub fn input_jacobians(
    spec: &NetworkSpec,
    params: &NetworkParams,
    x: &Matrix,
    mode: Mode<'_>,
) -> Result<Vec<Matrix>> {
    let trace = forward_trace(spec, params, x, mode)?;
    let n = x.rows();
    let k = spec.output_dim();
    let d = spec.input_dim();
    let mut jac = vec![Matrix::zeros(k, d); n];
    for c in 0..k {
        let g = backward_with(
            spec,
            params,
            &trace,
            &class_seed(n, k, c),
            BackwardOptions {
                bn: BnGrad::FixedStats,
                weight_grads: false,
                input_grad: true,
            },
        )?;
        let gi = g.input.expect("requested");
        for (i, j) in jac.iter_mut().enumerate() {
            j.row_mut(c).copy_from_slice(gi.row(i));
        }
    }
    Ok(jac)
}

/// Exact input-output Jacobian `∂f/∂x` at a single point.
pub fn input_jacobian(
    spec: &NetworkSpec,
    params: &NetworkParams,
    x: &[f64],
    mode: Mode<'_>,
) -> Result<Matrix> {
    let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
    Ok(input_jacobians(spec, params, &xm, mode)?.remove(0))
}

/// Per-example parameter Jacobians `J_θ` (k x P) in the canonical θ order.
///
/// BN statistics (batch statistics in train mode) are held fixed.
pub fn param_jacobians(
    spec: &NetworkSpec,
    params: &NetworkParams,
    x: &Matrix,
    mode: Mode<'_>,
    cap: usize,
) -> Result<Vec<Matrix>> {
    let p = spec.param_count();
    if p > cap {
        return Err(Error::Capacity {
            what: "parameter count",
            size: p,
            cap,
        });
    }
    let trace = forward_trace(spec, params, x, mode)?;
    param_jacobians_from_trace(spec, params, &trace)
}

pub(crate) fn param_jacobians_from_trace(
    spec: &NetworkSpec,
    params: &NetworkParams,
    trace: &ForwardTrace,
) -> Result<Vec<Matrix>> {
    let n = trace.batch_size();
    let k = spec.output_dim();
    let p = spec.param_count();
    let s_jac = output_s_jacobians(spec, params, trace)?;
    let mut jac = vec![Matrix::zeros(k, p); n];
    for (c, per_layer) in s_jac.iter().enumerate() {
        for (l, ds) in per_layer.iter().enumerate() {
            let a = trace.input(l);
            let (o, inp) = spec.layer_shape(l);
            let off = spec.layer_offset(l);
            for (i, j) in jac.iter_mut().enumerate() {
                let row = j.row_mut(c);
                let g = ds.row(i);
                let ai = a.row(i);
                for oo in 0..o {
                    let dst = &mut row[off + oo * inp..off + (oo + 1) * inp];
                    for (d, av) in dst.iter_mut().zip(ai) {
                        *d = g[oo] * av;
                    }
                }
                if spec.use_bias {
                    row[off + o * inp..off + o * inp + o].copy_from_slice(g);
                }
            }
        }
    }
    Ok(jac)
}

/// Parameter Jacobian at a single point, default capacity cap.
pub fn param_jacobian(
    spec: &NetworkSpec,
    params: &NetworkParams,
    x: &[f64],
    mode: Mode<'_>,
) -> Result<Matrix> {
    let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
    Ok(param_jacobians(spec, params, &xm, mode, DEFAULT_PARAM_CAP)?.remove(0))
}

/// Forward-mode derivative of the logits along a tangent on layer `l`'s
/// weights (and bias), BN statistics fixed. Returns an `n x k` matrix.
pub fn layer_jvp(
    spec: &NetworkSpec,
    params: &NetworkParams,
    trace: &ForwardTrace,
    l: usize,
    tangent_w: &Matrix,
    tangent_b: Option<&[f64]>,
) -> Result<Matrix> {
    if tangent_w.shape() != spec.layer_shape(l) {
        return Err(Error::structural("tangent shape does not match the layer"));
    }
    let mut ds = trace.input(l).matmul_t(tangent_w)?;
    if let Some(tb) = tangent_b {
        add_bias(&mut ds, tb);
    }
    for m in l..spec.depth() {
        if let Some(bn) = &trace.bn[m] {
            for r in 0..ds.rows() {
                for (g, sd) in ds.row_mut(r).iter_mut().zip(&bn.std) {
                    *g /= sd;
                }
            }
        }
        let act = spec.activation;
        for (g, &a) in ds.as_mut_slice().iter_mut().zip(trace.activations[m + 1].as_slice()) {
            *g *= act.slope_from_output(a);
        }
        ds = ds.matmul_t(&params.weights[m + 1])?;
    }
    Ok(ds)
}

/// Index of the largest logit in each row.
pub fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            logits
                .row(r)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_net(weights: &[f64]) -> (NetworkSpec, NetworkParams) {
        let dims = vec![1; weights.len() + 1];
        let spec = NetworkSpec::mlp(&dims, Activation::Identity, false);
        let params = NetworkParams {
            weights: weights.iter().map(|&w| Matrix::from_rows(&[&[w]]).unwrap()).collect(),
            biases: None,
        };
        (spec, params)
    }

    #[test]
    fn single_linear_layer_forward() {
        let (spec, params) = scalar_net(&[2.0]);
        let x = Matrix::from_rows(&[&[3.0]]).unwrap();
        let (logits, _) = forward(&spec, &params, &x, Mode::Train).unwrap();
        assert_eq!(logits.get(0, 0), 6.0);
    }

    #[test]
    fn bn_normalizes_two_point_batch() {
        let spec = NetworkSpec::mlp(&[1, 1, 1], Activation::Identity, true);
        let params = NetworkParams {
            weights: vec![
                Matrix::from_rows(&[&[1.0]]).unwrap(),
                Matrix::from_rows(&[&[1.0]]).unwrap(),
            ],
            biases: None,
        };
        let x = Matrix::from_rows(&[&[1.0], &[3.0]]).unwrap();
        let (logits, trace) = forward(&spec, &params, &x, Mode::Train).unwrap();
        let bn = trace.bn[0].as_ref().unwrap();
        assert_eq!(bn.mean, vec![2.0]);
        assert!((logits.get(0, 0) + 1.0).abs() < 1e-7);
        assert!((logits.get(1, 0) - 1.0).abs() < 1e-7);
    }

    #[test]
    fn bn_rejects_single_example_batch() {
        let spec = NetworkSpec::mlp(&[2, 3, 1], Activation::Relu, true);
        let params = NetworkParams::init(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Matrix::zeros(1, 2);
        assert!(matches!(
            forward(&spec, &params, &x, Mode::Train),
            Err(Error::Degenerate(_))
        ));
        let state = BnState::new(&spec);
        assert!(forward(&spec, &params, &x, Mode::Eval(&state)).is_ok());
    }

    #[test]
    fn nonnegative_relu_net_is_linear_product() {
        let spec = NetworkSpec::mlp(&[2, 3, 2], Activation::Relu, false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = NetworkParams::init(&spec, &mut rng).unwrap();
        for w in &mut params.weights {
            w.as_mut_slice().iter_mut().for_each(|v| *v = v.abs());
        }
        let x = Matrix::from_rows(&[&[0.5, 2.0]]).unwrap();
        let (logits, _) = forward(&spec, &params, &x, Mode::Train).unwrap();
        let product = params.weights[1].matmul(&params.weights[0]).unwrap();
        let expected = product.matvec(&[0.5, 2.0]).unwrap();
        assert!(linalg::rel_err(logits.row(0), &expected) < 1e-14);
    }

    #[test]
    fn zero_seed_gives_zero_grads() {
        let spec = NetworkSpec::mlp(&[3, 4, 2], Activation::Relu, true);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = NetworkParams::init(&spec, &mut rng).unwrap();
        let x = Matrix::from_fn(5, 3, |r, c| (r * 3 + c) as f64 * 0.1 - 0.4);
        let (_, trace) = forward(&spec, &params, &x, Mode::Train).unwrap();
        let g = backward(&spec, &params, &trace, &Matrix::zeros(5, 2)).unwrap();
        assert!(g.weights.iter().all(|w| w.max_abs() == 0.0));
    }

    #[test]
    fn single_layer_grad_is_outer_product() {
        let spec = NetworkSpec::mlp(&[2, 3], Activation::Identity, false);
        let params = NetworkParams::zeros(&spec);
        let x = Matrix::from_rows(&[&[2.0, -1.0]]).unwrap();
        let (_, trace) = forward(&spec, &params, &x, Mode::Train).unwrap();
        let dl = Matrix::from_rows(&[&[1.0, 0.5, -3.0]]).unwrap();
        let g = backward(&spec, &params, &trace, &dl).unwrap();
        let expected = Matrix::from_fn(3, 2, |o, i| dl.get(0, o) * x.get(0, i));
        assert_eq!(g.weights[0], expected);
    }

    #[test]
    fn jacobians_of_linear_chains() {
        let spec = NetworkSpec::mlp(&[3, 2], Activation::Identity, false);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = NetworkParams::init(&spec, &mut rng).unwrap();
        let j = input_jacobian(&spec, &params, &[0.3, -1.0, 2.0], Mode::Train).unwrap();
        assert!(j.sub(&params.weights[0]).unwrap().max_abs() < 1e-15);

        let spec = NetworkSpec::mlp(&[3, 4, 5, 2], Activation::Identity, false);
        let params = NetworkParams::init(&spec, &mut rng).unwrap();
        let product = params.weights[2]
            .matmul(&params.weights[1])
            .unwrap()
            .matmul(&params.weights[0])
            .unwrap();
        for x in [[1.0, 2.0, 3.0], [-5.0, 0.1, 0.0]] {
            let j = input_jacobian(&spec, &params, &x, Mode::Train).unwrap();
            assert!(j.sub(&product).unwrap().max_abs() < 1e-13);
        }
    }

    #[test]
    fn param_jacobian_worked_cases() {
        let (spec, params) = scalar_net(&[2.0]);
        let j = param_jacobian(&spec, &params, &[3.0], Mode::Train).unwrap();
        assert_eq!(j.as_slice(), &[3.0]);

        let (spec, params) = scalar_net(&[1.0, 2.0]);
        let j = param_jacobian(&spec, &params, &[1.0], Mode::Train).unwrap();
        assert_eq!(j.as_slice(), &[2.0, 1.0]);
    }

    #[test]
    fn param_jacobian_respects_cap() {
        let spec = NetworkSpec::mlp(&[10, 10, 2], Activation::Relu, false);
        let params = NetworkParams::zeros(&spec);
        let x = Matrix::zeros(1, 10);
        let r = param_jacobians(&spec, &params, &x, Mode::Train, 50);
        assert!(matches!(r, Err(Error::Capacity { .. })));
    }

    #[test]
    fn scale_layer_cases() {
        let spec = NetworkSpec::mlp(&[3, 4, 4, 2], Activation::Relu, true);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = NetworkParams::init(&spec, &mut rng).unwrap();
        assert_eq!(scale_layer(&params, 1, 1.0).unwrap(), params);
        assert!(matches!(scale_layer(&params, 1, 0.0), Err(Error::Domain(_))));
        assert!(matches!(scale_layer(&params, 1, -2.0), Err(Error::Domain(_))));

        let x = Matrix::from_fn(6, 3, |r, c| ((r * 7 + c * 3) % 5) as f64 - 2.0);
        let (base, _) = forward(&spec, &params, &x, Mode::Train).unwrap();
        let scaled = scale_layer(&params, 0, 2.0).unwrap();
        let (after, _) = forward(&spec, &scaled, &x, Mode::Train).unwrap();
        assert!(linalg::rel_err(after.as_slice(), base.as_slice()) < 1e-9);

        let lin = NetworkSpec::mlp(&[3, 4, 2], Activation::Identity, false);
        let params = NetworkParams::init(&lin, &mut rng).unwrap();
        let (base, _) = forward(&lin, &params, &x, Mode::Train).unwrap();
        let (after, _) = forward(&lin, &scale_layer(&params, 1, 2.0).unwrap(), &x, Mode::Train).unwrap();
        assert!(linalg::rel_err(after.as_slice(), base.scale(2.0).as_slice()) < 1e-15);
    }

    #[test]
    fn layer_norm_cases() {
        let p = NetworkParams {
            weights: vec![Matrix::from_rows(&[&[3.0, 4.0]]).unwrap(), Matrix::zeros(2, 1)],
            biases: None,
        };
        assert_eq!(layer_norms(&p), vec![5.0, 0.0]);
    }

    #[test]
    fn flatten_roundtrip_with_bias() {
        let spec = NetworkSpec::mlp(&[3, 4, 2], Activation::Relu, false).with_bias(true);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = NetworkParams::init(&spec, &mut rng).unwrap();
        params.biases.as_mut().unwrap()[1][0] = 0.25;
        let theta = params.flatten();
        assert_eq!(theta.len(), spec.param_count());
        assert_eq!(NetworkParams::unflatten(&spec, &theta).unwrap(), params);
        assert_eq!(theta[spec.layer_offset(1) + 8], 0.25);
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let spec = NetworkSpec::mlp(&[3, 5, 2], Activation::Relu, true);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = NetworkParams::init(&spec, &mut rng).unwrap();
        let x = Matrix::from_fn(8, 3, |r, c| (r as f64 - 3.0) * 0.3 + c as f64);
        let mut state = BnState::new(&spec);
        let (_, trace) = forward(&spec, &params, &x, Mode::Train).unwrap();
        state.update(&spec, &trace);
        let a = forward(&spec, &params, &x, Mode::Eval(&state)).unwrap().0;
        let b = forward(&spec, &params, &x, Mode::Eval(&state)).unwrap().0;
        assert_eq!(a, b);
        assert_eq!(BnState::unflatten(&spec, &state.flatten()).unwrap(), state);
    }
}
