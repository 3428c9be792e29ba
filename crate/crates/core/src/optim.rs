//! SGD, Adam and K-FAC with three regularization couplings, plus the
//! first-order predictions for normalized-weight updates used as oracles.
//!
//! Decoupled weight decay is computed as `θ − η(d + βθ)` where `d` is the
//! optimizer's direction. For plain SGD `d = g`, so the L2 coupling (which
//! forms `g + βθ` before stepping) performs the same floating-point
//! operations and the two trajectories agree bit for bit.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::curvature::{self, KfacFactors, Metric};
use crate::error::{Error, Result};
use crate::linalg::{self, DampingMode, Matrix};
use crate::loss::LossKind;
use crate::nn::{ForwardTrace, Gradients, NetworkParams, NetworkSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingMode {
    #[default]
    None,
    /// `β·θ` added to the gradient, so the preconditioner acts on it.
    L2,
    /// Weights shrunk by `(1 − ηβ)` outside the preconditioner.
    WeightDecay,
}

/// Which layers a regularizer touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPreset {
    #[default]
    All,
    /// BN-covered layers, or every layer but the last in a network without BN.
    HiddenOnly,
    OutputOnly,
    None,
}

impl MaskPreset {
    pub fn mask(self, spec: &NetworkSpec) -> Vec<bool> {
        let n = spec.num_layers();
        (0..n)
            .map(|l| match self {
                MaskPreset::All => true,
                MaskPreset::None => false,
                MaskPreset::OutputOnly => l + 1 == n,
                MaskPreset::HiddenOnly => {
                    if spec.has_bn() {
                        spec.bn_covered(l)
                    } else {
                        l + 1 < n
                    }
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    pub mode: CouplingMode,
    pub beta: f64,
    pub mask: Vec<bool>,
}

impl Coupling {
    pub fn none(layers: usize) -> Self {
        Coupling {
            mode: CouplingMode::None,
            beta: 0.0,
            mask: vec![false; layers],
        }
    }

    pub fn new(mode: CouplingMode, beta: f64, mask: Vec<bool>) -> Result<Self> {
        if !(beta >= 0.0) || !beta.is_finite() {
            return Err(Error::domain(format!("regularization rate must be nonnegative, got {beta}")));
        }
        Ok(Coupling { mode, beta, mask })
    }

    pub fn with_preset(mode: CouplingMode, beta: f64, preset: MaskPreset, spec: &NetworkSpec) -> Result<Self> {
        Coupling::new(mode, beta, preset.mask(spec))
    }

    fn check(&self, layers: usize) -> Result<()> {
        if self.mask.len() != layers {
            return Err(Error::structural(format!(
                "coupling mask has {} entries for {layers} layers",
                self.mask.len()
            )));
        }
        Ok(())
    }

    fn l2_on(&self, l: usize) -> bool {
        self.mode == CouplingMode::L2 && self.mask[l] && self.beta > 0.0
    }

    fn wd_on(&self, l: usize) -> bool {
        self.mode == CouplingMode::WeightDecay && self.mask[l] && self.beta > 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    KfacF,
    KfacG,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KfacConfig {
    pub lambda: f64,
    pub t_stats: usize,
    pub t_inv: usize,
    pub ema_decay: f64,
    pub damping: DampingMode,
    /// Apply the decay as `β·W` instead of `ηβ·W`.
    pub alg1_literal: bool,
}

impl Default for KfacConfig {
    fn default() -> Self {
        KfacConfig {
            lambda: 1e-3,
            t_stats: 10,
            t_inv: 100,
            ema_decay: 0.95,
            damping: DampingMode::Factored,
            alg1_literal: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Heavy-ball momentum, SGD only.
    pub momentum: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub kfac: KfacConfig,
    /// Epochs at which the learning rate is divided by 10.
    pub schedule: Vec<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 0.1,
            momentum: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            kfac: KfacConfig::default(),
            schedule: Vec::new(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::domain(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::domain(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::domain("Adam moment decays must lie in [0, 1)"));
        }
        if self.schedule.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::domain("schedule epochs must be strictly ascending"));
        }
        if matches!(self.kind, OptimizerKind::KfacF | OptimizerKind::KfacG) {
            let k = &self.kfac;
            if !(k.lambda > 0.0) {
                return Err(Error::domain(format!("K-FAC damping must be positive, got {}", k.lambda)));
            }
            if k.t_stats == 0 || k.t_inv == 0 {
                return Err(Error::domain("K-FAC update intervals must be positive"));
            }
            if !(0.0..1.0).contains(&k.ema_decay) {
                return Err(Error::domain("K-FAC EMA decay must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.schedule.iter().filter(|&&e| e <= epoch).count();
        self.lr / 10f64.powi(drops as i32)
    }
}

/// A batch the optimizer may need besides the gradient (K-FAC statistics).
pub struct StepBatch<'a> {
    pub trace: &'a ForwardTrace,
    pub loss: LossKind,
}

/// One optimizer instance and everything it carries between steps.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    lr: f64,
    steps: usize,
    velocity: Option<NetworkParams>,
    adam: Option<(NetworkParams, NetworkParams)>,
    kfac: Option<KfacFactors>,
}

fn zip_params(
    a: &mut NetworkParams,
    b: &NetworkParams,
    mut f: impl FnMut(usize, bool, &mut [f64], &[f64]),
) {
    for l in 0..a.weights.len() {
        f(l, true, a.weights[l].as_mut_slice(), b.weights[l].as_slice());
    }
    if let (Some(ab), Some(bb)) = (a.biases.as_mut(), b.biases.as_ref()) {
        for l in 0..ab.len() {
            f(l, false, &mut ab[l], &bb[l]);
        }
    }
}

fn grads_as_params(g: &Gradients) -> NetworkParams {
    NetworkParams {
        weights: g.weights.clone(),
        biases: g.biases.clone(),
    }
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, spec: &NetworkSpec) -> Result<Self> {
        config.validate()?;
        let kfac = match config.kind {
            OptimizerKind::KfacF | OptimizerKind::KfacG => Some(KfacFactors::new(config.kfac.lambda, config.kfac.damping)?),
            _ => None,
        };
        let velocity = (config.kind == OptimizerKind::Sgd && config.momentum > 0.0).then(|| NetworkParams::zeros(spec));
        let adam = (config.kind == OptimizerKind::Adam).then(|| (NetworkParams::zeros(spec), NetworkParams::zeros(spec)));
        Ok(Optimizer {
            lr: config.lr,
            config,
            steps: 0,
            velocity,
            adam,
            kfac,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn kfac_state(&self) -> Option<&KfacFactors> {
        self.kfac.as_ref()
    }

    pub fn kfac_state_mut(&mut self) -> Option<&mut KfacFactors> {
        self.kfac.as_mut()
    }

    /// Sets the learning rate for `epoch` from the schedule. Idempotent.
    pub fn apply_lr_schedule(&mut self, epoch: usize) {
        self.lr = self.config.lr_at(epoch);
    }

    /// Rejects couplings whose decay factor would reach zero or flip sign.
    pub fn check_stability(&self, coupling: &Coupling) -> Result<()> {
        if coupling.mode == CouplingMode::None || coupling.beta == 0.0 {
            return Ok(());
        }
        let literal = coupling.mode == CouplingMode::WeightDecay
            && self.config.kfac.alg1_literal
            && self.kfac.is_some();
        let product = if literal { coupling.beta } else { self.lr * coupling.beta };
        if product >= 1.0 {
            return Err(Error::Instability {
                lr: self.lr,
                beta: coupling.beta,
                product,
            });
        }
        Ok(())
    }

    /// Dispatches to the step of the configured kind.
    pub fn step(
        &mut self,
        spec: &NetworkSpec,
        params: &mut NetworkParams,
        grads: &Gradients,
        coupling: &Coupling,
        batch: Option<StepBatch<'_>>,
        rng: &mut dyn RngCore,
    ) -> Result<()> {
        match self.config.kind {
            OptimizerKind::Sgd => self.sgd_step(params, grads, coupling),
            OptimizerKind::Adam => self.adam_step(params, grads, coupling),
            OptimizerKind::KfacF | OptimizerKind::KfacG => {
                let batch = batch.ok_or_else(|| Error::domain("K-FAC needs the batch's forward trace"))?;
                self.kfac_step(spec, params, grads, coupling, batch, rng)
            }
        }
    }

    pub fn sgd_step(&mut self, params: &mut NetworkParams, grads: &Gradients, coupling: &Coupling) -> Result<()> {
        coupling.check(params.num_layers())?;
        self.check_stability(coupling)?;
        let eta = self.lr;
        let beta = coupling.beta;
        let mu = self.config.momentum;
        let g = grads_as_params(grads);
        let mut dir = g.clone();
        // L2 enters the gradient before momentum
        zip_params(&mut dir, params, |l, is_w, d, th| {
            if is_w && coupling.l2_on(l) {
                for (di, ti) in d.iter_mut().zip(th) {
                    *di += beta * ti;
                }
            }
        });
        if let Some(v) = self.velocity.as_mut() {
            zip_params(v, &dir, |_, _, vi, di| {
                for (a, b) in vi.iter_mut().zip(di) {
                    *a = mu * *a + b;
                }
            });
            dir = v.clone();
        }
        apply_direction(params, &dir, coupling, eta, false);
        self.steps += 1;
        Ok(())
    }

    pub fn adam_step(&mut self, params: &mut NetworkParams, grads: &Gradients, coupling: &Coupling) -> Result<()> {
        coupling.check(params.num_layers())?;
        self.check_stability(coupling)?;
        let (b1, b2, eps) = (self.config.adam_beta1, self.config.adam_beta2, self.config.adam_eps);
        let beta = coupling.beta;
        let mut g = grads_as_params(grads);
        zip_params(&mut g, params, |l, is_w, d, th| {
            if is_w && coupling.l2_on(l) {
                for (di, ti) in d.iter_mut().zip(th) {
                    *di += beta * ti;
                }
            }
        });
        let t = (self.steps + 1) as i32;
        let (m, v) = self.adam.as_mut().ok_or_else(|| Error::domain("optimizer is not Adam"))?;
        zip_params(m, &g, |_, _, mi, gi| {
            for (a, b) in mi.iter_mut().zip(gi) {
                *a = b1 * *a + (1.0 - b1) * b;
            }
        });
        zip_params(v, &g, |_, _, vi, gi| {
            for (a, b) in vi.iter_mut().zip(gi) {
                *a = b2 * *a + (1.0 - b2) * b * b;
            }
        });
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let mut dir = m.clone();
        zip_params(&mut dir, v, |_, _, di, vi| {
            for (a, b) in di.iter_mut().zip(vi) {
                *a = (*a / c1) / ((b / c2).sqrt() + eps);
            }
        });
        apply_direction(params, &dir, coupling, self.lr, false);
        self.steps += 1;
        Ok(())
    }

    /// Refreshes factors and inverses when their intervals come due.
    pub fn kfac_refresh(
        &mut self,
        spec: &NetworkSpec,
        params: &NetworkParams,
        batch: StepBatch<'_>,
        rng: &mut dyn RngCore,
    ) -> Result<()> {
        let metric = match self.config.kind {
            OptimizerKind::KfacF => Metric::Fisher,
            OptimizerKind::KfacG => Metric::Gn,
            _ => return Err(Error::domain("optimizer is not K-FAC")),
        };
        let cfg = self.config.kfac.clone();
        let t = self.steps;
        let state = self.kfac.as_mut().expect("K-FAC state exists for K-FAC kinds");
        if t % cfg.t_stats == 0 || state.layers.is_empty() {
            let fresh = curvature::kfac_factors_from_trace(metric, spec, params, batch.trace, batch.loss, Some(rng))?;
            state.absorb(fresh, cfg.ema_decay)?;
        } else {
            state.stats_age += 1;
        }
        if t % cfg.t_inv == 0 || state.inverses.is_empty() {
            state.invert()?;
        } else {
            state.inverse_age += 1;
        }
        Ok(())
    }

    /// Preconditioned update with the current inverses, without refreshing them.
    pub fn kfac_apply(&mut self, params: &mut NetworkParams, grads: &Gradients, coupling: &Coupling) -> Result<()> {
        coupling.check(params.num_layers())?;
        self.check_stability(coupling)?;
        let state = self.kfac.as_ref().ok_or_else(|| Error::domain("optimizer is not K-FAC"))?;
        if state.inverses.len() != params.num_layers() {
            return Err(Error::domain("K-FAC factors have not been estimated"));
        }
        let beta = coupling.beta;
        let mut dir = grads_as_params(grads);
        for l in 0..params.num_layers() {
            let w = &params.weights[l];
            let (out, inp) = w.shape();
            let has_b = params.biases.is_some();
            let cols = inp + usize::from(has_b);
            // V^T is (in [+1]) x out, matching A x S
            let mut vt = Matrix::zeros(cols, out);
            for o in 0..out {
                for i in 0..inp {
                    let mut g = grads.weights[l].get(o, i);
                    if coupling.l2_on(l) {
                        g += beta * w.get(o, i);
                    }
                    vt.set(i, o, g);
                }
                if let Some(gb) = &grads.biases {
                    vt.set(inp, o, gb[l][o]);
                }
            }
            let pre = state.inverses[l].as_ref().expect("inverses computed");
            let d = pre.apply(&vt)?;
            if !d.is_finite() {
                return Err(Error::Numerical(format!("preconditioned gradient of layer {l} is not finite")));
            }
            for o in 0..out {
                for i in 0..inp {
                    dir.weights[l].set(o, i, d.get(i, o));
                }
                if let Some(db) = dir.biases.as_mut() {
                    db[l][o] = d.get(inp, o);
                }
            }
        }
        let literal = self.config.kfac.alg1_literal;
        apply_direction(params, &dir, coupling, self.lr, literal);
        self.steps += 1;
        Ok(())
    }

    pub fn kfac_step(
        &mut self,
        spec: &NetworkSpec,
        params: &mut NetworkParams,
        grads: &Gradients,
        coupling: &Coupling,
        batch: StepBatch<'_>,
        rng: &mut dyn RngCore,
    ) -> Result<()> {
        self.kfac_refresh(spec, params, batch, rng)?;
        self.kfac_apply(params, grads, coupling)
    }
}

/// `θ ← θ − η(d + βθ)` on decayed weights, `θ ← θ − ηd` elsewhere.
/// With `literal`, decay is `θ ← θ − (ηd + βθ)`.
fn apply_direction(params: &mut NetworkParams, dir: &NetworkParams, coupling: &Coupling, eta: f64, literal: bool) {
    let beta = coupling.beta;
    zip_params(params, dir, |l, is_w, th, d| {
        if is_w && coupling.wd_on(l) {
            for (t, di) in th.iter_mut().zip(d) {
                *t = if literal {
                    *t - (eta * di + beta * *t)
                } else {
                    *t - eta * (di + beta * *t)
                };
            }
        } else {
            for (t, di) in th.iter_mut().zip(d) {
                *t -= eta * di;
            }
        }
    });
}

fn check_unit(theta_hat: &[f64], norm: f64) -> Result<()> {
    if !(norm > 0.0) {
        return Err(Error::degenerate("layer norm must be positive"));
    }
    let n = linalg::norm2(theta_hat);
    if (n - 1.0).abs() > 1e-10 {
        return Err(Error::Contract(format!("θ̂ must have unit norm, has {n}")));
    }
    Ok(())
}

/// `(I − θ̂θ̂^T) v`.
fn project(theta_hat: &[f64], v: &[f64]) -> Vec<f64> {
    let c = linalg::dot(theta_hat, v);
    v.iter().zip(theta_hat).map(|(vi, ti)| vi - c * ti).collect()
}

fn normalize(mut u: Vec<f64>) -> Result<Vec<f64>> {
    let n = linalg::norm2(&u);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Numerical("predicted direction has no finite norm".into()));
    }
    u.iter_mut().for_each(|x| *x /= n);
    Ok(u)
}

/// `θ̂ − η‖θ‖⁻²(I − θ̂θ̂^T)∇L(θ̂)`, before renormalization.
pub fn predict_normalized_sgd_step(theta_hat: &[f64], norm: f64, grad: &[f64], eta: f64) -> Result<Vec<f64>> {
    check_unit(theta_hat, norm)?;
    if grad.len() != theta_hat.len() {
        return Err(Error::structural("gradient and θ̂ differ in length"));
    }
    let scale = eta / (norm * norm);
    let pg = project(theta_hat, grad);
    Ok(theta_hat.iter().zip(&pg).map(|(t, p)| t - scale * p).collect())
}

/// First-order normalized SGD update, renormalized to unit length.
pub fn reference_normalized_sgd_step(theta_hat: &[f64], norm: f64, grad: &[f64], eta: f64) -> Result<Vec<f64>> {
    normalize(predict_normalized_sgd_step(theta_hat, norm, grad, eta)?)
}

/// `θ̂ − η(I − θ̂θ̂^T)(C(θ̂) + ‖θ‖²λI)^{-1}∇L(θ̂)`, before renormalization.
pub fn predict_normalized_kfac_step(
    theta_hat: &[f64],
    norm: f64,
    c_hat: &Matrix,
    lambda: f64,
    grad: &[f64],
    eta: f64,
) -> Result<Vec<f64>> {
    check_unit(theta_hat, norm)?;
    let p = theta_hat.len();
    if c_hat.shape() != (p, p) || grad.len() != p {
        return Err(Error::structural("curvature, gradient and θ̂ sizes disagree"));
    }
    if !(lambda >= 0.0) {
        return Err(Error::domain(format!("damping must be nonnegative, got {lambda}")));
    }
    let eig = linalg::sym_eig(c_hat)?;
    let shift = norm * norm * lambda;
    let min = eig.eigenvalues.first().copied().unwrap_or(0.0) + shift;
    if !(min > 0.0) {
        return Err(Error::Numerical(format!("damped curvature is singular (smallest eigenvalue {min})")));
    }
    let inv = eig.reconstruct_with(|mu| 1.0 / (mu + shift));
    let d = inv.matvec(grad)?;
    let pd = project(theta_hat, &d);
    Ok(theta_hat.iter().zip(&pd).map(|(t, q)| t - eta * q).collect())
}

/// First-order normalized K-FAC update, renormalized to unit length.
pub fn reference_normalized_kfac_step(
    theta_hat: &[f64],
    norm: f64,
    c_hat: &Matrix,
    lambda: f64,
    grad: &[f64],
    eta: f64,
) -> Result<Vec<f64>> {
    normalize(predict_normalized_kfac_step(theta_hat, norm, c_hat, lambda, grad, eta)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, NetworkSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar() -> (NetworkSpec, NetworkParams) {
        let spec = NetworkSpec::mlp(&[1, 1], Activation::Identity, false);
        let params = NetworkParams {
            weights: vec![Matrix::from_rows(&[&[1.0]]).unwrap()],
            biases: None,
        };
        (spec, params)
    }

    fn grads(v: f64) -> Gradients {
        Gradients {
            weights: vec![Matrix::from_rows(&[&[v]]).unwrap()],
            biases: None,
            s_grads: Vec::new(),
            input: None,
        }
    }

    fn sgd(lr: f64, spec: &NetworkSpec) -> Optimizer {
        Optimizer::new(
            OptimizerConfig {
                lr,
                ..Default::default()
            },
            spec,
        )
        .unwrap()
    }

    #[test]
    fn sgd_weight_decay_scalar() {
        let (spec, mut p) = scalar();
        let c = Coupling::new(CouplingMode::WeightDecay, 0.5, vec![true]).unwrap();
        sgd(0.1, &spec).sgd_step(&mut p, &grads(0.0), &c).unwrap();
        assert_eq!(p.weights[0].get(0, 0), 0.95);
    }

    #[test]
    fn sgd_l2_and_weight_decay_are_bit_identical() {
        let spec = NetworkSpec::mlp(&[3, 4, 2], Activation::Relu, false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p0 = NetworkParams::init(&spec, &mut rng).unwrap();
        let g = Gradients {
            weights: NetworkParams::init(&spec, &mut rng).unwrap().weights,
            biases: None,
            s_grads: Vec::new(),
            input: None,
        };
        let mask = vec![true, true];
        let (mut a, mut b) = (p0.clone(), p0);
        let mut oa = sgd(0.07, &spec);
        let mut ob = sgd(0.07, &spec);
        for _ in 0..20 {
            oa.sgd_step(&mut a, &g, &Coupling::new(CouplingMode::L2, 0.3, mask.clone()).unwrap()).unwrap();
            ob.sgd_step(&mut b, &g, &Coupling::new(CouplingMode::WeightDecay, 0.3, mask.clone()).unwrap())
                .unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn mask_excludes_layer() {
        let spec = NetworkSpec::mlp(&[1, 1, 1], Activation::Identity, false);
        let mut p = NetworkParams {
            weights: vec![Matrix::from_rows(&[&[1.0]]).unwrap(), Matrix::from_rows(&[&[1.0]]).unwrap()],
            biases: None,
        };
        let g = Gradients {
            weights: vec![Matrix::from_rows(&[&[1.0]]).unwrap(), Matrix::from_rows(&[&[1.0]]).unwrap()],
            biases: None,
            s_grads: Vec::new(),
            input: None,
        };
        let c = Coupling::new(CouplingMode::WeightDecay, 0.5, vec![false, true]).unwrap();
        sgd(0.1, &spec).sgd_step(&mut p, &g, &c).unwrap();
        assert_eq!(p.weights[0].get(0, 0), 0.9);
        assert!((p.weights[1].get(0, 0) - 0.85).abs() < 1e-15);
    }

    #[test]
    fn instability_is_rejected() {
        let (spec, mut p) = scalar();
        let c = Coupling::new(CouplingMode::WeightDecay, 20.0, vec![true]).unwrap();
        let r = sgd(0.1, &spec).sgd_step(&mut p, &grads(0.0), &c);
        assert!(matches!(r, Err(Error::Instability { .. })));
    }

    fn adam(spec: &NetworkSpec) -> Optimizer {
        Optimizer::new(
            OptimizerConfig {
                kind: OptimizerKind::Adam,
                lr: 0.01,
                ..Default::default()
            },
            spec,
        )
        .unwrap()
    }

    #[test]
    fn adam_decay_couplings_with_zero_gradient() {
        let (spec, p0) = scalar();
        let wd = Coupling::new(CouplingMode::WeightDecay, 0.5, vec![true]).unwrap();
        let mut p = p0.clone();
        let mut opt = adam(&spec);
        for t in 1..=10 {
            opt.adam_step(&mut p, &grads(0.0), &wd).unwrap();
            let expected = (1.0 - 0.01 * 0.5f64).powi(t);
            assert!((p.weights[0].get(0, 0) - expected).abs() < 1e-14);
        }

        // L2: the first bias-corrected step is βθ/(|βθ| + ε), about one learning rate
        let l2 = Coupling::new(CouplingMode::L2, 0.5, vec![true]).unwrap();
        let mut p = p0.clone();
        adam(&spec).adam_step(&mut p, &grads(0.0), &l2).unwrap();
        let expected = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((p.weights[0].get(0, 0) - expected).abs() < 1e-14);
        assert!((p.weights[0].get(0, 0) - 0.995).abs() > 1e-3);

        let z = |mode| Coupling::new(mode, 0.0, vec![true]).unwrap();
        let (mut a, mut b) = (p0.clone(), p0);
        adam(&spec).adam_step(&mut a, &grads(0.3), &z(CouplingMode::L2)).unwrap();
        adam(&spec).adam_step(&mut b, &grads(0.3), &z(CouplingMode::WeightDecay)).unwrap();
        assert_eq!(a, b);
    }

    fn kfac_scalar(a: f64, s: f64) -> (NetworkSpec, Optimizer) {
        let (spec, _) = scalar();
        let mut opt = Optimizer::new(
            OptimizerConfig {
                kind: OptimizerKind::KfacG,
                lr: 0.1,
                kfac: KfacConfig {
                    lambda: 1e-300,
                    ..Default::default()
                },
                ..Default::default()
            },
            &spec,
        )
        .unwrap();
        let st = opt.kfac_state_mut().unwrap();
        st.absorb(
            vec![curvature::FactorPair {
                a: Matrix::from_rows(&[&[a]]).unwrap(),
                s: Matrix::from_rows(&[&[s]]).unwrap(),
            }],
            0.95,
        )
        .unwrap();
        st.invert().unwrap();
        (spec, opt)
    }

    #[test]
    fn kfac_scalar_couplings() {
        let (_, mut opt) = kfac_scalar(2.0, 1.0);
        let (_, mut p) = scalar();
        let l2 = Coupling::new(CouplingMode::L2, 0.5, vec![true]).unwrap();
        opt.kfac_apply(&mut p, &grads(4.0), &l2).unwrap();
        assert!((p.weights[0].get(0, 0) - 0.775).abs() < 1e-12);

        let (_, mut opt) = kfac_scalar(2.0, 1.0);
        let (_, mut p) = scalar();
        let wd = Coupling::new(CouplingMode::WeightDecay, 0.5, vec![true]).unwrap();
        opt.kfac_apply(&mut p, &grads(4.0), &wd).unwrap();
        assert!((p.weights[0].get(0, 0) - 0.75).abs() < 1e-12);

        // identity factors reduce to SGD
        let (spec, mut opt) = kfac_scalar(1.0, 1.0);
        let (_, mut p) = scalar();
        let (_, mut q) = scalar();
        let none = Coupling::none(1);
        opt.kfac_apply(&mut p, &grads(4.0), &none).unwrap();
        sgd(0.1, &spec).sgd_step(&mut q, &grads(4.0), &none).unwrap();
        assert!((p.weights[0].get(0, 0) - q.weights[0].get(0, 0)).abs() < 1e-12);
    }

    #[test]
    fn kfac_requires_estimated_factors() {
        let (spec, mut p) = scalar();
        let mut opt = Optimizer::new(
            OptimizerConfig {
                kind: OptimizerKind::KfacF,
                ..Default::default()
            },
            &spec,
        )
        .unwrap();
        assert!(opt.kfac_apply(&mut p, &grads(1.0), &Coupling::none(1)).is_err());
    }

    #[test]
    fn lr_schedule() {
        let cfg = OptimizerConfig {
            lr: 0.1,
            schedule: vec![40, 80],
            ..Default::default()
        };
        let spec = NetworkSpec::mlp(&[1, 1], Activation::Identity, false);
        let mut opt = Optimizer::new(cfg, &spec).unwrap();
        opt.apply_lr_schedule(39);
        assert_eq!(opt.lr(), 0.1);
        opt.apply_lr_schedule(40);
        assert!((opt.lr() - 0.01).abs() < 1e-17);
        opt.apply_lr_schedule(40);
        assert!((opt.lr() - 0.01).abs() < 1e-17);
        opt.apply_lr_schedule(80);
        assert!((opt.lr() - 0.001).abs() < 1e-18);
        assert_eq!(sgd(0.3, &spec).config().lr_at(1000), 0.3);
    }

    #[test]
    fn normalized_sgd_reference_cases() {
        let th = [1.0, 0.0];
        let out = reference_normalized_sgd_step(&th, 3.0, &[5.0, 0.0], 0.1).unwrap();
        assert_eq!(out, vec![1.0, 0.0]);
        let raw = predict_normalized_sgd_step(&th, 2.0, &[0.0, 1.0], 0.1).unwrap();
        assert!((raw[1] + 0.1 / 4.0).abs() < 1e-16);
        assert!(matches!(
            predict_normalized_sgd_step(&th, 0.0, &[0.0, 1.0], 0.1),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn normalized_kfac_reference_cases() {
        let th = [0.6, 0.8];
        let g = [0.3, -0.7];
        let a = predict_normalized_kfac_step(&th, 1.0, &Matrix::identity(2), 0.0, &g, 0.05).unwrap();
        let b = predict_normalized_sgd_step(&th, 1.0, &g, 0.05).unwrap();
        assert!(linalg::rel_err(&a, &b) < 1e-15);

        // damping dominates: behaves like SGD with step η/(λ‖θ‖²)
        let c = Matrix::from_rows(&[&[1e-3, 2e-4], &[2e-4, 3e-3]]).unwrap();
        let (norm, lambda, eta) = (2.0, 1e4, 0.5);
        let k = predict_normalized_kfac_step(&th, norm, &c, lambda, &g, eta).unwrap();
        let s = predict_normalized_sgd_step(&th, 1.0, &g, eta / (lambda * norm * norm)).unwrap();
        let dk: Vec<f64> = k.iter().zip(&th).map(|(x, t)| x - t).collect();
        let ds: Vec<f64> = s.iter().zip(&th).map(|(x, t)| x - t).collect();
        assert!(linalg::rel_err(&dk, &ds) < 1e-6);
    }
}
