//! The three bundled mechanism experiments.
//!
//! * M1: SGD on a BN MLP without decay, with decay on the BN-covered layers,
//!   with decay everywhere, and without decay but with the BN-covered layer
//!   norms forced to follow the decayed run after every epoch.
//! * M2: SGD and K-FAC-G with and without decay on a plain MLP, logging
//!   Jacobian norms and the K-FAC GN norm.
//! * M3: K-FAC-F and K-FAC-G with and without decay on a BN MLP, logging
//!   normalized curvature traces and the effective damping ratio.
//!
//! Each experiment writes one run directory per arm and a summary of the
//! comparisons it checks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DataConfig, ExperimentConfig};
use super::data::Splits;
use super::svg::{self, Series};
use super::train::{self, RunResult, Transfer};
use crate::error::{Error, Result};
use crate::optim::{CouplingMode, MaskPreset, OptimizerKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct M1Config {
    pub epochs: usize,
    pub lr: f64,
    pub beta: f64,
    pub hidden: Vec<usize>,
    pub schedule: Vec<usize>,
    /// First epoch from which decayed norms must stay below the baseline's.
    pub norm_check_from: usize,
    /// Allowed |transfer − wd-hidden| gap in final test accuracy, in points.
    pub transfer_tolerance_pp: f64,
}

impl Default for M1Config {
    fn default() -> Self {
        M1Config {
            epochs: 30,
            lr: 0.1,
            beta: 0.01,
            hidden: vec![256, 256],
            schedule: vec![12, 24],
            norm_check_from: 5,
            transfer_tolerance_pp: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct M2Config {
    pub epochs: usize,
    /// Training examples; small enough for every arm to fit it exactly.
    pub train: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub schedule: Vec<usize>,
    pub sgd_lr: f64,
    pub sgd_beta: f64,
    pub kfac_lr: f64,
    pub kfac_beta: f64,
    pub lambda: f64,
    pub min_correlation: f64,
    pub min_fitted_nets: usize,
}

impl Default for M2Config {
    fn default() -> Self {
        M2Config {
            epochs: 40,
            train: 1000,
            batch_size: 32,
            hidden: vec![256, 256],
            schedule: vec![16, 32],
            sgd_lr: 0.1,
            sgd_beta: 0.01,
            kfac_lr: 0.03,
            // same per-step shrink factor ηβ = 1e-3 as the SGD arm
            kfac_beta: 1.0 / 30.0,
            lambda: 0.01,
            min_correlation: 0.8,
            min_fitted_nets: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct M3Config {
    pub epochs: usize,
    pub hidden: Vec<usize>,
    pub schedule: Vec<usize>,
    pub lr: f64,
    pub beta: f64,
    pub lambda: f64,
    pub min_train_acc: f64,
    pub min_fisher_decay: f64,
    pub max_gn_change: f64,
    /// The Fisher peak is searched over epochs `0..=peak_window`.
    pub peak_window: usize,
}

impl Default for M3Config {
    fn default() -> Self {
        M3Config {
            epochs: 30,
            hidden: vec![256, 256],
            schedule: vec![12, 24],
            lr: 0.03,
            beta: 1.0 / 30.0,
            lambda: 0.01,
            min_train_acc: 0.99,
            min_fisher_decay: 10.0,
            max_gn_change: 4.0,
            peak_window: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplicateConfig {
    pub seeds: Vec<u64>,
    /// Seeds of M3, which compares curves rather than averages.
    pub m3_seeds: Vec<u64>,
    pub batch_size: usize,
    pub data: DataConfig,
    pub plots: bool,
    pub m1: M1Config,
    pub m2: M2Config,
    pub m3: M3Config,
}

impl Default for ReplicateConfig {
    fn default() -> Self {
        ReplicateConfig {
            seeds: vec![0, 1, 2],
            m3_seeds: vec![0],
            batch_size: 128,
            data: DataConfig::default(),
            plots: true,
            m1: M1Config::default(),
            m2: M2Config::default(),
            m3: M3Config::default(),
        }
    }
}

impl ReplicateConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn base(&self, name: String, seed: u64, epochs: usize, hidden: &[usize], schedule: &[usize]) -> ExperimentConfig {
        let mut c = ExperimentConfig {
            name,
            seed,
            epochs,
            batch_size: self.batch_size,
            data: self.data.clone(),
            ..ExperimentConfig::default()
        };
        c.network.hidden = hidden.to_vec();
        c.optimizer.schedule = schedule.to_vec();
        c
    }
}

/// Pearson correlation; NaN with fewer than two points or zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n < 2 {
        return f64::NAN;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (a, b) = (x[i] - mx, y[i] - my);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    sxy / (sxx * syy).sqrt()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// One trained arm, reduced to the series the summaries report.
#[derive(Clone, Debug, Serialize)]
pub struct ArmRecord {
    pub arm: String,
    pub seed: u64,
    pub dir: Option<PathBuf>,
    pub final_train_acc: f64,
    pub final_test_acc: f64,
    pub final_jacobian_sq_norm: f64,
    pub final_kfac_gn_norm: f64,
    /// `[epoch][layer]`.
    pub layer_norms: Vec<Vec<f64>>,
    pub effective_lr: Vec<Vec<f64>>,
    pub fisher_trace: Vec<Vec<f64>>,
    pub gn_trace: Vec<Vec<f64>>,
    pub effective_damping: Vec<Vec<f64>>,
    pub jacobian_sq_norm: Vec<f64>,
    pub test_acc: Vec<f64>,
    pub elapsed_secs: f64,
}

impl ArmRecord {
    fn from_run(arm: &str, seed: u64, dir: Option<PathBuf>, run: &RunResult) -> Self {
        let recs = &run.log.records;
        let col = |f: fn(&crate::diagnostics::MetricRecord) -> &Vec<f64>| recs.iter().map(|r| f(r).clone()).collect();
        let last = run.final_record();
        ArmRecord {
            arm: arm.into(),
            seed,
            dir,
            final_train_acc: last.train_acc,
            final_test_acc: last.test_acc,
            final_jacobian_sq_norm: last.jacobian_sq_norm,
            final_kfac_gn_norm: last.kfac_gn_norm,
            layer_norms: col(|r| &r.layer_norms),
            effective_lr: col(|r| &r.effective_lr),
            fisher_trace: col(|r| &r.fisher_trace),
            gn_trace: col(|r| &r.gn_trace),
            effective_damping: col(|r| &r.effective_damping),
            jacobian_sq_norm: recs.iter().map(|r| r.jacobian_sq_norm).collect(),
            test_acc: recs.iter().map(|r| r.test_acc).collect(),
            elapsed_secs: run.elapsed_secs,
        }
    }
}

fn run_arm(cfg: &ExperimentConfig, data: &Splits, transfer: Option<&Transfer>, out: Option<&Path>) -> Result<(RunResult, ArmRecord)> {
    let run = train::train_with(cfg, data, transfer)?;
    let dir = out.map(|o| o.join(&cfg.name));
    if let Some(d) = &dir {
        train::write_run(cfg, &run, d)?;
    } else if let Some(d) = run.divergence {
        return Err(Error::Divergence {
            epoch: d.epoch,
            step: d.step,
            loss: d.loss,
        });
    }
    let rec = ArmRecord::from_run(&cfg.name, cfg.seed, dir, &run);
    Ok((run, rec))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn arm_name(arm: &str, seed: u64) -> String {
    format!("{arm}-seed{seed}")
}

fn strip_seed(name: &str) -> &str {
    name.rsplit_once("-seed").map_or(name, |(a, _)| a)
}

fn write_plot(out: Option<&Path>, enabled: bool, file: &str, title: &str, y: &str, series: Vec<Series>, log_y: bool) -> Result<()> {
    if let (Some(o), true) = (out, enabled) {
        std::fs::write(o.join(file), svg::line_plot(title, "epoch", y, &series, log_y))?;
    }
    Ok(())
}

fn epochs_series(name: &str, v: impl Iterator<Item = f64>) -> Series {
    Series {
        name: name.into(),
        points: v.enumerate().map(|(e, y)| (e as f64, y)).collect(),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct M1Summary {
    pub arms: Vec<ArmRecord>,
    pub mean_final_test_acc: BTreeMap<String, f64>,
    /// wd-all layer norms strictly below the baseline's, every layer and seed,
    /// from `norm_check_from` on.
    pub norms_below_baseline: bool,
    /// The same comparison restricted to the layers wd-hidden decays.
    pub hidden_norms_below_baseline: bool,
    pub transfer_gap_pp: f64,
    pub transfer_above_baseline: bool,
    pub pass_norms: bool,
    pub pass_transfer: bool,
    pub elapsed_secs: f64,
}

/// M1. Arms per seed: `baseline`, `wd-hidden`, `wd-all`, `transfer`.
pub fn run_m1(rc: &ReplicateConfig, data: &Splits, jobs: usize, out: Option<&Path>) -> Result<M1Summary> {
    let start = Instant::now();
    let m = &rc.m1;
    let out = out.map(|o| o.join("m1"));
    if let Some(o) = &out {
        std::fs::create_dir_all(o)?;
    }
    let make = |arm: &str, seed: u64, mode: CouplingMode, mask: MaskPreset| {
        let mut c = rc.base(arm_name(arm, seed), seed, m.epochs, &m.hidden, &m.schedule);
        c.optimizer.kind = OptimizerKind::Sgd;
        c.optimizer.lr = m.lr;
        c.network.bn = true;
        c.coupling.mode = mode;
        c.coupling.beta = if mode == CouplingMode::None { 0.0 } else { m.beta };
        c.coupling.mask = mask;
        c
    };
    let per_seed: Vec<Vec<ArmRecord>> = pool(jobs)?.install(|| {
        rc.seeds
            .par_iter()
            .map(|&seed| -> Result<Vec<ArmRecord>> {
                let o = out.as_deref();
                let (_, base) = run_arm(&make("baseline", seed, CouplingMode::None, MaskPreset::None), data, None, o)?;
                let wd_hidden_cfg = make("wd-hidden", seed, CouplingMode::WeightDecay, MaskPreset::HiddenOnly);
                let (wd_hidden_run, wd_hidden) = run_arm(&wd_hidden_cfg, data, None, o)?;
                let (_, wd_all) = run_arm(&make("wd-all", seed, CouplingMode::WeightDecay, MaskPreset::All), data, None, o)?;
                let tcfg = make("transfer", seed, CouplingMode::None, MaskPreset::None);
                let t = Transfer::from_log(&wd_hidden_run.log, MaskPreset::HiddenOnly.mask(&tcfg.network_spec()));
                let (_, transfer) = run_arm(&tcfg, data, Some(&t), o)?;
                Ok(vec![base, wd_hidden, wd_all, transfer])
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let arms: Vec<ArmRecord> = per_seed.iter().flatten().cloned().collect();

    let mut mean_final_test_acc = BTreeMap::new();
    for name in ["baseline", "wd-hidden", "wd-all", "transfer"] {
        let accs: Vec<f64> = arms.iter().filter(|a| strip_seed(&a.arm) == name).map(|a| a.final_test_acc).collect();
        mean_final_test_acc.insert(name.to_string(), mean(&accs));
    }
    let spec = make("baseline", 0, CouplingMode::None, MaskPreset::None).network_spec();
    let hidden_mask = MaskPreset::HiddenOnly.mask(&spec);
    let below = |decayed: &ArmRecord, base: &ArmRecord, mask: &[bool]| {
        (m.norm_check_from..decayed.layer_norms.len()).all(|e| {
            decayed.layer_norms[e]
                .iter()
                .zip(&base.layer_norms[e])
                .zip(mask)
                .all(|((d, b), &on)| !on || d < b)
        })
    };
    let all_mask = vec![true; spec.num_layers()];
    let norms_below_baseline = per_seed.iter().all(|s| below(&s[2], &s[0], &all_mask));
    let hidden_norms_below_baseline = per_seed.iter().all(|s| below(&s[1], &s[0], &hidden_mask));
    let acc = |k: &str| mean_final_test_acc[k];
    let transfer_gap_pp = 100.0 * (acc("transfer") - acc("wd-hidden")).abs();
    let transfer_above_baseline = acc("transfer") > acc("baseline");
    let summary = M1Summary {
        pass_norms: norms_below_baseline,
        pass_transfer: transfer_gap_pp <= m.transfer_tolerance_pp && transfer_above_baseline,
        arms,
        mean_final_test_acc,
        norms_below_baseline,
        hidden_norms_below_baseline,
        transfer_gap_pp,
        transfer_above_baseline,
        elapsed_secs: start.elapsed().as_secs_f64(),
    };
    if let Some(o) = &out {
        std::fs::write(o.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        let first_seed: Vec<&ArmRecord> = summary.arms.iter().filter(|a| a.seed == rc.seeds[0]).collect();
        let series = |f: &dyn Fn(&ArmRecord) -> Vec<f64>| -> Vec<Series> {
            first_seed.iter().map(|a| epochs_series(strip_seed(&a.arm), f(a).into_iter())).collect()
        };
        write_plot(Some(o), rc.plots, "effective_lr.svg", "effective LR, first layer", "eta / |theta|^2",
            series(&|a| a.effective_lr.iter().map(|r| r[0]).collect()), true)?;
        write_plot(Some(o), rc.plots, "layer_norm.svg", "first-layer norm", "|theta_0|",
            series(&|a| a.layer_norms.iter().map(|r| r[0]).collect()), false)?;
        write_plot(Some(o), rc.plots, "test_acc.svg", "test accuracy", "accuracy", series(&|a| a.test_acc.clone()), false)?;
    }
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct M2Summary {
    pub arms: Vec<ArmRecord>,
    /// Mean final Jacobian norm without decay over the mean with decay.
    pub sgd_jacobian_ratio: f64,
    pub kfac_g_jacobian_ratio: f64,
    pub fitted_nets: usize,
    pub correlation: f64,
    pub pass_ratio_order: bool,
    pub pass_correlation: bool,
    pub elapsed_secs: f64,
}

/// M2. Arms per seed: `sgd`, `sgd-wd`, `kfac-g`, `kfac-g-wd`, no BN.
pub fn run_m2(rc: &ReplicateConfig, data: &Splits, jobs: usize, out: Option<&Path>) -> Result<M2Summary> {
    let start = Instant::now();
    let m = &rc.m2;
    let out = out.map(|o| o.join("m2"));
    if let Some(o) = &out {
        std::fs::create_dir_all(o)?;
    }
    let n = m.train.min(data.train.len());
    let small = Splits {
        train: data.train.subset(&(0..n).collect::<Vec<_>>()),
        val: data.val.clone(),
        test: data.test.clone(),
    };
    let mut cfgs = Vec::new();
    for &seed in &rc.seeds {
        for (arm, kind, lr, beta) in [
            ("sgd", OptimizerKind::Sgd, m.sgd_lr, 0.0),
            ("sgd-wd", OptimizerKind::Sgd, m.sgd_lr, m.sgd_beta),
            ("kfac-g", OptimizerKind::KfacG, m.kfac_lr, 0.0),
            ("kfac-g-wd", OptimizerKind::KfacG, m.kfac_lr, m.kfac_beta),
        ] {
            let mut c = rc.base(arm_name(arm, seed), seed, m.epochs, &m.hidden, &m.schedule);
            c.data.train = n;
            c.batch_size = m.batch_size;
            c.network.bn = false;
            c.optimizer.kind = kind;
            c.optimizer.lr = lr;
            c.optimizer.kfac.lambda = m.lambda;
            if beta > 0.0 {
                c.coupling.mode = CouplingMode::WeightDecay;
                c.coupling.beta = beta;
                c.coupling.mask = MaskPreset::All;
            }
            cfgs.push(c);
        }
    }
    let arms: Vec<ArmRecord> = pool(jobs)?.install(|| {
        cfgs.par_iter()
            .map(|c| run_arm(c, &small, None, out.as_deref()).map(|(_, r)| r))
            .collect::<Result<Vec<_>>>()
    })?;
    let jac = |name: &str| {
        let v: Vec<f64> = arms.iter().filter(|a| strip_seed(&a.arm) == name).map(|a| a.final_jacobian_sq_norm).collect();
        mean(&v)
    };
    let sgd_jacobian_ratio = jac("sgd") / jac("sgd-wd");
    let kfac_g_jacobian_ratio = jac("kfac-g") / jac("kfac-g-wd");
    let fitted: Vec<&ArmRecord> = arms.iter().filter(|a| a.final_train_acc == 1.0).collect();
    let correlation = pearson(
        &fitted.iter().map(|a| a.final_kfac_gn_norm).collect::<Vec<_>>(),
        &fitted.iter().map(|a| a.final_jacobian_sq_norm).collect::<Vec<_>>(),
    );
    let summary = M2Summary {
        pass_ratio_order: kfac_g_jacobian_ratio > sgd_jacobian_ratio,
        pass_correlation: fitted.len() >= m.min_fitted_nets && correlation >= m.min_correlation,
        fitted_nets: fitted.len(),
        arms,
        sgd_jacobian_ratio,
        kfac_g_jacobian_ratio,
        correlation,
        elapsed_secs: start.elapsed().as_secs_f64(),
    };
    if let Some(o) = &out {
        std::fs::write(o.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        let series = summary
            .arms
            .iter()
            .filter(|a| a.seed == rc.seeds[0])
            .map(|a| epochs_series(strip_seed(&a.arm), a.jacobian_sq_norm.iter().copied()))
            .collect();
        write_plot(Some(o), rc.plots, "jacobian.svg", "mean squared Jacobian norm", "E|J|^2", series, true)?;
    }
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct M3Summary {
    pub arms: Vec<ArmRecord>,
    /// Per K-FAC-F arm: first-layer Fisher trace peak over final value.
    pub fisher_decay: BTreeMap<String, f64>,
    /// Per K-FAC-F arm: max over min of the first-layer GN trace from the
    /// Fisher peak onward.
    pub gn_change: BTreeMap<String, f64>,
    pub min_final_train_acc: f64,
    /// Every layer, every epoch from the midpoint: no-decay ratio above the decayed one.
    pub damping_no_wd_above_wd: bool,
    pub pass_traces: bool,
    pub pass_damping: bool,
    pub elapsed_secs: f64,
}

/// Peak of `v[..=window]` over the last value, and the max/min spread of
/// `w` from the peak on.
pub fn decay_and_spread(v: &[f64], w: &[f64], window: usize) -> (f64, f64) {
    let end = window.min(v.len().saturating_sub(1));
    let (peak_at, peak) = v[..=end]
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, x)| if x > acc.1 { (i, x) } else { acc });
    let decay = peak / v[v.len() - 1];
    let tail = &w[peak_at..];
    let hi = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = tail.iter().copied().fold(f64::INFINITY, f64::min);
    (decay, hi / lo)
}

/// M3. Arms per seed: `kfac-f`, `kfac-f-wd`, `kfac-g`, `kfac-g-wd`, with BN.
pub fn run_m3(rc: &ReplicateConfig, data: &Splits, jobs: usize, out: Option<&Path>) -> Result<M3Summary> {
    let start = Instant::now();
    let m = &rc.m3;
    let out = out.map(|o| o.join("m3"));
    if let Some(o) = &out {
        std::fs::create_dir_all(o)?;
    }
    let mut cfgs = Vec::new();
    for &seed in &rc.m3_seeds {
        for (arm, kind, wd) in [
            ("kfac-f", OptimizerKind::KfacF, false),
            ("kfac-f-wd", OptimizerKind::KfacF, true),
            ("kfac-g", OptimizerKind::KfacG, false),
            ("kfac-g-wd", OptimizerKind::KfacG, true),
        ] {
            let mut c = rc.base(arm_name(arm, seed), seed, m.epochs, &m.hidden, &m.schedule);
            c.network.bn = true;
            c.optimizer.kind = kind;
            c.optimizer.lr = m.lr;
            c.optimizer.kfac.lambda = m.lambda;
            c.diagnostics.traces = true;
            if wd {
                c.coupling.mode = CouplingMode::WeightDecay;
                c.coupling.beta = m.beta;
                c.coupling.mask = MaskPreset::All;
            }
            cfgs.push(c);
        }
    }
    let arms: Vec<ArmRecord> = pool(jobs)?.install(|| {
        cfgs.par_iter()
            .map(|c| run_arm(c, data, None, out.as_deref()).map(|(_, r)| r))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut fisher_decay = BTreeMap::new();
    let mut gn_change = BTreeMap::new();
    let mut min_final_train_acc = f64::INFINITY;
    let mut damping_ok = true;
    for pair in arms.chunks(4) {
        for a in &pair[..2] {
            let f: Vec<f64> = a.fisher_trace.iter().map(|r| r[0]).collect();
            let g: Vec<f64> = a.gn_trace.iter().map(|r| r[0]).collect();
            let (d, s) = decay_and_spread(&f, &g, m.peak_window);
            fisher_decay.insert(a.arm.clone(), d);
            gn_change.insert(a.arm.clone(), s);
            min_final_train_acc = min_final_train_acc.min(a.final_train_acc);
        }
        let (plain, decayed) = (&pair[0], &pair[1]);
        let mid = m.epochs.div_ceil(2);
        for e in mid..plain.effective_damping.len() {
            damping_ok &= plain.effective_damping[e]
                .iter()
                .zip(&decayed.effective_damping[e])
                .all(|(p, d)| p > d);
        }
    }
    let pass_traces = min_final_train_acc >= m.min_train_acc
        && fisher_decay.values().all(|&d| d >= m.min_fisher_decay)
        && gn_change.values().all(|&g| g <= m.max_gn_change);
    let summary = M3Summary {
        arms,
        fisher_decay,
        gn_change,
        min_final_train_acc,
        damping_no_wd_above_wd: damping_ok,
        pass_traces,
        pass_damping: damping_ok,
        elapsed_secs: start.elapsed().as_secs_f64(),
    };
    if let Some(o) = &out {
        std::fs::write(o.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        let first: Vec<&ArmRecord> = summary.arms.iter().filter(|a| a.seed == rc.m3_seeds[0]).collect();
        let mut traces = Vec::new();
        for a in &first[..2] {
            let name = strip_seed(&a.arm);
            traces.push(epochs_series(&format!("{name} tr F"), a.fisher_trace.iter().map(|r| r[0])));
            traces.push(epochs_series(&format!("{name} tr G"), a.gn_trace.iter().map(|r| r[0])));
        }
        write_plot(Some(o), rc.plots, "traces.svg", "normalized first-layer curvature traces", "trace", traces, true)?;
        let damping = first
            .iter()
            .map(|a| epochs_series(strip_seed(&a.arm), a.effective_damping.iter().map(|r| r[0])))
            .collect();
        write_plot(Some(o), rc.plots, "effective_damping.svg", "effective damping, first layer", "ratio", damping, true)?;
    }
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct ReplicateReport {
    pub m1: M1Summary,
    pub m2: M2Summary,
    pub m3: M3Summary,
}

/// Runs M1, M2 and M3 in turn; with `out`, writes `summary.json` at the top.
pub fn replicate(rc: &ReplicateConfig, jobs: usize, out: Option<&Path>) -> Result<ReplicateReport> {
    let data = load(rc)?;
    let report = ReplicateReport {
        m1: run_m1(rc, &data, jobs, out)?,
        m2: run_m2(rc, &data, jobs, out)?,
        m3: run_m3(rc, &data, jobs, out)?,
    };
    if let Some(o) = out {
        std::fs::write(o.join("summary.json"), serde_json::to_string_pretty(&top_level(&report)?)?)?;
    }
    Ok(report)
}

/// The summaries without their per-arm series.
fn top_level(r: &ReplicateReport) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(r)?;
    for m in ["m1", "m2", "m3"] {
        if let Some(obj) = v.get_mut(m).and_then(|x| x.as_object_mut()) {
            obj.remove("arms");
        }
    }
    Ok(v)
}

/// Loads the configured dataset.
pub fn load(rc: &ReplicateConfig) -> Result<Splits> {
    ExperimentConfig {
        data: rc.data.clone(),
        ..ExperimentConfig::default()
    }
    .load_data()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_of_affine_data_is_one() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v - 1.0).collect();
        assert!((pearson(&x, &y) - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg) + 1.0).abs() < 1e-12);
        assert!(pearson(&[1.0], &[2.0]).is_nan());
    }

    #[test]
    fn decay_uses_the_early_peak() {
        let f = [1.0, 50.0, 20.0, 100.0, 5.0];
        let g = [9.0, 2.0, 3.0, 4.0, 1.5];
        let (d, s) = decay_and_spread(&f, &g, 2);
        assert_eq!(d, 10.0);
        assert_eq!(s, 4.0 / 1.5);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let rc = ReplicateConfig::from_toml("seeds = [4]\n[m1]\nepochs = 3\n").unwrap();
        assert_eq!(rc.seeds, vec![4]);
        assert_eq!(rc.m1.epochs, 3);
        assert_eq!(rc.m2, M2Config::default());
        assert!(ReplicateConfig::from_toml("[m4]\n").is_err());
    }
}
