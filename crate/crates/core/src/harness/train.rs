//! Mini-batch training runs with per-epoch metrics.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::data::{Dataset, Splits};
use crate::curvature::Metric;
use crate::diagnostics::{self, MetricInputs, MetricLog, MetricRecord, Split, TransferPolicy};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::loss::{self, LossKind, Targets};
use crate::nn::{self, BnState, Mode, NetworkParams, NetworkSpec};
use crate::optim::{Optimizer, OptimizerKind, StepBatch};

/// Fixed seed of the diagnostic subsets, shared by every run.
const SUBSET_SEED: u64 = 0x5eed_d1a6;

/// Per-epoch layer norms to impose on masked layers.
#[derive(Clone, Debug)]
pub struct Transfer {
    /// `norms[e]` are the reference norms after epoch `e` (index 0 is the initial state).
    pub norms: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
}

impl Transfer {
    pub fn from_log(log: &MetricLog, mask: Vec<bool>) -> Self {
        Transfer {
            norms: log.records.iter().map(|r| r.layer_norms.clone()).collect(),
            mask,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Divergence {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub spec: NetworkSpec,
    pub params: NetworkParams,
    pub bn_state: BnState,
    pub log: MetricLog,
    pub divergence: Option<Divergence>,
    pub elapsed_secs: f64,
}

impl RunResult {
    pub fn final_record(&self) -> &MetricRecord {
        self.log.records.last().expect("the initial record always exists")
    }
}

fn fixed_subset(d: &Dataset, size: usize) -> Matrix {
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(SUBSET_SEED));
    idx.truncate(size.min(d.len()));
    d.x.select_rows(&idx)
}

fn split(d: &Dataset) -> Split<'_> {
    Split { x: &d.x, y: &d.y }
}

fn onehot(y: &[usize], k: usize) -> Matrix {
    Matrix::from_fn(y.len(), k, |r, c| f64::from(u8::from(y[r] == c)))
}

/// Fixed measurement inputs shared by every epoch of a run.
struct Probe<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a Splits,
    jacobian_x: Matrix,
    curvature_x: Matrix,
}

impl<'a> Probe<'a> {
    fn new(cfg: &'a ExperimentConfig, data: &'a Splits) -> Self {
        let held_out = if data.test.is_empty() { &data.val } else { &data.test };
        Probe {
            cfg,
            data,
            jacobian_x: fixed_subset(held_out, cfg.diagnostics.jacobian_subset),
            curvature_x: fixed_subset(&data.train, cfg.diagnostics.curvature_subset.max(2)),
        }
    }

    fn record(&self, spec: &NetworkSpec, epoch: usize, lr: f64, params: &NetworkParams, bn: &BnState) -> Result<MetricRecord> {
        let metric = match self.cfg.optimizer.kind {
            OptimizerKind::KfacG => Metric::Gn,
            _ => Metric::Fisher,
        };
        let d = self.data;
        diagnostics::record_metrics(&MetricInputs {
            epoch,
            lr,
            spec,
            params,
            bn_state: bn,
            loss: self.cfg.loss,
            train: split(&d.train),
            val: (!d.val.is_empty()).then(|| split(&d.val)),
            test: (!d.test.is_empty()).then(|| split(&d.test)),
            jacobian_x: &self.jacobian_x,
            curvature_x: &self.curvature_x,
            toggles: self.cfg.diagnostics.toggles(),
            damping: Some((self.cfg.optimizer.kfac.lambda, metric)),
        })
    }
}

/// Measures a checkpoint the way a training run measures each epoch.
pub fn diagnose(cfg: &ExperimentConfig, data: &Splits, ckpt: &Checkpoint) -> Result<MetricRecord> {
    if data.train.dim() != ckpt.spec.input_dim() {
        return Err(Error::Config(format!(
            "data has {} features, checkpoint expects {}",
            data.train.dim(),
            ckpt.spec.input_dim()
        )));
    }
    Probe::new(cfg, data).record(&ckpt.spec, ckpt.epoch, cfg.optimizer.lr_at(ckpt.epoch), &ckpt.params, &ckpt.bn_state)
}

/// Trains per `cfg` on in-memory data. A `[transfer]` table in the config is
/// loaded from its reference CSV.
pub fn train(cfg: &ExperimentConfig, data: &Splits) -> Result<RunResult> {
    let transfer = match &cfg.transfer {
        Some(t) => {
            let log = MetricLog::load(&t.reference)?;
            Some(Transfer::from_log(&log, t.mask.mask(&cfg.network_spec())))
        }
        None => None,
    };
    train_with(cfg, data, transfer.as_ref())
}

pub fn train_with(cfg: &ExperimentConfig, data: &Splits, transfer: Option<&Transfer>) -> Result<RunResult> {
    let start = Instant::now();
    cfg.validate()?;
    let spec = cfg.network_spec();
    if data.train.dim() != spec.input_dim() {
        return Err(Error::Config(format!(
            "data has {} features, network expects {}",
            data.train.dim(),
            spec.input_dim()
        )));
    }
    if data.train.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "{} training examples cannot fill a batch of {}",
            data.train.len(),
            cfg.batch_size
        )));
    }
    if let Some(t) = transfer {
        if t.norms.len() < cfg.epochs + 1 {
            return Err(Error::Config(format!(
                "transfer reference has {} records, run needs {}",
                t.norms.len(),
                cfg.epochs + 1
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = NetworkParams::init(&spec, &mut rng)?;
    let mut bn_state = BnState::new(&spec);
    let mut opt = Optimizer::new(cfg.optimizer.clone(), &spec)?;
    let coupling = cfg.coupling(&spec)?;
    opt.check_stability(&coupling)?;
    let probe = Probe::new(cfg, data);
    let record = |epoch: usize, lr: f64, params: &NetworkParams, bn: &BnState| probe.record(&spec, epoch, lr, params, bn);

    let mut log = MetricLog::new(spec.num_layers());
    log.push(record(0, cfg.optimizer.lr_at(0), &params, &bn_state)?)?;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut divergence = None;
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        opt.apply_lr_schedule(epoch);
        order.shuffle(&mut rng);
        // the last partial batch is dropped; the next shuffle covers it
        for batch in order.chunks_exact(cfg.batch_size) {
            let x = data.train.x.select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| data.train.y[i]).collect();
            let trace = nn::forward_trace(&spec, &params, &x, Mode::Train)?;
            bn_state.update(&spec, &trace);
            let (loss_value, dlogits) = match cfg.loss {
                LossKind::CrossEntropySoftmax => loss::loss_and_grad(cfg.loss, trace.logits(), Targets::Labels(&y))?,
                LossKind::SquaredError => {
                    let t = onehot(&y, spec.output_dim());
                    loss::loss_and_grad(cfg.loss, trace.logits(), Targets::Values(&t))?
                }
            };
            if !loss_value.is_finite() {
                divergence = Some(Divergence {
                    epoch,
                    step,
                    loss: loss_value,
                });
                break 'epochs;
            }
            let grads = nn::backward(&spec, &params, &trace, &dlogits)?;
            let batch_ref = StepBatch {
                trace: &trace,
                loss: cfg.loss,
            };
            opt.step(&spec, &mut params, &grads, &coupling, Some(batch_ref), &mut rng)?;
            if !params.is_finite() {
                divergence = Some(Divergence {
                    epoch,
                    step,
                    loss: f64::NAN,
                });
                break 'epochs;
            }
            step += 1;
        }
        if let Some(t) = transfer {
            params = diagnostics::norm_transfer(&spec, &params, &t.norms[epoch + 1], &t.mask, TransferPolicy::Warn)?;
        }
        let rec = record(epoch + 1, opt.lr(), &params, &bn_state)?;
        log::info!(
            "{} epoch {}: train loss {:.4} acc {:.4}, test acc {:.4}",
            cfg.name,
            epoch + 1,
            rec.train_loss,
            rec.train_acc,
            rec.test_acc
        );
        log.push(rec)?;
    }
    Ok(RunResult {
        spec,
        params,
        bn_state,
        log,
        divergence,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Serialize)]
struct RunSummary<'a> {
    name: &'a str,
    seed: u64,
    epochs_completed: usize,
    divergence: Option<Divergence>,
    elapsed_secs: f64,
    final_train_loss: f64,
    final_train_acc: f64,
    final_val_acc: f64,
    final_test_loss: f64,
    final_test_acc: f64,
    final_gen_gap: f64,
    final_layer_norms: &'a [f64],
    final_jacobian_sq_norm: f64,
    final_kfac_gn_norm: f64,
}

/// Writes `metrics.csv`, `checkpoint.bin` and `summary.json` for a finished run.
/// A diverged run is written out and then reported as an error.
pub fn write_run(cfg: &ExperimentConfig, run: &RunResult, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    run.log.save(&out.join("metrics.csv"))?;
    Checkpoint {
        epoch: run.log.records.len() - 1,
        spec: run.spec.clone(),
        params: run.params.clone(),
        bn_state: run.bn_state.clone(),
    }
    .save(&out.join("checkpoint.bin"))?;
    let r = run.final_record();
    let summary = RunSummary {
        name: &cfg.name,
        seed: cfg.seed,
        epochs_completed: r.epoch,
        divergence: run.divergence,
        elapsed_secs: run.elapsed_secs,
        final_train_loss: r.train_loss,
        final_train_acc: r.train_acc,
        final_val_acc: r.val_acc,
        final_test_loss: r.test_loss,
        final_test_acc: r.test_acc,
        final_gen_gap: r.gen_gap,
        final_layer_norms: &r.layer_norms,
        final_jacobian_sq_norm: r.jacobian_sq_norm,
        final_kfac_gn_norm: r.kfac_gn_norm,
    };
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    if let Some(d) = run.divergence {
        return Err(Error::Divergence {
            epoch: d.epoch,
            step: d.step,
            loss: d.loss,
        });
    }
    Ok(())
}

/// Loads data, trains, and writes the run directory.
pub fn run_to_dir(cfg: &ExperimentConfig, out: &Path) -> Result<RunResult> {
    let data = cfg.load_data()?;
    let run = train(cfg, &data)?;
    write_run(cfg, &run, out)?;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::DataSource;
    use crate::harness::data;
    use crate::nn::Activation;
    use crate::optim::CouplingMode;

    fn tiny() -> (ExperimentConfig, Splits) {
        let mut cfg = ExperimentConfig::default();
        cfg.data.source = DataSource::Synthetic;
        cfg.data.synthetic_dim = 5;
        cfg.data.synthetic_classes = 3;
        cfg.data.train = 64;
        cfg.data.val = 16;
        cfg.data.test = 16;
        cfg.network.hidden = vec![6];
        cfg.batch_size = 16;
        cfg.epochs = 3;
        cfg.diagnostics.traces = true;
        let teacher = NetworkSpec::mlp(&[5, 8, 3], Activation::Relu, false);
        let splits = data::synthetic_splits((64, 16, 16), 5, 3, &teacher, 1, false).unwrap();
        (cfg, splits)
    }

    #[test]
    fn zero_epochs_leave_only_the_initial_record() {
        let (mut cfg, d) = tiny();
        cfg.epochs = 0;
        let run = train(&cfg, &d).unwrap();
        assert_eq!(run.log.records.len(), 1);
        assert_eq!(run.log.records[0].epoch, 0);
    }

    #[test]
    fn records_per_run_is_epochs_plus_one_and_deterministic() {
        let (cfg, d) = tiny();
        let a = train(&cfg, &d).unwrap();
        let b = train(&cfg, &d).unwrap();
        assert_eq!(a.log.records.len(), 4);
        for (x, y) in a.log.records.iter().zip(&b.log.records) {
            assert!(x.same_bits(y));
        }
    }

    #[test]
    fn zero_beta_l2_matches_no_regularization() {
        let (mut cfg, d) = tiny();
        cfg.coupling.mode = CouplingMode::L2;
        cfg.coupling.beta = 0.0;
        let a = train(&cfg, &d).unwrap();
        cfg.coupling.mode = CouplingMode::None;
        let b = train(&cfg, &d).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn divergence_is_reported() {
        let (mut cfg, d) = tiny();
        cfg.network.bn = false;
        cfg.loss = LossKind::SquaredError;
        cfg.optimizer.lr = 1e100;
        let run = train(&cfg, &d).unwrap();
        assert!(run.divergence.is_some());
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(write_run(&cfg, &run, dir.path()), Err(Error::Divergence { .. })));
        assert!(dir.path().join("metrics.csv").exists());
    }
}
