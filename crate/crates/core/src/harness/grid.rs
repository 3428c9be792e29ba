//! Grid search over learning rate and coupling strength.
//!
//! Cells train on the training split and are scored by final validation
//! accuracy; the test split is withheld from them. The winner is retrained on
//! train+validation and only then evaluated on test.

use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::{Dataset, Splits};
use super::train::{self, RunResult};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lrs: Vec<f64>,
    pub betas: Vec<f64>,
}

impl GridSpec {
    /// Cells in row-major order: learning rate outer, β inner.
    pub fn cells(&self) -> Vec<(f64, f64)> {
        self.lrs
            .iter()
            .flat_map(|&lr| self.betas.iter().map(move |&b| (lr, b)))
            .collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CellResult {
    pub lr: f64,
    pub beta: f64,
    /// `None` when the cell was rejected or diverged.
    pub val_acc: Option<f64>,
    pub error: Option<String>,
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GridReport {
    pub cells: Vec<CellResult>,
    pub best_lr: f64,
    pub best_beta: f64,
    pub best_val_acc: f64,
    pub final_train_acc: f64,
    pub final_test_acc: f64,
    pub final_test_loss: f64,
}

/// Larger validation accuracy wins; ties go to smaller β, then smaller η.
pub fn better(a: &CellResult, b: &CellResult) -> Ordering {
    let acc = |c: &CellResult| c.val_acc.unwrap_or(f64::NEG_INFINITY);
    acc(a)
        .total_cmp(&acc(b))
        .then_with(|| b.beta.total_cmp(&a.beta))
        .then_with(|| b.lr.total_cmp(&a.lr))
}

pub fn select(cells: &[CellResult]) -> Option<&CellResult> {
    cells.iter().filter(|c| c.val_acc.is_some()).max_by(|a, b| better(a, b))
}

fn cell_config(base: &ExperimentConfig, lr: f64, beta: f64, idx: usize) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.optimizer.lr = lr;
    cfg.coupling.beta = beta;
    cfg.name = format!("{}-cell{idx:03}", base.name);
    cfg
}

fn run_cell(cfg: &ExperimentConfig, data: &Splits, out: Option<&Path>) -> Result<RunResult> {
    let run = train::train(cfg, data)?;
    if let Some(dir) = out {
        train::write_run(cfg, &run, dir)?;
    }
    if let Some(d) = run.divergence {
        return Err(Error::Divergence {
            epoch: d.epoch,
            step: d.step,
            loss: d.loss,
        });
    }
    Ok(run)
}

/// Runs every cell on a pool of `jobs` threads, selects, and retrains the
/// winner. With `out`, each cell writes `cell_NNN/`, the winner `final/`, and
/// the report goes to `grid.json`.
pub fn run_grid(base: &ExperimentConfig, grid: &GridSpec, data: &Splits, jobs: usize, out: Option<&Path>) -> Result<GridReport> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(Error::Config("grid needs at least one learning rate and one beta".into()));
    }
    if data.val.is_empty() {
        return Err(Error::Config("grid search needs a validation split".into()));
    }
    let without_test = Splits {
        train: data.train.clone(),
        val: data.val.clone(),
        test: Dataset {
            x: crate::linalg::Matrix::zeros(0, data.test.dim()),
            y: Vec::new(),
            classes: data.test.classes,
        },
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<CellResult> = pool.install(|| {
        cells
            .par_iter()
            .enumerate()
            .map(|(i, &(lr, beta))| {
                let cfg = cell_config(base, lr, beta, i);
                let dir = out.map(|o| o.join(format!("cell_{i:03}")));
                match run_cell(&cfg, &without_test, dir.as_deref()) {
                    Ok(run) => CellResult {
                        lr,
                        beta,
                        val_acc: Some(run.final_record().val_acc),
                        error: None,
                        dir,
                    },
                    Err(e) => {
                        log::warn!("grid cell lr={lr} beta={beta} rejected: {e}");
                        CellResult {
                            lr,
                            beta,
                            val_acc: None,
                            error: Some(e.to_string()),
                            dir,
                        }
                    }
                }
            })
            .collect()
    });
    let best = select(&results)
        .ok_or_else(|| Error::Infeasible("every grid cell was rejected or diverged".into()))?
        .clone();

    let mut final_cfg = cell_config(base, best.lr, best.beta, 0);
    final_cfg.name = format!("{}-final", base.name);
    let merged = data.merged_train()?;
    let final_run = run_cell(&final_cfg, &merged, out.map(|o| o.join("final")).as_deref())?;
    let r = final_run.final_record();
    let report = GridReport {
        cells: results,
        best_lr: best.lr,
        best_beta: best.beta,
        best_val_acc: best.val_acc.unwrap_or(f64::NAN),
        final_train_acc: r.train_acc,
        final_test_acc: r.test_acc,
        final_test_loss: r.test_loss,
    };
    if let Some(o) = out {
        std::fs::create_dir_all(o)?;
        std::fs::write(o.join("grid.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::DataSource;
    use crate::harness::data;
    use crate::nn::{Activation, NetworkSpec};
    use crate::optim::CouplingMode;

    fn tiny() -> (ExperimentConfig, Splits) {
        let mut cfg = ExperimentConfig::default();
        cfg.data.source = DataSource::Synthetic;
        cfg.data.synthetic_dim = 5;
        cfg.data.synthetic_classes = 3;
        cfg.data.train = 64;
        cfg.data.val = 32;
        cfg.data.test = 32;
        cfg.network.hidden = vec![6];
        cfg.batch_size = 16;
        cfg.epochs = 2;
        cfg.coupling.mode = CouplingMode::WeightDecay;
        let teacher = NetworkSpec::mlp(&[5, 8, 3], Activation::Relu, false);
        (cfg, data::synthetic_splits((64, 32, 32), 5, 3, &teacher, 1, false).unwrap())
    }

    fn cell(lr: f64, beta: f64, acc: Option<f64>) -> CellResult {
        CellResult {
            lr,
            beta,
            val_acc: acc,
            error: None,
            dir: None,
        }
    }

    #[test]
    fn singleton_grid_picks_its_cell() {
        let (cfg, d) = tiny();
        let g = GridSpec {
            lrs: vec![0.05],
            betas: vec![1e-3],
        };
        let dir = tempfile::tempdir().unwrap();
        let r = run_grid(&cfg, &g, &d, 1, Some(dir.path())).unwrap();
        assert_eq!((r.best_lr, r.best_beta), (0.05, 1e-3));
        assert!(dir.path().join("grid.json").exists());
        assert!(dir.path().join("final/metrics.csv").exists());
    }

    #[test]
    fn unstable_cell_is_rejected_without_aborting() {
        let (cfg, d) = tiny();
        let g = GridSpec {
            lrs: vec![0.1],
            betas: vec![1e-3, 20.0],
        };
        let r = run_grid(&cfg, &g, &d, 2, None).unwrap();
        assert!(r.cells[1].val_acc.is_none());
        assert!(r.cells[1].error.as_deref().unwrap().contains("must be below 1"));
        assert_eq!(r.best_beta, 1e-3);
    }

    #[test]
    fn ties_prefer_smaller_beta_then_smaller_lr() {
        let cells = vec![
            cell(0.1, 1e-2, Some(0.9)),
            cell(0.05, 1e-2, Some(0.9)),
            cell(0.2, 1e-3, Some(0.9)),
            cell(0.01, 1e-4, Some(0.8)),
            cell(0.01, 0.0, None),
        ];
        let b = select(&cells).unwrap();
        assert_eq!((b.lr, b.beta), (0.2, 1e-3));
        let mut rev = cells.clone();
        rev.reverse();
        let b2 = select(&rev).unwrap();
        assert_eq!((b2.lr, b2.beta), (0.2, 1e-3));
        let no_beta_tie = vec![cell(0.1, 1e-2, Some(0.9)), cell(0.05, 1e-2, Some(0.9))];
        assert_eq!(select(&no_beta_tie).unwrap().lr, 0.05);
    }
}
