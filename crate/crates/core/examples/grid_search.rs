//! Grid search over (η, β) with validation selection and retraining on
//! train+validation. A cell with ηβ ≥ 1 is rejected, not fatal.

use wdlab::harness::config::{DataSource, ExperimentConfig};
use wdlab::harness::grid::{self, GridSpec};
use wdlab::optim::CouplingMode;

fn main() -> wdlab::Result<()> {
    let mut cfg = ExperimentConfig {
        name: "grid".into(),
        epochs: 10,
        batch_size: 32,
        ..ExperimentConfig::default()
    };
    cfg.data.source = DataSource::Synthetic;
    cfg.data.train = 600;
    cfg.data.val = 200;
    cfg.data.test = 200;
    cfg.network.hidden = vec![32];
    cfg.optimizer.schedule = vec![6];
    cfg.coupling.mode = CouplingMode::WeightDecay;
    let spec = GridSpec {
        lrs: vec![0.03, 0.1, 0.3],
        betas: vec![0.0, 1e-2, 5.0],
    };
    let data = cfg.load_data()?;
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let report = grid::run_grid(&cfg, &spec, &data, jobs, None)?;
    for c in &report.cells {
        match c.val_acc {
            Some(a) => println!("lr {:<5} beta {:<5} val acc {a:.3}", c.lr, c.beta),
            None => println!("lr {:<5} beta {:<5} {}", c.lr, c.beta, c.error.as_deref().unwrap_or("")),
        }
    }
    println!(
        "winner lr {} beta {}; after retraining on train+val, test acc {:.3}",
        report.best_lr, report.best_beta, report.final_test_acc
    );
    Ok(())
}
