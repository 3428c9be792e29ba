//! One training run on the MNIST subset with per-epoch metrics.
//!
//!     cargo run --release --example train_run -- [config.toml] [out_dir]

use std::path::PathBuf;

use wdlab::harness::config::ExperimentConfig;
use wdlab::harness::train;

fn main() -> wdlab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cfg = match args.first() {
        Some(p) => ExperimentConfig::load(p.as_ref())?,
        None => ExperimentConfig {
            epochs: 3,
            ..ExperimentConfig::default()
        },
    };
    let out = PathBuf::from(args.get(1).map_or("runs/train_run", String::as_str));
    let run = train::run_to_dir(&cfg, &out)?;
    println!("epoch  train_acc  test_acc  |J|^2      layer norms");
    for r in &run.log.records {
        let norms: Vec<String> = r.layer_norms.iter().map(|n| format!("{n:.2}")).collect();
        println!(
            "{:>5}  {:.4}     {:.4}    {:.3e}  [{}]",
            r.epoch,
            r.train_acc,
            r.test_acc,
            r.jacobian_sq_norm,
            norms.join(", ")
        );
    }
    println!("{:.1}s, outputs in {}", run.elapsed_secs, out.display());
    Ok(())
}
