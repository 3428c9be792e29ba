//! Train briefly, save JSON and binary checkpoints, reload them, and measure
//! the reloaded model exactly as training measures an epoch.

use wdlab::harness::checkpoint::Checkpoint;
use wdlab::harness::config::{DataSource, ExperimentConfig};
use wdlab::harness::train;

fn main() -> wdlab::Result<()> {
    let mut cfg = ExperimentConfig {
        epochs: 3,
        batch_size: 32,
        ..ExperimentConfig::default()
    };
    cfg.data.source = DataSource::Synthetic;
    cfg.data.train = 400;
    cfg.data.val = 100;
    cfg.data.test = 100;
    cfg.network.hidden = vec![24];
    let data = cfg.load_data()?;
    let run = train::train(&cfg, &data)?;
    let ckpt = Checkpoint {
        epoch: cfg.epochs,
        spec: run.spec.clone(),
        params: run.params.clone(),
        bn_state: run.bn_state.clone(),
    };
    let dir = std::env::temp_dir().join("wdlab_checkpoint_example");
    std::fs::create_dir_all(&dir)?;
    for name in ["model.json", "model.bin"] {
        let path = dir.join(name);
        ckpt.save(&path)?;
        let back = Checkpoint::load(&path)?;
        println!("{name}: {} bytes, exact round trip {}", std::fs::metadata(&path)?.len(), back == ckpt);
    }
    let rec = train::diagnose(&cfg, &data, &Checkpoint::load(&dir.join("model.bin"))?)?;
    let logged = run.final_record();
    println!(
        "reloaded test acc {:.4} (logged {:.4}), |J|^2 {:.4e} (logged {:.4e})",
        rec.test_acc, logged.test_acc, rec.jacobian_sq_norm, logged.jacobian_sq_norm
    );
    Ok(())
}
