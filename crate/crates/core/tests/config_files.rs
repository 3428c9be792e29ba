//! The shipped configuration files parse and validate.

use std::path::{Path, PathBuf};

use wdlab::harness::config::ExperimentConfig;
use wdlab::harness::replicate::ReplicateConfig;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn experiment_configs_validate() {
    for name in ["train.toml", "kfac_f.toml", "grid.toml"] {
        let cfg = ExperimentConfig::load(&configs().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        cfg.validate().unwrap();
    }
    let grid = ExperimentConfig::load(&configs().join("grid.toml")).unwrap().grid.unwrap();
    assert_eq!(grid.cells().len(), 12);
}

#[test]
fn replicate_config_spells_out_the_defaults() {
    let rc = ReplicateConfig::load(&configs().join("replicate.toml")).unwrap();
    assert_eq!(rc, ReplicateConfig::default());
}
