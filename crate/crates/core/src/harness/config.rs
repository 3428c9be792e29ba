//! Experiment configuration, read from TOML.
//!
//! Top-level keys cover the run itself; `[data]`, `[network]`, `[optimizer]`
//! (with `[optimizer.kfac]`), `[coupling]`, `[diagnostics]` and the optional
//! `[transfer]` and `[grid]` tables configure the parts. Missing keys take the desk-scale
//! defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::{self, Splits};
use super::grid::GridSpec;
use crate::diagnostics::DiagnosticToggles;
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::nn::{Activation, NetworkSpec};
use crate::optim::{Coupling, CouplingMode, MaskPreset, OptimizerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Mnist,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub mnist_dir: PathBuf,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Seed of the split (and of the synthetic teacher), kept apart from the run seed.
    pub split_seed: u64,
    pub synthetic_dim: usize,
    pub synthetic_classes: usize,
    pub teacher_hidden: Vec<usize>,
    pub whiten: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Mnist,
            mnist_dir: PathBuf::from("data/mnist"),
            train: 5000,
            val: 1000,
            test: 2000,
            split_seed: 1,
            synthetic_dim: 20,
            synthetic_classes: 10,
            teacher_hidden: vec![32],
            whiten: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub bn: bool,
    pub bias: bool,
    pub bn_epsilon: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            hidden: vec![256, 256],
            activation: Activation::Relu,
            bn: true,
            bias: false,
            bn_epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CouplingConfig {
    pub mode: CouplingMode,
    pub beta: f64,
    pub mask: MaskPreset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub jacobian: bool,
    pub gn_norms: bool,
    pub traces: bool,
    pub jacobian_subset: usize,
    pub curvature_subset: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        let t = DiagnosticToggles::default();
        DiagnosticsConfig {
            jacobian: t.jacobian,
            gn_norms: t.gn_norms,
            traces: t.traces,
            jacobian_subset: 200,
            curvature_subset: 500,
        }
    }
}

impl DiagnosticsConfig {
    pub fn toggles(&self) -> DiagnosticToggles {
        DiagnosticToggles {
            jacobian: self.jacobian,
            gn_norms: self.gn_norms,
            traces: self.traces,
        }
    }
}

/// After every epoch, rescale masked layers to the norms another run logged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    /// `metrics.csv` of the reference run.
    pub reference: PathBuf,
    #[serde(default = "hidden_only")]
    pub mask: MaskPreset,
}

fn hidden_only() -> MaskPreset {
    MaskPreset::HiddenOnly
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub optimizer: OptimizerConfig,
    pub coupling: CouplingConfig,
    pub diagnostics: DiagnosticsConfig,
    pub transfer: Option<TransferConfig>,
    /// Cells for the `grid` subcommand; ignored by single runs.
    pub grid: Option<GridSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "run".into(),
            seed: 0,
            epochs: 30,
            batch_size: 128,
            loss: LossKind::CrossEntropySoftmax,
            out_dir: PathBuf::from("runs/run"),
            data: DataConfig::default(),
            network: NetworkConfig::default(),
            optimizer: OptimizerConfig {
                schedule: vec![12, 24],
                ..OptimizerConfig::default()
            },
            coupling: CouplingConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            transfer: None,
            grid: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn input_dim(&self) -> usize {
        match self.data.source {
            DataSource::Mnist => 784,
            DataSource::Synthetic => self.data.synthetic_dim,
        }
    }

    pub fn classes(&self) -> usize {
        match self.data.source {
            DataSource::Mnist => 10,
            DataSource::Synthetic => self.data.synthetic_classes,
        }
    }

    pub fn network_spec(&self) -> NetworkSpec {
        let mut dims = vec![self.input_dim()];
        dims.extend_from_slice(&self.network.hidden);
        dims.push(self.classes());
        NetworkSpec::mlp(&dims, self.network.activation, self.network.bn)
            .with_bias(self.network.bias)
            .with_bn_epsilon(self.network.bn_epsilon)
    }

    pub fn coupling(&self, spec: &NetworkSpec) -> Result<Coupling> {
        Coupling::with_preset(self.coupling.mode, self.coupling.beta, self.coupling.mask, spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > self.data.train {
            return Err(Error::Config(format!(
                "batch size {} must lie in [1, {}]",
                self.batch_size, self.data.train
            )));
        }
        if self.network.bn && self.batch_size < 2 {
            return Err(Error::Config("BN needs batches of at least 2".into()));
        }
        self.network_spec().validate()?;
        self.optimizer.validate()?;
        if !(self.coupling.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be nonnegative, got {}", self.coupling.beta)));
        }
        Ok(())
    }

    /// Loads the configured dataset.
    pub fn load_data(&self) -> Result<Splits> {
        let d = &self.data;
        match d.source {
            DataSource::Mnist => data::mnist_splits(&d.mnist_dir, d.train, d.val, d.test, d.split_seed),
            DataSource::Synthetic => {
                let mut dims = vec![d.synthetic_dim];
                dims.extend_from_slice(&d.teacher_hidden);
                dims.push(d.synthetic_classes);
                let teacher = NetworkSpec::mlp(&dims, Activation::Relu, false);
                data::synthetic_splits(
                    (d.train, d.val, d.test),
                    d.synthetic_dim,
                    d.synthetic_classes,
                    &teacher,
                    d.split_seed,
                    d.whiten,
                )
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimizerKind;

    #[test]
    fn defaults_are_desk_scale() {
        let c = ExperimentConfig::default();
        assert_eq!(c.network_spec().layer_dims, vec![784, 256, 256, 10]);
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.optimizer.schedule, vec![12, 24]);
        c.validate().unwrap();
    }

    #[test]
    fn toml_sections_override_defaults() {
        let text = r#"
            name = "wd"
            seed = 3
            epochs = 2

            [data]
            source = "synthetic"
            synthetic_dim = 6
            train = 100
            val = 20
            test = 20

            [network]
            hidden = [8]
            bn = false

            [optimizer]
            kind = "kfac_g"
            lr = 0.05

            [optimizer.kfac]
            lambda = 0.01
            alg1_literal = true

            [coupling]
            mode = "weight_decay"
            beta = 0.001
            mask = "hidden-only"
        "#;
        let c = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.optimizer.kind, OptimizerKind::KfacG);
        assert_eq!(c.optimizer.kfac.t_stats, 10);
        assert!(c.optimizer.kfac.alg1_literal);
        assert_eq!(c.network_spec().layer_dims, vec![6, 8, 10]);
        assert_eq!(c.coupling.mask, MaskPreset::HiddenOnly);
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_and_bad_batches_are_rejected() {
        assert!(matches!(ExperimentConfig::from_toml("epoch = 3"), Err(Error::Config(_))));
        let c = ExperimentConfig {
            batch_size: 6000,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
