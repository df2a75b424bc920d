//! Experiment configuration, read from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{PartitionMode, PartitionSpec, SyntheticSpec, CIFAR_CLASSES, CIFAR_SHAPE};
use crate::error::{Error, Result};
use crate::nn::SgdConfig;
use crate::nsga2::EvoConfig;
use crate::supernet::SupernetSpec;

/// Whether sampled offspring inherit master weights or start from scratch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    Realtime,
    ReinitOffspring,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederatedConfig {
    /// Total number of clients `K`.
    pub clients: usize,
    /// Participation fraction `C`; `m = ⌊C·K⌋` clients take part each round.
    #[serde(default = "default_participation")]
    pub participation: f64,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_train_batch")]
    pub train_batch: usize,
    #[serde(default = "default_test_batch")]
    pub test_batch: usize,
    #[serde(default)]
    pub sgd: SgdConfig,
}

fn default_participation() -> f64 {
    1.0
}
fn default_local_epochs() -> usize {
    1
}
fn default_train_batch() -> usize {
    50
}
fn default_test_batch() -> usize {
    100
}

impl FederatedConfig {
    pub fn with_clients(clients: usize) -> Self {
        FederatedConfig {
            clients,
            participation: default_participation(),
            local_epochs: default_local_epochs(),
            train_batch: default_train_batch(),
            test_batch: default_test_batch(),
            sgd: SgdConfig::default(),
        }
    }

    /// Number of clients taking part in each round.
    pub fn participants(&self) -> usize {
        ((self.participation * self.clients as f64).floor() as usize).clamp(1, self.clients.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// Directory holding the CIFAR-10 binary batches.
    Cifar10 {
        dir: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub partition: PartitionMode,
    #[serde(default = "default_classes_per_client")]
    pub classes_per_client: usize,
    /// Overrides the partition stream derived from the experiment seed.
    #[serde(default)]
    pub partition_seed: Option<u64>,
}

fn default_classes_per_client() -> usize {
    5
}

impl DataConfig {
    pub fn class_count(&self) -> usize {
        match &self.source {
            DataSource::Synthetic(s) => s.class_count,
            DataSource::Cifar10 { .. } => CIFAR_CLASSES,
        }
    }

    pub fn image_shape(&self) -> [usize; 3] {
        match &self.source {
            DataSource::Synthetic(s) => s.image_shape,
            DataSource::Cifar10 { .. } => CIFAR_SHAPE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub mode: RunMode,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub supernet: SupernetSpec,
    pub evolution: EvoConfig,
    pub federated: FederatedConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    /// Laptop-scale setup: 4-block supernet, synthetic 4-class data,
    /// 8 clients, population 4, 30 generations.
    pub fn desk() -> Self {
        ExperimentConfig {
            seed: 1,
            mode: RunMode::Realtime,
            output_dir: None,
            supernet: SupernetSpec::desk(),
            // Four individuals explore little at the default mutation
            // rate, so the desk preset mutates half of the offspring.
            evolution: EvoConfig {
                population: 4,
                generations: 30,
                mutation_prob: 0.5,
                ..EvoConfig::default()
            },
            federated: FederatedConfig {
                train_batch: 10,
                ..FederatedConfig::with_clients(8)
            },
            data: DataConfig {
                source: DataSource::Synthetic(SyntheticSpec::desk()),
                partition: PartitionMode::Iid,
                classes_per_client: 2,
                partition_seed: None,
            },
        }
    }

    /// Full-size CIFAR-10 setup with the default hyper-parameters.
    pub fn cifar10() -> Self {
        ExperimentConfig {
            seed: 1,
            mode: RunMode::Realtime,
            output_dir: None,
            supernet: SupernetSpec::cifar10(),
            evolution: EvoConfig::default(),
            federated: FederatedConfig::with_clients(10),
            data: DataConfig {
                source: DataSource::Cifar10 {
                    dir: PathBuf::from("data/cifar-10-batches-bin"),
                },
                partition: PartitionMode::Iid,
                classes_per_client: 5,
                partition_seed: None,
            },
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            mode: self.data.partition,
            clients: self.federated.clients,
            classes_per_client: self.data.classes_per_client,
            seed: self.data.partition_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.supernet.validate()?;
        self.evolution.validate()?;
        let fed = &self.federated;
        if fed.clients == 0 {
            return Err(Error::Config("at least one client is required".into()));
        }
        if !(fed.participation > 0.0 && fed.participation <= 1.0) {
            return Err(Error::Config(format!(
                "participation {} outside (0, 1]",
                fed.participation
            )));
        }
        if fed.participants() < self.evolution.population {
            return Err(Error::Config(format!(
                "{} participating clients cannot train a population of {}",
                fed.participants(),
                self.evolution.population
            )));
        }
        if fed.train_batch == 0 || fed.test_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        let sgd = &fed.sgd;
        if !(sgd.initial_lr > 0.0 && sgd.initial_lr.is_finite())
            || !(0.0..1.0).contains(&sgd.momentum)
            || !(sgd.decay > 0.0 && sgd.decay <= 1.0)
        {
            return Err(Error::Config(format!("invalid SGD settings {sgd:?}")));
        }
        if self.data.class_count() != self.supernet.class_count {
            return Err(Error::Config(format!(
                "data has {} classes, supernet predicts {}",
                self.data.class_count(),
                self.supernet.class_count
            )));
        }
        if self.data.image_shape() != self.supernet.input_shape {
            return Err(Error::Config(format!(
                "data images are {:?}, supernet expects {:?}",
                self.data.image_shape(),
                self.supernet.input_shape
            )));
        }
        if self.data.partition == PartitionMode::Noniid {
            let cpc = self.data.classes_per_client;
            if cpc == 0 || cpc > self.data.class_count() {
                return Err(Error::Config(format!(
                    "classes_per_client {cpc} outside 1..={}",
                    self.data.class_count()
                )));
            }
        }
        Ok(())
    }
}
