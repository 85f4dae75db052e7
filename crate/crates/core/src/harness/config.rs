//! Experiment configuration, read from and written back to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::federation::{Aggregator, FederationConfig, MixWeights};
use crate::nn::SgdConfig;
use crate::ssl_loss::{ConsistencyKind, LossWeights, PseudoLabelConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Gaussian blobs; `classes · per_class` must cover unlabeled, labeled
    /// and test counts, which are carved out of one balanced draw.
    Synthetic {
        classes: usize,
        input_dim: usize,
        spread: f64,
        unlabeled: usize,
    },
    /// A directory holding `data_batch_{1..5}.bin` and `test_batch.bin`.
    Cifar10 { path: PathBuf },
}

impl DatasetSpec {
    pub fn class_count(&self) -> usize {
        match self {
            DatasetSpec::Synthetic { classes, .. } => *classes,
            DatasetSpec::Cifar10 { .. } => 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    /// Server-side labeled samples (balanced across classes).
    pub labeled: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub mu: f64,
    #[serde(default)]
    pub quantity_imbalance: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSpec {
    pub client_count: usize,
    pub participation: f64,
    pub rounds: usize,
    pub aggregator: Aggregator,
    #[serde(default)]
    pub consistency: ConsistencyKind,
    pub mix: MixWeights,
    pub server_sgd: SgdConfig,
    pub client_sgd: SgdConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSettings {
    /// Image shift as a fraction of the width.
    pub shift_fraction: f64,
    /// Synthetic jitter as a multiple of the mean feature spread.
    pub jitter_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSpec {
    /// Pseudo-label the whole unlabeled pool with the global model each
    /// round and record acceptance and precision.
    pub probe: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

/// Axes of a sweep. An empty axis keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mu: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mix: Vec<MixWeights>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labeled: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aggregator: Vec<Aggregator>,
}

impl GridSpec {
    pub fn is_empty(&self) -> bool {
        self.mu.is_empty() && self.mix.is_empty() && self.labeled.is_empty() && self.aggregator.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub split: SplitSpec,
    pub partition: PartitionSpec,
    pub federation: FederationSpec,
    pub model: ModelSpec,
    pub loss: LossWeights,
    pub pseudo_label: PseudoLabelConfig,
    pub augment: AugmentSettings,
    pub metrics: MetricsSpec,
    pub run: RunSpec,
    #[serde(default, skip_serializing_if = "GridSpec::is_empty")]
    pub grid: GridSpec,
}

impl ExperimentConfig {
    /// Small synthetic setup that finishes a 50-round run in seconds.
    pub fn desk_default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::Synthetic {
                classes: 10,
                input_dim: 32,
                spread: 0.35,
                unlabeled: 2000,
            },
            split: SplitSpec {
                labeled: 200,
                test: 400,
            },
            partition: PartitionSpec {
                mu: 0.5,
                quantity_imbalance: false,
            },
            federation: FederationSpec {
                client_count: 20,
                participation: 0.25,
                rounds: 50,
                aggregator: Aggregator::FedMixFedFreq,
                consistency: ConsistencyKind::L2,
                mix: MixWeights::default(),
                server_sgd: SgdConfig {
                    learning_rate: 0.05,
                    batch_size: 32,
                    epochs: 5,
                },
                client_sgd: SgdConfig {
                    learning_rate: 0.05,
                    batch_size: 32,
                    epochs: 1,
                },
            },
            model: ModelSpec { hidden: vec![64, 64] },
            loss: LossWeights::default(),
            pseudo_label: PseudoLabelConfig::default(),
            augment: AugmentSettings {
                shift_fraction: 0.1,
                jitter_scale: 0.05,
            },
            metrics: MetricsSpec { probe: true },
            run: RunSpec {
                seeds: vec![42],
                out: PathBuf::from("runs"),
            },
            grid: GridSpec::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks every section, so a bad file fails before any compute.
    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetSpec::Synthetic {
                classes,
                input_dim,
                spread,
                unlabeled,
            } => {
                if *classes < 2 || *input_dim == 0 || *unlabeled == 0 {
                    return Err(Error::Config(
                        "synthetic data needs classes >= 2, input_dim >= 1, unlabeled >= 1".into(),
                    ));
                }
                if !(spread.is_finite() && *spread >= 0.0) {
                    return Err(Error::Config(format!("spread must be non-negative, got {spread}")));
                }
                let total = unlabeled + self.split.labeled + self.split.test;
                if !total.is_multiple_of(*classes) {
                    return Err(Error::Config(format!(
                        "unlabeled + labeled + test = {total} is not divisible by {classes} classes"
                    )));
                }
            }
            DatasetSpec::Cifar10 { .. } => {}
        }
        let classes = self.dataset.class_count();
        if self.split.labeled == 0 || self.split.test == 0 {
            return Err(Error::Config("split.labeled and split.test must be positive".into()));
        }
        if !self.split.labeled.is_multiple_of(classes) || !self.split.test.is_multiple_of(classes) {
            return Err(Error::Config(format!(
                "split sizes must be multiples of the {classes} classes for balanced splits"
            )));
        }
        if !(self.partition.mu.is_finite() && self.partition.mu > 0.0) {
            return Err(Error::Config(format!(
                "partition.mu must be positive, got {}",
                self.partition.mu
            )));
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        if !(self.augment.shift_fraction >= 0.0 && self.augment.shift_fraction < 1.0) {
            return Err(Error::Config("augment.shift_fraction must be in [0, 1)".into()));
        }
        if !(self.augment.jitter_scale.is_finite() && self.augment.jitter_scale >= 0.0) {
            return Err(Error::Config("augment.jitter_scale must be non-negative".into()));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::Config("run.seeds must list at least one seed".into()));
        }
        self.loss.validate()?;
        self.pseudo_label.validate()?;
        self.federation_config(0).validate()?;
        for m in &self.grid.mix {
            m.validate()?;
        }
        if let Some(mu) = self.grid.mu.iter().find(|mu| !(mu.is_finite() && **mu > 0.0)) {
            return Err(Error::Config(format!("grid.mu entries must be positive, got {mu}")));
        }
        if let Some(n) = self.grid.labeled.iter().find(|n| **n == 0 || *n % classes != 0) {
            return Err(Error::Config(format!(
                "grid.labeled entry {n} is not a positive multiple of {classes}"
            )));
        }
        Ok(())
    }

    pub fn federation_config(&self, seed: u64) -> FederationConfig {
        let f = &self.federation;
        FederationConfig {
            client_count: f.client_count,
            participation: f.participation,
            rounds: f.rounds,
            mix: f.mix,
            aggregator: f.aggregator,
            server_sgd: f.server_sgd,
            client_sgd: f.client_sgd,
            consistency: f.consistency,
            seed,
        }
    }

    /// Layer widths from input to classes.
    pub fn model_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.model.hidden);
        dims.push(self.dataset.class_count());
        dims
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_is_valid_and_round_trips() {
        let cfg = ExperimentConfig::desk_default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn grid_round_trips() {
        let mut cfg = ExperimentConfig::desk_default();
        cfg.grid.mu = vec![0.1, 1.0, 10.0, 100.0];
        cfg.grid.aggregator = vec![Aggregator::FedMixFedFreq, Aggregator::NaiveDecomposition];
        cfg.grid.mix = vec![MixWeights::default(), MixWeights::new(0.4, 0.4, 0.2).unwrap()];
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_values_before_running() {
        let mut cfg = ExperimentConfig::desk_default();
        cfg.federation.mix = MixWeights {
            alpha: 0.6,
            beta: 0.6,
            gamma: 0.0,
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = ExperimentConfig::desk_default();
        cfg.run.seeds.clear();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = ExperimentConfig::desk_default();
        cfg.split.labeled = 205;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let text = ExperimentConfig::desk_default()
            .to_toml()
            .unwrap()
            .replace("rounds = 50", "rounds = 50\nlearning_rate = 1.0");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_aggregator_is_a_config_error() {
        let text = ExperimentConfig::desk_default()
            .to_toml()
            .unwrap()
            .replace("fedmix+fedfreq", "fedprox");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("aggregator"), "{err}");
    }
}
