use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Encoding;
use crate::error::{Error, Result};
use crate::nn::NetworkSpec;
use crate::noise::NoiseSpec;
use crate::optim::SgdConfig;
use crate::protocol::{DEFAULT_MAGNITUDE_BOUND, DEFAULT_SYNC_PERIOD};

pub const DEFAULT_MASTER_SEED: u64 = 20_180_101;
pub const DEFAULT_REPETITIONS: usize = 10;
pub const DEFAULT_TEST_SIZE: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub network: NetworkSpec,
    pub protocol: ProtocolSettings,
    pub data: DataSource,
    pub examples_per_learner: usize,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    pub noise_grid: Vec<NoiseSpec>,
    #[serde(default = "default_setups")]
    pub setups: Vec<SetupKind>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
}

/// Protocol parameters shared by every setup of an experiment. The round
/// count follows from `examples_per_learner / batch_size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSettings {
    pub learners: usize,
    #[serde(default = "default_sync_period")]
    pub sync_period: usize,
    pub sgd_local: SgdConfig,
    pub sgd_serial: SgdConfig,
    #[serde(default = "default_seed")]
    pub master_seed: u64,
    #[serde(default = "default_bound")]
    pub magnitude_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Gaussian features labelled by a random hyperplane.
    SyntheticLinear {
        dim: usize,
        label_noise: f64,
        encoding: Encoding,
    },
    /// Image-like multi-class data in `[0, 1]^dim`.
    SyntheticPrototypes {
        dim: usize,
        classes: usize,
        difficulty: f64,
    },
    Csv {
        train: PathBuf,
        /// Held-out file; when absent the test set is split off `train`.
        #[serde(default)]
        test: Option<PathBuf>,
        label_column: usize,
        #[serde(default)]
        skip_header: bool,
        encoding: Encoding,
        #[serde(default = "yes")]
        normalize: bool,
    },
    MnistIdx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetupKind {
    Decentralized,
    Serial,
    Nosync,
}

impl SetupKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Decentralized => "decentralized",
            Self::Serial => "serial",
            Self::Nosync => "nosync",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    TestAccuracy,
    CumulativeTrainingLoss,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Self::TestAccuracy => "test_accuracy",
            Self::CumulativeTrainingLoss => "cumulative_training_loss",
        }
    }
}

fn default_test_size() -> usize {
    DEFAULT_TEST_SIZE
}
fn default_setups() -> Vec<SetupKind> {
    vec![SetupKind::Decentralized, SetupKind::Serial, SetupKind::Nosync]
}
fn default_repetitions() -> usize {
    DEFAULT_REPETITIONS
}
fn default_metrics() -> Vec<Metric> {
    vec![Metric::TestAccuracy, Metric::CumulativeTrainingLoss]
}
fn default_sync_period() -> usize {
    DEFAULT_SYNC_PERIOD
}
fn default_seed() -> u64 {
    DEFAULT_MASTER_SEED
}
fn default_bound() -> f64 {
    DEFAULT_MAGNITUDE_BOUND
}
fn yes() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Rounds per learner.
    pub fn rounds(&self) -> usize {
        self.examples_per_learner / self.protocol.sgd_local.batch_size
    }

    /// Rounds for the serial baseline, which sees every learner's examples.
    pub fn serial_rounds(&self) -> usize {
        self.protocol.learners * self.examples_per_learner / self.protocol.sgd_serial.batch_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.network.validate()?;
        self.protocol.sgd_local.validate()?;
        self.protocol.sgd_serial.validate()?;
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1".into());
        }
        if self.protocol.learners == 0 || self.protocol.sync_period == 0 {
            return bad("learners and sync_period must be at least 1".into());
        }
        if self.examples_per_learner == 0 {
            return bad("examples_per_learner must be at least 1".into());
        }
        if !self.examples_per_learner.is_multiple_of(self.protocol.sgd_local.batch_size) {
            log::warn!(
                "examples_per_learner {} is not a multiple of the batch size; the remainder is unused",
                self.examples_per_learner
            );
        }
        if self.test_size == 0 {
            return bad("test_size must be at least 1".into());
        }
        if self.noise_grid.is_empty() && self.setups.iter().any(|s| *s != SetupKind::Nosync) {
            return bad("noise_grid is empty".into());
        }
        if self.setups.is_empty() {
            return bad("no setups selected".into());
        }
        if self.metrics.is_empty() {
            return bad("no metrics selected".into());
        }
        for n in &self.noise_grid {
            n.validate()?;
        }
        let (dim, width) = match &self.data {
            DataSource::SyntheticLinear { dim, encoding, .. } => (Some(*dim), Some(if *encoding == Encoding::OneHot { 2 } else { 1 })),
            DataSource::SyntheticPrototypes { dim, classes, .. } => (Some(*dim), Some(*classes)),
            DataSource::MnistIdx { .. } => (Some(crate::data::MNIST_DIM), Some(crate::data::MNIST_CLASSES)),
            DataSource::Csv { .. } => (None, None),
        };
        if let Some(d) = dim {
            if d != self.network.input_size() {
                return bad(format!("data has {d} features but the network expects {}", self.network.input_size()));
            }
        }
        if let Some(w) = width {
            if w != self.network.output_size() {
                return bad(format!("data has {w} target columns but the network outputs {}", self.network.output_size()));
            }
        }
        Ok(())
    }
}
