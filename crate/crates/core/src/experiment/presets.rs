//! Configurations for the three published experiments.
//!
//! Every preset ships with a synthetic stand-in data source so it runs
//! out of the box; swap `data` for a `csv` / `mnist_idx` source to use the
//! real files.

use super::config::*;
use crate::data::Encoding;
use crate::nn::{Activation, LayerSpec, LossKind, NetworkSpec};
use crate::noise::{Distribution, NoiseSpec, Schedule};
use crate::optim::{Reduction, SgdConfig};
use crate::protocol::{DEFAULT_MAGNITUDE_BOUND, DEFAULT_SYNC_PERIOD};

/// Input features of the SUSY dataset.
pub const SUSY_FEATURES: usize = 18;
pub const DEFAULT_DROPOUT: f64 = 0.5;
pub const MNIST_STANDIN_DIFFICULTY: f64 = 0.7;

fn protocol(eta_serial: f64, eta_local: f64) -> ProtocolSettings {
    ProtocolSettings {
        learners: 10,
        sync_period: DEFAULT_SYNC_PERIOD,
        sgd_local: SgdConfig::new(eta_local, 10).expect("valid step"),
        sgd_serial: SgdConfig::new(eta_serial, 10).expect("valid step"),
        master_seed: DEFAULT_MASTER_SEED,
        magnitude_bound: DEFAULT_MAGNITUDE_BOUND,
    }
}

fn mean_reduced(mut p: ProtocolSettings) -> ProtocolSettings {
    p.sgd_local.reduction = Reduction::Mean;
    p.sgd_serial.reduction = Reduction::Mean;
    p
}

fn grid(dists: &[Distribution], levels: &[f64], schedule: Schedule) -> Vec<NoiseSpec> {
    let mut g = vec![NoiseSpec::new(Distribution::UniformPmHalf, 0.0, schedule)];
    for &d in dists {
        for &l in levels {
            g.push(NoiseSpec::new(d, l, schedule));
        }
    }
    g
}

pub fn susy_linear() -> ExperimentConfig {
    ExperimentConfig {
        name: "susy_linear".into(),
        network: NetworkSpec {
            layers: vec![
                LayerSpec::new(SUSY_FEATURES, 32, Activation::Identity),
                LayerSpec::new(32, 64, Activation::Identity),
                LayerSpec::new(64, 1, Activation::Identity),
            ],
            loss: LossKind::Squared,
        },
        protocol: protocol(1e-5, 2.5e-5),
        data: DataSource::SyntheticLinear {
            dim: SUSY_FEATURES,
            label_noise: 0.2,
            encoding: Encoding::PmOne,
        },
        examples_per_learner: 20_000,
        test_size: DEFAULT_TEST_SIZE,
        noise_grid: grid(&[Distribution::UniformPmHalf], &[1.0, 2.0], Schedule::EveryRoundDecay),
        setups: vec![SetupKind::Decentralized, SetupKind::Serial, SetupKind::Nosync],
        repetitions: DEFAULT_REPETITIONS,
        metrics: vec![Metric::TestAccuracy],
    }
}

pub fn susy_nonlinear() -> ExperimentConfig {
    ExperimentConfig {
        name: "susy_nonlinear".into(),
        network: NetworkSpec {
            layers: vec![
                LayerSpec::new(SUSY_FEATURES, 32, Activation::Sigmoid),
                LayerSpec::new(32, 64, Activation::Sigmoid),
                LayerSpec::new(64, 2, Activation::Softmax),
            ],
            loss: LossKind::CrossEntropy,
        },
        protocol: mean_reduced(protocol(0.1, 0.25)),
        data: DataSource::SyntheticLinear {
            dim: SUSY_FEATURES,
            label_noise: 0.2,
            encoding: Encoding::OneHot,
        },
        examples_per_learner: 1_000,
        test_size: DEFAULT_TEST_SIZE,
        noise_grid: grid(
            &[Distribution::UniformPmHalf, Distribution::GaussianTrunc],
            &[0.5, 1.0, 2.0, 5.0],
            Schedule::EverySyncDecay,
        ),
        setups: vec![SetupKind::Decentralized, SetupKind::Serial, SetupKind::Nosync],
        repetitions: DEFAULT_REPETITIONS,
        metrics: vec![Metric::TestAccuracy, Metric::CumulativeTrainingLoss],
    }
}

pub fn mnist() -> ExperimentConfig {
    ExperimentConfig {
        name: "mnist".into(),
        network: NetworkSpec {
            layers: vec![
                LayerSpec::new(crate::data::MNIST_DIM, 512, Activation::Relu).with_dropout(DEFAULT_DROPOUT),
                LayerSpec::new(512, 512, Activation::Relu).with_dropout(DEFAULT_DROPOUT),
                LayerSpec::new(512, 10, Activation::Softmax),
            ],
            loss: LossKind::CrossEntropy,
        },
        protocol: mean_reduced(protocol(0.1, 0.25)),
        data: DataSource::SyntheticPrototypes {
            dim: crate::data::MNIST_DIM,
            classes: crate::data::MNIST_CLASSES,
            difficulty: MNIST_STANDIN_DIFFICULTY,
        },
        examples_per_learner: 500,
        test_size: 10_000,
        noise_grid: grid(
            &[Distribution::UniformPmHalf, Distribution::GaussianTrunc],
            &[0.1, 0.25, 1.0, 2.0],
            Schedule::EverySyncDecay,
        ),
        setups: vec![SetupKind::Decentralized, SetupKind::Serial, SetupKind::Nosync],
        repetitions: DEFAULT_REPETITIONS,
        metrics: vec![Metric::TestAccuracy],
    }
}

/// Linear suite at desk scale: 2000 examples per learner, noise levels
/// {0, 1, 2}, averaging after every round.
pub fn linear_desk() -> ExperimentConfig {
    let mut c = susy_linear();
    c.name = "linear_desk".into();
    c.examples_per_learner = 2_000;
    c.protocol.sync_period = 1;
    c.protocol.sgd_serial.eta = LINEAR_DESK_ETA_SERIAL;
    c.protocol.sgd_local.eta = LINEAR_DESK_ETA_LOCAL;
    c.setups = vec![SetupKind::Decentralized];
    c
}

pub const LINEAR_DESK_ETA_SERIAL: f64 = 2e-4;
pub const LINEAR_DESK_ETA_LOCAL: f64 = 5e-4;

/// MNIST suite at desk scale: decentralized runs only, uniform noise,
/// averaging after every round, a smaller test set.
pub fn mnist_desk() -> ExperimentConfig {
    let mut c = mnist();
    c.name = "mnist_desk".into();
    c.protocol.sync_period = 1;
    c.test_size = 2_000;
    c.setups = vec![SetupKind::Decentralized];
    c.noise_grid = grid(&[Distribution::UniformPmHalf], &[0.1, 0.25, 1.0, 2.0], Schedule::EverySyncDecay);
    c
}

pub fn published_presets() -> Vec<ExperimentConfig> {
    vec![susy_linear(), susy_nonlinear(), mnist()]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_hyperparameters() {
        let [lin, nonlin, mn]: [ExperimentConfig; 3] = published_presets().try_into().unwrap();
        assert_eq!(lin.protocol.sgd_local.eta, 2.5e-5);
        assert_eq!(lin.protocol.sgd_serial.eta, 1e-5);
        assert_eq!(lin.protocol.learners, 10);
        assert_eq!(lin.examples_per_learner, 20_000);
        assert_eq!(
            lin.network.layers.iter().map(|l| l.output_size).collect::<Vec<_>>(),
            vec![32, 64, 1]
        );
        assert_eq!(nonlin.network.output_size(), 2);
        assert_eq!(nonlin.protocol.sgd_local.eta, 0.25);
        assert_eq!(nonlin.protocol.sgd_serial.eta, 0.1);
        assert_eq!(nonlin.examples_per_learner, 1_000);
        assert_eq!(mn.examples_per_learner, 500);
        assert_eq!(mn.protocol.sgd_local.eta, 0.25);
        assert_eq!(mn.protocol.sgd_local.reduction, Reduction::Mean);
        assert_eq!(lin.protocol.sgd_local.reduction, Reduction::Sum);
        assert_eq!(
            mn.network.layers.iter().map(|l| l.output_size).collect::<Vec<_>>(),
            vec![512, 512, 10]
        );
        for p in [&lin, &nonlin, &mn] {
            assert_eq!(p.protocol.sgd_local.batch_size, 10);
            p.validate().unwrap();
        }
    }
}
