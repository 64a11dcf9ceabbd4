//! Simulator for decentralized training with periodic model averaging and
//! zero-mean weight-noise injection.
//!
//! The crate covers the whole pipeline: small dense networks trained with
//! summed-gradient mini-batch SGD ([`nn`], [`optim`]), noise schedules
//! ([`noise`]), the averaging protocol and its baselines ([`protocol`]),
//! data loading ([`data`]), a repetition harness with box-plot statistics
//! ([`experiment`]) and executable correctness oracles ([`verify`]).

pub mod cli;
pub mod data;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod noise;
pub mod optim;
pub mod par;
pub mod protocol;
pub mod rng;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use nn::{Activation, LayerSpec, LossKind, ModelParams, NetworkSpec};
pub use noise::{Distribution, NoiseSpec, Schedule};
pub use optim::SgdConfig;
pub use protocol::ProtocolConfig;
