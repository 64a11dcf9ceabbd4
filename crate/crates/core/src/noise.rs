//! Zero-mean weight noise: distributions, level schedules and the additive
//! injection `f + ε·ψ`.

use rand::Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::nn::ModelParams;
use crate::tensor::axpy_slice;

/// Standard deviation of the Gaussian variants. Two sigma spans ±0.5.
pub const GAUSSIAN_SIGMA: f64 = 0.25;
/// Support of every bounded distribution.
pub const HALF_WIDTH: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    /// Uniform on [−0.5, 0.5].
    UniformPmHalf,
    /// Normal(0, 0.25) truncated to [−0.5, 0.5] by rejection.
    GaussianTrunc,
    /// Normal(0, 0.25) without truncation.
    GaussianWide,
}

impl Distribution {
    pub fn name(self) -> &'static str {
        match self {
            Self::UniformPmHalf => "uniform_pm_half",
            Self::GaussianTrunc => "gaussian_trunc",
            Self::GaussianWide => "gaussian_wide",
        }
    }
}

/// When noise is injected and how its level decays.
///
/// "Sync" schedules fire at round 1 and in every round that ends with
/// averaging (`t mod b = 0`); the decay divisor at round `t = j·b` is `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    InitOnly,
    EverySyncDecay,
    EverySyncConstant,
    EveryRoundDecay,
    EveryRoundConstant,
    None,
}

impl Schedule {
    pub fn name(self) -> &'static str {
        match self {
            Self::InitOnly => "init_only",
            Self::EverySyncDecay => "every_sync_decay",
            Self::EverySyncConstant => "every_sync_constant",
            Self::EveryRoundDecay => "every_round_decay",
            Self::EveryRoundConstant => "every_round_constant",
            Self::None => "none",
        }
    }
}

/// Divisor used by the decaying schedules.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayDivisor {
    /// Index of the current synchronization period (1-based).
    #[default]
    SyncIndex,
    /// Raw round number.
    Round,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub distribution: Distribution,
    pub base_level: f64,
    pub schedule: Schedule,
    #[serde(default)]
    pub decay: DecayDivisor,
    /// Constant added to every draw (after the antithetic sign). Only
    /// non-zero in negative-control tests that deliberately break the
    /// zero-mean assumption.
    #[serde(skip)]
    pub offset: f64,
}

impl NoiseSpec {
    pub fn new(distribution: Distribution, base_level: f64, schedule: Schedule) -> Self {
        Self {
            distribution,
            base_level,
            schedule,
            decay: DecayDivisor::SyncIndex,
            offset: 0.0,
        }
    }

    pub fn off() -> Self {
        Self::new(Distribution::UniformPmHalf, 0.0, Schedule::None)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_level >= 0.0 && self.base_level.is_finite()) {
            return Err(crate::Error::InvalidConfig(format!(
                "noise level must be finite and non-negative, got {}",
                self.base_level
            )));
        }
        Ok(())
    }

    /// Effective ε at the given tick.
    pub fn level(&self, tick: Tick) -> f64 {
        let eps = self.base_level;
        let divisor = match self.decay {
            DecayDivisor::SyncIndex => tick.sync_index,
            DecayDivisor::Round => tick.round,
        } as f64;
        match self.schedule {
            Schedule::None => 0.0,
            Schedule::InitOnly if tick.round == 1 => eps,
            Schedule::InitOnly => 0.0,
            Schedule::EverySyncDecay if tick.round == 1 || tick.sync_round => eps / divisor,
            Schedule::EverySyncConstant if tick.round == 1 || tick.sync_round => eps,
            Schedule::EverySyncDecay | Schedule::EverySyncConstant => 0.0,
            Schedule::EveryRoundDecay => eps / divisor,
            Schedule::EveryRoundConstant => eps,
        }
    }

    /// Draws a noise vector of length `dim`. With `antithetic` set the
    /// result is exactly the negation of what the same stream state would
    /// otherwise produce (for a zero offset).
    pub fn sample(&self, dim: usize, rng: &mut impl Rng, antithetic: bool) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        self.fill(&mut out, rng, antithetic);
        out
    }

    pub fn fill(&self, out: &mut [f64], rng: &mut impl Rng, antithetic: bool) {
        let sign = if antithetic { -1.0 } else { 1.0 };
        match self.distribution {
            Distribution::UniformPmHalf => {
                for v in out.iter_mut() {
                    *v = sign * rng.random_range(-HALF_WIDTH..HALF_WIDTH) + self.offset;
                }
            }
            Distribution::GaussianTrunc => {
                let normal = Normal::new(0.0, GAUSSIAN_SIGMA).expect("valid sigma");
                for v in out.iter_mut() {
                    let z = loop {
                        let z: f64 = normal.sample(rng);
                        if z.abs() <= HALF_WIDTH {
                            break z;
                        }
                    };
                    *v = sign * z + self.offset;
                }
            }
            Distribution::GaussianWide => {
                let normal = Normal::new(0.0, GAUSSIAN_SIGMA).expect("valid sigma");
                for v in out.iter_mut() {
                    let z: f64 = normal.sample(rng);
                    *v = sign * z + self.offset;
                }
            }
        }
    }
}

/// Position on the protocol's round clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tick {
    /// 1-based round number.
    pub round: usize,
    /// 1-based index of the synchronization period containing `round`.
    pub sync_index: usize,
    /// Whether `round` ends with a synchronization (`round mod b = 0`).
    pub sync_round: bool,
}

impl Tick {
    pub fn new(round: usize, period: usize) -> Self {
        debug_assert!(round >= 1 && period >= 1);
        Self {
            round,
            sync_index: (round - 1) / period + 1,
            sync_round: round.is_multiple_of(period),
        }
    }
}

/// `params + eps·psi`.
pub fn inject(params: &ModelParams, psi: &[f64], eps: f64) -> Result<ModelParams> {
    if psi.len() != params.len() {
        return Err(shape_err(format!(
            "noise has {} entries, params {}",
            psi.len(),
            params.len()
        )));
    }
    let mut out = params.clone();
    axpy_slice(eps, psi, out.as_mut_slice());
    Ok(out)
}
