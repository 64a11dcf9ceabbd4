//! Mini-batch SGD: `f ← f − η Σ_j ∇ℓ_j(f)`, or with the batch mean in
//! place of the sum when configured.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{backward, forward, loss, Batch, Mode, ModelParams, NetworkSpec};
use crate::tensor::axpy_slice;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub eta: f64,
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Reduction::is_sum")]
    pub reduction: Reduction,
}

/// How per-example gradients are combined into one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

impl Reduction {
    fn is_sum(&self) -> bool {
        *self == Reduction::Sum
    }
}

impl SgdConfig {
    pub fn new(eta: f64, batch_size: usize) -> Result<Self> {
        let c = Self {
            eta,
            batch_size,
            reduction: Reduction::Sum,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn with_reduction(mut self, reduction: Reduction) -> Self {
        self.reduction = reduction;
        self
    }

    /// Multiplier applied to the summed gradient of a batch of `rows`.
    pub fn step_size(&self, rows: usize) -> f64 {
        match self.reduction {
            Reduction::Sum => self.eta,
            Reduction::Mean => self.eta / rows.max(1) as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.eta)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// `params − eta·grad_sum`.
pub fn msgd_step(params: &ModelParams, grad_sum: &ModelParams, eta: f64) -> Result<ModelParams> {
    let mut out = params.clone();
    msgd_step_in_place(&mut out, grad_sum, eta)?;
    Ok(out)
}

pub fn msgd_step_in_place(params: &mut ModelParams, grad_sum: &ModelParams, eta: f64) -> Result<()> {
    if params.len() != grad_sum.len() {
        return Err(shape_err(format!(
            "params have {} entries, gradient {}",
            params.len(),
            grad_sum.len()
        )));
    }
    axpy_slice(-eta, grad_sum.as_slice(), params.as_mut_slice());
    Ok(())
}

/// One SGD step on `batch` in training mode. Returns the updated parameters
/// and the batch loss measured before the update. A short final batch is
/// processed as-is, with the same summed gradient.
pub fn train_on_batch(
    spec: &NetworkSpec,
    params: &ModelParams,
    batch: &Batch,
    sgd: &SgdConfig,
    rng: &mut dyn rand::RngCore,
) -> Result<(ModelParams, f64)> {
    let mut p = params.clone();
    let l = train_in_place(spec, &mut p, batch, sgd, rng)?;
    Ok((p, l))
}

pub(crate) fn train_in_place(
    spec: &NetworkSpec,
    params: &mut ModelParams,
    batch: &Batch,
    sgd: &SgdConfig,
    rng: &mut dyn rand::RngCore,
) -> Result<f64> {
    if batch.len() > sgd.batch_size {
        return Err(shape_err(format!(
            "batch of {} rows exceeds configured size {}",
            batch.len(),
            sgd.batch_size
        )));
    }
    let acts = forward(spec, params, &batch.x, Mode::Train(rng))?;
    let batch_loss = loss(spec, &acts.output(spec), &batch.y)?;
    let grad = backward(spec, params, batch, &acts)?;
    msgd_step_in_place(params, &grad, sgd.step_size(batch.len()))?;
    Ok(batch_loss)
}
