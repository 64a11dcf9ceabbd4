//! Dense feed-forward networks: specs, parameter layout, forward and
//! backward passes.
//!
//! Parameters live in one flat vector. Layer `l` owns an `input × output`
//! weight block (row-major) followed by its bias vector, and layers are laid
//! out in order. Noise injection and averaging operate on that vector
//! directly.

use std::ops::Range;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Lower/upper clamp applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Sigmoid,
    Relu,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Squared,
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub input_size: usize,
    pub output_size: usize,
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout_after: Option<f64>,
}

impl LayerSpec {
    pub fn new(input_size: usize, output_size: usize, activation: Activation) -> Self {
        Self {
            input_size,
            output_size,
            activation,
            dropout_after: None,
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_after = Some(rate);
        self
    }

    fn param_count(&self) -> usize {
        self.input_size * self.output_size + self.output_size
    }

    fn dropout_rate(&self) -> f64 {
        self.dropout_after.unwrap_or(0.0)
    }
}

/// Offsets of one layer's weights and biases inside [`ModelParams`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    pub weights: Range<usize>,
    pub bias: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub loss: LossKind,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>, loss: LossKind) -> Result<Self> {
        let spec = Self { layers, loss };
        spec.validate()?;
        Ok(spec)
    }

    /// Single identity layer under squared loss: the model class for which
    /// noise cancels exactly in expectation.
    pub fn linear_model(input_size: usize) -> Self {
        Self {
            layers: vec![LayerSpec::new(input_size, 1, Activation::Identity)],
            loss: LossKind::Squared,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidNetwork(m));
        if self.layers.is_empty() {
            return bad("network has no layers".into());
        }
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            if l.input_size == 0 || l.output_size == 0 {
                return bad(format!("layer {i} has a zero dimension"));
            }
            if l.activation == Activation::Softmax && i != last {
                return bad(format!("softmax on hidden layer {i}"));
            }
            if let Some(r) = l.dropout_after {
                if !(0.0..1.0).contains(&r) {
                    return bad(format!("layer {i} dropout rate {r} outside [0, 1)"));
                }
            }
            if i < last && self.layers[i + 1].input_size != l.output_size {
                return bad(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    l.output_size,
                    i + 1,
                    self.layers[i + 1].input_size
                ));
            }
        }
        if self.loss == LossKind::CrossEntropy && self.layers[last].activation != Activation::Softmax {
            return bad("cross-entropy loss requires a softmax output layer".into());
        }
        Ok(())
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].input_size
    }

    pub fn output_size(&self) -> usize {
        self.layers[self.layers.len() - 1].output_size
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn layout(&self) -> Vec<LayerLayout> {
        let mut off = 0;
        self.layers
            .iter()
            .map(|l| {
                let w = off..off + l.input_size * l.output_size;
                let b = w.end..w.end + l.output_size;
                off = b.end;
                LayerLayout { weights: w, bias: b }
            })
            .collect()
    }

    pub fn is_linear_model(&self) -> bool {
        self.layers.len() == 1
            && self.layers[0].activation == Activation::Identity
            && self.loss == LossKind::Squared
    }

    pub fn has_relu(&self) -> bool {
        self.layers.iter().any(|l| l.activation == Activation::Relu)
    }

    /// Copy of the spec with all dropout removed.
    pub fn without_dropout(&self) -> Self {
        let mut s = self.clone();
        for l in &mut s.layers {
            l.dropout_after = None;
        }
        s
    }
}

/// Flat trainable parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams(Vec<f64>);

impl ModelParams {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_len(&self, spec: &NetworkSpec) -> Result<()> {
        if self.len() != spec.param_count() {
            return Err(shape_err(format!(
                "network needs {} parameters, got {}",
                spec.param_count(),
                self.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
}

impl Batch {
    pub fn new(x: Tensor, y: Tensor) -> Result<Self> {
        let (rx, _) = x.dims2()?;
        let (ry, _) = y.dims2()?;
        if rx != ry {
            return Err(shape_err(format!("batch has {rx} inputs but {ry} targets")));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Forward-pass mode. Training mode samples dropout masks from the given
/// stream.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

#[derive(Debug, Clone)]
pub struct LayerRecord {
    /// Pre-activation, `rows × output_size`.
    pub pre: Vec<f64>,
    /// Activation before dropout.
    pub act: Vec<f64>,
    /// Inverted-dropout multipliers (`0` or `1/(1-rate)`), if sampled.
    pub mask: Option<Vec<f64>>,
}

impl LayerRecord {
    /// What the next layer sees.
    pub fn out(&self) -> std::borrow::Cow<'_, [f64]> {
        match &self.mask {
            None => std::borrow::Cow::Borrowed(&self.act),
            Some(m) => self.act.iter().zip(m).map(|(a, k)| a * k).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Activations {
    pub rows: usize,
    pub layers: Vec<LayerRecord>,
}

impl Activations {
    /// Network output (after the final activation).
    pub fn output(&self, spec: &NetworkSpec) -> Tensor {
        let last = self.layers.last().expect("validated spec has layers");
        Tensor::new(vec![self.rows, spec.output_size()], last.out().into_owned())
            .expect("record shape is consistent")
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(spec: &NetworkSpec, rng: &mut impl Rng) -> ModelParams {
    let mut values = vec![0.0; spec.param_count()];
    for (l, lay) in spec.layers.iter().zip(spec.layout()) {
        let limit = (6.0 / (l.input_size + l.output_size) as f64).sqrt();
        for w in &mut values[lay.weights] {
            *w = rng.random_range(-limit..=limit);
        }
    }
    ModelParams(values)
}

pub fn forward(spec: &NetworkSpec, params: &ModelParams, x: &Tensor, mut mode: Mode<'_>) -> Result<Activations> {
    params.check_len(spec)?;
    let (rows, cols) = x.dims2()?;
    if cols != spec.input_size() {
        return Err(shape_err(format!(
            "input has {cols} columns, network expects {}",
            spec.input_size()
        )));
    }
    let p = params.as_slice();
    let mut layers: Vec<LayerRecord> = Vec::with_capacity(spec.layers.len());
    for (l, lay) in spec.layers.iter().zip(spec.layout()) {
        let input = match layers.last() {
            None => std::borrow::Cow::Borrowed(x.data()),
            Some(prev) => prev.out(),
        };
        let n = l.output_size;
        let mut pre = vec![0.0; rows * n];
        gemm_nn(&input, &p[lay.weights.clone()], rows, l.input_size, n, &mut pre);
        let bias = &p[lay.bias.clone()];
        for row in pre.chunks_exact_mut(n) {
            for (z, b) in row.iter_mut().zip(bias) {
                *z += b;
            }
        }
        let act = activate(l.activation, &pre, n);
        let rate = l.dropout_rate();
        let mask = match (&mut mode, rate > 0.0) {
            (Mode::Train(rng), true) => {
                let keep = 1.0 - rate;
                let scale = 1.0 / keep;
                Some(
                    (0..act.len())
                        .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
                        .collect(),
                )
            }
            _ => None,
        };
        layers.push(LayerRecord { pre, act, mask });
    }
    Ok(Activations { rows, layers })
}

fn activate(a: Activation, pre: &[f64], width: usize) -> Vec<f64> {
    match a {
        Activation::Identity => pre.to_vec(),
        Activation::Sigmoid => pre.iter().map(|&z| sigmoid(z)).collect(),
        Activation::Relu => pre.iter().map(|&z| z.max(0.0)).collect(),
        Activation::Softmax => {
            let mut out = Vec::with_capacity(pre.len());
            for row in pre.chunks_exact(width) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let start = out.len();
                let mut sum = 0.0;
                for &z in row {
                    let e = (z - max).exp();
                    sum += e;
                    out.push(e);
                }
                for v in &mut out[start..] {
                    *v /= sum;
                }
            }
            out
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean over the batch of the per-example loss.
pub fn loss(spec: &NetworkSpec, output: &Tensor, y: &Tensor) -> Result<f64> {
    if output.shape() != y.shape() {
        return Err(shape_err(format!(
            "output shape {:?} vs target shape {:?}",
            output.shape(),
            y.shape()
        )));
    }
    let (rows, _) = output.dims2()?;
    if rows == 0 {
        return Ok(0.0);
    }
    let total: f64 = match spec.loss {
        LossKind::Squared => output
            .data()
            .iter()
            .zip(y.data())
            .map(|(o, t)| 0.5 * (o - t) * (o - t))
            .sum(),
        LossKind::CrossEntropy => output
            .data()
            .iter()
            .zip(y.data())
            .map(|(o, t)| -t * o.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln())
            .sum(),
    };
    Ok(total / rows as f64)
}

/// Gradient of the batch loss *sum* (not mean) with respect to every
/// parameter. `acts` must come from [`forward`] on `batch.x`.
pub fn backward(spec: &NetworkSpec, params: &ModelParams, batch: &Batch, acts: &Activations) -> Result<ModelParams> {
    params.check_len(spec)?;
    let rows = batch.len();
    if acts.rows != rows || acts.layers.len() != spec.layers.len() {
        return Err(shape_err("activation record does not match batch"));
    }
    let (_, ycols) = batch.y.dims2()?;
    if ycols != spec.output_size() {
        return Err(shape_err(format!(
            "targets have {ycols} columns, network outputs {}",
            spec.output_size()
        )));
    }
    let p = params.as_slice();
    let layout = spec.layout();
    let mut grad = vec![0.0; p.len()];
    let last = spec.layers.len() - 1;

    // d(loss sum)/d(final pre-activation)
    let out_rec = &acts.layers[last];
    let out = out_rec.out();
    let y = batch.y.data();
    let width = spec.output_size();
    let mut delta: Vec<f64> = match (spec.loss, spec.layers[last].activation) {
        (LossKind::CrossEntropy, Activation::Softmax) if out_rec.mask.is_none() => {
            out.iter().zip(y).map(|(o, t)| o - t).collect()
        }
        (loss_kind, act) => {
            let d_out: Vec<f64> = match loss_kind {
                LossKind::Squared => out.iter().zip(y).map(|(o, t)| o - t).collect(),
                LossKind::CrossEntropy => out
                    .iter()
                    .zip(y)
                    .map(|(&o, &t)| {
                        if o <= PROB_CLAMP || o >= 1.0 - PROB_CLAMP {
                            0.0
                        } else {
                            -t / o
                        }
                    })
                    .collect(),
            };
            let d_act = apply_mask(d_out, out_rec.mask.as_deref());
            activation_backward(act, &out_rec.pre, &out_rec.act, d_act, width)
        }
    };

    for l in (0..=last).rev() {
        let spec_l = &spec.layers[l];
        let (n_in, n_out) = (spec_l.input_size, spec_l.output_size);
        let input = if l == 0 {
            std::borrow::Cow::Borrowed(batch.x.data())
        } else {
            acts.layers[l - 1].out()
        };
        let lay = &layout[l];
        gemm_tn(&input, &delta, rows, n_in, n_out, &mut grad[lay.weights.clone()]);
        let gb = &mut grad[lay.bias.clone()];
        for row in delta.chunks_exact(n_out) {
            for (g, d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }
        if l > 0 {
            let mut d_in = vec![0.0; rows * n_in];
            gemm_nt(&delta, &p[lay.weights.clone()], rows, n_out, n_in, &mut d_in);
            let prev = &acts.layers[l - 1];
            let d_act = apply_mask(d_in, prev.mask.as_deref());
            delta = activation_backward(spec.layers[l - 1].activation, &prev.pre, &prev.act, d_act, n_in);
        }
    }
    Ok(ModelParams(grad))
}

fn apply_mask(mut g: Vec<f64>, mask: Option<&[f64]>) -> Vec<f64> {
    if let Some(m) = mask {
        for (v, k) in g.iter_mut().zip(m) {
            *v *= k;
        }
    }
    g
}

fn activation_backward(a: Activation, pre: &[f64], act: &[f64], mut g: Vec<f64>, width: usize) -> Vec<f64> {
    match a {
        Activation::Identity => {}
        Activation::Sigmoid => {
            for (v, s) in g.iter_mut().zip(act) {
                *v *= s * (1.0 - s);
            }
        }
        Activation::Relu => {
            for (v, z) in g.iter_mut().zip(pre) {
                if *z <= 0.0 {
                    *v = 0.0;
                }
            }
        }
        Activation::Softmax => {
            for (gr, sr) in g.chunks_exact_mut(width).zip(act.chunks_exact(width)) {
                let dot: f64 = gr.iter().zip(sr).map(|(a, b)| a * b).sum();
                for (v, s) in gr.iter_mut().zip(sr) {
                    *v = s * (*v - dot);
                }
            }
        }
    }
    g
}

/// Eval-mode outputs for `x`, computed in chunks of `chunk` rows.
pub fn predict(spec: &NetworkSpec, params: &ModelParams, x: &Tensor, chunk: usize) -> Result<Tensor> {
    let (rows, _) = x.dims2()?;
    let width = spec.output_size();
    let mut data = Vec::with_capacity(rows * width);
    let mut start = 0;
    while start < rows {
        let end = (start + chunk.max(1)).min(rows);
        let acts = forward(spec, params, &x.rows(start, end), Mode::Eval)?;
        data.extend_from_slice(&acts.layers.last().expect("non-empty").act);
        start = end;
    }
    Tensor::new(vec![rows, width], data)
}
