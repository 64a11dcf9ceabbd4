//! Executable oracles: exact antithetic cancellation for the linear model,
//! a Monte Carlo check that noisy averaging is unbiased, finite-difference
//! gradient checks and a median-invariance check on the linear suite.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{synth_linear, Dataset};
use crate::error::{Error, Result};
use crate::experiment::{self, ExperimentConfig, Metric, SetupKind};
use crate::nn::{backward, forward, init_params, loss, Activation, Batch, Mode, ModelParams, NetworkSpec};
use crate::noise::{inject, Distribution, NoiseSpec, Schedule};
use crate::optim::{train_on_batch, SgdConfig};
use crate::par::Exec;
use crate::protocol::{partition, run_decentralized_with, ProtocolConfig, DEFAULT_MAGNITUDE_BOUND};
use crate::rng::{repetition_seed, stream, Purpose, StreamKey};
use crate::tensor::Tensor;

pub const LEMMA_TOLERANCE: f64 = 1e-9;
pub const STANDARD_ERRORS: f64 = 4.0;
pub const MIN_MONTE_CARLO_RUNS: usize = 30;
pub const FD_STEP: f64 = 1e-6;
pub const GRADIENT_TOLERANCE: f64 = 1e-5;
pub const GRADIENT_ABS_FLOOR: f64 = 1e-8;
pub const MEDIAN_DELTA: f64 = 0.02;

const LABEL_NOISE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub name: String,
    pub max_abs_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub sample_count: usize,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

impl OracleReport {
    pub fn new(name: impl Into<String>, deviation: f64, tolerance: f64, samples: usize) -> Self {
        Self {
            name: name.into(),
            max_abs_deviation: deviation,
            tolerance,
            pass: deviation <= tolerance,
            sample_count: samples,
            note: String::new(),
        }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }
}

fn require_linear(spec: &NetworkSpec, what: &str) -> Result<()> {
    if spec.is_linear_model() {
        Ok(())
    } else {
        Err(Error::Precondition(format!(
            "{what} needs a one-layer identity model with squared loss"
        )))
    }
}

fn linear_task(d: usize, n: usize, seed: u64) -> Dataset {
    let mut rng = stream(seed, Purpose::Data);
    let w: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    synth_linear(n, &w, LABEL_NOISE, rng.random())
}

/// Exact antithetic cancellation on a `d`-input linear model: trajectories
/// driven by `+ψ_t` and `-ψ_t` average to the noiseless one.
pub fn antithetic_lemma_check(d: usize, rounds: usize, batch: usize, eta: f64, eps: f64, seed: u64) -> Result<OracleReport> {
    antithetic_check_for(&NetworkSpec::linear_model(d), rounds, batch, eta, eps, seed, 0.0)
}

/// General form of [`antithetic_lemma_check`]. Both trajectories receive
/// `bias` on top of their draws, so a non-zero `bias` makes the deviation
/// grow in proportion to it.
pub fn antithetic_check_for(
    spec: &NetworkSpec,
    rounds: usize,
    batch: usize,
    eta: f64,
    eps: f64,
    seed: u64,
    bias: f64,
) -> Result<OracleReport> {
    require_linear(spec, "the antithetic oracle")?;
    let sgd = SgdConfig::new(eta, batch)?;
    let data = linear_task(spec.input_size(), rounds * batch, seed);
    let mut noise = NoiseSpec::new(Distribution::UniformPmHalf, eps, Schedule::EveryRoundConstant);
    noise.offset = bias;
    let mut g = init_params(spec, &mut stream(seed, Purpose::Init));
    let (mut plus, mut minus) = (g.clone(), g.clone());
    let mut no_dropout = stream(seed, Purpose::Dropout);
    let mut worst: f64 = 0.0;
    for t in 1..=rounds {
        let key = StreamKey::new(seed, Purpose::Noise).round(t);
        let psi_p = noise.sample(g.len(), &mut key.stream(), false);
        let psi_m = noise.sample(g.len(), &mut key.stream(), true);
        let b = data.batch((t - 1) * batch, t * batch);
        plus = train_on_batch(spec, &inject(&plus, &psi_p, eps)?, &b, &sgd, &mut no_dropout)?.0;
        minus = train_on_batch(spec, &inject(&minus, &psi_m, eps)?, &b, &sgd, &mut no_dropout)?.0;
        g = train_on_batch(spec, &g, &b, &sgd, &mut no_dropout)?.0;
        for ((p, m), r) in plus.as_slice().iter().zip(minus.as_slice()).zip(g.as_slice()) {
            worst = worst.max((0.5 * (p + m) - r).abs());
        }
    }
    let name = if bias == 0.0 { "antithetic_lemma" } else { "antithetic_lemma_biased" };
    Ok(OracleReport::new(name, worst, LEMMA_TOLERANCE, rounds * g.len()))
}

/// Settings for [`expectation_convergence_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpectationCheck {
    pub dim: usize,
    pub learners: usize,
    pub sync_period: usize,
    pub rounds: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub eps: f64,
    pub runs: usize,
    pub seed: u64,
    pub distribution: Distribution,
    /// Mean added to every draw; non-zero only for negative controls.
    pub bias: f64,
}

impl Default for ExpectationCheck {
    fn default() -> Self {
        Self {
            dim: 5,
            learners: 4,
            sync_period: 5,
            rounds: 50,
            batch_size: 10,
            eta: 1e-3,
            eps: 1.0,
            runs: 200,
            seed: 7,
            distribution: Distribution::UniformPmHalf,
            bias: 0.0,
        }
    }
}

pub fn expectation_convergence_check(c: &ExpectationCheck) -> Result<OracleReport> {
    expectation_convergence_check_with(Exec::default(), c)
}

/// Runs `c.runs` noisy decentralized trainings that share initialization
/// and data and differ only in their noise streams, then compares the mean
/// final model to the noiseless run. The deviation is the largest
/// coordinate gap in standard errors.
pub fn expectation_convergence_check_with(exec: Exec, c: &ExpectationCheck) -> Result<OracleReport> {
    if c.runs < MIN_MONTE_CARLO_RUNS {
        return Err(Error::Precondition(format!(
            "{} runs is too few for a standard-error estimate (need {MIN_MONTE_CARLO_RUNS})",
            c.runs
        )));
    }
    let spec = NetworkSpec::linear_model(c.dim);
    let data = linear_task(c.dim, c.learners * c.rounds * c.batch_size, c.seed);
    let shards = partition(&data, c.learners, &mut stream(c.seed, Purpose::Partition))?;
    let sgd = SgdConfig::new(c.eta, c.batch_size)?;
    let mut noise = NoiseSpec::new(c.distribution, c.eps, Schedule::EveryRoundConstant);
    noise.offset = c.bias;
    let base = ProtocolConfig {
        learners: c.learners,
        sync_period: c.sync_period,
        rounds: c.rounds,
        sgd_local: sgd,
        sgd_serial: sgd,
        noise: NoiseSpec::off(),
        master_seed: c.seed,
        noise_seed: None,
        antithetic: false,
        magnitude_bound: DEFAULT_MAGNITUDE_BOUND,
    };
    let reference = run_decentralized_with(Exec::Sequential, &spec, &base, &shards, false)?;
    let finals = exec.map_range(c.runs, |k| -> Result<ModelParams> {
        let cfg = ProtocolConfig {
            noise,
            noise_seed: Some(repetition_seed(c.seed ^ 0x6e_6f69_7365, k)),
            ..base.clone()
        };
        let out = run_decentralized_with(Exec::Sequential, &spec, &cfg, &shards, false)?;
        if out.failed() {
            return Err(Error::Precondition(format!("monte carlo run {k} overflowed")));
        }
        Ok(out.model)
    });
    let finals = finals.into_iter().collect::<Result<Vec<_>>>()?;
    let n = finals.len() as f64;
    let p = spec.param_count();
    let mut worst: f64 = 0.0;
    for j in 0..p {
        let r = reference.model.as_slice()[j];
        let mean = finals.iter().map(|f| f.as_slice()[j] - r).sum::<f64>() / n;
        let var = finals.iter().map(|f| (f.as_slice()[j] - r - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        let gap = mean.abs();
        let z = if gap == 0.0 {
            0.0
        } else if se == 0.0 {
            f64::INFINITY
        } else {
            gap / se
        };
        worst = worst.max(z);
    }
    let name = if c.bias == 0.0 { "expectation_convergence" } else { "expectation_convergence_biased" };
    Ok(OracleReport::new(name, worst, STANDARD_ERRORS, c.runs).with_note("deviation in standard errors"))
}

/// Summed batch loss and, when `relu` is set, the on/off state of every
/// ReLU unit, from one forward pass.
fn probe(spec: &NetworkSpec, params: &ModelParams, batch: &Batch, relu: bool) -> Result<(f64, Vec<bool>)> {
    let acts = forward(spec, params, &batch.x, Mode::Eval)?;
    let l = loss(spec, &acts.output(spec), &batch.y)? * batch.len() as f64;
    let pattern = if relu {
        spec.layers
            .iter()
            .zip(&acts.layers)
            .filter(|(l, _)| l.activation == Activation::Relu)
            .flat_map(|(_, r)| r.pre.iter().map(|&v| v > 0.0))
            .collect()
    } else {
        Vec::new()
    };
    Ok((l, pattern))
}

/// Compares analytic gradients with central differences at a random point.
/// With `max_coords` set, at most that many coordinates are drawn from each
/// weight and bias block; otherwise every parameter is checked. For ReLU
/// networks a coordinate whose `±h` step changes any unit's on/off state is
/// a kink and is skipped.
pub fn gradient_check(spec: &NetworkSpec, batch: &Batch, seed: u64, max_coords: Option<usize>) -> Result<OracleReport> {
    if spec.layers.iter().any(|l| l.dropout_after.is_some_and(|r| r > 0.0)) {
        return Err(Error::Precondition("gradient check needs dropout disabled".into()));
    }
    spec.validate()?;
    let mut rng = stream(seed, Purpose::Check);
    let mut params = init_params(spec, &mut rng);
    for v in params.as_mut_slice() {
        *v += rng.random_range(-0.1..0.1);
    }
    let acts = forward(spec, &params, &batch.x, Mode::Eval)?;
    let analytic = backward(spec, &params, batch, &acts)?;
    compare_with_differences(spec, &params, batch, &analytic, max_coords, &mut rng)
}

fn compare_with_differences(
    spec: &NetworkSpec,
    params: &ModelParams,
    batch: &Batch,
    analytic: &ModelParams,
    max_coords: Option<usize>,
    rng: &mut impl Rng,
) -> Result<OracleReport> {
    let mut coords = Vec::new();
    for block in spec.layout() {
        for range in [block.weights, block.bias] {
            let len = range.len();
            match max_coords {
                Some(k) if k < len => {
                    let mut picked: Vec<usize> = sample(rng, len, k).into_iter().map(|i| range.start + i).collect();
                    picked.sort_unstable();
                    coords.extend(picked);
                }
                _ => coords.extend(range),
            }
        }
    }

    let relu = spec.has_relu();
    let (_, base_pattern) = probe(spec, params, batch, relu)?;
    let mut worst: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    let (mut compared, mut kinks) = (0, 0);
    let mut moved = params.clone();
    for &j in &coords {
        let orig = params.as_slice()[j];
        moved.as_mut_slice()[j] = orig + FD_STEP;
        let (up, pattern_up) = probe(spec, &moved, batch, relu)?;
        moved.as_mut_slice()[j] = orig - FD_STEP;
        let (down, pattern_down) = probe(spec, &moved, batch, relu)?;
        moved.as_mut_slice()[j] = orig;
        if pattern_up != base_pattern || pattern_down != base_pattern {
            kinks += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic.as_slice()[j];
        let diff = (a - numeric).abs();
        let err = if diff <= GRADIENT_ABS_FLOOR { 0.0 } else { diff / a.abs().max(numeric.abs()) };
        worst = worst.max(err);
        worst_abs = worst_abs.max(diff);
        compared += 1;
    }
    let mut report = OracleReport::new("gradient_check", worst, GRADIENT_TOLERANCE, compared);
    if compared == 0 {
        report.pass = false;
        report.max_abs_deviation = f64::INFINITY;
    }
    let mut note = format!(
        "{compared} of {} parameters compared, max abs diff {worst_abs:.1e}",
        spec.param_count()
    );
    if kinks > 0 {
        note.push_str(&format!(", {kinks} skipped at relu kinks"));
    }
    Ok(report.with_note(note))
}

/// A random batch shaped for `spec`: inputs uniform in `[-1, 1]`, targets
/// one-hot for softmax outputs and standard normal otherwise.
pub fn random_batch(spec: &NetworkSpec, rows: usize, seed: u64) -> Batch {
    let mut rng = stream(seed, Purpose::Check);
    let d = spec.input_size();
    let k = spec.output_size();
    let x: Vec<f64> = (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let softmax = spec.layers.last().is_some_and(|l| l.activation == Activation::Softmax);
    let mut y = vec![0.0; rows * k];
    for r in 0..rows {
        if softmax {
            y[r * k + rng.random_range(0..k)] = 1.0;
        } else {
            for v in &mut y[r * k..(r + 1) * k] {
                *v = rng.sample(StandardNormal);
            }
        }
    }
    Batch::new(Tensor::new(vec![rows, d], x).expect("shape"), Tensor::new(vec![rows, k], y).expect("shape"))
        .expect("matching rows")
}

/// Runs the decentralized setup of `cfg` at each noise level in `levels`
/// (distribution and schedule taken from the config's first noise entry)
/// and checks that (a) every median test accuracy is within
/// [`MEDIAN_DELTA`] of the noiseless median and (b) the IQR at the largest
/// level is at least the noiseless IQR.
pub fn median_invariance_check(cfg: &ExperimentConfig, levels: &[f64], repetitions: usize) -> Result<[OracleReport; 2]> {
    median_invariance_check_with(Exec::default(), cfg, levels, repetitions)
}

pub fn median_invariance_check_with(
    exec: Exec,
    cfg: &ExperimentConfig,
    levels: &[f64],
    repetitions: usize,
) -> Result<[OracleReport; 2]> {
    if cfg.network.layers.iter().any(|l| l.activation != Activation::Identity) {
        log::warn!("median invariance is not expected for non-linear networks; noise tends to shift the median there");
    }
    let template = cfg.noise_grid.first().copied().unwrap_or_else(|| {
        NoiseSpec::new(Distribution::UniformPmHalf, 0.0, Schedule::EveryRoundDecay)
    });
    let mut c = cfg.clone();
    c.setups = vec![SetupKind::Decentralized];
    c.metrics = vec![Metric::TestAccuracy];
    c.repetitions = repetitions;
    let mut levels: Vec<f64> = levels.to_vec();
    if !levels.contains(&0.0) {
        levels.insert(0, 0.0);
    }
    c.noise_grid = levels.iter().map(|&l| NoiseSpec { base_level: l, ..template }).collect();
    let res = experiment::run_suite_with(exec, &c)?;

    let mut stats = Vec::new();
    for (i, s) in res.setups.iter().enumerate() {
        let vals = res.values(i, Metric::TestAccuracy);
        let b = if vals.is_empty() { None } else { Some(experiment::box_stats(&vals)?) };
        stats.push((s.noise.base_level, b));
    }
    let zero = stats.iter().find(|(l, _)| *l == 0.0).and_then(|(_, b)| b.clone());
    let top_level = levels.iter().copied().fold(0.0, f64::max);
    let top = stats.iter().find(|(l, _)| *l == top_level).and_then(|(_, b)| b.clone());
    let (spread, iqr_gap) = match zero {
        None => (f64::INFINITY, f64::INFINITY),
        Some(z) => {
            let spread = stats
                .iter()
                .map(|(_, b)| b.as_ref().map_or(f64::INFINITY, |b| (b.median - z.median).abs()))
                .fold(0.0, f64::max);
            let gap = top.map_or(f64::INFINITY, |t| (z.iqr() - t.iqr()).max(0.0));
            (spread, gap)
        }
    };
    let n = res.runs.len();
    let failures = res.runs.iter().filter(|r| r.failed).count();
    let note = format!("levels {levels:?}, {repetitions} repetitions, {failures} failed runs");
    Ok([
        OracleReport::new("median_invariance", spread, MEDIAN_DELTA, n).with_note(note.clone()),
        OracleReport::new("iqr_growth", iqr_gap, 0.0, n).with_note(note),
    ])
}

/// The default oracle battery, as run by the `verify` subcommand.
pub const CHECK_NAMES: [&str; 6] = [
    "antithetic_lemma",
    "antithetic_bias_control",
    "expectation_convergence",
    "expectation_bias_control",
    "gradient_check",
    "median_invariance",
];

/// A report together with whether the check is expected to pass; negative
/// controls are expected to fail.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub check: String,
    pub expect_pass: bool,
    pub ok: bool,
    #[serde(flatten)]
    pub report: OracleReport,
}

impl CheckOutcome {
    fn new(check: &str, expect_pass: bool, report: OracleReport) -> Self {
        Self {
            check: check.into(),
            expect_pass,
            ok: report.pass == expect_pass,
            report,
        }
    }
}

/// Runs the named check with its default settings.
pub fn run_check(name: &str, seed: u64) -> Result<Vec<CheckOutcome>> {
    let out = match name {
        "antithetic_lemma" => vec![CheckOutcome::new(name, true, antithetic_lemma_check(5, 50, 10, 1e-3, 1.0, seed)?)],
        "antithetic_bias_control" => {
            let spec = NetworkSpec::linear_model(5);
            vec![CheckOutcome::new(name, false, antithetic_check_for(&spec, 50, 10, 1e-3, 1.0, seed, 0.5)?)]
        }
        "expectation_convergence" => {
            let c = ExpectationCheck { seed, ..Default::default() };
            vec![CheckOutcome::new(name, true, expectation_convergence_check(&c)?)]
        }
        "expectation_bias_control" => {
            let c = ExpectationCheck {
                seed,
                bias: 0.5,
                ..Default::default()
            };
            vec![CheckOutcome::new(name, false, expectation_convergence_check(&c)?)]
        }
        "gradient_check" => experiment::published_presets()
            .iter()
            .map(|p| {
                let spec = p.network.without_dropout();
                let batch = random_batch(&spec, 4, seed);
                let r = gradient_check(&spec, &batch, seed, Some(64))?;
                Ok(CheckOutcome::new(name, true, OracleReport { name: format!("gradient_check:{}", p.name), ..r }))
            })
            .collect::<Result<_>>()?,
        "median_invariance" => {
            let cfg = experiment::presets::linear_desk();
            let [a, b] = median_invariance_check(&cfg, &[0.0, 1.0, 2.0], cfg.repetitions)?;
            vec![CheckOutcome::new(name, true, a), CheckOutcome::new(name, true, b)]
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown check {other:?}; expected one of {}",
                CHECK_NAMES.join(", ")
            )))
        }
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, LossKind};

    #[test]
    fn lemma_zero_noise_is_exact() {
        let r = antithetic_lemma_check(5, 20, 10, 1e-3, 0.0, 1).unwrap();
        assert_eq!(r.max_abs_deviation, 0.0);
        assert!(r.pass);
    }

    #[test]
    fn lemma_holds_at_unit_noise() {
        let r = antithetic_lemma_check(5, 50, 10, 1e-3, 1.0, 1).unwrap();
        assert!(r.max_abs_deviation < 1e-9, "{r:?}");
    }

    #[test]
    fn lemma_refuses_deep_linear_network() {
        let spec = NetworkSpec::new(
            vec![
                LayerSpec::new(5, 3, Activation::Identity),
                LayerSpec::new(3, 1, Activation::Identity),
            ],
            LossKind::Squared,
        )
        .unwrap();
        assert!(matches!(
            antithetic_check_for(&spec, 10, 10, 1e-3, 1.0, 1, 0.0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn bias_deviation_is_proportional() {
        let spec = NetworkSpec::linear_model(5);
        let a = antithetic_check_for(&spec, 30, 10, 1e-3, 1.0, 2, 0.1).unwrap();
        let b = antithetic_check_for(&spec, 30, 10, 1e-3, 1.0, 2, 0.2).unwrap();
        assert!(!a.pass && !b.pass);
        let ratio = b.max_abs_deviation / a.max_abs_deviation;
        assert!((ratio - 2.0).abs() < 1e-6, "ratio {ratio}");
    }

    #[test]
    fn expectation_needs_enough_runs() {
        let c = ExpectationCheck { runs: 29, ..Default::default() };
        assert!(matches!(expectation_convergence_check(&c), Err(Error::Precondition(_))));
    }

    #[test]
    fn expectation_zero_noise_has_no_gap() {
        let c = ExpectationCheck {
            eps: 0.0,
            runs: 30,
            rounds: 10,
            ..Default::default()
        };
        let r = expectation_convergence_check(&c).unwrap();
        assert_eq!(r.max_abs_deviation, 0.0);
    }

    #[test]
    fn linear_gradient_is_tight() {
        let spec = NetworkSpec::linear_model(6);
        let r = gradient_check(&spec, &random_batch(&spec, 5, 3), 3, None).unwrap();
        assert!(r.max_abs_deviation < 1e-7, "{r:?}");
        assert_eq!(r.sample_count, 7);
    }

    #[test]
    fn sigmoid_softmax_gradient() {
        let spec = NetworkSpec::new(
            vec![
                LayerSpec::new(4, 6, Activation::Sigmoid),
                LayerSpec::new(6, 3, Activation::Softmax),
            ],
            LossKind::CrossEntropy,
        )
        .unwrap();
        let r = gradient_check(&spec, &random_batch(&spec, 5, 4), 4, None).unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.sample_count, spec.param_count());
    }

    #[test]
    fn relu_kink_is_skipped() {
        let spec = NetworkSpec::new(
            vec![
                LayerSpec::new(2, 2, Activation::Relu),
                LayerSpec::new(2, 1, Activation::Identity),
            ],
            LossKind::Squared,
        )
        .unwrap();
        // reproduce the check's evaluation point, then pick an input that
        // puts hidden unit 0 on its kink
        let mut rng = stream(9, Purpose::Check);
        let mut params = init_params(&spec, &mut rng);
        for v in params.as_mut_slice() {
            *v += rng.random_range(-0.1..0.1);
        }
        let p = params.as_slice();
        // pre_0 = x0*w00 + x1*w10 + b0
        let x1 = -p[4] / p[2];
        let batch = Batch::new(
            Tensor::new(vec![1, 2], vec![0.0, x1]).unwrap(),
            Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
        )
        .unwrap();
        let acts = forward(&spec, &params, &batch.x, Mode::Eval).unwrap();
        assert!(acts.layers[0].pre[0].abs() < 1e-15);
        let r = gradient_check(&spec, &batch, 9, None).unwrap();
        assert!(r.note.contains("relu kinks"), "{r:?}");
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let spec = NetworkSpec::new(
            vec![
                LayerSpec::new(3, 4, Activation::Sigmoid),
                LayerSpec::new(4, 2, Activation::Softmax),
            ],
            LossKind::CrossEntropy,
        )
        .unwrap();
        let batch = random_batch(&spec, 3, 5);
        let mut rng = stream(5, Purpose::Check);
        let params = init_params(&spec, &mut rng);
        let acts = forward(&spec, &params, &batch.x, Mode::Eval).unwrap();
        let good = backward(&spec, &params, &batch, &acts).unwrap();
        let ok = compare_with_differences(&spec, &params, &batch, &good, None, &mut rng).unwrap();
        assert!(ok.pass, "{ok:?}");
        let scaled = ModelParams::new(good.as_slice().iter().map(|g| g * 1.001).collect());
        let bad = compare_with_differences(&spec, &params, &batch, &scaled, None, &mut rng).unwrap();
        assert!(!bad.pass, "{bad:?}");
        assert!(bad.max_abs_deviation > 5e-4);
    }

    #[test]
    fn dropout_is_refused() {
        let spec = NetworkSpec::new(
            vec![
                LayerSpec::new(2, 2, Activation::Relu).with_dropout(0.5),
                LayerSpec::new(2, 1, Activation::Identity),
            ],
            LossKind::Squared,
        )
        .unwrap();
        assert!(gradient_check(&spec, &random_batch(&spec, 2, 1), 1, None).is_err());
    }

    #[test]
    fn reports_are_deterministic() {
        let a = run_check("antithetic_lemma", 5).unwrap();
        let b = run_check("antithetic_lemma", 5).unwrap();
        assert_eq!(a, b);
        assert!(run_check("nonsense", 5).is_err());
    }

    #[test]
    fn median_check_trivial_grid() {
        let mut cfg = experiment::presets::linear_desk();
        cfg.examples_per_learner = 100;
        let [a, b] = median_invariance_check(&cfg, &[0.0], 3).unwrap();
        assert_eq!(a.max_abs_deviation, 0.0);
        assert!(a.pass && b.pass);
    }
}
