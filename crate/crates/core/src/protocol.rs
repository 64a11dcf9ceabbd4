//! Periodic averaging with zero-mean noise injection, plus the serial and
//! no-sync baselines.
//!
//! All learners start from one shared random model. In round `t` each
//! learner perturbs its parameters by `ε_t·ψ`, takes one SGD step on its next
//! `B` examples, and every `b` rounds all learners are replaced by their
//! average. The model used for evaluation is the most recent average.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{shape_err, Error, Result};
use crate::nn::{init_params, ModelParams, NetworkSpec};
use crate::noise::{NoiseSpec, Tick};
use crate::optim::{train_in_place, SgdConfig};
use crate::par::Exec;
use crate::rng::{stream, Purpose, Stream, StreamKey};

pub const DEFAULT_SYNC_PERIOD: usize = 10;
pub const DEFAULT_MAGNITUDE_BOUND: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Number of learners `m`.
    pub learners: usize,
    /// Synchronization period `b`, in rounds.
    pub sync_period: usize,
    /// Total rounds `T`.
    pub rounds: usize,
    pub sgd_local: SgdConfig,
    pub sgd_serial: SgdConfig,
    pub noise: NoiseSpec,
    pub master_seed: u64,
    /// Seed for the noise streams only; defaults to `master_seed`. Runs that
    /// differ only here share initialization and data order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_seed: Option<u64>,
    /// Learners `2j` and `2j+1` share a noise stream and the odd one injects
    /// the negated draw.
    #[serde(default)]
    pub antithetic: bool,
    /// A run whose parameters exceed this magnitude is stopped and flagged.
    #[serde(default = "default_bound")]
    pub magnitude_bound: f64,
}

fn default_bound() -> f64 {
    DEFAULT_MAGNITUDE_BOUND
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.learners == 0 {
            return bad("need at least one learner");
        }
        if self.sync_period == 0 {
            return bad("sync period must be at least 1");
        }
        if self.antithetic && !self.learners.is_multiple_of(2) {
            return bad("antithetic pairing needs an even number of learners");
        }
        if self.magnitude_bound.is_nan() || self.magnitude_bound <= 0.0 {
            return bad("magnitude bound must be positive");
        }
        self.sgd_local.validate()?;
        self.sgd_serial.validate()?;
        self.noise.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum RunStatus {
    Completed,
    /// Parameters left the magnitude bound or the loss became non-finite.
    Overflow { round: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundSnapshot {
    pub round: usize,
    /// Local models after this round's update, before any averaging.
    pub learners: Vec<ModelParams>,
    /// The average, when this round ended with a synchronization.
    pub averaged: Option<ModelParams>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub rounds: Vec<RoundSnapshot>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    /// The model to evaluate: last average (decentralized), the single model
    /// (serial) or the randomly selected learner (no-sync).
    pub model: ModelParams,
    /// Local models when training stopped.
    pub learners: Vec<ModelParams>,
    pub syncs: usize,
    /// Sum over rounds of the summed batch losses of all learners.
    pub round_losses: Vec<f64>,
    pub cumulative_loss: f64,
    pub status: RunStatus,
    pub selected: Option<usize>,
    pub trajectory: Option<Trajectory>,
}

impl RunOutput {
    pub fn failed(&self) -> bool {
        self.status != RunStatus::Completed
    }
}

/// Elementwise mean, accumulated in list order. A coordinate on which all
/// models agree is copied unchanged.
pub fn average(models: &[ModelParams]) -> Result<ModelParams> {
    let first = models
        .first()
        .ok_or_else(|| Error::Precondition("cannot average an empty list".into()))?;
    if let Some(m) = models.iter().find(|m| m.len() != first.len()) {
        return Err(shape_err(format!("averaging models of length {} and {}", first.len(), m.len())));
    }
    let n = models.len() as f64;
    let mut out = first.clone();
    let dst = out.as_mut_slice();
    for (j, v) in dst.iter_mut().enumerate() {
        let x0 = *v;
        let mut sum = x0;
        let mut same = true;
        for m in &models[1..] {
            let x = m.as_slice()[j];
            same &= x == x0;
            sum += x;
        }
        *v = if same { x0 } else { sum / n };
    }
    Ok(out)
}

/// Randomly permutes `data` and cuts it into `m` equal contiguous shards.
/// Leftover rows are dropped.
pub fn partition(data: &Dataset, m: usize, rng: &mut impl Rng) -> Result<Vec<Dataset>> {
    if m == 0 || data.len() < m {
        return Err(Error::DatasetTooSmall(format!("{} rows for {m} shards", data.len())));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(rng);
    let size = data.len() / m;
    let dropped = data.len() - size * m;
    if dropped > 0 {
        log::info!("partition: dropping {dropped} rows to get {m} shards of {size}");
    }
    Ok(idx.chunks_exact(size).take(m).map(|c| data.select(c)).collect())
}

/// Algorithm 1: periodic averaging with noise injection.
pub fn run_decentralized(spec: &NetworkSpec, config: &ProtocolConfig, shards: &[Dataset], record: bool) -> Result<RunOutput> {
    run_decentralized_with(Exec::default(), spec, config, shards, record)
}

pub fn run_decentralized_with(
    exec: Exec,
    spec: &NetworkSpec,
    config: &ProtocolConfig,
    shards: &[Dataset],
    record: bool,
) -> Result<RunOutput> {
    Sim {
        spec,
        config,
        sgd: config.sgd_local,
        rounds: config.rounds,
        sync: true,
        exec,
    }
    .run(shards, record)
}

/// Single learner trained on the whole `stream` for `rounds` rounds with the
/// serial learning rate and the same noise hooks (noise timing follows the
/// configured sync period).
pub fn run_serial(spec: &NetworkSpec, config: &ProtocolConfig, rounds: usize, stream: &Dataset) -> Result<RunOutput> {
    let mut cfg = config.clone();
    cfg.learners = 1;
    cfg.antithetic = false;
    Sim {
        spec,
        config: &cfg,
        sgd: config.sgd_serial,
        rounds,
        sync: false,
        exec: Exec::Sequential,
    }
    .run(std::slice::from_ref(stream), false)
}

/// `m` independent learners with the serial learning rate and no averaging;
/// one learner is picked uniformly at random for evaluation.
pub fn run_nosync(spec: &NetworkSpec, config: &ProtocolConfig, shards: &[Dataset]) -> Result<RunOutput> {
    run_nosync_with(Exec::default(), spec, config, shards)
}

pub fn run_nosync_with(exec: Exec, spec: &NetworkSpec, config: &ProtocolConfig, shards: &[Dataset]) -> Result<RunOutput> {
    let mut out = Sim {
        spec,
        config,
        sgd: config.sgd_serial,
        rounds: config.rounds,
        sync: false,
        exec,
    }
    .run(shards, false)?;
    let pick = stream(config.master_seed, Purpose::Select).random_range(0..config.learners);
    out.model = out.learners[pick].clone();
    out.selected = Some(pick);
    Ok(out)
}

struct Sim<'a> {
    spec: &'a NetworkSpec,
    config: &'a ProtocolConfig,
    sgd: SgdConfig,
    rounds: usize,
    sync: bool,
    exec: Exec,
}

enum Step {
    Ok(f64),
    Overflow,
}

impl Sim<'_> {
    fn run(&self, shards: &[Dataset], record: bool) -> Result<RunOutput> {
        let cfg = self.config;
        cfg.validate()?;
        self.spec.validate()?;
        let m = cfg.learners;
        if shards.len() != m {
            return Err(Error::InvalidConfig(format!("{} shards for {m} learners", shards.len())));
        }
        let b = self.sgd.batch_size;
        let needed = self.rounds * b;
        for (i, s) in shards.iter().enumerate() {
            if s.len() < needed {
                return Err(Error::ShardExhausted {
                    shard: i,
                    needed,
                    available: s.len(),
                });
            }
            if s.dim() != self.spec.input_size() {
                return Err(shape_err(format!("shard {i} has {} features, network expects {}", s.dim(), self.spec.input_size())));
            }
        }

        let seed = cfg.master_seed;
        let noise_seed = cfg.noise_seed.unwrap_or(seed);
        let init = init_params(self.spec, &mut stream(seed, Purpose::Init));
        let mut learners = vec![init.clone(); m];
        let mut evaluated = init;
        let mut syncs = 0;
        let mut round_losses = Vec::with_capacity(self.rounds);
        let mut status = RunStatus::Completed;
        let mut trajectory = record.then(Trajectory::default);

        for t in 1..=self.rounds {
            let eps = cfg.noise.level(Tick::new(t, cfg.sync_period));
            let steps = self.exec.map_mut(&mut learners, |i, f| -> Result<Step> {
                if eps != 0.0 {
                    let (key, flip) = if cfg.antithetic { (i / 2, i % 2 == 1) } else { (i, false) };
                    let mut rng = StreamKey::new(noise_seed, Purpose::Noise).learner(key).round(t).stream();
                    perturb(&cfg.noise, f, eps, &mut rng, flip);
                }
                let batch = shards[i].batch((t - 1) * b, t * b);
                let mut rng = StreamKey::new(seed, Purpose::Dropout).learner(i).round(t).stream();
                let loss = train_in_place(self.spec, f, &batch, &self.sgd, &mut rng)?;
                if !loss.is_finite() || f.max_abs().is_nan() || f.max_abs() > cfg.magnitude_bound {
                    return Ok(Step::Overflow);
                }
                Ok(Step::Ok(loss * batch.len() as f64))
            });
            let mut round_loss = 0.0;
            let mut overflow = false;
            for s in steps {
                match s? {
                    Step::Ok(l) => round_loss += l,
                    Step::Overflow => overflow = true,
                }
            }
            if overflow {
                log::debug!("run stopped at round {t}: parameters left the magnitude bound");
                status = RunStatus::Overflow { round: t };
                break;
            }
            round_losses.push(round_loss);

            let mut averaged = None;
            if self.sync && t % cfg.sync_period == 0 {
                let avg = average(&learners)?;
                if let Some(tr) = trajectory.as_mut() {
                    tr.rounds.push(RoundSnapshot {
                        round: t,
                        learners: learners.clone(),
                        averaged: Some(avg.clone()),
                    });
                }
                for f in &mut learners {
                    f.as_mut_slice().copy_from_slice(avg.as_slice());
                }
                evaluated = avg.clone();
                averaged = Some(avg);
                syncs += 1;
            }
            if averaged.is_none() {
                if let Some(tr) = trajectory.as_mut() {
                    tr.rounds.push(RoundSnapshot {
                        round: t,
                        learners: learners.clone(),
                        averaged: None,
                    });
                }
            }
        }

        if !self.sync {
            evaluated = learners[0].clone();
        }
        let cumulative_loss = round_losses.iter().sum();
        Ok(RunOutput {
            model: evaluated,
            learners,
            syncs,
            round_losses,
            cumulative_loss,
            status,
            selected: None,
            trajectory,
        })
    }
}

/// `f += eps·ψ` with ψ drawn from `rng`; identical to
/// `inject(f, noise.sample(..), eps)` without the temporary vector.
fn perturb(noise: &NoiseSpec, f: &mut ModelParams, eps: f64, rng: &mut Stream, antithetic: bool) {
    const CHUNK: usize = 4096;
    let mut buf = [0.0; CHUNK];
    for part in f.as_mut_slice().chunks_mut(CHUNK) {
        let psi = &mut buf[..part.len()];
        noise.fill(psi, rng, antithetic);
        crate::tensor::axpy_slice(eps, psi, part);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_linear;
    use crate::noise::{Distribution, Schedule};
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg(m: usize, b: usize, t: usize, eps: f64) -> ProtocolConfig {
        ProtocolConfig {
            learners: m,
            sync_period: b,
            rounds: t,
            sgd_local: SgdConfig::new(0.01, 5).unwrap(),
            sgd_serial: SgdConfig::new(0.01, 5).unwrap(),
            noise: NoiseSpec::new(Distribution::UniformPmHalf, eps, Schedule::EveryRoundConstant),
            master_seed: 42,
            noise_seed: None,
            antithetic: false,
            magnitude_bound: DEFAULT_MAGNITUDE_BOUND,
        }
    }

    fn shards(m: usize, n: usize) -> Vec<Dataset> {
        (0..m).map(|i| synth_linear(n, &[1.0, -1.0, 0.5], 0.1, 100 + i as u64)).collect()
    }

    #[test]
    fn average_examples() {
        let a = ModelParams::new(vec![0.1, 0.7, -3.3]);
        assert_eq!(average(&[a.clone(), a.clone(), a.clone()]).unwrap(), a);
        let x = average(&[ModelParams::new(vec![0.0, 2.0]), ModelParams::new(vec![2.0, 0.0])]).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 1.0]);
        assert!(average(&[]).is_err());
        assert!(average(&[ModelParams::zeros(2), ModelParams::zeros(3)]).is_err());
    }

    #[test]
    fn partition_properties() {
        let d = synth_linear(103, &[1.0, 2.0], 0.0, 1);
        let mut rng = stream(5, Purpose::Partition);
        let parts = partition(&d, 4, &mut rng).unwrap();
        assert!(parts.iter().all(|p| p.len() == 25));
        // every shard row is a distinct original row
        let mut seen: Vec<Vec<u64>> = parts
            .iter()
            .flat_map(|p| (0..p.len()).map(|i| p.features.row(i).iter().map(|v| v.to_bits()).collect()).collect::<Vec<_>>())
            .collect();
        let total = seen.len();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), total);
        let one = partition(&d, 1, &mut stream(5, Purpose::Partition)).unwrap();
        assert_eq!(one[0].len(), 103);
        assert!(partition(&d, 200, &mut rng).is_err());
    }

    #[test]
    fn shard_exhaustion_is_an_error() {
        let spec = NetworkSpec::linear_model(3);
        let c = cfg(2, 2, 10, 0.0);
        let err = run_decentralized(&spec, &c, &shards(2, 49), false).unwrap_err();
        assert!(matches!(err, Error::ShardExhausted { needed: 50, .. }));
    }

    #[test]
    fn sync_count_and_post_sync_equality() {
        let spec = NetworkSpec::linear_model(3);
        let c = cfg(3, 4, 18, 0.5);
        let out = run_decentralized(&spec, &c, &shards(3, 90), true).unwrap();
        assert_eq!(out.syncs, 18 / 4);
        let tr = out.trajectory.unwrap();
        let last_avg = tr.rounds.iter().rev().find_map(|r| r.averaged.clone()).unwrap();
        assert_eq!(out.model, last_avg);
        for r in &tr.rounds {
            if let Some(avg) = &r.averaged {
                assert_eq!(r.round % 4, 0);
                // conservation: the average is the ensemble mean
                let mean = average(&r.learners).unwrap();
                assert_eq!(&mean, avg);
            }
        }
        // T = 18 is not a multiple of 4: local drift after round 16 is not evaluated
        assert_ne!(out.learners[0], out.model);
    }

    #[test]
    fn single_learner_equals_serial() {
        let spec = NetworkSpec::linear_model(3);
        let c = cfg(1, 3, 12, 0.7);
        let data = shards(1, 60);
        let dec = run_decentralized(&spec, &c, &data, false).unwrap();
        let ser = run_serial(&spec, &c, 12, &data[0]).unwrap();
        assert_eq!(dec.model, ser.model);
        assert_eq!(dec.round_losses, ser.round_losses);
    }

    #[test]
    fn serial_zero_rounds_returns_init() {
        let spec = NetworkSpec::linear_model(3);
        let c = cfg(1, 3, 0, 0.0);
        let out = run_serial(&spec, &c, 0, &shards(1, 5)[0]).unwrap();
        assert_eq!(out.model, init_params(&spec, &mut stream(42, Purpose::Init)));
    }

    #[test]
    fn nosync_selection_is_reproducible() {
        let spec = NetworkSpec::linear_model(3);
        let c = cfg(4, 2, 6, 0.0);
        let data = shards(4, 30);
        let a = run_nosync(&spec, &c, &data).unwrap();
        let b = run_nosync(&spec, &c, &data).unwrap();
        assert_eq!(a.selected, b.selected);
        assert_eq!(a.model, b.model);
        assert_eq!(a.model, a.learners[a.selected.unwrap()]);
    }

    #[test]
    fn overflow_is_flagged() {
        let spec = NetworkSpec::linear_model(3);
        let mut c = cfg(2, 2, 40, 0.0);
        c.sgd_local = SgdConfig::new(5.0, 5).unwrap();
        let out = run_decentralized(&spec, &c, &shards(2, 200), false).unwrap();
        assert!(matches!(out.status, RunStatus::Overflow { .. }));
        assert!(out.failed());
    }

    #[test]
    fn antithetic_needs_even_learners() {
        let mut c = cfg(3, 2, 4, 1.0);
        c.antithetic = true;
        assert!(c.validate().is_err());
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let spec = NetworkSpec::linear_model(3);
        let c = cfg(4, 3, 15, 1.0);
        let data = shards(4, 75);
        let a = run_decentralized_with(Exec::Sequential, &spec, &c, &data, false).unwrap();
        let b = run_decentralized_with(Exec::Parallel, &spec, &c, &data, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn perturb_matches_sample_then_inject() {
        let n = NoiseSpec::new(Distribution::GaussianTrunc, 1.0, Schedule::EveryRoundConstant);
        let p = ModelParams::new((0..9000).map(|i| i as f64 * 1e-3).collect());
        let mut a = p.clone();
        perturb(&n, &mut a, 0.3, &mut stream(1, Purpose::Noise), true);
        let psi = n.sample(9000, &mut stream(1, Purpose::Noise), true);
        assert_eq!(a, crate::noise::inject(&p, &psi, 0.3).unwrap());
    }

    proptest! {
        #[test]
        fn nested_average_matches_flat(seed in any::<u64>()) {
            let mut rng = stream(seed, Purpose::Check);
            let mut v = || ModelParams::new((0..5).map(|_| rng.random_range(-1.0..1.0)).collect());
            let (a, b, c, d) = (v(), v(), v(), v());
            let nested = average(&[average(&[a.clone(), b.clone()]).unwrap(), average(&[c.clone(), d.clone()]).unwrap()]).unwrap();
            let flat = average(&[a, b, c, d]).unwrap();
            for (x, y) in nested.as_slice().iter().zip(flat.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-15);
            }
        }
    }
}
