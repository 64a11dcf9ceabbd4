//! Repetition harness: runs every setup (decentralized × noise grid, serial
//! × noise grid, no-sync) several times, evaluates the resulting models and
//! summarizes them as box plots.
//!
//! Repetition `r` derives one seed from the master seed and every setup uses
//! it, so setups within a repetition share initialization, data partition
//! and noise draws and differ only in the noise level applied.

pub mod config;
pub mod presets;
pub mod stats;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use config::{DataSource, ExperimentConfig, Metric, ProtocolSettings, SetupKind};
pub use presets::published_presets;
pub use stats::{box_stats, BoxStats};

use crate::data::{self, CsvOptions, Dataset, Encoding};
use crate::error::{Error, Result};
use crate::nn::{predict, ModelParams, NetworkSpec};
use crate::noise::NoiseSpec;
use crate::par::Exec;
use crate::protocol::{self, ProtocolConfig, RunOutput};
use crate::rng::{repetition_seed, stream, Purpose, StreamKey};

pub const CSV_HEADER: [&str; 8] = [
    "setup",
    "repetition",
    "distribution",
    "noise_level",
    "schedule",
    "metric",
    "value",
    "failed",
];

const EVAL_CHUNK: usize = 500;

/// Fraction of correctly classified test examples. ±1 targets are compared
/// by sign (an output of exactly 0 counts as +1); one-hot targets by argmax
/// (ties go to the lowest index).
pub fn accuracy(spec: &NetworkSpec, params: &ModelParams, testset: &Dataset) -> Result<f64> {
    if testset.is_empty() {
        return Err(Error::Precondition("accuracy on an empty test set".into()));
    }
    let out = predict(spec, params, &testset.features, EVAL_CHUNK)?;
    let hits = match testset.encoding {
        Encoding::PmOne => out
            .data()
            .iter()
            .zip(testset.targets.data())
            .filter(|(o, t)| (**o >= 0.0) == (**t > 0.0))
            .count(),
        Encoding::OneHot => {
            let w = testset.classes();
            out.data()
                .chunks_exact(w)
                .zip(testset.targets.data().chunks_exact(w))
                .filter(|(o, t)| argmax(o) == argmax(t))
                .count()
        }
    };
    Ok(hits as f64 / testset.len() as f64)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Training pool and held-out test set.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let seed = cfg.protocol.master_seed;
    let pool = cfg.protocol.learners * cfg.examples_per_learner;
    let key = |round: usize| StreamKey::new(seed, Purpose::Data).round(round);
    let (train, test) = match &cfg.data {
        DataSource::SyntheticLinear {
            dim,
            label_noise,
            encoding,
        } => {
            let mut rng = key(1).stream();
            let w: Vec<f64> = (0..*dim).map(|_| rng.sample(StandardNormal)).collect();
            let seeds: [u64; 2] = rng.random();
            let train = data::synth_linear(pool, &w, *label_noise, seeds[0]);
            let test = data::synth_linear(cfg.test_size, &w, *label_noise, seeds[1]);
            match encoding {
                Encoding::PmOne => (train, test),
                Encoding::OneHot => (train.to_one_hot(), test.to_one_hot()),
            }
        }
        DataSource::SyntheticPrototypes {
            dim,
            classes,
            difficulty,
        } => {
            let seeds: [u64; 3] = key(2).stream().random();
            (
                data::synth_prototypes(pool, *dim, *classes, *difficulty, seeds[0], seeds[1]),
                data::synth_prototypes(cfg.test_size, *dim, *classes, *difficulty, seeds[0], seeds[2]),
            )
        }
        DataSource::Csv {
            train,
            test,
            label_column,
            skip_header,
            encoding,
            normalize,
        } => {
            let opts = CsvOptions {
                skip_header: *skip_header,
            };
            let all = data::load_csv(train, *label_column, *encoding, opts)?;
            let (tr, te) = match test {
                Some(p) => (all, data::load_csv(p, *label_column, *encoding, opts)?),
                None => {
                    if all.len() <= cfg.test_size {
                        return Err(Error::DatasetTooSmall(format!(
                            "{} rows cannot hold a test set of {}",
                            all.len(),
                            cfg.test_size
                        )));
                    }
                    let mut idx: Vec<usize> = (0..all.len()).collect();
                    idx.shuffle(&mut key(3).stream());
                    let cut = all.len() - cfg.test_size;
                    (all.select(&idx[..cut]), all.select(&idx[cut..]))
                }
            };
            if *normalize {
                let (tr, stats) = data::normalize(&tr, None)?;
                let (te, _) = data::normalize(&te, Some(&stats))?;
                (tr, te)
            } else {
                (tr, te)
            }
        }
        DataSource::MnistIdx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let tr = data::load_mnist_idx(train_images, train_labels)?;
            let te = data::load_mnist_idx(test_images, test_labels)?;
            let n = te.len().min(cfg.test_size);
            (tr, te.slice(0, n))
        }
    };
    if train.len() < pool {
        return Err(Error::DatasetTooSmall(format!(
            "{} training rows, {} learners × {} examples need {pool}",
            train.len(),
            cfg.protocol.learners,
            cfg.examples_per_learner
        )));
    }
    if train.dim() != cfg.network.input_size() || test.dim() != cfg.network.input_size() {
        return Err(Error::InvalidConfig(format!(
            "data has {} features, network expects {}",
            train.dim(),
            cfg.network.input_size()
        )));
    }
    Ok(PreparedData { train, test })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Setup {
    pub kind: SetupKind,
    pub noise: NoiseSpec,
}

/// Setups in output order: decentralized and serial once per noise-grid
/// entry, no-sync once without noise.
pub fn setups(cfg: &ExperimentConfig) -> Vec<Setup> {
    let mut out = Vec::new();
    for &kind in &cfg.setups {
        match kind {
            SetupKind::Nosync => out.push(Setup {
                kind,
                noise: NoiseSpec::off(),
            }),
            _ => out.extend(cfg.noise_grid.iter().map(|&noise| Setup { kind, noise })),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub setup: usize,
    pub repetition: usize,
    pub test_accuracy: Option<f64>,
    pub cumulative_training_loss: Option<f64>,
    pub failed: bool,
    /// Round at which the magnitude bound was hit.
    pub overflow_round: Option<usize>,
    /// Set when the run could not be carried out at all.
    pub error: Option<String>,
    pub seconds: f64,
}

impl RunResult {
    pub fn metric(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::TestAccuracy => self.test_accuracy,
            Metric::CumulativeTrainingLoss => self.cumulative_training_loss,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteResults {
    pub name: String,
    pub setups: Vec<Setup>,
    pub metrics: Vec<Metric>,
    /// Ordered by (setup, repetition).
    pub runs: Vec<RunResult>,
}

pub fn run_suite(cfg: &ExperimentConfig) -> Result<SuiteResults> {
    run_suite_with(Exec::default(), cfg)
}

pub fn run_suite_with(exec: Exec, cfg: &ExperimentConfig) -> Result<SuiteResults> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    run_suite_on(exec, cfg, &data)
}

/// Runs the suite on already prepared data.
pub fn run_suite_on(exec: Exec, cfg: &ExperimentConfig, data: &PreparedData) -> Result<SuiteResults> {
    let setups = setups(cfg);
    let reps = cfg.repetitions;
    let runs = exec.map_range(setups.len() * reps, |job| {
        let (s, r) = (job / reps, job % reps);
        run_job(exec, cfg, data, setups[s], s, r)
    });
    let failed = runs.iter().filter(|r| r.failed).count();
    log::info!("{}: {} runs, {failed} failed", cfg.name, runs.len());
    Ok(SuiteResults {
        name: cfg.name.clone(),
        setups,
        metrics: cfg.metrics.clone(),
        runs,
    })
}

fn run_job(exec: Exec, cfg: &ExperimentConfig, data: &PreparedData, setup: Setup, index: usize, rep: usize) -> RunResult {
    let start = Instant::now();
    let outcome = (|| -> Result<(RunOutput, f64)> {
        let seed = repetition_seed(cfg.protocol.master_seed, rep);
        let m = cfg.protocol.learners;
        let shards = protocol::partition(&data.train, m, &mut stream(seed, Purpose::Partition))?;
        let pc = ProtocolConfig {
            learners: m,
            sync_period: cfg.protocol.sync_period,
            rounds: cfg.rounds(),
            sgd_local: cfg.protocol.sgd_local,
            sgd_serial: cfg.protocol.sgd_serial,
            noise: setup.noise,
            master_seed: seed,
            noise_seed: None,
            antithetic: false,
            magnitude_bound: cfg.protocol.magnitude_bound,
        };
        let out = match setup.kind {
            SetupKind::Decentralized => protocol::run_decentralized_with(exec, &cfg.network, &pc, &shards, false)?,
            SetupKind::Nosync => protocol::run_nosync_with(exec, &cfg.network, &pc, &shards)?,
            SetupKind::Serial => {
                let parts: Vec<Dataset> = shards.iter().map(|s| s.slice(0, cfg.examples_per_learner.min(s.len()))).collect();
                let union = Dataset::concat(&parts)?;
                protocol::run_serial(&cfg.network, &pc, cfg.serial_rounds(), &union)?
            }
        };
        let acc = if out.failed() {
            f64::NAN
        } else {
            accuracy(&cfg.network, &out.model, &data.test)?
        };
        Ok((out, acc))
    })();
    let seconds = start.elapsed().as_secs_f64();
    let mut res = RunResult {
        setup: index,
        repetition: rep,
        test_accuracy: None,
        cumulative_training_loss: None,
        failed: true,
        overflow_round: None,
        error: None,
        seconds,
    };
    match outcome {
        Ok((out, acc)) if !out.failed() => {
            res.failed = false;
            res.test_accuracy = Some(acc);
            res.cumulative_training_loss = Some(out.cumulative_loss);
        }
        Ok((out, _)) => {
            if let protocol::RunStatus::Overflow { round } = out.status {
                res.overflow_round = Some(round);
            }
        }
        Err(e) => {
            log::error!("setup {index} repetition {rep}: {e}");
            res.error = Some(e.to_string());
        }
    }
    log::debug!(
        "{} setup {index} ({}) rep {rep}: acc {:?} in {seconds:.2}s",
        cfg.name,
        setup.kind.name(),
        res.test_accuracy
    );
    res
}

/// One row of the results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub setup: String,
    pub repetition: usize,
    pub distribution: String,
    pub noise_level: f64,
    pub schedule: String,
    pub metric: String,
    pub value: Option<f64>,
    pub failed: bool,
}

/// Box statistics for one (setup, noise, metric) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateEntry {
    pub setup: String,
    pub distribution: String,
    pub noise_level: f64,
    pub schedule: String,
    pub metric: String,
    pub runs: usize,
    pub failed: usize,
    pub stats: Option<BoxStats>,
}

impl SuiteResults {
    pub fn rows(&self) -> Vec<CsvRow> {
        let mut rows = Vec::with_capacity(self.runs.len() * self.metrics.len());
        for run in &self.runs {
            let s = &self.setups[run.setup];
            for &m in &self.metrics {
                rows.push(CsvRow {
                    setup: s.kind.name().into(),
                    repetition: run.repetition,
                    distribution: s.noise.distribution.name().into(),
                    noise_level: s.noise.base_level,
                    schedule: s.noise.schedule.name().into(),
                    metric: m.name().into(),
                    value: if run.failed { None } else { run.metric(m) },
                    failed: run.failed,
                });
            }
        }
        rows
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        write_csv(&self.rows())
    }

    pub fn aggregate(&self) -> Result<Vec<AggregateEntry>> {
        aggregate_rows(&self.rows())
    }

    /// Successful values of `metric` for one setup, in repetition order.
    pub fn values(&self, setup: usize, metric: Metric) -> Vec<f64> {
        self.runs
            .iter()
            .filter(|r| r.setup == setup && !r.failed)
            .filter_map(|r| r.metric(metric))
            .collect()
    }

    /// Runs that errored rather than completing or overflowing.
    pub fn errors(&self) -> usize {
        self.runs.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn failures(&self, setup: usize) -> usize {
        self.runs.iter().filter(|r| r.setup == setup && r.failed).count()
    }
}

pub fn write_csv(rows: &[CsvRow]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn read_csv(bytes: &[u8]) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != CSV_HEADER {
        return Err(Error::InvalidConfig(format!("unexpected results header {header:?}")));
    }
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Groups rows by (setup, distribution, noise level, schedule, metric) in
/// first-seen order and summarizes the non-failed values.
pub fn aggregate_rows(rows: &[CsvRow]) -> Result<Vec<AggregateEntry>> {
    let mut order: Vec<AggregateEntry> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    let mut index = BTreeMap::new();
    for r in rows {
        let key = (
            r.setup.clone(),
            r.distribution.clone(),
            r.noise_level.to_bits(),
            r.schedule.clone(),
            r.metric.clone(),
        );
        let i = *index.entry(key).or_insert_with(|| {
            order.push(AggregateEntry {
                setup: r.setup.clone(),
                distribution: r.distribution.clone(),
                noise_level: r.noise_level,
                schedule: r.schedule.clone(),
                metric: r.metric.clone(),
                runs: 0,
                failed: 0,
                stats: None,
            });
            values.push(Vec::new());
            order.len() - 1
        });
        order[i].runs += 1;
        match (r.failed, r.value) {
            (false, Some(v)) => values[i].push(v),
            _ => order[i].failed += 1,
        }
    }
    for (e, v) in order.iter_mut().zip(values) {
        if !v.is_empty() {
            e.stats = Some(box_stats(&v)?);
        }
    }
    Ok(order)
}
