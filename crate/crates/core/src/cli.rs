//! Command-line front end. Results go to files (or stdout for `presets`,
//! `verify` and `stats`), logs to stderr.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::Error;
use crate::experiment::{self, presets, ExperimentConfig};
use crate::par::with_jobs;
use crate::verify::{self, CHECK_NAMES};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;

pub const RESULTS_FILE: &str = "results.csv";
pub const AGGREGATE_FILE: &str = "aggregate.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Parser)]
#[command(name = "noisy-avg", version, about = "Periodic model averaging with noise injection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an experiment suite and write results.csv and aggregate.json.
    Run {
        /// Config file, or the name of a built-in preset.
        #[arg(long)]
        config: String,
        #[arg(long)]
        out: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads.
        #[arg(long)]
        jobs: Option<usize>,
        /// Overwrite existing result files.
        #[arg(long)]
        force: bool,
    },
    /// Run oracle checks and print one JSON report per line.
    Verify {
        /// Run only these checks (repeatable).
        #[arg(long)]
        check: Vec<String>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Print the built-in presets as JSON.
    Presets,
    /// Recompute box statistics from a results CSV.
    Stats {
        results: PathBuf,
        /// Write aggregate.json here instead of printing it.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

fn all_presets() -> Vec<ExperimentConfig> {
    let mut v = presets::published_presets();
    v.push(presets::linear_desk());
    v.push(presets::mnist_desk());
    v
}

/// Loads a config file, falling back to a preset of that name.
pub fn resolve_config(arg: &str) -> Result<ExperimentConfig, Error> {
    let path = Path::new(arg);
    if path.exists() {
        return ExperimentConfig::load(path).map_err(|e| Error::InvalidConfig(format!("{arg}: {e}")));
    }
    all_presets().into_iter().find(|p| p.name == arg).ok_or_else(|| {
        let names: Vec<String> = all_presets().into_iter().map(|p| p.name).collect();
        Error::InvalidConfig(format!("{arg}: no such file or preset (presets: {})", names.join(", ")))
    })
}

fn invalid(e: &Error) -> bool {
    matches!(
        e,
        Error::InvalidConfig(_) | Error::InvalidNetwork(_) | Error::Json(_) | Error::Parse { .. }
    )
}

fn fail(e: Error) -> i32 {
    log::error!("{e}");
    if invalid(&e) {
        EXIT_INVALID
    } else {
        EXIT_FAILURE
    }
}

fn in_pool<R: Send>(jobs: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match jobs {
        Some(n) => with_jobs(n, f),
        None => f(),
    }
}

fn refuse_overwrite(paths: &[PathBuf], force: bool) -> Result<(), Error> {
    if force {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(Error::InvalidConfig(format!(
            "{} exists; pass --force to overwrite",
            p.display()
        ))),
        None => Ok(()),
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            jobs,
            force,
        } => run(&config, &out, seed, jobs, force),
        Command::Verify { check, seed, jobs } => run_verify(&check, seed, jobs),
        Command::Presets => {
            let json = serde_json::to_string_pretty(&all_presets()).expect("presets serialize");
            println!("{json}");
            EXIT_OK
        }
        Command::Stats { results, out, force } => stats(&results, out.as_deref(), force),
    }
}

fn run(config: &str, out: &Path, seed: Option<u64>, jobs: Option<usize>, force: bool) -> i32 {
    let mut cfg = match resolve_config(config) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    if let Some(s) = seed {
        cfg.protocol.master_seed = s;
    }
    let files = [out.join(RESULTS_FILE), out.join(AGGREGATE_FILE), out.join(CONFIG_FILE)];
    if let Err(e) = refuse_overwrite(&files, force) {
        return fail(e);
    }
    let res = match in_pool(jobs, || experiment::run_suite(&cfg)) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let write = || -> Result<(), Error> {
        fs::create_dir_all(out)?;
        fs::write(&files[0], res.to_csv()?)?;
        let agg = serde_json::to_string_pretty(&res.aggregate()?)?;
        fs::write(&files[1], agg + "\n")?;
        fs::write(&files[2], cfg.to_json() + "\n")?;
        Ok(())
    };
    if let Err(e) = write() {
        return fail(e);
    }
    let overflowed = res.runs.iter().filter(|r| r.overflow_round.is_some()).count();
    log::info!(
        "wrote {} ({} runs, {overflowed} stopped at the magnitude bound)",
        files[0].display(),
        res.runs.len()
    );
    match res.errors() {
        0 => EXIT_OK,
        n => {
            log::error!("{n} runs failed with errors");
            EXIT_FAILURE
        }
    }
}

fn run_verify(checks: &[String], seed: u64, jobs: Option<usize>) -> i32 {
    let names: Vec<&str> = if checks.is_empty() {
        CHECK_NAMES.to_vec()
    } else {
        checks.iter().map(String::as_str).collect()
    };
    if let Some(bad) = names.iter().find(|n| !CHECK_NAMES.contains(n)) {
        return fail(Error::InvalidConfig(format!(
            "unknown check {bad:?}; expected one of {}",
            CHECK_NAMES.join(", ")
        )));
    }
    let mut all_ok = true;
    let stdout = std::io::stdout();
    for name in names {
        match in_pool(jobs, || verify::run_check(name, seed)) {
            Ok(outcomes) => {
                for o in outcomes {
                    all_ok &= o.ok;
                    let line = serde_json::to_string(&o).expect("report serializes");
                    let _ = writeln!(stdout.lock(), "{line}");
                }
            }
            Err(e) => {
                log::error!("{name}: {e}");
                all_ok = false;
            }
        }
    }
    if all_ok {
        EXIT_OK
    } else {
        EXIT_FAILURE
    }
}

fn stats(results: &Path, out: Option<&Path>, force: bool) -> i32 {
    let go = || -> Result<(), Error> {
        let bytes = fs::read(results)?;
        let rows = experiment::read_csv(&bytes).map_err(|e| Error::Format {
            path: results.to_path_buf(),
            message: e.to_string(),
        })?;
        let agg = serde_json::to_string_pretty(&experiment::aggregate_rows(&rows)?)? + "\n";
        match out {
            Some(dir) => {
                let file = dir.join(AGGREGATE_FILE);
                refuse_overwrite(std::slice::from_ref(&file), force)?;
                fs::create_dir_all(dir)?;
                fs::write(file, agg)?;
            }
            None => print!("{agg}"),
        }
        Ok(())
    };
    match go() {
        Ok(()) => EXIT_OK,
        Err(e) => fail(e),
    }
}
