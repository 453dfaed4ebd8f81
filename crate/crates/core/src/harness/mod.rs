//! Experiment orchestration: configuration, leave-one-domain-out sweeps over
//! seeds, report persistence, runtime benchmarks and the verification suite.
//!
//! Runs execute in parallel but each run is single-threaded and owns its
//! randomness, so a report depends only on its configuration and dataset.

mod bench;
mod config;
mod report;
mod verify;

pub use bench::{benchmark_runtime, BenchConfig, BenchRow, BenchTable};
pub use config::{
    find_preset, presets, DatasetSource, ExperimentConfig, HeldOut, HpOverrides, ModelConfig, Preset, ResolvedConfig,
    SynthSpec,
};
pub use report::{emit_plot_data, FoldSummary, RunRecord, RunReport, RunTiming, Summary, REPORT_SCHEMA};
pub use verify::{verify_suite, CheckOutcome};

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::algorithms::{train, TrainConfig, TrainedParams};
use crate::domains::DomainSet;
use crate::error::{Error, Result};

/// Environment variable capping the number of concurrent runs.
pub const THREADS_ENV: &str = "SEQDG_THREADS";

/// Number of worker threads: `jobs` (0 means all cores), capped by
/// `SEQDG_THREADS` when that is set to a positive integer.
pub fn worker_count(jobs: usize) -> usize {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let wanted = if jobs == 0 { cores } else { jobs };
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&c| c > 0);
    cap.map_or(wanted, |c| wanted.min(c)).max(1)
}

/// Hex SHA-256 of the canonical JSON of `value`.
pub fn sha256_json<T: serde::Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hex SHA-256 of the dataset in its on-disk encoding.
pub fn dataset_hash(set: &DomainSet) -> String {
    hex::encode(Sha256::digest(set.to_bytes()))
}

/// Loads the configured dataset (relative paths resolve against `base`) and
/// runs the experiment on it.
pub fn run_experiment(cfg: &ExperimentConfig, base: Option<&Path>, jobs: usize) -> Result<RunReport> {
    let set = cfg.dataset.load(base)?;
    run_on(cfg, &set, jobs)
}

/// Every (held-out fold, seed) pair of `cfg` on `set`, at most `jobs` at a
/// time. Runs are ordered by fold, then by seed. The first failing run aborts
/// the experiment with its fold and seed attached.
pub fn run_on(cfg: &ExperimentConfig, set: &DomainSet, jobs: usize) -> Result<RunReport> {
    Ok(run_on_with_params(cfg, set, jobs)?.0)
}

/// [`run_on`], also returning the trained parameters of each run in report order.
pub fn run_on_with_params(
    cfg: &ExperimentConfig,
    set: &DomainSet,
    jobs: usize,
) -> Result<(RunReport, Vec<TrainedParams>)> {
    let resolved = cfg.resolve(set)?;
    let folds = resolved.held_out.folds(set.len());
    let pairs: Vec<(usize, u64)> = folds
        .iter()
        .flat_map(|&f| resolved.seeds.iter().map(move |&s| (f, s)))
        .collect();

    type RunOutput = (RunRecord, RunTiming, Vec<String>, TrainedParams);
    let run_one = |&(fold, seed): &(usize, u64)| -> Result<RunOutput> {
        let tc = TrainConfig {
            method: resolved.method,
            spec: resolved.spec.clone(),
            hp: resolved.hp.clone(),
            iters: resolved.iters,
            batch_size: resolved.batch_size,
            eval_every: resolved.eval_every,
            seed,
            held_out: fold,
            train_frac: resolved.train_frac,
        };
        let start = Instant::now();
        let out = train(&tc, set).map_err(|e| Error::Fold {
            fold,
            seed,
            source: Box::new(e),
        })?;
        let elapsed = start.elapsed().as_secs_f64();
        let last = *out.final_metrics();
        let record = RunRecord {
            held_out: fold,
            seed,
            heldout_acc: last.heldout_acc,
            final_loss: last.loss,
            samples_seen: out.audit.samples_seen,
            metrics: out.metrics,
        };
        let timing = RunTiming {
            held_out: fold,
            seed,
            seconds: elapsed,
            seconds_per_iter: elapsed / resolved.iters.max(1) as f64,
        };
        Ok((record, timing, out.warnings, out.params))
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count(jobs))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<_> = pool.install(|| pairs.par_iter().map(run_one).collect::<Result<Vec<_>>>())?;

    let mut runs = Vec::with_capacity(results.len());
    let mut timing = Vec::with_capacity(results.len());
    let mut params = Vec::with_capacity(results.len());
    let mut warnings: Vec<String> = Vec::new();
    for (r, t, w, p) in results {
        runs.push(r);
        timing.push(t);
        params.push(p);
        for msg in w {
            if !warnings.contains(&msg) {
                warnings.push(msg);
            }
        }
    }
    Ok((RunReport::assemble(&resolved, set, runs, timing, warnings)?, params))
}
