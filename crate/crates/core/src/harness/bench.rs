use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::algorithms::{HyperParams, Method, MethodRunner};
use crate::domains::{DomainSet, MinibatchSampler};
use crate::error::{Error, Result};
use crate::model::{init_params, Batch, ModelSpec};

/// Workload shared by every benchmarked method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub hidden: Vec<usize>,
    pub hp: HyperParams,
    /// Samples per source domain per iteration.
    pub batch_size: usize,
    /// Timed iterations per method.
    pub iters: usize,
    /// Untimed iterations run first.
    pub warmup: usize,
    /// Distinct minibatch sets, cycled through by every method.
    pub pool: usize,
    pub held_out: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            hp: HyperParams {
                alpha: vec![0.01],
                gamma: 0.01,
                ..HyperParams::default()
            },
            batch_size: 64,
            iters: 1000,
            warmup: 100,
            pool: 32,
            held_out: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    /// Mean seconds per iteration.
    pub mean_secs: f64,
    pub std_secs: f64,
    /// `mean_secs` over the aggregation baseline's.
    pub ratio_to_agg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub iters: usize,
    pub warmup: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchTable {
    pub fn row(&self, method: Method) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn ratio(&self, method: Method) -> Option<f64> {
        self.row(method).map(|r| r.ratio_to_agg)
    }

    /// `method,mean_secs,std_secs,ratio_to_agg`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,mean_secs,std_secs,ratio_to_agg\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.method, r.mean_secs, r.std_secs, r.ratio_to_agg)
                .expect("writing to a String");
        }
        out
    }
}

/// Per-iteration wall-clock of each method on the same data, model and
/// starting point. Only the update itself is timed; minibatches are drawn
/// beforehand. Methods take turns within every iteration so that background
/// load affects them alike. The aggregation baseline is always the first row.
pub fn benchmark_runtime(methods: &[Method], cfg: &BenchConfig, set: &DomainSet) -> Result<BenchTable> {
    let mut order = vec![Method::Agg];
    for &m in methods {
        if !order.contains(&m) {
            order.push(m);
        }
    }
    if order.len() < 2 {
        return Err(Error::Config("benchmark needs at least one method besides AGG".into()));
    }
    if cfg.iters == 0 || cfg.pool == 0 {
        return Err(Error::Config("benchmark iterations and pool must be positive".into()));
    }
    if cfg.held_out >= set.len() {
        return Err(Error::Config(format!("held_out {} is not a domain", cfg.held_out)));
    }
    cfg.hp.validate()?;

    let sources: Vec<_> = (0..set.len()).filter(|&i| i != cfg.held_out).map(|i| &set.domains[i]).collect();
    if let Some(d) = sources.iter().find(|d| d.len() < cfg.batch_size) {
        return Err(Error::Config(format!("domain {} has fewer than {} samples", d.id, cfg.batch_size)));
    }
    let mut sizes = vec![set.dim];
    sizes.extend(&cfg.hidden);
    sizes.push(set.classes);
    let spec = ModelSpec::mlp(sizes);
    spec.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samplers: Vec<MinibatchSampler> = sources.iter().map(|d| MinibatchSampler::new(d.len())).collect();
    let pool: Vec<Vec<Batch>> = (0..cfg.pool)
        .map(|_| {
            samplers
                .iter_mut()
                .zip(&sources)
                .map(|(s, d)| s.next_batch(d, cfg.batch_size, &mut rng))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let theta0 = init_params(&spec, cfg.seed)?;

    let mut runners = order
        .iter()
        .map(|&method| {
            let mut path_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            path_rng.set_stream(1);
            MethodRunner::new(method, &spec, &cfg.hp, theta0.clone(), sources.len(), path_rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut times = vec![Vec::with_capacity(cfg.iters); order.len()];
    for it in 0..cfg.warmup + cfg.iters {
        let batches = &pool[it % pool.len()];
        for (runner, t) in runners.iter_mut().zip(times.iter_mut()) {
            let start = Instant::now();
            runner.step(batches)?;
            let dt = start.elapsed().as_secs_f64();
            if it >= cfg.warmup {
                t.push(dt);
            }
        }
    }
    let stats: Vec<(Method, f64, f64)> = order
        .iter()
        .zip(&times)
        .map(|(&method, t)| {
            let n = t.len() as f64;
            let mean = t.iter().sum::<f64>() / n;
            let var = t.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            (method, mean, var.sqrt())
        })
        .collect();
    let base = stats[0].1;
    Ok(BenchTable {
        iters: cfg.iters,
        warmup: cfg.warmup,
        rows: stats
            .into_iter()
            .map(|(method, mean_secs, std_secs)| BenchRow {
                method,
                mean_secs,
                std_secs,
                ratio_to_agg: mean_secs / base,
            })
            .collect(),
    })
}
