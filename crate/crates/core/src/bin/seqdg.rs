use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use seqdg::algorithms::{HyperParams, Method, NormMode};
use seqdg::analysis::{domain_probe, export_embeddings, CoTrain, ProbeConfig, ProbeSchedule};
use seqdg::domains::{synth_rotated, DomainSet};
use seqdg::harness::{
    benchmark_runtime, emit_plot_data, run_on, run_on_with_params, verify_suite, BenchConfig, DatasetSource,
    ExperimentConfig, HeldOut, HpOverrides, SynthSpec,
};
use seqdg::model::ModelSpec;

#[derive(Parser)]
#[command(name = "seqdg", version, about = "Sequential-learning domain generalization on synthetic domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a rotated-cluster dataset file.
    Gen(GenArgs),
    /// Train one held-out fold with one seed.
    Train(RunArgs),
    /// Leave-one-domain-out sweep over folds and seeds.
    Sweep(RunArgs),
    /// Run the numerical identity and expansion checks.
    Verify(VerifyArgs),
    /// Per-iteration runtime of several methods on one workload.
    Bench(BenchArgs),
    /// Train a domain classifier on shared features, then co-train with a method.
    Probe(ProbeArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    domains: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Samples per domain.
    #[arg(long, default_value_t = 150)]
    n: usize,
    /// Rotation between consecutive domains, degrees.
    #[arg(long, default_value_t = 25.0)]
    angle: f64,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

impl SynthArgs {
    fn spec(&self) -> SynthSpec {
        SynthSpec {
            domains: self.domains,
            classes: self.classes,
            n: self.n,
            angle: self.angle,
            noise: self.noise,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    synth: SynthArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Default)]
struct HpArgs {
    /// Comma-separated inner step sizes, e.g. `0.05,0.6`.
    #[arg(long, value_delimiter = ',')]
    alpha: Option<Vec<f64>>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    second_order: Option<bool>,
    #[arg(long)]
    eq3_strict: Option<bool>,
    #[arg(long)]
    aggregate_mtrain: Option<bool>,
    /// `norm` or `squared`.
    #[arg(long, value_parser = parse_norm)]
    undo_norm: Option<NormMode>,
    #[arg(long)]
    ffo_momentum: Option<bool>,
}

fn parse_norm(s: &str) -> std::result::Result<NormMode, String> {
    match s {
        "norm" => Ok(NormMode::Norm),
        "squared" => Ok(NormMode::Squared),
        _ => Err(format!("expected `norm` or `squared`, got `{s}`")),
    }
}

impl HpArgs {
    fn overrides(&self) -> HpOverrides {
        HpOverrides {
            alpha: self.alpha.clone(),
            beta: self.beta,
            gamma: self.gamma,
            lambda: self.lambda,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            second_order: self.second_order,
            eq3_strict: self.eq3_strict,
            aggregate_mtrain: self.aggregate_mtrain,
            undo_norm: self.undo_norm,
            ffo_momentum: self.ffo_momentum,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment file; flags below override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    preset: Option<String>,
    /// Dataset file written by `seqdg gen`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Domain index, or `ALL` for every fold.
    #[arg(long)]
    held_out: Option<HeldOut>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Single seed.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated hidden widths.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    batchnorm: Option<bool>,
    #[command(flatten)]
    hp: HpArgs,
    /// Concurrent runs; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl RunArgs {
    fn config(&self, single: bool) -> Result<(ExperimentConfig, Option<PathBuf>)> {
        let (mut cfg, base) = match &self.config {
            Some(p) => (
                ExperimentConfig::load(p)?,
                p.parent().map(Path::to_path_buf),
            ),
            None => {
                let mut c = ExperimentConfig::default();
                if single {
                    c.held_out = HeldOut::Domain(0);
                    c.seeds = vec![0];
                }
                (c, None)
            }
        };
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(p) = &self.preset {
            cfg.preset = Some(p.clone());
            if self.method.is_none() && self.config.is_none() {
                cfg.method = seqdg::harness::find_preset(p)?.method;
            }
        }
        if let Some(d) = &self.data {
            cfg.dataset = DatasetSource::File { path: d.clone() };
        }
        if let Some(h) = self.held_out {
            cfg.held_out = h;
        }
        if let Some(i) = self.iters {
            cfg.iters = i;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(e) = self.eval_every {
            cfg.eval_every = e;
        }
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(h) = &self.hidden {
            cfg.model.hidden = h.clone();
        }
        if self.batchnorm.is_some() {
            cfg.model.batchnorm = self.batchnorm;
        }
        cfg.hp = cfg.hp.merged_with(&self.hp.overrides());
        if single && (cfg.held_out == HeldOut::All || cfg.seeds.len() != 1) {
            bail!("train runs one fold with one seed; use `seqdg sweep` for more");
        }
        Ok((cfg, base))
    }
}

fn load_data(cfg: &ExperimentConfig, base: Option<&Path>) -> Result<DomainSet> {
    cfg.dataset.load(base).context("loading dataset")
}

fn print_warnings(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let set = synth_rotated(&(&args.synth.spec()).into())?;
    set.save(&args.out)?;
    println!(
        "wrote {} domains x {} samples to {}",
        set.len(),
        args.synth.n,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: &RunArgs) -> Result<()> {
    let (cfg, base) = args.config(true)?;
    let set = load_data(&cfg, base.as_deref())?;
    let (report, params) = run_on_with_params(&cfg, &set, 1)?;
    print_warnings(&report.warnings);
    report.write(&args.out)?;
    let spec = &report.config.spec;
    export_embeddings(&params[0].inference()?, &set, spec, args.out.join("embeddings.csv"))?;
    let run = &report.runs[0];
    println!(
        "{} held_out={} seed={} acc={:.4} loss={:.4} -> {}",
        report.config.method,
        run.held_out,
        run.seed,
        run.heldout_acc,
        run.final_loss,
        args.out.display()
    );
    Ok(())
}

fn cmd_sweep(args: &RunArgs) -> Result<()> {
    let (cfg, base) = args.config(false)?;
    let set = load_data(&cfg, base.as_deref())?;
    let report = run_on(&cfg, &set, args.jobs)?;
    print_warnings(&report.warnings);
    report.write(&args.out)?;
    emit_plot_data(&report, &args.out)?;
    println!(
        "{}: {} runs ({} seeds), held-out accuracy {:.4} +- {:.4}",
        report.config.method,
        report.runs.len(),
        report.seed_count,
        report.summary.mean_acc,
        report.summary.stderr_acc
    );
    for f in &report.summary.per_fold {
        println!("  fold {}: {:.4} +- {:.4}", f.held_out, f.mean_acc, f.stderr_acc);
    }
    Ok(())
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print results as JSON.
    #[arg(long)]
    json: bool,
}

fn cmd_verify(args: &VerifyArgs) -> Result<bool> {
    let results = verify_suite(args.seed)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&results)?);
    } else {
        for r in &results {
            let tag = if r.passed { "PASS" } else { "FAIL" };
            println!("{tag} {:<32} {:>12.4e}  {}", r.name, r.value, r.bound);
        }
    }
    Ok(results.iter().all(|r| r.passed))
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated methods; AGG is always added.
    #[arg(long, value_delimiter = ',', default_value = "S_MLDG,FO_S_MLDG,FFO_S_MLDG")]
    methods: Vec<Method>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 100)]
    warmup: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    hp: HpArgs,
    /// Optional CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let set = match &args.data {
        Some(p) => DomainSet::load(p)?,
        None => synth_rotated(&(&SynthSpec::default()).into())?,
    };
    let mut cfg = BenchConfig {
        hidden: args.hidden.clone(),
        batch_size: args.batch_size,
        iters: args.iters,
        warmup: args.warmup,
        seed: args.seed,
        ..BenchConfig::default()
    };
    args.hp.overrides().apply(&mut cfg.hp);
    let table = benchmark_runtime(&args.methods, &cfg, &set)?;
    println!("{:<12} {:>14} {:>14} {:>8}", "method", "mean_s/iter", "std_s", "vs AGG");
    for r in &table.rows {
        println!(
            "{:<12} {:>14.3e} {:>14.3e} {:>8.2}",
            r.method.name(),
            r.mean_secs,
            r.std_secs,
            r.ratio_to_agg
        );
    }
    if let Some(p) = &args.out {
        std::fs::write(p, table.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long, default_value = "S_MLDG")]
    method: Method,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 600)]
    phase1: usize,
    #[arg(long, default_value_t = 600)]
    phase2: usize,
    #[arg(long, default_value_t = 10)]
    log_every: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, value_delimiter = ',', default_value = "16")]
    hidden: Vec<usize>,
    /// Restrict the phase-2 domain gradient to the domain head.
    #[arg(long)]
    head_only: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    hp: HpArgs,
    #[arg(long, default_value = "probe.csv")]
    out: PathBuf,
}

fn cmd_probe(args: &ProbeArgs) -> Result<()> {
    let set = match &args.data {
        Some(p) => DomainSet::load(p)?,
        None => synth_rotated(&(&SynthSpec::default()).into())?,
    };
    let mut sizes = vec![set.dim];
    sizes.extend(&args.hidden);
    sizes.push(set.classes);
    let mut hp = HyperParams {
        gamma: 0.05,
        ..HyperParams::default()
    };
    args.hp.overrides().apply(&mut hp);
    let cfg = ProbeConfig {
        spec: ModelSpec::mlp(sizes).with_domain_head(set.len()),
        schedule: ProbeSchedule {
            phase1_iters: args.phase1,
            phase2_iters: args.phase2,
            log_every: args.log_every,
        },
        method: args.method,
        hp,
        batch_size: args.batch_size,
        seed: args.seed,
        co_train: if args.head_only {
            CoTrain::HeadOnly
        } else {
            CoTrain::AllLayers
        },
    };
    let log = domain_probe(&set, &cfg)?;
    std::fs::write(&args.out, log.to_csv()).with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "{}: mean domain loss phase 1 {:.4}, phase 2 {:.4} -> {}",
        args.method,
        log.mean_domain_loss(1).unwrap_or(f64::NAN),
        log.mean_domain_loss(2).unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Gen(a) => cmd_gen(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Sweep(a) => cmd_sweep(a).map(|_| true),
        Command::Verify(a) => cmd_verify(a),
        Command::Bench(a) => cmd_bench(a).map(|_| true),
        Command::Probe(a) => cmd_probe(a).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
