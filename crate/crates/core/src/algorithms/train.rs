use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, ParamVector, ScalarFn};
use crate::domains::{sample_permutation, split, Domain, DomainSet, MinibatchSampler};
use crate::error::{Error, Result};
use crate::model::{self, init_params, Batch, ClassLoss, ModelSpec};

use super::undo::apply_per_domain;
use super::{
    agg_step, ffo_s_mldg_step, mean_off_diagonal, mldg_step, msgd_update, pairwise_dots, s_mldg_step,
    s_undo_bias_step, undo_bias_loss, undo_inference, HyperParams, OptimState, UndoBiasModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    Agg,
    Mldg,
    /// Sequential MLDG, backpropagating through inner gradients.
    SMldg,
    FoSMldg,
    FfoSMldg,
    Undo,
    SUndo,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Agg,
        Method::Mldg,
        Method::SMldg,
        Method::FoSMldg,
        Method::FfoSMldg,
        Method::Undo,
        Method::SUndo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Agg => "AGG",
            Method::Mldg => "MLDG",
            Method::SMldg => "S_MLDG",
            Method::FoSMldg => "FO_S_MLDG",
            Method::FfoSMldg => "FFO_S_MLDG",
            Method::Undo => "UNDO",
            Method::SUndo => "S_UNDO",
        }
    }

    fn uses_inner_steps(self) -> bool {
        matches!(self, Method::Mldg | Method::SMldg | Method::FoSMldg | Method::FfoSMldg)
    }

    fn is_undo(self) -> bool {
        matches!(self, Method::Undo | Method::SUndo)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// One leave-one-domain-out training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub spec: ModelSpec,
    pub hp: HyperParams,
    pub iters: usize,
    /// Samples per source domain per iteration.
    pub batch_size: usize,
    pub eval_every: usize,
    pub seed: u64,
    /// Index into the domain set of the domain excluded from training.
    pub held_out: usize,
    /// Fraction of each source domain used for training.
    pub train_frac: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iter: usize,
    /// Mean class loss of the inference parameters over the source training splits.
    pub loss: f64,
    pub heldout_acc: f64,
    /// Mean pairwise inner product of source-domain gradients at the inference parameters.
    pub alignment: f64,
}

/// Training samples drawn per domain, indexed by position in the domain set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleAudit {
    pub samples_seen: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainedParams {
    Single(ParamVector),
    Undo(UndoBiasModel),
}

impl TrainedParams {
    /// Parameters used on unseen domains.
    pub fn inference(&self) -> Result<ParamVector> {
        match self {
            TrainedParams::Single(p) => Ok(p.clone()),
            TrainedParams::Undo(m) => undo_inference(m),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: TrainedParams,
    pub metrics: Vec<MetricRow>,
    pub warnings: Vec<String>,
    pub audit: SampleAudit,
}

impl TrainOutcome {
    pub fn final_metrics(&self) -> &MetricRow {
        self.metrics.last().expect("at least the initial evaluation is logged")
    }
}

/// Hyperparameters that have no effect under `cfg.method` but differ from the defaults.
fn config_warnings(cfg: &TrainConfig, sources: usize) -> Vec<String> {
    let d = HyperParams::default();
    let hp = &cfg.hp;
    let m = cfg.method;
    let mut w = Vec::new();
    let mut ignored = |field: &str, differs: bool| {
        if differs {
            w.push(format!("{field} is ignored by {m}"));
        }
    };
    ignored("lambda", !m.is_undo() && hp.lambda != d.lambda);
    ignored("undo_norm", m != Method::Undo && hp.undo_norm != d.undo_norm);
    ignored("alpha", !m.uses_inner_steps() && hp.alpha != d.alpha);
    ignored("beta", !m.uses_inner_steps() && hp.beta != d.beta);
    ignored("eq3_strict", !matches!(m, Method::SMldg | Method::FoSMldg) && hp.eq3_strict);
    ignored("aggregate_mtrain", m != Method::Mldg && hp.aggregate_mtrain);
    ignored("ffo_momentum", m != Method::FfoSMldg && hp.ffo_momentum);
    ignored(
        "second_order",
        matches!(m, Method::SMldg | Method::FoSMldg | Method::FfoSMldg | Method::Agg) && !hp.second_order,
    );
    let needed = match m {
        Method::Mldg => Some(1),
        Method::SMldg | Method::FoSMldg => Some(sources.saturating_sub(1)),
        Method::FfoSMldg => Some(sources),
        _ => None,
    };
    if let Some(n) = needed {
        let k = hp.alpha.len();
        if k != 1 && k != n && !(m == Method::FfoSMldg && k + 1 == n) {
            w.push(format!(
                "{m} takes {n} inner steps but alpha lists {k} values; the last value is reused"
            ));
        }
    }
    w
}

fn validate(cfg: &TrainConfig, set: &DomainSet) -> Result<()> {
    cfg.spec.validate()?;
    cfg.hp.validate()?;
    if cfg.held_out >= set.len() {
        return Err(Error::Config(format!(
            "held_out {} is not one of the {} domains",
            cfg.held_out,
            set.len()
        )));
    }
    if cfg.spec.input_dim() != set.dim || cfg.spec.num_classes() != set.classes {
        return Err(Error::Config(format!(
            "model maps {} -> {} but data has {} features and {} classes",
            cfg.spec.input_dim(),
            cfg.spec.num_classes(),
            set.dim,
            set.classes
        )));
    }
    if cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(Error::Config("batch_size and eval_every must be positive".into()));
    }
    Ok(())
}

struct Evaluator<'a> {
    spec: &'a ModelSpec,
    sources: Vec<Batch>,
    target: &'a Domain,
}

impl Evaluator<'_> {
    fn row(&self, iter: usize, theta: &ParamVector) -> Result<MetricRow> {
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(self.sources.len());
        for b in &self.sources {
            let (l, g) = autodiff::value_and_grad(&ClassLoss::new(self.spec, b), theta)?;
            loss += l;
            grads.push(g);
        }
        Ok(MetricRow {
            iter,
            loss: loss / self.sources.len() as f64,
            heldout_acc: model::accuracy(self.spec, theta, &self.target.features, &self.target.labels)?,
            alignment: mean_off_diagonal(&pairwise_dots(&grads)?),
        })
    }
}

/// Runs `cfg.method` on every domain except `cfg.held_out` and tracks
/// accuracy on the whole held-out domain.
///
/// Each iteration draws one minibatch per source domain. Data order comes
/// from one random stream and trajectory choices from another, so methods
/// run with the same seed see the same minibatches.
pub fn train(cfg: &TrainConfig, set: &DomainSet) -> Result<TrainOutcome> {
    validate(cfg, set)?;
    let source_ids: Vec<usize> = (0..set.len()).filter(|&i| i != cfg.held_out).collect();
    let warnings = config_warnings(cfg, source_ids.len());

    let mut train_splits = Vec::with_capacity(source_ids.len());
    for &i in &source_ids {
        let (tr, _) = split(&set.domains[i], cfg.train_frac, cfg.seed)?;
        if cfg.batch_size > tr.len() {
            return Err(Error::Config(format!(
                "batch_size {} exceeds the {} training samples of domain {}",
                cfg.batch_size,
                tr.len(),
                tr.id
            )));
        }
        train_splits.push(tr);
    }
    let evaluator = Evaluator {
        spec: &cfg.spec,
        sources: train_splits.iter().map(Domain::as_batch).collect::<Result<_>>()?,
        target: &set.domains[cfg.held_out],
    };

    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    data_rng.set_stream(2 * cfg.held_out as u64);
    let mut path_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    path_rng.set_stream(2 * cfg.held_out as u64 + 1);
    let mut samplers: Vec<MinibatchSampler> = train_splits.iter().map(|d| MinibatchSampler::new(d.len())).collect();

    let theta0 = init_params(&cfg.spec, cfg.seed)?;
    let mut runner = MethodRunner::new(cfg.method, &cfg.spec, &cfg.hp, theta0, source_ids.len(), path_rng)?;
    let mut audit = SampleAudit {
        samples_seen: vec![0; set.len()],
    };
    let mut metrics = vec![evaluator.row(0, &runner.params().inference()?)?];

    for it in 1..=cfg.iters {
        let batches = samplers
            .iter_mut()
            .zip(&train_splits)
            .map(|(s, d)| s.next_batch(d, cfg.batch_size, &mut data_rng))
            .collect::<Result<Vec<_>>>()?;
        for b in &batches {
            for &id in b.domain_ids.as_deref().unwrap_or_default() {
                audit.samples_seen[id] += 1;
            }
        }
        runner.step(&batches)?;
        if it % cfg.eval_every == 0 || it == cfg.iters {
            metrics.push(evaluator.row(it, &runner.params().inference()?)?);
        }
    }

    Ok(TrainOutcome {
        params: runner.into_params(),
        metrics,
        warnings,
        audit,
    })
}

/// Optimizer side of one run: parameters, momentum buffers and the stream
/// that draws trajectories. Each [`MethodRunner::step`] consumes one
/// minibatch per source domain.
#[derive(Debug, Clone)]
pub struct MethodRunner {
    method: Method,
    spec: ModelSpec,
    hp: HyperParams,
    params: TrainedParams,
    states: Vec<OptimState>,
    path_rng: ChaCha8Rng,
}

impl MethodRunner {
    pub fn new(
        method: Method,
        spec: &ModelSpec,
        hp: &HyperParams,
        theta0: ParamVector,
        num_sources: usize,
        path_rng: ChaCha8Rng,
    ) -> Result<Self> {
        if num_sources < 2 {
            return Err(Error::InvalidArgument("training needs at least two source domains".into()));
        }
        let (params, copies) = if method.is_undo() {
            (TrainedParams::Undo(UndoBiasModel::replicate(&theta0, num_sources)?), num_sources)
        } else {
            (TrainedParams::Single(theta0.clone()), 1)
        };
        Ok(Self {
            method,
            spec: spec.clone(),
            hp: method_hyperparams(method, hp),
            params,
            states: vec![OptimState::zeros_like(&theta0); copies],
            path_rng,
        })
    }

    pub fn params(&self) -> &TrainedParams {
        &self.params
    }

    pub fn into_params(self) -> TrainedParams {
        self.params
    }

    /// One update from one minibatch per source domain (in domain order).
    pub fn step(&mut self, batches: &[Batch]) -> Result<()> {
        let hp = &self.hp;
        let losses: Vec<ClassLoss> = batches.iter().map(|b| ClassLoss::new(&self.spec, b)).collect();
        let dyn_losses: Vec<&dyn ScalarFn> = losses.iter().map(|l| l as &dyn ScalarFn).collect();
        self.params = match (&self.params, self.method) {
            (TrainedParams::Single(theta), Method::FfoSMldg) if !hp.ffo_momentum => {
                let ordered = order_losses(&dyn_losses, &mut self.path_rng)?;
                TrainedParams::Single(ffo_s_mldg_step(theta, &ordered, hp)?.theta)
            }
            (TrainedParams::Single(theta), method) => {
                let g = class_meta_gradient(method, theta, batches, &self.spec, hp, &mut self.path_rng)?;
                single_update(theta, &g, &mut self.states[0], hp)?
            }
            (TrainedParams::Undo(model), Method::Undo) => {
                let (_, grads) = undo_bias_loss(model, &dyn_losses, hp, hp.undo_norm)?;
                let (model, next) = apply_per_domain(model, &grads, hp, &self.states)?;
                self.states = next;
                TrainedParams::Undo(model)
            }
            (TrainedParams::Undo(model), Method::SUndo) => {
                let perm = sample_permutation(dyn_losses.len(), &mut self.path_rng)?;
                let (model, next, _) = s_undo_bias_step(model, &perm, &dyn_losses, hp, &self.states)?;
                self.states = next;
                TrainedParams::Undo(model)
            }
            _ => unreachable!("parameter kind follows the method"),
        };
        Ok(())
    }
}

/// `hp` with the inner-gradient mode fixed by the sequential MLDG variants.
pub(crate) fn method_hyperparams(method: Method, hp: &HyperParams) -> HyperParams {
    let mut hp = hp.clone();
    match method {
        Method::SMldg => hp.second_order = true,
        Method::FoSMldg => hp.second_order = false,
        _ => {}
    }
    hp
}

fn order_losses<'a>(losses: &[&'a dyn ScalarFn], rng: &mut ChaCha8Rng) -> Result<Vec<&'a dyn ScalarFn>> {
    let p = sample_permutation(losses.len(), rng)?;
    Ok(p.order.iter().map(|&i| losses[i]).collect())
}

/// Descent direction of a single-model method on one minibatch per source
/// domain. FFO returns its offset `theta - theta_tilde`. `hp` must already
/// carry the method's inner-gradient mode.
pub(crate) fn class_meta_gradient(
    method: Method,
    theta: &ParamVector,
    batches: &[Batch],
    spec: &ModelSpec,
    hp: &HyperParams,
    path_rng: &mut ChaCha8Rng,
) -> Result<ParamVector> {
    let losses: Vec<ClassLoss> = batches.iter().map(|b| ClassLoss::new(spec, b)).collect();
    let dyn_losses: Vec<&dyn ScalarFn> = losses.iter().map(|l| l as &dyn ScalarFn).collect();
    match method {
        Method::Agg => {
            let refs: Vec<&Batch> = batches.iter().collect();
            Ok(agg_step(theta, &refs, spec)?.grad)
        }
        Method::Mldg => {
            let test = path_rng.random_range(0..batches.len());
            let others = || (0..batches.len()).filter(move |&i| i != test);
            if hp.aggregate_mtrain {
                let rest: Vec<&Batch> = others().map(|i| &batches[i]).collect();
                let union = Batch::concat(&rest)?;
                let joined = ClassLoss::new(spec, &union);
                Ok(mldg_step(theta, &[&joined], dyn_losses[test], hp)?.grad)
            } else {
                let mtrn: Vec<&dyn ScalarFn> = others().map(|i| dyn_losses[i]).collect();
                Ok(mldg_step(theta, &mtrn, dyn_losses[test], hp)?.grad)
            }
        }
        Method::SMldg | Method::FoSMldg => {
            Ok(s_mldg_step(theta, &order_losses(&dyn_losses, path_rng)?, hp)?.grad)
        }
        Method::FfoSMldg => Ok(ffo_s_mldg_step(theta, &order_losses(&dyn_losses, path_rng)?, hp)?.offset),
        Method::Undo | Method::SUndo => Err(Error::InvalidArgument(format!(
            "{method} trains one model per domain and has no single meta-gradient"
        ))),
    }
}

fn single_update(theta: &ParamVector, g: &ParamVector, state: &mut OptimState, hp: &HyperParams) -> Result<TrainedParams> {
    let (next, s) = msgd_update(theta, g, state, hp)?;
    *state = s;
    Ok(TrainedParams::Single(next))
}
