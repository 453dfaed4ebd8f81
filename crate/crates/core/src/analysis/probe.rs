use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::algorithms::{class_meta_gradient, method_hyperparams, msgd_update, HyperParams, Method, OptimState};
use crate::autodiff::{self, ParamVector};
use crate::domains::{DomainSet, MinibatchSampler};
use crate::error::{Error, Result};
use crate::model::{self, init_params, Batch, DomainHeadLoss, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSchedule {
    /// Iterations training only the domain objective.
    pub phase1_iters: usize,
    /// Iterations of the category method with the domain head co-trained.
    pub phase2_iters: usize,
    pub log_every: usize,
}

impl Default for ProbeSchedule {
    fn default() -> Self {
        Self {
            phase1_iters: 600,
            phase2_iters: 600,
            log_every: 10,
        }
    }
}

/// Which parameters the domain loss updates during phase 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoTrain {
    /// Domain gradient reaches the shared feature layers as well as the head.
    #[default]
    AllLayers,
    /// Domain gradient is restricted to the head; features follow the category method alone.
    HeadOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub iter: usize,
    pub domain_loss: f64,
    pub class_loss: f64,
    pub phase: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeLog {
    pub rows: Vec<ProbeRow>,
}

impl ProbeLog {
    /// Mean domain loss over the rows of `phase`, `None` if it has none.
    pub fn mean_domain_loss(&self, phase: u8) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.phase == phase).map(|r| r.domain_loss).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// `iter,domain_loss,class_loss,phase`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,domain_loss,class_loss,phase\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.iter, r.domain_loss, r.class_loss, r.phase).expect("writing to a String");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub spec: ModelSpec,
    pub schedule: ProbeSchedule,
    pub method: Method,
    pub hp: HyperParams,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub co_train: CoTrain,
}

/// Two-phase domain-classifier probe over every domain of `set`.
///
/// Phase 1 minimises the domain-head loss. Phase 2 follows the category
/// method's descent direction plus the domain-head gradient (restricted
/// according to `co_train`). Both losses are logged on the pooled data every
/// `log_every` iterations.
pub fn domain_probe(set: &DomainSet, cfg: &ProbeConfig) -> Result<ProbeLog> {
    let s = cfg.schedule;
    if s.phase1_iters == 0 || s.phase2_iters == 0 || s.log_every == 0 {
        return Err(Error::Config("probe phases and log interval must be positive".into()));
    }
    if cfg.spec.aux_domain_head != Some(set.len()) {
        return Err(Error::Config(format!(
            "probe needs a {}-way domain head on the model",
            set.len()
        )));
    }
    cfg.hp.validate()?;
    let hp = method_hyperparams(cfg.method, &cfg.hp);
    let spec = &cfg.spec;

    let pooled_parts = set.domains.iter().map(|d| d.as_batch()).collect::<Result<Vec<_>>>()?;
    let pooled = Batch::concat(&pooled_parts.iter().collect::<Vec<_>>())?;
    let head_mask = head_mask(spec)?;

    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut path_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    path_rng.set_stream(1);
    let mut samplers: Vec<MinibatchSampler> = set.domains.iter().map(|d| MinibatchSampler::new(d.len())).collect();
    let mut theta = init_params(spec, cfg.seed)?;
    let mut state = OptimState::zeros_like(&theta);
    let mut rows = Vec::new();

    for it in 1..=s.phase1_iters + s.phase2_iters {
        let batches = samplers
            .iter_mut()
            .zip(&set.domains)
            .map(|(smp, d)| smp.next_batch(d, cfg.batch_size, &mut data_rng))
            .collect::<Result<Vec<_>>>()?;
        let joined = Batch::concat(&batches.iter().collect::<Vec<_>>())?;
        let domain_grad = autodiff::grad(&DomainHeadLoss::new(spec, &joined), &theta)?;
        let phase = if it <= s.phase1_iters { 1 } else { 2 };
        let g = if phase == 1 {
            domain_grad
        } else {
            let domain_grad = match cfg.co_train {
                CoTrain::AllLayers => domain_grad,
                CoTrain::HeadOnly => masked(&domain_grad, &head_mask)?,
            };
            class_meta_gradient(cfg.method, &theta, &batches, spec, &hp, &mut path_rng)?.add_scaled(&domain_grad, 1.0)?
        };
        let (next, st) = msgd_update(&theta, &g, &state, &hp)?;
        theta = next;
        state = st;
        if it % s.log_every == 0 {
            rows.push(ProbeRow {
                iter: it,
                domain_loss: model::domain_head_loss(&theta, &pooled, spec)?,
                class_loss: model::class_loss(&theta, &pooled, spec)?,
                phase,
            });
        }
    }
    Ok(ProbeLog { rows })
}

fn head_mask(spec: &ModelSpec) -> Result<Vec<bool>> {
    let layout = spec.layout();
    let mut mask = vec![false; layout.len()];
    for name in ["dom_w", "dom_b"] {
        let seg = layout
            .segment(name)
            .ok_or_else(|| Error::Config("model has no domain head".into()))?;
        mask[seg.range()].fill(true);
    }
    Ok(mask)
}

fn masked(g: &ParamVector, mask: &[bool]) -> Result<ParamVector> {
    g.with_values(g.values().iter().zip(mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect())
}
