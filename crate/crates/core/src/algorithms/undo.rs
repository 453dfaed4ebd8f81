use crate::autodiff::{ParamVector, ScalarFn, Tape, Var};
use crate::domains::Permutation;
use crate::error::{Error, Result};

use super::{msgd_update, HyperParams, NormMode, OptimState};

/// One parameter vector per source domain; inference uses their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct UndoBiasModel {
    pub per_domain_params: Vec<ParamVector>,
}

impl UndoBiasModel {
    pub fn new(per_domain_params: Vec<ParamVector>) -> Result<Self> {
        let first = per_domain_params
            .first()
            .ok_or_else(|| Error::InvalidArgument("Undo-Bias model needs at least one domain".into()))?;
        for p in &per_domain_params {
            first.check_layout(p)?;
        }
        Ok(Self { per_domain_params })
    }

    /// `n` copies of `theta`.
    pub fn replicate(theta: &ParamVector, n: usize) -> Result<Self> {
        Self::new(vec![theta.clone(); n])
    }

    pub fn len(&self) -> usize {
        self.per_domain_params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_domain_params.is_empty()
    }
}

pub fn undo_inference(model: &UndoBiasModel) -> Result<ParamVector> {
    ParamVector::mean(&model.per_domain_params)
}

fn leaves(tape: &mut Tape, model: &UndoBiasModel) -> Vec<Var> {
    model.per_domain_params.iter().map(|p| tape.param_leaf(p)).collect()
}

/// `v_0 + sum_j (v_j - v_0) / n`: equal inputs give a mean that is exactly
/// equal to them, so `theta_i - mean` is exactly zero and the norm penalty
/// takes its zero-gradient branch.
fn mean_of(tape: &mut Tape, vars: &[Var]) -> Var {
    let base = vars[0];
    let Some((&first, rest)) = vars[1..].split_first() else {
        return base;
    };
    let mut acc = tape.sub(first, base);
    for &v in rest {
        let d = tape.sub(v, base);
        acc = tape.add(acc, d);
    }
    let shift = tape.scale(acc, 1.0 / vars.len() as f64);
    tape.add(base, shift)
}

fn penalty(tape: &mut Tape, diff: Var, mode: NormMode) -> Var {
    match mode {
        NormMode::Norm => tape.norm(diff),
        NormMode::Squared => tape.sum_sq(diff),
    }
}

fn finish(tape: &mut Tape, total: Var, vars: &[Var], model: &UndoBiasModel) -> Result<(f64, Vec<ParamVector>)> {
    let grads = tape.gradients(total, vars)?;
    tape.check()?;
    let grads = grads
        .iter()
        .zip(&model.per_domain_params)
        .map(|(&g, p)| p.with_values(tape.value(g).data().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok((tape.scalar_value(total), grads))
}

fn check_counts(model: &UndoBiasModel, losses: &[&dyn ScalarFn]) -> Result<()> {
    if losses.len() != model.len() {
        return Err(Error::InvalidArgument(format!(
            "{} losses for {} domain models",
            losses.len(),
            model.len()
        )));
    }
    Ok(())
}

/// `sum_i L_i(theta_i) + lambda sum_i penalty(theta_i - mean_j theta_j)` and
/// its gradient with respect to each `theta_i`.
pub fn undo_bias_loss(
    model: &UndoBiasModel,
    losses: &[&dyn ScalarFn],
    hp: &HyperParams,
    norm_mode: NormMode,
) -> Result<(f64, Vec<ParamVector>)> {
    check_counts(model, losses)?;
    let mut tape = Tape::new();
    let vars = leaves(&mut tape, model);
    let mean = mean_of(&mut tape, &vars);
    let mut total = tape.scalar(0.0);
    for (&v, f) in vars.iter().zip(losses) {
        let l = f.build(&mut tape, v)?;
        let diff = tape.sub(v, mean);
        let p = penalty(&mut tape, diff, norm_mode);
        let reg = tape.scale(p, hp.lambda);
        let term = tape.add(l, reg);
        total = tape.add(total, term);
    }
    finish(&mut tape, total, &vars, model)
}

/// Path objective `sum_i L_{p[i]}(theta_{p[i]})
/// + lambda sum_{i>=2} ||theta_{p[i]} - mean_{j<i} theta_{p[j]}||^2` and its
/// gradient per domain model. `losses` is indexed by domain, not by path position.
pub fn s_undo_bias_loss(
    model: &UndoBiasModel,
    perm: &Permutation,
    losses: &[&dyn ScalarFn],
    hp: &HyperParams,
) -> Result<(f64, Vec<ParamVector>)> {
    check_counts(model, losses)?;
    if perm.len() != model.len() || !perm.is_bijection() {
        return Err(Error::InvalidArgument("permutation must cover every domain once".into()));
    }
    let mut tape = Tape::new();
    let vars = leaves(&mut tape, model);
    let mut total = tape.scalar(0.0);
    for (i, &d) in perm.order.iter().enumerate() {
        let l = losses[d].build(&mut tape, vars[d])?;
        total = tape.add(total, l);
        if i > 0 {
            let path: Vec<Var> = perm.order[..i].iter().map(|&j| vars[j]).collect();
            let running = mean_of(&mut tape, &path);
            let diff = tape.sub(vars[d], running);
            let p = tape.sum_sq(diff);
            let reg = tape.scale(p, hp.lambda);
            total = tape.add(total, reg);
        }
    }
    finish(&mut tape, total, &vars, model)
}

/// One momentum-SGD step on every domain model from the path objective.
pub fn s_undo_bias_step(
    model: &UndoBiasModel,
    perm: &Permutation,
    losses: &[&dyn ScalarFn],
    hp: &HyperParams,
    states: &[OptimState],
) -> Result<(UndoBiasModel, Vec<OptimState>, f64)> {
    let (objective, grads) = s_undo_bias_loss(model, perm, losses, hp)?;
    let (model, states) = apply_per_domain(model, &grads, hp, states)?;
    Ok((model, states, objective))
}

pub(crate) fn apply_per_domain(
    model: &UndoBiasModel,
    grads: &[ParamVector],
    hp: &HyperParams,
    states: &[OptimState],
) -> Result<(UndoBiasModel, Vec<OptimState>)> {
    if states.len() != model.len() {
        return Err(Error::InvalidArgument("one optimizer state per domain model required".into()));
    }
    let mut params = Vec::with_capacity(model.len());
    let mut next_states = Vec::with_capacity(model.len());
    for ((p, g), s) in model.per_domain_params.iter().zip(grads).zip(states) {
        let (p, s) = msgd_update(p, g, s, hp)?;
        params.push(p);
        next_states.push(s);
    }
    Ok((UndoBiasModel::new(params)?, next_states))
}
