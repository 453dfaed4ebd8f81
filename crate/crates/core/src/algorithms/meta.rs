use crate::autodiff::{self, ParamVector, ScalarFn, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Batch, ClassLoss, ModelSpec};

use super::{GradientRecord, HyperParams};

/// Meta-gradient of one step together with the objective value and the
/// per-step breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaGradient {
    pub grad: ParamVector,
    pub objective: f64,
    pub record: GradientRecord,
}

/// Gradient of the mean class loss over the union of `batches`.
pub fn agg_step(theta: &ParamVector, batches: &[&Batch], spec: &ModelSpec) -> Result<MetaGradient> {
    if batches.is_empty() {
        return Err(Error::InvalidArgument("aggregation needs at least one batch".into()));
    }
    let union = Batch::concat(batches)?;
    let (objective, grad) = autodiff::value_and_grad(&ClassLoss::new(spec, &union), theta)?;
    let record = GradientRecord::new(vec![grad.clone()], vec![objective])?;
    Ok(MetaGradient {
        grad,
        objective,
        record,
    })
}

/// Sum of several losses evaluated at the same parameters.
struct SumOf<'a>(&'a [&'a dyn ScalarFn]);

impl ScalarFn for SumOf<'_> {
    fn build(&self, tape: &mut Tape, theta: Var) -> Result<Var> {
        let mut acc = self.0[0].build(tape, theta)?;
        for f in &self.0[1..] {
            let v = f.build(tape, theta)?;
            acc = tape.add(acc, v);
        }
        Ok(acc)
    }
}

/// Gradient of `L1(theta) + beta L2(theta - alpha grad L1(theta))`, where `L1`
/// sums the meta-train losses. First-order mode treats `grad L1` as constant.
pub fn mldg_step(
    theta: &ParamVector,
    mtrn: &[&dyn ScalarFn],
    mtst: &dyn ScalarFn,
    hp: &HyperParams,
) -> Result<MetaGradient> {
    if mtrn.is_empty() {
        return Err(Error::InvalidArgument("MLDG needs at least one meta-train loss".into()));
    }
    let train = SumOf(mtrn);
    let hp = HyperParams {
        eq3_strict: false,
        ..hp.clone()
    };
    s_mldg_step(theta, &[&train, mtst], &hp)
}

/// Sequential meta-gradient over losses already ordered by a trajectory.
///
/// The objective starts at `L = L_1(theta)`. Step `i >= 2` adds
/// `beta L_i(theta - alpha_{i-1} grad L)` where `grad L` is the gradient of
/// the objective accumulated so far, always taken at the original `theta`.
/// With `eq3_strict` the shift direction is instead the gradient of the
/// unweighted sum `L_1 + ... + L_{i-1}` evaluated at `theta`. First-order mode
/// detaches every shift direction.
///
/// The record's step `i` gradient is step `i`'s contribution to the returned
/// meta-gradient; the contributions sum to it.
pub fn s_mldg_step(theta: &ParamVector, losses: &[&dyn ScalarFn], hp: &HyperParams) -> Result<MetaGradient> {
    let (first_fn, rest) = losses
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("trajectory needs at least one loss".into()))?;
    let mut tape = Tape::new();
    let th = tape.param_leaf(theta);
    let first = first_fn.build(&mut tape, th)?;
    let mut total = first;
    let mut strict_sum = first;
    let mut terms = vec![first];
    let mut cumulative = Vec::with_capacity(losses.len());

    for (k, f) in rest.iter().enumerate() {
        let g_total = tape.grad(total, th)?;
        cumulative.push(g_total);
        let direction = if hp.eq3_strict && k > 0 {
            tape.grad(strict_sum, th)?
        } else {
            g_total
        };
        let direction = if hp.second_order {
            direction
        } else {
            tape.detach(direction)
        };
        let shifted = tape.axpy(th, hp.alpha_at(k), direction);
        let li = f.build(&mut tape, shifted)?;
        terms.push(li);
        let weighted = tape.scale(li, hp.beta);
        total = tape.add(total, weighted);
        if hp.eq3_strict && k + 1 < rest.len() {
            let at_theta = f.build(&mut tape, th)?;
            strict_sum = tape.add(strict_sum, at_theta);
        }
    }
    let meta = tape.grad(total, th)?;
    cumulative.push(meta);
    tape.check()?;

    let values = |v: Var| tape.value(v).data().to_vec();
    let mut per_step = Vec::with_capacity(cumulative.len());
    let mut prev = vec![0.0; theta.len()];
    for &c in &cumulative {
        let cur = values(c);
        per_step.push(theta.with_values(cur.iter().zip(&prev).map(|(a, b)| a - b).collect())?);
        prev = cur;
    }
    let grad = theta.with_values(prev)?;
    let record = GradientRecord::new(per_step, terms.iter().map(|&t| tape.scalar_value(t)).collect())?;
    Ok(MetaGradient {
        grad,
        objective: tape.scalar_value(total),
        record,
    })
}

/// Result of one fast first-order step.
#[derive(Debug, Clone, PartialEq)]
pub struct FfoOutcome {
    /// `theta + gamma (theta_tilde - theta)`
    pub theta: ParamVector,
    pub theta_tilde: ParamVector,
    /// `theta - theta_tilde`, usable as a meta-gradient.
    pub offset: ParamVector,
    pub record: GradientRecord,
}

/// Sequential SGD through the trajectory: `g_i = beta grad L_i(theta_tilde)`,
/// `theta_tilde -= alpha_i g_i`. Returns the end point and the `g_i`.
pub fn ffo_inner_loop(
    theta: &ParamVector,
    losses: &[&dyn ScalarFn],
    hp: &HyperParams,
) -> Result<(ParamVector, GradientRecord)> {
    if losses.is_empty() {
        return Err(Error::InvalidArgument("trajectory needs at least one loss".into()));
    }
    let mut tilde = theta.clone();
    let mut grads = Vec::with_capacity(losses.len());
    let mut values = Vec::with_capacity(losses.len());
    for (i, f) in losses.iter().enumerate() {
        let (l, g) = autodiff::value_and_grad(*f, &tilde)?;
        let g = g.scale(hp.beta)?;
        tilde = tilde.add_scaled(&g, -hp.alpha_at(i))?;
        grads.push(g);
        values.push(l);
    }
    Ok((tilde, GradientRecord::new(grads, values)?))
}

pub fn ffo_s_mldg_step(theta: &ParamVector, losses: &[&dyn ScalarFn], hp: &HyperParams) -> Result<FfoOutcome> {
    let (theta_tilde, record) = ffo_inner_loop(theta, losses, hp)?;
    let offset = theta.sub(&theta_tilde)?;
    let updated = theta.add_scaled(&offset, -hp.gamma)?;
    Ok(FfoOutcome {
        theta: updated,
        theta_tilde,
        offset,
        record,
    })
}
