//! Numerical checks of the expansions behind the sequential methods, plus
//! instrumentation of how domain-specific the learned features are.
//!
//! Every function here reads parameters without modifying them.

mod probe;
mod surrogate;

pub use probe::{domain_probe, CoTrain, ProbeConfig, ProbeLog, ProbeRow, ProbeSchedule};
pub use surrogate::{LeastSquares, QuadraticSurrogate};

use std::fmt::Write as _;
use std::path::Path;

use crate::algorithms::{ffo_inner_loop, pairwise_dots, HyperParams};
use crate::autodiff::{self, ParamVector, ScalarFn};
use crate::domains::DomainSet;
use crate::error::{Error, Result};
use crate::model::{penultimate_features, ModelSpec};

/// `L2(theta - alpha g1) - [L2(theta) - alpha g1 . g2]` with `g_i = grad L_i(theta)`.
pub fn taylor_residual(theta: &ParamVector, l1: &dyn ScalarFn, l2: &dyn ScalarFn, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument("alpha must be positive".into()));
    }
    let g1 = autodiff::grad(l1, theta)?;
    let (v2, g2) = autodiff::value_and_grad(l2, theta)?;
    let shifted = autodiff::eval(l2, &theta.add_scaled(&g1, -alpha)?)?;
    Ok(shifted - (v2 - alpha * g1.dot(&g2)?))
}

/// Pairwise `grad L_i . grad L_j` at `theta`; symmetric by construction.
pub fn grad_alignment(theta: &ParamVector, losses: &[&dyn ScalarFn]) -> Result<Vec<Vec<f64>>> {
    if losses.len() < 2 {
        return Err(Error::InvalidArgument("alignment needs at least two losses".into()));
    }
    let grads = losses
        .iter()
        .map(|f| autodiff::grad(*f, theta))
        .collect::<Result<Vec<_>>>()?;
    pairwise_dots(&grads)
}

/// Central-difference gradient with step `h` per coordinate.
pub fn fd_grad(f: &dyn ScalarFn, theta: &ParamVector, h: f64) -> Result<ParamVector> {
    let mut out = Vec::with_capacity(theta.len());
    let mut x = theta.values().to_vec();
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = autodiff::eval(f, &theta.with_values(x.clone())?)?;
        x[i] = orig - h;
        let down = autodiff::eval(f, &theta.with_values(x.clone())?)?;
        x[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    theta.with_values(out)
}

/// Central difference of the gradient along `v`.
pub fn fd_hvp(f: &dyn ScalarFn, theta: &ParamVector, v: &ParamVector, h: f64) -> Result<ParamVector> {
    let up = autodiff::grad(f, &theta.add_scaled(v, h)?)?;
    let down = autodiff::grad(f, &theta.add_scaled(v, -h)?)?;
    up.sub(&down)?.scale(1.0 / (2.0 * h))
}

/// `||a - b|| / ||b||`, or `||a - b||` when `b` is zero.
pub fn relative_error(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    let d = a.sub(b)?.norm();
    let n = b.norm();
    Ok(if n > 0.0 { d / n } else { d })
}

/// Order-averaged FFO step gradients against their second-order prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct FfoExpectation {
    /// Mean over both orders of `g_1 + g_2` from actual inner loops.
    pub lhs: ParamVector,
    /// `gbar_1 + gbar_2 - alpha/2 (H_1 gbar_2 + H_2 gbar_1)` at `theta`.
    pub rhs: ParamVector,
    /// `||lhs - rhs|| / ||rhs||`
    pub gap: f64,
}

/// Runs the two-domain FFO inner loop (with `beta = 1`) in both orders on
/// fixed losses and compares the averaged step gradients with the expansion
/// around `theta`.
pub fn ffo_expectation_check(
    theta: &ParamVector,
    l1: &dyn ScalarFn,
    l2: &dyn ScalarFn,
    alpha: f64,
) -> Result<FfoExpectation> {
    let hp = HyperParams {
        alpha: vec![alpha],
        beta: 1.0,
        ..HyperParams::default()
    };
    let step_sum = |order: [&dyn ScalarFn; 2]| -> Result<ParamVector> {
        let (_, rec) = ffo_inner_loop(theta, &order, &hp)?;
        rec.per_step_grads[0].add_scaled(&rec.per_step_grads[1], 1.0)
    };
    let forward = step_sum([l1, l2])?;
    let backward = step_sum([l2, l1])?;
    let lhs = forward.add_scaled(&backward, 1.0)?.scale(0.5)?;

    let g1 = autodiff::grad(l1, theta)?;
    let g2 = autodiff::grad(l2, theta)?;
    let h1g2 = autodiff::hvp(l1, theta, &g2)?;
    let h2g1 = autodiff::hvp(l2, theta, &g1)?;
    let rhs = g1
        .add_scaled(&g2, 1.0)?
        .add_scaled(&h1g2.add_scaled(&h2g1, 1.0)?, -alpha / 2.0)?;
    let gap = lhs.sub(&rhs)?.norm() / rhs.norm();
    Ok(FfoExpectation { lhs, rhs, gap })
}

/// Penultimate features of every sample as CSV with header
/// `f1,...,fk,class,domain`. Values use the shortest exact decimal form.
pub fn embeddings_csv(theta: &ParamVector, set: &DomainSet, spec: &ModelSpec) -> Result<String> {
    let k = spec.feature_dim();
    let mut out = String::new();
    let header: Vec<String> = (1..=k).map(|i| format!("f{i}")).collect();
    writeln!(out, "{},class,domain", header.join(",")).expect("writing to a String");
    for dom in &set.domains {
        let feats = penultimate_features(spec, theta, &dom.features)?;
        for r in 0..dom.len() {
            for v in feats.row_slice(r) {
                write!(out, "{v},").expect("writing to a String");
            }
            writeln!(out, "{},{}", dom.labels[r], dom.id).expect("writing to a String");
        }
    }
    Ok(out)
}

pub fn export_embeddings(theta: &ParamVector, set: &DomainSet, spec: &ModelSpec, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv = embeddings_csv(theta, set, spec)?;
    std::fs::write(path, csv).map_err(|e| Error::io(path, e))
}
