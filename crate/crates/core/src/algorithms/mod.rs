//! Training algorithms: aggregation, MLDG, sequential MLDG (full, first-order
//! and fast first-order), Undo-Bias and its sequential variant, plus the
//! momentum SGD optimizer used for every meta update.
//!
//! Step functions are pure: they take parameters and per-domain losses and
//! return gradients or new parameters. The training loop in [`train`] owns
//! all randomness and optimizer state.

mod meta;
mod train;
mod undo;

pub use meta::{agg_step, ffo_inner_loop, ffo_s_mldg_step, mldg_step, s_mldg_step, FfoOutcome, MetaGradient};
pub(crate) use train::{class_meta_gradient, method_hyperparams};
pub use train::{train, Method, MethodRunner, MetricRow, SampleAudit, TrainConfig, TrainOutcome, TrainedParams};
pub use undo::{s_undo_bias_loss, s_undo_bias_step, undo_bias_loss, undo_inference, UndoBiasModel};

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamVector;
use crate::error::{Error, Result};

/// Penalty applied to `theta_i - mean(theta)` in the Undo-Bias objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// `||x||`, with zero gradient at `x = 0`.
    #[default]
    Norm,
    /// `||x||^2`
    Squared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    /// Inner step sizes, one per inner step. A shorter list reuses its last entry.
    pub alpha: Vec<f64>,
    pub beta: f64,
    /// Meta step size.
    pub gamma: f64,
    pub lambda: f64,
    /// Original Undo-Bias weights; only the equivalence cross-check reads them.
    pub lambda1: f64,
    pub lambda2: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Backpropagate through inner gradients (false: first-order).
    pub second_order: bool,
    /// Inner points use gradients of the unweighted previous losses taken at
    /// the original parameters, instead of the accumulated objective.
    pub eq3_strict: bool,
    /// MLDG meta-train losses come from one concatenated batch instead of a
    /// per-domain sum.
    pub aggregate_mtrain: bool,
    pub undo_norm: NormMode,
    /// Route the FFO offset through momentum SGD instead of the plain update.
    pub ffo_momentum: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha: vec![0.1],
            beta: 1.0,
            gamma: 0.1,
            lambda: 0.0,
            lambda1: 1.0,
            lambda2: 1.0,
            momentum: 0.9,
            weight_decay: 5e-5,
            second_order: true,
            eq3_strict: false,
            aggregate_mtrain: false,
            undo_norm: NormMode::Norm,
            ffo_momentum: false,
        }
    }
}

impl HyperParams {
    /// Step size of inner step `i` (0-based).
    pub fn alpha_at(&self, i: usize) -> f64 {
        match self.alpha.len() {
            0 => 0.0,
            n => self.alpha[i.min(n - 1)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if self.alpha.is_empty() {
            return bad("alpha must list at least one step size");
        }
        if self.alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return bad("alpha entries must be finite and non-negative");
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return bad("gamma must be positive");
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad("beta must be non-negative");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }
}

/// Momentum buffer for [`msgd_update`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub velocity: ParamVector,
}

impl OptimState {
    pub fn zeros_like(theta: &ParamVector) -> Self {
        Self {
            velocity: ParamVector::zeros(theta.layout().clone()),
        }
    }
}

/// `v' = momentum v + g + wd theta`, `theta' = theta - gamma v'`.
pub fn msgd_update(
    theta: &ParamVector,
    g: &ParamVector,
    state: &OptimState,
    hp: &HyperParams,
) -> Result<(ParamVector, OptimState)> {
    theta.check_layout(g)?;
    theta.check_layout(&state.velocity)?;
    if let Some(i) = g.values().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(format!("gradient entry {i}")));
    }
    let v: Vec<f64> = state
        .velocity
        .values()
        .iter()
        .zip(g.values())
        .zip(theta.values())
        .map(|((v, g), t)| hp.momentum * v + g + hp.weight_decay * t)
        .collect();
    let velocity = theta.with_values(v)?;
    let theta = theta.add_scaled(&velocity, -hp.gamma)?;
    Ok((theta, OptimState { velocity }))
}

/// Per-step gradients of one trajectory and their pairwise inner products.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientRecord {
    pub per_step_grads: Vec<ParamVector>,
    /// `[i][j] = g_i . g_j`, symmetric.
    pub pairwise_inner_products: Vec<Vec<f64>>,
    /// Unweighted loss of each step, at the point where it was evaluated.
    pub losses: Vec<f64>,
}

impl GradientRecord {
    pub fn new(per_step_grads: Vec<ParamVector>, losses: Vec<f64>) -> Result<Self> {
        let pairwise_inner_products = pairwise_dots(&per_step_grads)?;
        Ok(Self {
            per_step_grads,
            pairwise_inner_products,
            losses,
        })
    }

    pub fn len(&self) -> usize {
        self.per_step_grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_step_grads.is_empty()
    }

    /// Mean of the off-diagonal inner products (0 for a single step).
    pub fn mean_alignment(&self) -> f64 {
        mean_off_diagonal(&self.pairwise_inner_products)
    }
}

/// Symmetric Gram matrix; each pair is computed once and mirrored.
pub(crate) fn pairwise_dots(grads: &[ParamVector]) -> Result<Vec<Vec<f64>>> {
    let n = grads.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let d = grads[i].dot(&grads[j])?;
            m[i][j] = d;
            m[j][i] = d;
        }
    }
    Ok(m)
}

pub(crate) fn mean_off_diagonal(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    if n < 2 {
        return 0.0;
    }
    let sum: f64 = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| m[i][j])
        .sum();
    sum / (n * (n - 1)) as f64
}
