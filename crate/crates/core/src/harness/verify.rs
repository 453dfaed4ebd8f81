use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::algorithms::{
    ffo_inner_loop, msgd_update, s_mldg_step, s_undo_bias_loss, undo_bias_loss, HyperParams, NormMode,
    UndoBiasModel,
};
use crate::analysis::{
    fd_grad, fd_hvp, ffo_expectation_check, relative_error, taylor_residual, LeastSquares, QuadraticSurrogate,
};
use crate::autodiff::{self, ParamVector, ScalarFn, Tape, Tensor, Var};
use crate::domains::{sample_permutation, synth_rotated, Permutation, RotatedClusters};
use crate::error::{Error, Result};
use crate::model::{init_params, penultimate_features, Batch, ClassLoss, ModelSpec};

/// One numerical check: the measured quantity and the bound it must meet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub value: f64,
    /// Human-readable bound, e.g. `<= 1e-10` or `in [3.6, 4.4]`.
    pub bound: String,
    pub passed: bool,
}

impl CheckOutcome {
    fn at_most(name: &str, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound: format!("<= {limit:e}"),
            passed: value <= limit,
        }
    }

    fn within(name: &str, value: f64, lo: f64, hi: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound: format!("in [{lo}, {hi}]"),
            passed: (lo..=hi).contains(&value),
        }
    }
}

/// Small MLP problem: one full-batch class loss per domain.
struct Fixture {
    spec: ModelSpec,
    batches: Vec<Batch>,
    theta: ParamVector,
}

impl Fixture {
    fn new(seed: u64, domains: usize) -> Result<Self> {
        let set = synth_rotated(&RotatedClusters {
            num_domains: domains,
            classes: 3,
            n_per_domain: 20,
            angle_step_deg: 25.0,
            noise_sd: 0.3,
            seed,
        })?;
        let spec = ModelSpec::mlp(vec![2, 8, 3]);
        let batches = set.domains.iter().map(|d| d.as_batch()).collect::<Result<_>>()?;
        let theta = init_params(&spec, seed)?;
        Ok(Self { spec, batches, theta })
    }

    fn losses(&self) -> Vec<ClassLoss<'_>> {
        self.batches.iter().map(|b| ClassLoss::new(&self.spec, b)).collect()
    }

    /// Which hidden units are active on each sample.
    fn pattern(&self, theta: &ParamVector) -> Result<Vec<bool>> {
        let mut out = Vec::new();
        for b in &self.batches {
            out.extend(penultimate_features(&self.spec, theta, &b.features)?.data().iter().map(|&v| v > 0.0));
        }
        Ok(out)
    }

    /// Whether every step `-a grad L_i(theta)` keeps the activation pattern of `theta`.
    fn smooth_for_steps(&self, steps: &[f64]) -> Result<bool> {
        let base = self.pattern(&self.theta)?;
        for f in self.losses() {
            let g = autodiff::grad(&f, &self.theta)?;
            for &a in steps {
                if self.pattern(&self.theta.add_scaled(&g, -a)?)? != base {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    /// `count` fixtures from consecutive seeds starting at `seed`, skipping
    /// those where a step of the given sizes crosses an activation boundary.
    /// Expansions in the step size only hold away from those boundaries.
    fn smooth(seed: u64, domains: usize, steps: &[f64], count: usize) -> Result<Vec<Self>> {
        let mut out = Vec::with_capacity(count);
        for s in seed..seed + 100 * count as u64 {
            let fx = Self::new(s, domains)?;
            if fx.smooth_for_steps(steps)? {
                out.push(fx);
                if out.len() == count {
                    return Ok(out);
                }
            }
        }
        Err(Error::InvalidArgument("no seed gives a smooth region".into()))
    }
}

fn as_dyn<'a>(losses: &'a [ClassLoss<'a>]) -> Vec<&'a dyn ScalarFn> {
    losses.iter().map(|l| l as &dyn ScalarFn).collect()
}

fn gradient_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let (mut worst_grad, mut worst_hvp) = (0.0f64, 0.0f64);
    for s in seed..seed + 10 {
        let fx = Fixture::new(s, 2)?;
        let losses = fx.losses();
        let f = &losses[0];
        let g = autodiff::grad(f, &fx.theta)?;
        worst_grad = worst_grad.max(relative_error(&g, &fd_grad(f, &fx.theta, 1e-5)?)?);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let v = fx
            .theta
            .with_values((0..fx.theta.len()).map(|_| StandardNormal.sample(&mut rng)).collect())?;
        let hv = autodiff::hvp(f, &fx.theta, &v)?;
        worst_hvp = worst_hvp.max(relative_error(&hv, &fd_hvp(f, &fx.theta, &v, 1e-5)?)?);
    }
    Ok(vec![
        CheckOutcome::at_most("gradient_vs_finite_difference", worst_grad, 1e-4),
        CheckOutcome::at_most("hvp_vs_finite_difference", worst_hvp, 1e-3),
    ])
}

fn eq3_collapse(seed: u64) -> Result<CheckOutcome> {
    let fx = Fixture::new(seed, 3)?;
    let losses = fx.losses();
    let dl = as_dyn(&losses);
    let beta = 1.3;
    let mut want = autodiff::grad(dl[0], &fx.theta)?;
    for f in &dl[1..] {
        want = want.add_scaled(&autodiff::grad(*f, &fx.theta)?, beta)?;
    }
    let mut worst = 0.0f64;
    for second_order in [true, false] {
        let hp = HyperParams {
            alpha: vec![0.0],
            beta,
            second_order,
            ..HyperParams::default()
        };
        let got = s_mldg_step(&fx.theta, &dl, &hp)?.grad;
        worst = worst.max(got.max_abs_diff(&want));
    }
    Ok(CheckOutcome::at_most("zero_alpha_collapse", worst, 1e-12))
}

fn fo_identity(seed: u64) -> Result<CheckOutcome> {
    let fx = Fixture::new(seed, 3)?;
    let losses = fx.losses();
    let dl = as_dyn(&losses);
    let hp = HyperParams {
        alpha: vec![0.05, 0.08],
        beta: 1.2,
        second_order: false,
        ..HyperParams::default()
    };
    let got = s_mldg_step(&fx.theta, &dl, &hp)?.grad;

    let th = &fx.theta;
    let g1 = autodiff::grad(dl[0], th)?;
    let th1 = th.add_scaled(&g1, -hp.alpha[0])?;
    let g2 = autodiff::grad(dl[1], &th1)?;
    let dir2 = g1.add_scaled(&g2, hp.beta)?;
    let th2 = th.add_scaled(&dir2, -hp.alpha[1])?;
    let g3 = autodiff::grad(dl[2], &th2)?;
    let want = dir2.add_scaled(&g3, hp.beta)?;
    Ok(CheckOutcome::at_most("first_order_identity", relative_error(&got, &want)?, 1e-10))
}

fn ffo_telescoping(seed: u64) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    for n in 2..=4 {
        let fx = Fixture::new(seed, n)?;
        let losses = fx.losses();
        let hp = HyperParams {
            alpha: vec![0.1],
            beta: 1.5,
            ..HyperParams::default()
        };
        let (tilde, rec) = ffo_inner_loop(&fx.theta, &as_dyn(&losses), &hp)?;
        let mut sum = ParamVector::zeros(fx.theta.layout().clone());
        for g in &rec.per_step_grads {
            sum = sum.add_scaled(g, hp.alpha[0])?;
        }
        worst = worst.max(fx.theta.sub(&tilde)?.max_abs_diff(&sum));
    }
    Ok(CheckOutcome::at_most("ffo_offset_telescoping", worst, 1e-14))
}

fn ffo_expectation(seed: u64) -> Result<Vec<CheckOutcome>> {
    let th = ParamVector::from_flat(vec![0.3, -0.2, 1.0, 0.5, -0.7])?;
    let (q1, q2) = (QuadraticSurrogate::random(5, seed), QuadraticSurrogate::random(5, seed + 1));
    let quad_gap = ffo_expectation_check(&th, &q1, &q2, 0.1)?.gap;

    let alpha = 1e-2;
    let fx = Fixture::smooth(seed, 2, &[alpha, alpha / 2.0], 1)?.remove(0);
    let losses = fx.losses();
    let big = ffo_expectation_check(&fx.theta, &losses[0], &losses[1], alpha)?.gap;
    let small = ffo_expectation_check(&fx.theta, &losses[0], &losses[1], alpha / 2.0)?.gap;
    Ok(vec![
        CheckOutcome::at_most("ffo_expectation_quadratic_gap", quad_gap, 1e-10),
        CheckOutcome::within("ffo_expectation_mlp_gap_ratio", big / small, 3.0, 5.0),
    ])
}

fn taylor_scaling(seed: u64) -> Result<CheckOutcome> {
    let alpha = 1e-2;
    let mut ratios = Vec::new();
    for fx in Fixture::smooth(seed, 2, &[alpha, alpha / 2.0], 10)? {
        let losses = fx.losses();
        let big = taylor_residual(&fx.theta, &losses[0], &losses[1], alpha)?;
        let small = taylor_residual(&fx.theta, &losses[0], &losses[1], alpha / 2.0)?;
        ratios.push(big / small);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    Ok(CheckOutcome::within("taylor_residual_ratio", mean, 3.6, 4.4))
}

/// Linear regression toy with `n` domains of `rows x d` designs.
struct LinearToy {
    xs: Vec<Tensor>,
    ys: Vec<Vec<f64>>,
    d: usize,
}

impl LinearToy {
    fn new(seed: u64, n: usize, rows: usize, d: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shared: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let spread = Normal::new(0.0, 0.3).expect("valid sd");
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..n {
            let w: Vec<f64> = shared.iter().map(|s| s + spread.sample(&mut rng)).collect();
            let x: Vec<f64> = (0..rows * d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let y = (0..rows)
                .map(|r| (0..d).map(|c| x[r * d + c] * w[c]).sum::<f64>() + 0.1 * spread.sample(&mut rng))
                .collect();
            xs.push(Tensor::new(rows, d, x));
            ys.push(y);
        }
        Self { xs, ys, d }
    }

    fn bound(&self) -> f64 {
        self.xs.iter().map(|x| x.data().iter().map(|v| v * v).sum::<f64>()).fold(0.0, f64::max)
    }
}

/// `sum_i ||X_i (theta_0 + theta_i) - y_i||^2 + l1 sum_i ||theta_i||^2 + l2 ||theta_0||^2`
/// over the flat row `[theta_0, theta_1, ..., theta_N]`.
struct TwoTerm<'a> {
    toy: &'a LinearToy,
    l1: f64,
    l2: f64,
}

impl ScalarFn for TwoTerm<'_> {
    fn build(&self, tape: &mut Tape, th: Var) -> Result<Var> {
        let d = self.toy.d;
        let t0 = tape.slice(th, 0, 1, d);
        let s0 = tape.sum_sq(t0);
        let mut total = tape.scale(s0, self.l2);
        for (i, (x, y)) in self.toy.xs.iter().zip(&self.toy.ys).enumerate() {
            let ti = tape.slice(th, (i + 1) * d, 1, d);
            let w = tape.add(t0, ti);
            let col = tape.transpose(w);
            let xv = tape.constant(x.clone());
            let yv = tape.constant(Tensor::new(y.len(), 1, y.clone()));
            let pred = tape.matmul(xv, col);
            let r = tape.sub(pred, yv);
            let fit = tape.sum_sq(r);
            let si = tape.sum_sq(ti);
            let reg = tape.scale(si, self.l1);
            total = tape.add(total, fit);
            total = tape.add(total, reg);
        }
        Ok(total)
    }
}

const GD_TOL: f64 = 1e-11;
const GD_MAX_ITERS: usize = 1_000_000;

fn power_iteration(f: &dyn ScalarFn, at: &ParamVector) -> Result<f64> {
    let mut v = at.with_values(vec![1.0; at.len()])?;
    let mut lambda = 0.0;
    for _ in 0..200 {
        let hv = autodiff::hvp(f, at, &v)?;
        lambda = hv.norm() / v.norm();
        v = hv.scale(1.0 / hv.norm())?;
    }
    Ok(lambda)
}

/// Minimiser of the two-term form by gradient descent, split into
/// `(theta_0, [Theta_i = theta_0 + theta_i])`.
fn solve_two_term(toy: &LinearToy, n: usize, l1: f64, l2: f64) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let d = toy.d;
    let f = TwoTerm { toy, l1, l2 };
    let mut x = ParamVector::from_flat(vec![0.0; (n + 1) * d])?;
    let step = 1.0 / power_iteration(&f, &x)?;
    for it in 0.. {
        let g = autodiff::grad(&f, &x)?;
        if g.norm() < GD_TOL {
            break;
        }
        if it == GD_MAX_ITERS {
            return Err(Error::InvalidArgument("two-term descent did not converge".into()));
        }
        x = x.add_scaled(&g, -step)?;
    }
    let v = x.values();
    let t0 = v[..d].to_vec();
    let thetas = (1..=n).map(|i| (0..d).map(|c| v[c] + v[i * d + c]).collect()).collect();
    Ok((t0, thetas))
}

/// Minimiser of the squared-norm Undo-Bias objective, ridge term applied as
/// weight decay.
fn solve_reformulated(toy: &LinearToy, n: usize, l1: f64, l2: f64) -> Result<Vec<Vec<f64>>> {
    let d = toy.d;
    let denom = l2 + l1 * n as f64;
    let lambda = l1 * l1 * n as f64 / denom;
    let wd = 2.0 * l1 * l2 / denom;
    let gamma = 1.0 / (2.0 * toy.bound() + 2.0 * lambda + wd);
    let hp = HyperParams {
        lambda,
        gamma,
        momentum: 0.0,
        weight_decay: wd,
        ..HyperParams::default()
    };
    let losses: Vec<LeastSquares> = toy
        .xs
        .iter()
        .zip(&toy.ys)
        .map(|(x, y)| LeastSquares::new(x.clone(), y.clone()))
        .collect::<Result<_>>()?;
    let dl: Vec<&dyn ScalarFn> = losses.iter().map(|l| l as &dyn ScalarFn).collect();
    let zero = ParamVector::from_flat(vec![0.0; d])?;
    let mut model = UndoBiasModel::replicate(&zero, n)?;
    let mut states = vec![crate::algorithms::OptimState::zeros_like(&zero); n];
    for it in 0.. {
        let (_, grads) = undo_bias_loss(&model, &dl, &hp, NormMode::Squared)?;
        let mut residual = 0.0;
        let mut next = Vec::with_capacity(n);
        for ((p, g), s) in model.per_domain_params.iter().zip(&grads).zip(states.iter_mut()) {
            residual += g.add_scaled(p, wd)?.norm().powi(2);
            let (p, st) = msgd_update(p, g, s, &hp)?;
            next.push(p);
            *s = st;
        }
        if residual.sqrt() < GD_TOL {
            break;
        }
        if it == GD_MAX_ITERS {
            return Err(Error::InvalidArgument("reformulated descent did not converge".into()));
        }
        model = UndoBiasModel::new(next)?;
    }
    Ok(model.per_domain_params.iter().map(|p| p.values().to_vec()).collect())
}

fn undo_equivalence(seed: u64) -> Result<Vec<CheckOutcome>> {
    let (n, d, l1, l2) = (3, 4, 1.0, 0.5);
    let toy = LinearToy::new(seed, n, 10, d);
    let (t0, thetas) = solve_two_term(&toy, n, l1, l2)?;
    let c = l1 / (l2 + l1 * n as f64);
    let stationarity = (0..d)
        .map(|k| (t0[k] - c * thetas.iter().map(|t| t[k]).sum::<f64>()).abs())
        .fold(0.0, f64::max);
    let reform = solve_reformulated(&toy, n, l1, l2)?;
    let agreement = thetas
        .iter()
        .flatten()
        .zip(reform.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(vec![
        CheckOutcome::at_most("undo_shared_is_smoothed_mean", stationarity, 1e-4),
        CheckOutcome::at_most("undo_reformulation_agrees", agreement, 1e-4),
    ])
}

fn s_undo_path_gradient(seed: u64) -> Result<CheckOutcome> {
    let fx = Fixture::new(seed, 3)?;
    let losses = fx.losses();
    let dl = as_dyn(&losses);
    let model = UndoBiasModel::new((0..3).map(|k| init_params(&fx.spec, seed + k)).collect::<Result<_>>()?)?;
    let perm = Permutation { order: vec![2, 0, 1] };
    let hp = HyperParams {
        lambda: 0.7,
        ..HyperParams::default()
    };
    let (_, grads) = s_undo_bias_loss(&model, &perm, &dl, &hp)?;
    let mut worst = 0.0f64;
    for &dom in &perm.order[..2] {
        let base = &model.per_domain_params[dom];
        let h = 1e-5;
        let mut fd = Vec::with_capacity(base.len());
        let mut x = base.values().to_vec();
        for i in 0..x.len() {
            let orig = x[i];
            let mut eval_at = |v: f64| -> Result<f64> {
                x[i] = v;
                let mut ps = model.per_domain_params.clone();
                ps[dom] = base.with_values(x.clone())?;
                Ok(s_undo_bias_loss(&UndoBiasModel::new(ps)?, &perm, &dl, &hp)?.0)
            };
            let up = eval_at(orig + h)?;
            let down = eval_at(orig - h)?;
            x[i] = orig;
            fd.push((up - down) / (2.0 * h));
        }
        worst = worst.max(relative_error(&grads[dom], &base.with_values(fd)?)?);
    }
    Ok(CheckOutcome::at_most("s_undo_path_gradient", worst, 1e-6))
}

/// Chi-square critical value for 5 degrees of freedom at p = 0.001.
const CHI2_DF5_P001: f64 = 20.515;

fn permutation_sampler(seed: u64) -> Result<Vec<CheckOutcome>> {
    let rank = |p: &Permutation| p.order[0] * 2 + usize::from(p.order[1] > p.order[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = [0usize; 6];
    let mut first_full = None;
    for draw in 1..=6000 {
        counts[rank(&sample_permutation(3, &mut rng)?)] += 1;
        if first_full.is_none() && counts.iter().all(|&c| c > 0) {
            first_full = Some(draw);
        }
    }
    let stat: f64 = counts.iter().map(|&c| (c as f64 - 1000.0).powi(2) / 1000.0).sum();
    Ok(vec![
        CheckOutcome::at_most("permutation_coverage_draws", first_full.unwrap_or(usize::MAX) as f64, 600.0),
        CheckOutcome::at_most("permutation_chi_square", stat, CHI2_DF5_P001),
    ])
}

/// Every analysis and identity check, in a fixed order.
pub fn verify_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = gradient_checks(seed)?;
    out.push(eq3_collapse(seed)?);
    out.push(fo_identity(seed)?);
    out.push(ffo_telescoping(seed)?);
    out.extend(ffo_expectation(seed)?);
    out.push(taylor_scaling(seed)?);
    out.extend(undo_equivalence(seed)?);
    out.push(s_undo_path_gradient(seed)?);
    out.extend(permutation_sampler(seed)?);
    Ok(out)
}
