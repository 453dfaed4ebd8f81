mod common;

use proptest::prelude::*;
use seqdg::algorithms::{
    agg_step, ffo_s_mldg_step, msgd_update, s_mldg_step, s_undo_bias_loss, undo_bias_loss, undo_inference,
    HyperParams, NormMode, OptimState, UndoBiasModel,
};
use seqdg::autodiff::{self, ParamVector, ScalarFn};
use seqdg::domains::Permutation;
use seqdg::model::{init_params, Batch, ClassLoss, ModelSpec};

use common::{random_params, rotated};

struct Problem {
    spec: ModelSpec,
    batches: Vec<Batch>,
    theta: ParamVector,
}

impl Problem {
    fn new(domains: usize, seed: u64) -> Self {
        let set = rotated(domains, 3, 18, seed);
        let spec = ModelSpec::mlp(vec![2, 6, 3]);
        let batches = set.domains.iter().map(|d| d.as_batch().unwrap()).collect();
        let theta = init_params(&spec, seed).unwrap();
        Self { spec, batches, theta }
    }

    fn losses(&self) -> Vec<ClassLoss<'_>> {
        self.batches.iter().map(|b| ClassLoss::new(&self.spec, b)).collect()
    }
}

fn dyns<'a>(l: &'a [ClassLoss<'a>]) -> Vec<&'a dyn ScalarFn> {
    l.iter().map(|f| f as &dyn ScalarFn).collect()
}

#[test]
fn aggregate_gradient_is_mean_of_domain_gradients() {
    let p = Problem::new(3, 4);
    let refs: Vec<&Batch> = p.batches.iter().collect();
    let got = agg_step(&p.theta, &refs, &p.spec).unwrap().grad;
    let mut want = vec![0.0; p.theta.len()];
    for f in p.losses() {
        for (w, g) in want.iter_mut().zip(autodiff::grad(&f, &p.theta).unwrap().values()) {
            *w += g / 3.0;
        }
    }
    assert!(got.values().iter().zip(&want).all(|(a, b)| (a - b).abs() <= 1e-12));

    let dup = agg_step(&p.theta, &[&p.batches[0], &p.batches[0]], &p.spec).unwrap().grad;
    let single = agg_step(&p.theta, &[&p.batches[0]], &p.spec).unwrap().grad;
    assert!(dup.max_abs_diff(&single) <= 1e-15);
}

#[test]
fn s_undo_without_lambda_is_independent_training() {
    let p = Problem::new(3, 6);
    let losses = p.losses();
    let dl = dyns(&losses);
    let model = UndoBiasModel::new((0..3).map(|k| init_params(&p.spec, 40 + k).unwrap()).collect()).unwrap();
    let hp = HyperParams {
        lambda: 0.0,
        ..HyperParams::default()
    };
    let (_, grads) = s_undo_bias_loss(&model, &Permutation { order: vec![1, 2, 0] }, &dl, &hp).unwrap();
    let (_, flat_grads) = undo_bias_loss(&model, &dl, &hp, NormMode::Squared).unwrap();
    for (k, g) in grads.iter().enumerate() {
        let own = autodiff::grad(dl[k], &model.per_domain_params[k]).unwrap();
        assert!(g.max_abs_diff(&own) <= 1e-14);
        assert!(flat_grads[k].max_abs_diff(&own) <= 1e-14);
    }
}

#[test]
fn running_mean_gradient_matches_hand_derivative() {
    // Zero data losses isolate the path penalty.
    let zero = |tape: &mut seqdg::autodiff::Tape, _th: seqdg::autodiff::Var| Ok(tape.scalar(0.0));
    let dl: Vec<&dyn ScalarFn> = vec![&zero, &zero, &zero];
    let t: Vec<ParamVector> = [[1.0, -2.0], [0.5, 4.0], [3.0, 0.0]]
        .iter()
        .map(|v| ParamVector::from_flat(v.to_vec()).unwrap())
        .collect();
    let model = UndoBiasModel::new(t.clone()).unwrap();
    let lambda = 0.3;
    let hp = HyperParams {
        lambda,
        ..HyperParams::default()
    };
    let (value, grads) = s_undo_bias_loss(&model, &Permutation::identity(3), &dl, &hp).unwrap();
    let v = |i: usize| t[i].values().to_vec();
    let (a, b, c) = (v(0), v(1), v(2));
    let d2: Vec<f64> = (0..2).map(|k| b[k] - a[k]).collect();
    let d3: Vec<f64> = (0..2).map(|k| c[k] - (a[k] + b[k]) / 2.0).collect();
    let want_value = lambda * (d2.iter().map(|x| x * x).sum::<f64>() + d3.iter().map(|x| x * x).sum::<f64>());
    assert!((value - want_value).abs() <= 1e-12);
    for k in 0..2 {
        let ga = -2.0 * lambda * d2[k] - lambda * d3[k];
        let gb = 2.0 * lambda * d2[k] - lambda * d3[k];
        let gc = 2.0 * lambda * d3[k];
        assert!((grads[0].values()[k] - ga).abs() <= 1e-12);
        assert!((grads[1].values()[k] - gb).abs() <= 1e-12);
        assert!((grads[2].values()[k] - gc).abs() <= 1e-12);
    }
}

/// Three-domain sequential objective evaluated with plain gradients and
/// Hessian-vector products, no tape shared with the method under test.
fn sequential_objective(dl: &[&dyn ScalarFn], th: &ParamVector, hp: &HyperParams) -> f64 {
    let g1 = autodiff::grad(dl[0], th).unwrap();
    let th1 = th.add_scaled(&g1, -hp.alpha[0]).unwrap();
    let g2 = autodiff::grad(dl[1], &th1).unwrap();
    // d/dtheta of L2(theta - a1 grad L1(theta)) = (I - a1 H1) g2
    let h1g2 = autodiff::hvp(dl[0], th, &g2).unwrap();
    let dir = g1.add_scaled(&g2.add_scaled(&h1g2, -hp.alpha[0]).unwrap(), hp.beta).unwrap();
    let th2 = th.add_scaled(&dir, -hp.alpha[1]).unwrap();
    autodiff::eval(dl[0], th).unwrap()
        + hp.beta * autodiff::eval(dl[1], &th1).unwrap()
        + hp.beta * autodiff::eval(dl[2], &th2).unwrap()
}

#[test]
fn full_meta_gradient_matches_finite_differences_of_objective() {
    let p = Problem::new(3, 12);
    let losses = p.losses();
    let dl = dyns(&losses);
    let hp = HyperParams {
        alpha: vec![0.03, 0.05],
        beta: 0.8,
        second_order: true,
        ..HyperParams::default()
    };
    let got = s_mldg_step(&p.theta, &dl, &hp).unwrap();
    assert!((sequential_objective(&dl, &p.theta, &hp) - got.objective).abs() <= 1e-12);
    let h = 1e-5;
    let fd: Vec<f64> = (0..p.theta.len())
        .map(|k| {
            let mut up = p.theta.values().to_vec();
            let mut down = up.clone();
            up[k] += h;
            down[k] -= h;
            (sequential_objective(&dl, &p.theta.with_values(up).unwrap(), &hp)
                - sequential_objective(&dl, &p.theta.with_values(down).unwrap(), &hp))
                / (2.0 * h)
        })
        .collect();
    assert!(common::rel(got.grad.values(), &fd) <= 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ffo_offset_telescopes(n in 2usize..5, seed in 0u64..500, alpha in prop::collection::vec(0.001f64..0.3, 1..4), beta in 0.1f64..2.0) {
        let p = Problem::new(n, seed);
        let losses = p.losses();
        let hp = HyperParams { alpha, beta, gamma: 1.0, ..HyperParams::default() };
        let out = ffo_s_mldg_step(&p.theta, &dyns(&losses), &hp).unwrap();
        let mut sum = vec![0.0; p.theta.len()];
        for (i, g) in out.record.per_step_grads.iter().enumerate() {
            for (s, v) in sum.iter_mut().zip(g.values()) {
                *s += hp.alpha_at(i) * v;
            }
        }
        let worst = out.offset.values().iter().zip(&sum).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(worst <= 1e-14, "{worst}");
        prop_assert!(out.theta.max_abs_diff(&out.theta_tilde) <= 1e-15);
    }

    #[test]
    fn zero_alpha_collapses_to_weighted_sum(n in 2usize..5, seed in 0u64..500, beta in 0.0f64..2.0, second_order: bool) {
        let p = Problem::new(n, seed);
        let losses = p.losses();
        let dl = dyns(&losses);
        let hp = HyperParams { alpha: vec![0.0], beta, second_order, ..HyperParams::default() };
        let got = s_mldg_step(&p.theta, &dl, &hp).unwrap().grad;
        let mut want = autodiff::grad(dl[0], &p.theta).unwrap();
        for f in &dl[1..] {
            want = want.add_scaled(&autodiff::grad(*f, &p.theta).unwrap(), beta).unwrap();
        }
        prop_assert!(got.max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn undo_inference_is_elementwise_mean(n in 1usize..6, seed in 0u64..1000) {
        let spec = ModelSpec::mlp(vec![2, 3, 2]);
        let params: Vec<ParamVector> = (0..n as u64).map(|k| random_params(&spec, seed * 10 + k, 3.0)).collect();
        let mean = undo_inference(&UndoBiasModel::new(params.clone()).unwrap()).unwrap();
        for (i, &m) in mean.values().iter().enumerate() {
            let mut s = 0.0;
            for p in &params {
                s += p.values()[i];
            }
            prop_assert!((m - s / n as f64).abs() <= 1e-14);
        }
    }

    #[test]
    fn plain_msgd_is_gradient_step(theta in prop::collection::vec(-5.0f64..5.0, 3), g in prop::collection::vec(-5.0f64..5.0, 3), gamma in 0.001f64..1.0) {
        let th = ParamVector::from_flat(theta.clone()).unwrap();
        let gv = ParamVector::from_flat(g.clone()).unwrap();
        let hp = HyperParams { gamma, momentum: 0.0, weight_decay: 0.0, ..HyperParams::default() };
        let (next, state) = msgd_update(&th, &gv, &OptimState::zeros_like(&th), &hp).unwrap();
        for i in 0..3 {
            prop_assert!((next.values()[i] - (theta[i] - gamma * g[i])).abs() <= 1e-14);
        }
        prop_assert_eq!(state.velocity, gv);
    }

    #[test]
    fn identical_domain_models_carry_no_penalty_gradient(n in 2usize..5, seed in 0u64..100, lambda in 0.0f64..5.0) {
        let zero = |tape: &mut seqdg::autodiff::Tape, _th: seqdg::autodiff::Var| Ok(tape.scalar(0.0));
        let dl: Vec<&dyn ScalarFn> = vec![&zero; n];
        let spec = ModelSpec::mlp(vec![2, 3, 2]);
        let model = UndoBiasModel::replicate(&random_params(&spec, seed, 1.0), n).unwrap();
        let hp = HyperParams { lambda, ..HyperParams::default() };
        let (value, grads) = s_undo_bias_loss(&model, &Permutation::identity(n), &dl, &hp).unwrap();
        prop_assert!(value.abs() <= 1e-24);
        prop_assert!(grads.iter().all(|g| g.norm() <= 1e-12));
    }
}
