mod common;

use proptest::prelude::*;
use seqdg::autodiff::{self, ParamVector, ScalarFn, Tape, Tensor, Var};
use seqdg::model::{ClassLoss, ModelSpec};
use seqdg::Result;

use common::{max_abs, random_batch, random_params, rel};

/// `sum exp(c * theta)`: smooth with a diagonal, non-constant Hessian.
fn exp_sum(c: f64) -> impl Fn(&mut Tape, Var) -> Result<Var> {
    move |tape: &mut Tape, th: Var| {
        let s = tape.scale(th, c);
        let e = tape.exp(s);
        Ok(tape.sum_all(e))
    }
}

/// `(a . theta)^2 + ||theta||^2 (b . theta)`, a cubic with a dense Hessian.
fn cubic(a: Vec<f64>, b: Vec<f64>) -> impl Fn(&mut Tape, Var) -> Result<Var> {
    move |tape: &mut Tape, th: Var| {
        let av = tape.constant(Tensor::row(a.clone()));
        let bv = tape.constant(Tensor::row(b.clone()));
        let ad = tape.dot(av, th);
        let sq = tape.mul(ad, ad);
        let n = tape.sum_sq(th);
        let bd = tape.dot(bv, th);
        let cross = tape.mul(n, bd);
        Ok(tape.add(sq, cross))
    }
}

fn flat(v: Vec<f64>) -> ParamVector {
    ParamVector::from_flat(v).unwrap()
}

/// Central differences written out here rather than taken from the library.
fn central_difference(f: &dyn ScalarFn, theta: &ParamVector, h: f64) -> Vec<f64> {
    (0..theta.len())
        .map(|i| {
            let mut up = theta.values().to_vec();
            let mut down = up.clone();
            up[i] += h;
            down[i] -= h;
            let fu = autodiff::eval(f, &theta.with_values(up).unwrap()).unwrap();
            let fd = autodiff::eval(f, &theta.with_values(down).unwrap()).unwrap();
            (fu - fd) / (2.0 * h)
        })
        .collect()
}

fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.5f64..1.5, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_is_linear_in_the_loss(
        theta in vec_strategy(4),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        c in vec_strategy(4),
        d in vec_strategy(4),
    ) {
        let f = cubic(c.clone(), d.clone());
        let g = exp_sum(0.7);
        let combo = |tape: &mut Tape, th: Var| -> Result<Var> {
            let fv = f(tape, th)?;
            let gv = g(tape, th)?;
            let fa = tape.scale(fv, a);
            let gb = tape.scale(gv, b);
            Ok(tape.add(fa, gb))
        };
        let th = flat(theta);
        let lhs = autodiff::grad(&combo, &th).unwrap();
        let rhs = autodiff::grad(&f, &th).unwrap().scale(a).unwrap()
            .add_scaled(&autodiff::grad(&g, &th).unwrap(), b).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
    }

    #[test]
    fn hessian_vector_products_are_symmetric(
        theta in vec_strategy(5),
        u in vec_strategy(5),
        v in vec_strategy(5),
        a in vec_strategy(5),
        b in vec_strategy(5),
    ) {
        let f = cubic(a, b);
        let th = flat(theta);
        let (u, v) = (flat(u), flat(v));
        let vhu = v.dot(&autodiff::hvp(&f, &th, &u).unwrap()).unwrap();
        let uhv = u.dot(&autodiff::hvp(&f, &th, &v).unwrap()).unwrap();
        let scale = vhu.abs().max(uhv.abs()).max(1e-12);
        prop_assert!((vhu - uhv).abs() / scale <= 1e-9, "{vhu} vs {uhv}");
    }

    #[test]
    fn detaching_the_output_kills_every_gradient(theta in vec_strategy(3), c in -2.0f64..2.0) {
        let f = exp_sum(c);
        let frozen = |tape: &mut Tape, th: Var| -> Result<Var> {
            let y = f(tape, th)?;
            Ok(tape.detach(y))
        };
        let g = autodiff::grad(&frozen, &flat(theta)).unwrap();
        prop_assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn exp_sum_gradient_and_hvp_are_closed_form(theta in vec_strategy(4), v in vec_strategy(4), c in -1.5f64..1.5) {
        let th = flat(theta.clone());
        let g = autodiff::grad(&exp_sum(c), &th).unwrap();
        let want: Vec<f64> = theta.iter().map(|t| c * (c * t).exp()).collect();
        prop_assert!(max_abs(g.values(), &want) <= 1e-12);
        let hv = autodiff::hvp(&exp_sum(c), &th, &flat(v.clone())).unwrap();
        let want: Vec<f64> = theta.iter().zip(&v).map(|(t, vi)| c * c * (c * t).exp() * vi).collect();
        prop_assert!(max_abs(hv.values(), &want) <= 1e-12);
    }
}

#[test]
fn mlp_gradient_matches_central_differences_over_seeds() {
    let spec = ModelSpec::mlp(vec![5, 7, 4]);
    for seed in 0..10 {
        let batch = random_batch(12, 5, 4, seed);
        let theta = random_params(&spec, 100 + seed, 0.8);
        let f = ClassLoss::new(&spec, &batch);
        let g = autodiff::grad(&f, &theta).unwrap();
        let fd = central_difference(&f, &theta, 1e-5);
        let worst = g
            .values()
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).abs() / b.abs().max(1e-3))
            .fold(0.0, f64::max);
        assert!(worst <= 1e-4, "seed {seed}: {worst}");
    }
}

#[test]
fn mlp_hvp_matches_difference_of_gradients() {
    let spec = ModelSpec::mlp(vec![5, 7, 4]);
    for seed in 0..10 {
        let batch = random_batch(12, 5, 4, seed);
        let theta = random_params(&spec, 200 + seed, 0.8);
        let v = random_params(&spec, 300 + seed, 1.0);
        let f = ClassLoss::new(&spec, &batch);
        let eps = 1e-4;
        let up = autodiff::grad(&f, &theta.add_scaled(&v, eps).unwrap()).unwrap();
        let down = autodiff::grad(&f, &theta.add_scaled(&v, -eps).unwrap()).unwrap();
        let fd: Vec<f64> = up.values().iter().zip(down.values()).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
        let hv = autodiff::hvp(&f, &theta, &v).unwrap();
        assert!(rel(hv.values(), &fd) <= 1e-3, "seed {seed}");
    }
}

#[test]
fn non_finite_input_is_an_error() {
    assert!(ParamVector::from_flat(vec![1.0, f64::NAN]).is_err());
    let blowup = flat(vec![800.0, 0.0]);
    assert!(autodiff::grad(&exp_sum(1.0), &blowup).is_err());
}
