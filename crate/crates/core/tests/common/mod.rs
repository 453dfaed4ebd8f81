#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqdg::autodiff::{ParamVector, Tensor};
use seqdg::domains::{synth_rotated, DomainSet, RotatedClusters};
use seqdg::model::{Batch, ModelSpec};

pub fn rotated(domains: usize, classes: usize, n: usize, seed: u64) -> DomainSet {
    synth_rotated(&RotatedClusters {
        num_domains: domains,
        classes,
        n_per_domain: n,
        angle_step_deg: 25.0,
        noise_sd: 0.3,
        seed,
    })
    .unwrap()
}

pub fn random_batch(rows: usize, dim: usize, classes: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..rows * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(Tensor::new(rows, dim, x), y).unwrap()
}

pub fn random_params(spec: &ModelSpec, seed: u64, scale: f64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = std::sync::Arc::new(spec.layout());
    let v = (0..layout.len()).map(|_| rng.random_range(-scale..scale)).collect();
    ParamVector::new(layout, v).unwrap()
}

fn seg<'a>(theta: &'a ParamVector, name: &str) -> &'a [f64] {
    theta.segment_values(name).unwrap()
}

/// `x W + b` with `W` stored row-major as `fan_in x fan_out`.
fn affine(x: &[Vec<f64>], w: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
    let out = b.len();
    x.iter()
        .map(|row| {
            (0..out)
                .map(|j| b[j] + row.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

/// Penultimate activations and class logits of a plain MLP, computed row by
/// row without the tape.
pub fn reference_forward(spec: &ModelSpec, theta: &ParamVector, x: &Tensor) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    assert!(!spec.batchnorm, "reference covers the plain MLP only");
    let layers = spec.layer_sizes.len() - 1;
    let mut h: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row_slice(r).to_vec()).collect();
    for l in 0..layers - 1 {
        h = affine(&h, seg(theta, &format!("w{l}")), seg(theta, &format!("b{l}")))
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
            .collect();
    }
    let last = layers - 1;
    let logits = affine(&h, seg(theta, &format!("w{last}")), seg(theta, &format!("b{last}")));
    (h, logits)
}

pub fn reference_domain_logits(theta: &ParamVector, features: &[Vec<f64>]) -> Vec<Vec<f64>> {
    affine(features, seg(theta, "dom_w"), seg(theta, "dom_b"))
}

/// Mean of `logsumexp(z) - z[y]`.
pub fn reference_cross_entropy(logits: &[Vec<f64>], targets: &[usize]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(targets)
        .map(|(z, &y)| {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[y]
        })
        .sum();
    total / targets.len() as f64
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `||a - b|| / ||b||`
pub fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(b)
}
