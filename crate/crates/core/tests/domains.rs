mod common;

use std::collections::HashSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqdg::autodiff::Tensor;
use seqdg::domains::{
    parse_domainset, sample_permutation, split, split_indices, synth_rotated, Domain, DomainSet, MinibatchSampler,
    RotatedClusters,
};
use seqdg::Error;

use common::rotated;

fn record(out: &mut Vec<u8>, x: [f64; 2], y: u32) {
    out.extend_from_slice(&x[0].to_le_bytes());
    out.extend_from_slice(&x[1].to_le_bytes());
    out.extend_from_slice(&y.to_le_bytes());
}

fn hand_written() -> Vec<u8> {
    let mut b = b"SEQDG1 2 2 2\nDOM 0 2\n".to_vec();
    record(&mut b, [1.5, -0.25], 0);
    record(&mut b, [0.0, 3.0], 1);
    b.extend_from_slice(b"DOM 1 2\n");
    record(&mut b, [-1.0, 1e-300], 1);
    record(&mut b, [2.0, f64::MAX], 0);
    b
}

#[test]
fn hand_written_file_parses_to_known_values() {
    let set = parse_domainset(&hand_written()).unwrap();
    assert_eq!((set.len(), set.dim, set.classes), (2, 2, 2));
    assert_eq!(set.domains[0].features.data(), &[1.5, -0.25, 0.0, 3.0]);
    assert_eq!(set.domains[0].labels, vec![0, 1]);
    assert_eq!(set.domains[1].features.data(), &[-1.0, 1e-300, 2.0, f64::MAX]);
    assert_eq!(set.domains[1].labels, vec![1, 0]);
    assert_eq!(set.to_bytes(), hand_written());
}

#[test]
fn corrupt_files_are_parse_errors() {
    let good = hand_written();
    for cut in [0, 5, 13, 20, 30, good.len() - 1] {
        assert!(parse_domainset(&good[..cut]).is_err(), "cut at {cut}");
    }
    let mut extra = good.clone();
    extra.push(0);
    assert!(matches!(parse_domainset(&extra), Err(Error::Parse(_))));
    let mut bad_label = good.clone();
    let at = good.len() - 4;
    bad_label[at..].copy_from_slice(&7u32.to_le_bytes());
    assert!(parse_domainset(&bad_label).is_err());
    let wrong_dim = [b"SEQDG1 2 3 2\n".as_slice(), &good[13..]].concat();
    assert!(parse_domainset(&wrong_dim).is_err());
}

#[test]
fn save_and_load_through_the_filesystem() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("set.bin");
    let set = rotated(3, 2, 20, 9);
    set.save(&path).unwrap();
    assert_eq!(DomainSet::load(&path).unwrap(), set);
    assert!(DomainSet::load(dir.path().join("missing.bin")).is_err());
}

#[test]
fn heterogeneous_domains_are_rejected() {
    let a = Domain::new(0, Tensor::new(2, 2, vec![0.0; 4]), vec![0, 1]).unwrap();
    let b = Domain::new(1, Tensor::new(2, 3, vec![0.0; 6]), vec![0, 1]).unwrap();
    assert!(DomainSet::new(vec![a.clone(), b], 2, 2).is_err());
    let missing_class = Domain::new(1, Tensor::new(2, 2, vec![0.0; 4]), vec![0, 0]).unwrap();
    assert!(DomainSet::new(vec![a.clone(), missing_class], 2, 2).is_err());
    assert!(DomainSet::new(vec![a], 2, 2).is_err());
}

/// Softmax regression fitted by full-batch gradient descent, gradient
/// written out by hand.
fn fit_linear(dom: &Domain, classes: usize) -> Vec<f64> {
    let d = dom.dim();
    let cols = d + 1;
    let mut w = vec![0.0; cols * classes];
    for _ in 0..300 {
        let mut g = vec![0.0; w.len()];
        for r in 0..dom.len() {
            let x: Vec<f64> = dom.features.row_slice(r).iter().cloned().chain([1.0]).collect();
            let z: Vec<f64> = (0..classes).map(|k| (0..cols).map(|c| x[c] * w[c * classes + k]).sum()).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for k in 0..classes {
                let p = e[k] / s - f64::from(u8::from(dom.labels[r] == k));
                for c in 0..cols {
                    g[c * classes + k] += p * x[c] / dom.len() as f64;
                }
            }
        }
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= 0.5 * gi;
        }
    }
    w
}

fn linear_accuracy(w: &[f64], dom: &Domain, classes: usize) -> f64 {
    let d = dom.dim();
    let hits = (0..dom.len())
        .filter(|&r| {
            let x: Vec<f64> = dom.features.row_slice(r).iter().cloned().chain([1.0]).collect();
            let score = |k: usize| (0..=d).map(|c| x[c] * w[c * classes + k]).sum::<f64>();
            let best = (0..classes).max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap();
            best == dom.labels[r]
        })
        .count();
    hits as f64 / dom.len() as f64
}

#[test]
fn accuracy_of_source_classifier_falls_with_rotation() {
    let mut mean = [0.0; 4];
    for seed in 0..20 {
        let set = rotated(4, 3, 150, seed);
        let w = fit_linear(&set.domains[0], 3);
        for (m, dom) in mean.iter_mut().zip(&set.domains) {
            *m += linear_accuracy(&w, dom, 3) / 20.0;
        }
    }
    for k in 1..4 {
        assert!(mean[k] < mean[k - 1], "accuracy by rotation step: {mean:?}");
    }
}

#[test]
fn batch_class_frequencies_follow_domain_marginals() {
    let set = rotated(2, 3, 30, 5);
    let dom = &set.domains[0];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut sampler = MinibatchSampler::new(dom.len());
    let mut counts = [0.0f64; 3];
    let (batches, size) = (1000, 7);
    for _ in 0..batches {
        for y in sampler.next_batch(dom, size, &mut rng).unwrap().labels {
            counts[y] += 1.0;
        }
    }
    let total = (batches * size) as f64;
    for (k, c) in counts.iter().enumerate() {
        let p = dom.class_counts(3)[k] as f64 / dom.len() as f64;
        let sd = (total * p * (1.0 - p)).sqrt();
        assert!((c - total * p).abs() <= 3.0 * sd, "class {k}: {c} vs {}", total * p);
    }
}

#[test]
fn generator_rejects_bad_arguments() {
    let base = RotatedClusters {
        num_domains: 4,
        classes: 3,
        n_per_domain: 30,
        angle_step_deg: 10.0,
        noise_sd: 0.3,
        seed: 0,
    };
    assert!(synth_rotated(&RotatedClusters { num_domains: 1, ..base.clone() }).is_err());
    assert!(synth_rotated(&RotatedClusters { classes: 1, ..base.clone() }).is_err());
    assert!(synth_rotated(&RotatedClusters { noise_sd: 0.0, ..base.clone() }).is_err());
    assert!(synth_rotated(&RotatedClusters { angle_step_deg: 40.0, ..base }).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn byte_encoding_round_trips(domains in 2usize..5, classes in 2usize..4, per_class in 1usize..6, seed in 0u64..1000) {
        let set = synth_rotated(&RotatedClusters {
            num_domains: domains,
            classes,
            n_per_domain: per_class * classes,
            angle_step_deg: 5.0,
            noise_sd: 0.5,
            seed,
        }).unwrap();
        let back = parse_domainset(&set.to_bytes()).unwrap();
        prop_assert_eq!(back, set);
    }

    #[test]
    fn split_is_a_deterministic_stratified_partition(per_class in 2usize..30, frac in 0.05f64..0.95, seed in 0u64..1000) {
        let set = synth_rotated(&RotatedClusters {
            num_domains: 2,
            classes: 3,
            n_per_domain: per_class * 3,
            angle_step_deg: 10.0,
            noise_sd: 0.3,
            seed,
        }).unwrap();
        let dom = &set.domains[1];
        let (tr, te) = split_indices(dom, frac, seed).unwrap();
        prop_assert_eq!(split_indices(dom, frac, seed).unwrap(), (tr.clone(), te.clone()));
        let all: HashSet<usize> = tr.iter().chain(&te).cloned().collect();
        prop_assert_eq!(all.len(), dom.len());
        prop_assert_eq!(tr.len() + te.len(), dom.len());
        let (a, b) = split(dom, frac, seed).unwrap();
        let (ca, cb) = (a.class_counts(3), b.class_counts(3));
        prop_assert!(ca.iter().all(|&c| c == ca[0]) && cb.iter().all(|&c| c == cb[0]));
        prop_assert!(ca[0] >= 1 && cb[0] >= 1);
    }

    #[test]
    fn sampled_permutations_are_bijections(n in 2usize..12, seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = sample_permutation(n, &mut rng).unwrap();
        prop_assert!(p.is_bijection());
        let mut sorted = p.order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn epochs_cover_each_index_once(n in 1usize..40, size in 1usize..40, seed in 0u64..1000) {
        prop_assume!(size <= n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sampler = MinibatchSampler::new(n);
        let mut seen = vec![0usize; n];
        let draws = n * size;
        let mut total = 0;
        while total < draws {
            for i in sampler.next_indices(size, &mut rng) {
                seen[i] += 1;
            }
            total += size;
        }
        prop_assert!(seen.iter().all(|&c| c == size));
    }
}
