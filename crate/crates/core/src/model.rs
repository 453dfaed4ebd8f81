//! Small feed-forward classifier with an optional domain-classification head.
//!
//! Parameters live in one flat [`ParamVector`]; the forward pass slices the
//! per-layer blocks out of the parameter row so that gradients with respect to
//! the whole vector come out of a single backward sweep.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Layout, ParamVector, ScalarFn, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Added to batch variances before normalising.
pub const BATCHNORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Input width, hidden widths, number of classes.
    pub layer_sizes: Vec<usize>,
    /// Per-batch normalisation (with learned scale and shift) after each hidden affine map.
    #[serde(default)]
    pub batchnorm: bool,
    /// Number of domains predicted by the auxiliary head on the penultimate features.
    #[serde(default)]
    pub aux_domain_head: Option<usize>,
}

impl ModelSpec {
    pub fn mlp(layer_sizes: Vec<usize>) -> Self {
        Self {
            layer_sizes,
            batchnorm: false,
            aux_domain_head: None,
        }
    }

    pub fn with_batchnorm(mut self, on: bool) -> Self {
        self.batchnorm = on;
        self
    }

    pub fn with_domain_head(mut self, num_domains: usize) -> Self {
        self.aux_domain_head = Some(num_domains);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::InvalidArgument(
                "a model needs at least an input and an output layer".into(),
            ));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument("layer sizes must be positive".into()));
        }
        if self.num_classes() < 2 {
            return Err(Error::InvalidArgument("at least two classes required".into()));
        }
        if matches!(self.aux_domain_head, Some(n) if n < 2) {
            return Err(Error::InvalidArgument(
                "domain head needs at least two domains".into(),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }

    /// Width of the features fed to the output (and domain) heads.
    pub fn feature_dim(&self) -> usize {
        self.layer_sizes[self.layer_sizes.len() - 2]
    }

    fn num_affine(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn layout(&self) -> Layout {
        let mut shapes = Vec::new();
        for l in 0..self.num_affine() {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            shapes.push((format!("w{l}"), fan_in, fan_out));
            shapes.push((format!("b{l}"), 1, fan_out));
            if self.batchnorm && l + 1 < self.num_affine() {
                shapes.push((format!("bn_gamma{l}"), 1, fan_out));
                shapes.push((format!("bn_beta{l}"), 1, fan_out));
            }
        }
        if let Some(domains) = self.aux_domain_head {
            shapes.push(("dom_w".to_string(), self.feature_dim(), domains));
            shapes.push(("dom_b".to_string(), 1, domains));
        }
        Layout::from_shapes(shapes)
    }

    pub fn num_params(&self) -> usize {
        self.layout().len()
    }
}

/// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases and shifts zero,
/// normalisation scales one. Deterministic in `seed`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamVector> {
    spec.validate()?;
    let layout = Arc::new(spec.layout());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; layout.len()];
    for seg in layout.segments() {
        let block = &mut values[seg.range()];
        if seg.name.starts_with('w') || seg.name == "dom_w" {
            let limit = (6.0 / (seg.rows + seg.cols) as f64).sqrt();
            for v in block.iter_mut() {
                *v = rng.random_range(-limit..limit);
            }
        } else if seg.name.starts_with("bn_gamma") {
            block.fill(1.0);
        }
    }
    ParamVector::new(layout, values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `batch x input_dim`
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub domain_ids: Option<Vec<usize>>,
}

impl Batch {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if !features.is_finite() {
            return Err(Error::NonFiniteInput("batch features".into()));
        }
        Ok(Self {
            features,
            labels,
            domain_ids: None,
        })
    }

    pub fn with_domain_ids(mut self, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != self.labels.len() {
            return Err(Error::Shape("domain id count differs from batch size".into()));
        }
        self.domain_ids = Some(ids);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Stacks batches row-wise. Domain ids are kept only if every part has them.
    pub fn concat(parts: &[&Batch]) -> Result<Batch> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero batches".into()))?;
        let d = first.features.cols();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut ids = Some(Vec::new());
        for b in parts {
            if b.features.cols() != d {
                return Err(Error::Shape("batches differ in feature width".into()));
            }
            data.extend_from_slice(b.features.data());
            labels.extend_from_slice(&b.labels);
            match (&mut ids, &b.domain_ids) {
                (Some(acc), Some(part)) => acc.extend_from_slice(part),
                _ => ids = None,
            }
        }
        let rows = labels.len();
        Ok(Batch {
            features: Tensor::new(rows, d, data),
            labels,
            domain_ids: ids,
        })
    }

    fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        if self.features.cols() != spec.input_dim() {
            return Err(Error::Shape(format!(
                "batch has {} features, model expects {}",
                self.features.cols(),
                spec.input_dim()
            )));
        }
        if let Some(bad) = self.labels.iter().find(|&&y| y >= spec.num_classes()) {
            return Err(Error::Shape(format!(
                "label {bad} out of range for {} classes",
                spec.num_classes()
            )));
        }
        Ok(())
    }
}

/// Nodes produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Penultimate activations (`batch x feature_dim`).
    pub features: Var,
    pub logits: Var,
    pub domain_logits: Option<Var>,
}

fn affine(tape: &mut Tape, theta: Var, layout: &Layout, l: usize, x: Var) -> Var {
    let w = tape.segment(theta, layout.segment(&format!("w{l}")).expect("weight segment"));
    let b = tape.segment(theta, layout.segment(&format!("b{l}")).expect("bias segment"));
    let z = tape.matmul(x, w);
    tape.add_row(z, b)
}

/// Per-feature standardisation over the batch, before the learned scale and shift.
pub fn batch_standardize(tape: &mut Tape, z: Var) -> Var {
    let (m, _) = tape.value(z).shape();
    let inv_m = 1.0 / m as f64;
    let sum = tape.sum_rows(z);
    let mean = tape.scale(sum, inv_m);
    let mean_b = tape.broadcast_rows(mean, m);
    let centered = tape.sub(z, mean_b);
    let sq = tape.mul(centered, centered);
    let sq_sum = tape.sum_rows(sq);
    let var = tape.scale(sq_sum, inv_m);
    let n = tape.value(var).cols();
    let eps = tape.constant(Tensor::filled(1, n, BATCHNORM_EPS));
    let var_eps = tape.add(var, eps);
    let sd = tape.sqrt(var_eps);
    let inv_sd = tape.safe_recip(sd);
    let inv_b = tape.broadcast_rows(inv_sd, m);
    tape.mul(centered, inv_b)
}

pub fn forward(spec: &ModelSpec, tape: &mut Tape, theta: Var, x: Var) -> Forward {
    let layout = spec.layout();
    let hidden = spec.num_affine() - 1;
    let mut h = x;
    for l in 0..hidden {
        let mut z = affine(tape, theta, &layout, l, h);
        if spec.batchnorm {
            let (m, _) = tape.value(z).shape();
            let normed = batch_standardize(tape, z);
            let gamma = tape.segment(theta, layout.segment(&format!("bn_gamma{l}")).expect("bn scale"));
            let beta = tape.segment(theta, layout.segment(&format!("bn_beta{l}")).expect("bn shift"));
            let gamma_b = tape.broadcast_rows(gamma, m);
            let scaled = tape.mul(normed, gamma_b);
            z = tape.add_row(scaled, beta);
        }
        h = tape.relu(z);
    }
    let logits = affine(tape, theta, &layout, hidden, h);
    let domain_logits = spec.aux_domain_head.map(|_| {
        let w = tape.segment(theta, layout.segment("dom_w").expect("domain head weight"));
        let b = tape.segment(theta, layout.segment("dom_b").expect("domain head bias"));
        let z = tape.matmul(h, w);
        tape.add_row(z, b)
    });
    Forward {
        features: h,
        logits,
        domain_logits,
    }
}

/// Mean softmax cross-entropy of `logits` against integer `targets`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize]) -> Var {
    let (m, k) = tape.value(logits).shape();
    let mut onehot = vec![0.0; m * k];
    for (r, &y) in targets.iter().enumerate() {
        onehot[r * k + y] = 1.0;
    }
    let onehot = tape.constant(Tensor::new(m, k, onehot));
    let logp = tape.log_softmax(logits);
    let picked = tape.dot(onehot, logp);
    tape.scale(picked, -1.0 / m as f64)
}

/// Category cross-entropy of the model on one batch, as a differentiable loss.
#[derive(Debug, Clone, Copy)]
pub struct ClassLoss<'a> {
    pub spec: &'a ModelSpec,
    pub batch: &'a Batch,
}

impl<'a> ClassLoss<'a> {
    pub fn new(spec: &'a ModelSpec, batch: &'a Batch) -> Self {
        Self { spec, batch }
    }
}

impl ScalarFn for ClassLoss<'_> {
    fn build(&self, tape: &mut Tape, theta: Var) -> Result<Var> {
        self.batch.check_against(self.spec)?;
        let x = tape.constant(self.batch.features.clone());
        let fwd = forward(self.spec, tape, theta, x);
        let loss = cross_entropy(tape, fwd.logits, &self.batch.labels);
        tape.check()?;
        Ok(loss)
    }
}

/// Domain-head cross-entropy on one batch (needs `aux_domain_head` and domain ids).
#[derive(Debug, Clone, Copy)]
pub struct DomainHeadLoss<'a> {
    pub spec: &'a ModelSpec,
    pub batch: &'a Batch,
}

impl<'a> DomainHeadLoss<'a> {
    pub fn new(spec: &'a ModelSpec, batch: &'a Batch) -> Self {
        Self { spec, batch }
    }
}

impl ScalarFn for DomainHeadLoss<'_> {
    fn build(&self, tape: &mut Tape, theta: Var) -> Result<Var> {
        let domains = self
            .spec
            .aux_domain_head
            .ok_or_else(|| Error::InvalidArgument("model has no domain head".into()))?;
        let ids = self.batch.domain_ids.as_ref().ok_or(Error::MissingDomainIds)?;
        if let Some(bad) = ids.iter().find(|&&d| d >= domains) {
            return Err(Error::Shape(format!(
                "domain id {bad} out of range for a {domains}-way head"
            )));
        }
        self.batch.check_against(self.spec)?;
        let x = tape.constant(self.batch.features.clone());
        let fwd = forward(self.spec, tape, theta, x);
        let logits = fwd.domain_logits.expect("domain head present");
        let loss = cross_entropy(tape, logits, ids);
        tape.check()?;
        Ok(loss)
    }
}

pub fn class_loss(theta: &ParamVector, batch: &Batch, spec: &ModelSpec) -> Result<f64> {
    autodiff::eval(&ClassLoss::new(spec, batch), theta)
}

pub fn domain_head_loss(theta: &ParamVector, batch: &Batch, spec: &ModelSpec) -> Result<f64> {
    autodiff::eval(&DomainHeadLoss::new(spec, batch), theta)
}

fn run_forward<T>(
    spec: &ModelSpec,
    theta: &ParamVector,
    features: &Tensor,
    pick: impl FnOnce(&Tape, Forward) -> T,
) -> Result<T> {
    if features.cols() != spec.input_dim() {
        return Err(Error::Shape("feature width differs from model input".into()));
    }
    let mut tape = Tape::new();
    let th = tape.param_leaf(theta);
    let x = tape.constant(features.clone());
    let fwd = forward(spec, &mut tape, th, x);
    tape.check()?;
    Ok(pick(&tape, fwd))
}

/// Penultimate-layer activations for each row of `features`.
pub fn penultimate_features(spec: &ModelSpec, theta: &ParamVector, features: &Tensor) -> Result<Tensor> {
    run_forward(spec, theta, features, |tape, fwd| tape.value(fwd.features).clone())
}

pub fn logits(spec: &ModelSpec, theta: &ParamVector, features: &Tensor) -> Result<Tensor> {
    run_forward(spec, theta, features, |tape, fwd| tape.value(fwd.logits).clone())
}

/// Arg-max class per row; ties go to the lowest index.
pub fn predict(spec: &ModelSpec, theta: &ParamVector, features: &Tensor) -> Result<Vec<usize>> {
    let z = logits(spec, theta, features)?;
    Ok((0..z.rows())
        .map(|r| {
            let row = z.row_slice(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

pub fn accuracy(spec: &ModelSpec, theta: &ParamVector, features: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = predict(spec, theta, features)?;
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_batch(rows: usize, d: usize, k: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let labels = (0..rows).map(|_| rng.random_range(0..k)).collect();
        Batch::new(Tensor::new(rows, d, data), labels).unwrap()
    }

    #[test]
    fn parameter_count_of_small_mlp() {
        assert_eq!(ModelSpec::mlp(vec![4, 8, 3]).num_params(), 4 * 8 + 8 + 8 * 3 + 3);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let spec = ModelSpec::mlp(vec![4, 8, 3]);
        assert_eq!(init_params(&spec, 7).unwrap(), init_params(&spec, 7).unwrap());
        assert_ne!(init_params(&spec, 7).unwrap(), init_params(&spec, 8).unwrap());
    }

    #[test]
    fn init_biases_zero_and_weights_bounded() {
        let spec = ModelSpec::mlp(vec![4, 8, 3]).with_batchnorm(true);
        let p = init_params(&spec, 1).unwrap();
        assert!(p.segment_values("b0").unwrap().iter().all(|&v| v == 0.0));
        assert!(p.segment_values("bn_gamma0").unwrap().iter().all(|&v| v == 1.0));
        let limit = (6.0f64 / 12.0).sqrt();
        assert!(p.segment_values("w0").unwrap().iter().all(|v| v.abs() < limit));
    }

    #[test]
    fn zero_weights_give_log_k_loss() {
        let spec = ModelSpec::mlp(vec![3, 6, 5]);
        let theta = ParamVector::zeros(Arc::new(spec.layout()));
        let batch = random_batch(10, 3, 5, 3);
        let loss = class_loss(&theta, &batch, &spec).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_give_near_zero_loss() {
        // Linear model with identity weights scaled by 1e3: logit of the true class dominates.
        let spec = ModelSpec::mlp(vec![3, 3]);
        let mut values = vec![0.0; spec.num_params()];
        for i in 0..3 {
            values[i * 3 + i] = 1e3;
        }
        let theta = ParamVector::new(Arc::new(spec.layout()), values).unwrap();
        let x = Tensor::new(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let batch = Batch::new(x, vec![0, 1, 2]).unwrap();
        assert!(class_loss(&theta, &batch, &spec).unwrap() <= 1e-6);
    }

    #[test]
    fn zero_weights_domain_head_gives_log_n() {
        let spec = ModelSpec::mlp(vec![2, 4, 3]).with_domain_head(3);
        let theta = ParamVector::zeros(Arc::new(spec.layout()));
        let batch = random_batch(6, 2, 3, 9).with_domain_ids(vec![0, 1, 2, 0, 1, 2]).unwrap();
        let loss = domain_head_loss(&theta, &batch, &spec).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn domain_head_requires_ids() {
        let spec = ModelSpec::mlp(vec![2, 4, 3]).with_domain_head(3);
        let theta = init_params(&spec, 0).unwrap();
        let batch = random_batch(6, 2, 3, 9);
        assert!(matches!(
            domain_head_loss(&theta, &batch, &spec),
            Err(Error::MissingDomainIds)
        ));
    }

    #[test]
    fn saturated_domain_head_on_single_domain_batch() {
        let spec = ModelSpec::mlp(vec![2, 4, 3]).with_domain_head(2);
        let mut theta = init_params(&spec, 4).unwrap().into_values();
        let layout = spec.layout();
        let b = layout.segment("dom_b").unwrap();
        theta[b.offset + 1] = 1e3;
        let theta = ParamVector::new(Arc::new(layout), theta).unwrap();
        let batch = random_batch(8, 2, 3, 2).with_domain_ids(vec![1; 8]).unwrap();
        assert!(domain_head_loss(&theta, &batch, &spec).unwrap() < 1e-6);
    }

    #[test]
    fn mismatched_batch_is_rejected() {
        let spec = ModelSpec::mlp(vec![3, 4, 2]);
        let theta = init_params(&spec, 0).unwrap();
        let batch = random_batch(4, 2, 2, 0);
        assert!(matches!(class_loss(&theta, &batch, &spec), Err(Error::Shape(_))));
        let bad_label = random_batch(4, 3, 5, 0);
        assert!(class_loss(&theta, &bad_label, &spec).is_err());
    }

    #[test]
    fn batch_standardize_gives_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (m, n) = (32, 5);
        let data: Vec<f64> = (0..m * n)
            .map(|i| {
                let e: f64 = StandardNormal.sample(&mut rng);
                3.0 * e + (i % n) as f64
            })
            .collect();
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::new(m, n, data));
        let s = batch_standardize(&mut tape, z);
        let out = tape.value(s);
        for c in 0..n {
            let col: Vec<f64> = (0..m).map(|r| out.get(r, c)).collect();
            let mean = col.iter().sum::<f64>() / m as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn predict_and_accuracy_agree() {
        let spec = ModelSpec::mlp(vec![2, 8, 3]);
        let theta = init_params(&spec, 5).unwrap();
        let batch = random_batch(20, 2, 3, 5);
        let pred = predict(&spec, &theta, &batch.features).unwrap();
        let acc = accuracy(&spec, &theta, &batch.features, &batch.labels).unwrap();
        let hits = pred.iter().zip(&batch.labels).filter(|(a, b)| a == b).count();
        assert_eq!(acc, hits as f64 / 20.0);
    }
}
