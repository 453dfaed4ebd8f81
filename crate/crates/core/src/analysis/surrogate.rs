use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{ScalarFn, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `f(theta) = 0.5 theta^T A theta + b . theta` with symmetric `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSurrogate {
    pub a: Tensor,
    pub b: Tensor,
}

impl QuadraticSurrogate {
    pub fn new(a: Tensor, b: Tensor) -> Result<Self> {
        let p = a.rows();
        if a.cols() != p || b.shape() != (1, p) {
            return Err(Error::Shape("quadratic needs p x p matrix and 1 x p vector".into()));
        }
        for i in 0..p {
            for j in 0..i {
                if a.get(i, j) != a.get(j, i) {
                    return Err(Error::InvalidArgument("quadratic matrix must be symmetric".into()));
                }
            }
        }
        Ok(Self { a, b })
    }

    /// Symmetric positive-definite `A = M^T M / p + I / 2` and Gaussian `b`.
    pub fn random(p: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m: Vec<f64> = (0..p * p).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut a = vec![0.0; p * p];
        for i in 0..p {
            for j in 0..=i {
                let s: f64 = (0..p).map(|k| m[k * p + i] * m[k * p + j]).sum::<f64>() / p as f64;
                let s = if i == j { s + 0.5 } else { s };
                a[i * p + j] = s;
                a[j * p + i] = s;
            }
        }
        let b = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self {
            a: Tensor::new(p, p, a),
            b: Tensor::row(b),
        }
    }

    /// `A v` for a plain vector.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.a.rows())
            .map(|i| self.a.row_slice(i).iter().zip(v).map(|(x, y)| x * y).sum())
            .collect()
    }
}

impl ScalarFn for QuadraticSurrogate {
    fn build(&self, tape: &mut Tape, theta: Var) -> Result<Var> {
        let a = tape.constant(self.a.clone());
        let b = tape.constant(self.b.clone());
        let at = tape.matmul(theta, a);
        let quad = tape.dot(at, theta);
        let half = tape.scale(quad, 0.5);
        let lin = tape.dot(b, theta);
        Ok(tape.add(half, lin))
    }
}

/// `f(theta) = ||X theta - y||^2` for a `1 x d` parameter row.
#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquares {
    /// `n x d`
    pub x: Tensor,
    /// `n x 1`
    pub y: Tensor,
}

impl LeastSquares {
    pub fn new(x: Tensor, y: Vec<f64>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::Shape("targets must match design rows".into()));
        }
        let n = y.len();
        Ok(Self {
            x,
            y: Tensor::new(n, 1, y),
        })
    }
}

impl ScalarFn for LeastSquares {
    fn build(&self, tape: &mut Tape, theta: Var) -> Result<Var> {
        let x = tape.constant(self.x.clone());
        let y = tape.constant(self.y.clone());
        let col = tape.transpose(theta);
        let pred = tape.matmul(x, col);
        let r = tape.sub(pred, y);
        Ok(tape.sum_sq(r))
    }
}
