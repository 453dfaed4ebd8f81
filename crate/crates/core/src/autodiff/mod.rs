//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Every operation is evaluated eagerly and recorded on a [`Tape`]. The
//! backward sweep ([`Tape::gradients`]) does not produce bare numbers: it
//! records the adjoint computation as new nodes on the same tape. A gradient
//! is therefore itself differentiable, which gives second-order meta-gradients
//! and exact Hessian-vector products without a separate forward-mode engine.
//! [`Tape::detach`] cuts that chain and is how first-order approximations are
//! expressed.
//!
//! ```
//! use seqdg::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::row(vec![3.0, -2.0]));
//! let sq = tape.sum_sq(x);
//! let f = tape.scale(sq, 0.5);
//! let g = tape.grad(f, x).unwrap();
//! assert_eq!(tape.value(g).data(), &[3.0, -2.0]);
//! ```

mod params;
mod tensor;

pub use params::{Layout, ParamVector, Segment};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Const,
    /// Forward copy; no adjoint flows back.
    Detach,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    /// `m x n` plus a `1 x n` row broadcast over rows.
    AddRow(usize, usize),
    /// `m x n -> 1 x n`
    SumRows(usize),
    /// `m x n -> m x 1`
    SumCols(usize),
    /// `1 x n -> m x n`
    BroadcastRows(usize),
    /// `m x 1 -> m x n`
    BroadcastCols(usize),
    SumAll(usize),
    /// `1 x 1 -> m x n`
    Fill(usize),
    Relu(usize),
    /// Indicator `x > 0`; derivative treated as zero.
    Step,
    Exp(usize),
    LogSoftmax(usize),
    Sqrt(usize),
    /// `1/x`, defined as 0 at `x == 0`.
    SafeRecip(usize),
    /// Block `rows x cols` read from a `1 x len` row at `offset`.
    Slice(usize, usize),
    /// Block written into a zero `1 x len` row at `offset`.
    Embed(usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::Detach => "detach",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::AddRow(..) => "add_row",
            Op::SumRows(..) => "sum_rows",
            Op::SumCols(..) => "sum_cols",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::SumAll(..) => "sum_all",
            Op::Fill(..) => "fill",
            Op::Relu(..) => "relu",
            Op::Step => "step",
            Op::Exp(..) => "exp",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Sqrt(..) => "sqrt",
            Op::SafeRecip(..) => "safe_recip",
            Op::Slice(..) => "slice",
            Op::Embed(..) => "embed",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Computation record for one loss evaluation. Build a fresh tape per evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    first_non_finite: Option<usize>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let idx = self.nodes.len();
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(idx);
        }
        self.nodes.push(Node { value, op });
        Var(idx)
    }

    /// Errors if any recorded node holds a non-finite value.
    pub fn check(&self) -> Result<()> {
        match self.first_non_finite {
            None => Ok(()),
            Some(op_index) => Err(Error::NonFinite {
                op_index,
                op: self.nodes[op_index].op.name(),
            }),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    // leaves

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records parameters as a `1 x len` leaf row.
    pub fn param_leaf(&mut self, params: &ParamVector) -> Var {
        self.leaf(Tensor::row(params.values().to_vec()))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Same forward value, treated as a constant by [`Tape::gradients`].
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::Detach)
    }

    // elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a.0, b.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| -x);
        self.push(value, Op::Neg(a.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| c * x);
        self.push(value, Op::Scale(a.0, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(value, Op::Relu(a.0))
    }

    fn step(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.push(value, Op::Step)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        self.push(value, Op::Sqrt(a.0))
    }

    pub fn safe_recip(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map(|x| if x == 0.0 { 0.0 } else { 1.0 / x });
        self.push(value, Op::SafeRecip(a.0))
    }

    // linear algebra and reductions

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a.0))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row expects a 1 x {n} row");
        let r = self.value(row).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, b) in chunk.iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.push(Tensor::new(m, n, data), Op::AddRow(a.0, row.0))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let src = self.value(a);
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, x) in out.iter_mut().zip(src.row_slice(r)) {
                *o += x;
            }
        }
        self.push(Tensor::new(1, n, out), Op::SumRows(a.0))
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (m, _) = self.shape(a);
        let src = self.value(a);
        let out = (0..m).map(|r| src.row_slice(r).iter().sum()).collect();
        self.push(Tensor::new(m, 1, out), Op::SumCols(a.0))
    }

    pub fn broadcast_rows(&mut self, a: Var, m: usize) -> Var {
        let (r, n) = self.shape(a);
        assert_eq!(r, 1, "broadcast_rows expects a row");
        let row = self.value(a).data();
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(row);
        }
        self.push(Tensor::new(m, n, data), Op::BroadcastRows(a.0))
    }

    pub fn broadcast_cols(&mut self, a: Var, n: usize) -> Var {
        let (m, c) = self.shape(a);
        assert_eq!(c, 1, "broadcast_cols expects a column");
        let col = self.value(a).data();
        let mut data = Vec::with_capacity(m * n);
        for &v in col {
            data.extend(std::iter::repeat_n(v, n));
        }
        self.push(Tensor::new(m, n, data), Op::BroadcastCols(a.0))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a.0))
    }

    pub fn fill(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).item();
        self.push(Tensor::filled(rows, cols, v), Op::Fill(a.0))
    }

    /// Row-wise `x - logsumexp(x)`.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let src = self.value(a);
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = src.row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|x| x - lse));
        }
        self.push(Tensor::new(m, n, data), Op::LogSoftmax(a.0))
    }

    /// Reads a `rows x cols` block starting at `offset` of a `1 x len` row.
    pub fn slice(&mut self, a: Var, offset: usize, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.rows(), 1, "slice expects a row");
        assert!(offset + rows * cols <= src.cols(), "slice out of bounds");
        let data = src.data()[offset..offset + rows * cols].to_vec();
        self.push(Tensor::new(rows, cols, data), Op::Slice(a.0, offset))
    }

    /// Writes `a` (flattened) into a zero `1 x len` row at `offset`.
    pub fn embed(&mut self, a: Var, offset: usize, len: usize) -> Var {
        let src = self.value(a);
        assert!(offset + src.len() <= len, "embed out of bounds");
        let mut data = vec![0.0; len];
        data[offset..offset + src.len()].copy_from_slice(src.data());
        self.push(Tensor::new(1, len, data), Op::Embed(a.0, offset))
    }

    // composites

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum_all(p)
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        self.dot(a, a)
    }

    /// Euclidean norm. Its derivative at the origin is taken to be zero.
    pub fn norm(&mut self, a: Var) -> Var {
        let s = self.sum_sq(a);
        self.sqrt(s)
    }

    /// Multiplies every element of `a` by the `1 x 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let (m, n) = self.shape(a);
        let f = self.fill(s, m, n);
        self.mul(a, f)
    }

    /// `a - c * b`, the inner-loop parameter shift.
    pub fn axpy(&mut self, a: Var, c: f64, b: Var) -> Var {
        let sb = self.scale(b, c);
        self.sub(a, sb)
    }

    /// Reads a named parameter segment out of a `1 x len` parameter row.
    pub fn segment(&mut self, theta: Var, seg: &Segment) -> Var {
        self.slice(theta, seg.offset, seg.rows, seg.cols)
    }

    // backward

    fn accumulate(&mut self, adj: &mut [Option<Var>], target: usize, contrib: Var) {
        let next = match adj[target] {
            None => contrib,
            Some(prev) => self.add(prev, contrib),
        };
        adj[target] = Some(next);
    }

    /// Adjoints of the scalar `y` with respect to each of `wrt`.
    ///
    /// The adjoints are recorded on the tape as differentiable nodes, so the
    /// result can itself be differentiated. Inputs `y` does not depend on
    /// receive a zero constant.
    pub fn gradients(&mut self, y: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        assert_eq!(self.shape(y), (1, 1), "gradients() needs a scalar output");
        self.check()?;
        let n = y.0 + 1;
        let mut adj: Vec<Option<Var>> = vec![None; n];
        adj[y.0] = Some(self.scalar(1.0));

        for i in (0..n).rev() {
            let Some(g) = adj[i] else { continue };
            let out = Var(i);
            match self.nodes[i].op {
                Op::Leaf | Op::Const | Op::Detach | Op::Step => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, a, g);
                    self.accumulate(&mut adj, b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adj, a, g);
                    let ng = self.neg(g);
                    self.accumulate(&mut adj, b, ng);
                }
                Op::Mul(a, b) => {
                    let ga = self.mul(g, Var(b));
                    self.accumulate(&mut adj, a, ga);
                    let gb = self.mul(g, Var(a));
                    self.accumulate(&mut adj, b, gb);
                }
                Op::Neg(a) => {
                    let ga = self.neg(g);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Scale(a, c) => {
                    let ga = self.scale(g, c);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::MatMul(a, b) => {
                    let bt = self.transpose(Var(b));
                    let ga = self.matmul(g, bt);
                    self.accumulate(&mut adj, a, ga);
                    let at = self.transpose(Var(a));
                    let gb = self.matmul(at, g);
                    self.accumulate(&mut adj, b, gb);
                }
                Op::Transpose(a) => {
                    let ga = self.transpose(g);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::AddRow(a, b) => {
                    self.accumulate(&mut adj, a, g);
                    let gb = self.sum_rows(g);
                    self.accumulate(&mut adj, b, gb);
                }
                Op::SumRows(a) => {
                    let m = self.nodes[a].value.rows();
                    let ga = self.broadcast_rows(g, m);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::SumCols(a) => {
                    let n = self.nodes[a].value.cols();
                    let ga = self.broadcast_cols(g, n);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::BroadcastRows(a) => {
                    let ga = self.sum_rows(g);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::BroadcastCols(a) => {
                    let ga = self.sum_cols(g);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::SumAll(a) => {
                    let (m, n) = self.nodes[a].value.shape();
                    let ga = self.fill(g, m, n);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Fill(a) => {
                    let ga = self.sum_all(g);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Relu(a) => {
                    let mask = self.step(Var(a));
                    let ga = self.mul(g, mask);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Exp(a) => {
                    let ga = self.mul(g, out);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::LogSoftmax(a) => {
                    let n = self.nodes[a].value.cols();
                    let probs = self.exp(out);
                    let row_sums = self.sum_cols(g);
                    let spread = self.broadcast_cols(row_sums, n);
                    let weighted = self.mul(probs, spread);
                    let ga = self.sub(g, weighted);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Sqrt(a) => {
                    let r = self.safe_recip(out);
                    let half = self.scale(r, 0.5);
                    let ga = self.mul(g, half);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::SafeRecip(a) => {
                    let sq = self.mul(out, out);
                    let prod = self.mul(g, sq);
                    let ga = self.neg(prod);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Slice(a, offset) => {
                    let len = self.nodes[a].value.cols();
                    let ga = self.embed(g, offset, len);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Embed(a, offset) => {
                    let (r, c) = self.nodes[a].value.shape();
                    let ga = self.slice(g, offset, r, c);
                    self.accumulate(&mut adj, a, ga);
                }
            }
        }

        let out = wrt
            .iter()
            .map(|&v| match adj.get(v.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = self.shape(v);
                    self.constant(Tensor::zeros(r, c))
                }
            })
            .collect();
        self.check()?;
        Ok(out)
    }

    /// Adjoint of the scalar `y` with respect to `x`, as a differentiable node.
    pub fn grad(&mut self, y: Var, x: Var) -> Result<Var> {
        Ok(self.gradients(y, &[x])?[0])
    }
}

/// A scalar loss built on a tape from a `1 x len` parameter row.
pub trait ScalarFn {
    fn build(&self, tape: &mut Tape, theta: Var) -> Result<Var>;
}

impl<F> ScalarFn for F
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    fn build(&self, tape: &mut Tape, theta: Var) -> Result<Var> {
        self(tape, theta)
    }
}

fn finite_params(theta: &ParamVector) -> Result<()> {
    if theta.values().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteInput("parameters".into()))
    }
}

/// Evaluates `f` at `theta`.
pub fn eval(f: &dyn ScalarFn, theta: &ParamVector) -> Result<f64> {
    finite_params(theta)?;
    let mut tape = Tape::new();
    let th = tape.param_leaf(theta);
    let y = f.build(&mut tape, th)?;
    tape.check()?;
    Ok(tape.scalar_value(y))
}

pub fn value_and_grad(f: &dyn ScalarFn, theta: &ParamVector) -> Result<(f64, ParamVector)> {
    finite_params(theta)?;
    let mut tape = Tape::new();
    let th = tape.param_leaf(theta);
    let y = f.build(&mut tape, th)?;
    let g = tape.grad(y, th)?;
    let grad = theta.with_values(tape.value(g).data().to_vec())?;
    Ok((tape.scalar_value(y), grad))
}

/// `df/dtheta`, same layout as `theta`.
pub fn grad(f: &dyn ScalarFn, theta: &ParamVector) -> Result<ParamVector> {
    value_and_grad(f, theta).map(|(_, g)| g)
}

/// Exact Hessian-vector product `(d^2 f / dtheta^2) v`, by differentiating
/// `grad(f) . v` a second time.
pub fn hvp(f: &dyn ScalarFn, theta: &ParamVector, v: &ParamVector) -> Result<ParamVector> {
    theta.check_layout(v)?;
    finite_params(theta)?;
    let mut tape = Tape::new();
    let th = tape.param_leaf(theta);
    let y = f.build(&mut tape, th)?;
    let g = tape.grad(y, th)?;
    let dir = tape.constant(Tensor::row(v.values().to_vec()));
    let gv = tape.dot(g, dir);
    let h = tape.grad(gv, th)?;
    theta.with_values(tape.value(h).data().to_vec())
}
