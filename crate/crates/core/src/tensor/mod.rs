//! Dense-matrix reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! return lightweight [`Var`] handles; [`Tape::backward`] walks the recorded
//! nodes in reverse insertion order, which is always a valid topological
//! order because a node can only reference nodes created before it.
//!
//! Parameters live outside the tape in [`Tensor`]s. A training step binds
//! them with [`Tape::leaf`], runs the forward pass, calls
//! [`Tape::backward`] and folds the result back with
//! [`Gradients::accumulate`].
//!
//! ```
//! use mmdshift::tensor::{Tape, Tensor};
//!
//! let x = Tensor::param(ndarray::arr2(&[[3.0]]));
//! let mut tape = Tape::new();
//! let xv = tape.leaf(&x);
//! let y = tape.square(xv).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(xv).unwrap()[[0, 0]], 6.0);
//! ```

mod gradcheck;
mod optim;

pub use gradcheck::gradient_check;
pub use optim::RmsProp;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// A trainable (or frozen) matrix with an optional accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    data: Matrix,
    grad: Option<Matrix>,
}

impl Tensor {
    /// A constant tensor; it never receives gradients.
    pub fn constant(data: Matrix) -> Self {
        Tensor { data, grad: None }
    }

    /// A tensor that participates in differentiation.
    pub fn param(data: Matrix) -> Self {
        let grad = Some(Matrix::zeros(data.dim()));
        Tensor { data, grad }
    }

    pub fn from_shape_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        let len = values.len();
        let data = Matrix::from_shape_vec((rows, cols), values)
            .map_err(|_| Error::Dimension {
                op: "from_shape_vec",
                lhs: (rows, cols),
                rhs: (len, 1),
            })?;
        Ok(Tensor::constant(data))
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Matrix {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&Matrix> {
        self.grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    pub(crate) fn grad_mut(&mut self) -> Option<&mut Matrix> {
        self.grad.as_mut()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Neg(Var),
    Square(Var),
    Scale(Var, f64),
    MeanAll(Var),
    SumAll(Var),
    ConcatCols(Var, Var),
    PairwiseSqDist(Var, Var),
    LogisticNoiseShift(Var),
    GatherRows(Var, Vec<usize>),
    /// Holds the elementwise derivative computed in the forward pass.
    ExpMixture(Var, Matrix),
    /// Slopes `k'(d2)` of the within-x, within-y and cross Gram entries.
    Mmd2 {
        x: Var,
        y: Var,
        sxx: Matrix,
        syy: Matrix,
        sxy: Matrix,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Adds the gradient of `var` into `tensor.grad`.
    pub fn accumulate(&self, var: Var, tensor: &mut Tensor) -> Result<()> {
        let shape = tensor.shape();
        let Some(slot) = tensor.grad_mut() else {
            return Err(Error::State("accumulating into a tensor without grad".into()));
        };
        if let Some(g) = self.get(var) {
            if g.dim() != shape {
                return Err(Error::Dimension {
                    op: "accumulate",
                    lhs: shape,
                    rhs: g.dim(),
                });
            }
            *slot += g;
        }
        Ok(())
    }
}

fn check_finite(op: &'static str, m: &Matrix) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { op })
    }
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension {
            op,
            lhs: a.dim(),
            rhs: b.dim(),
        });
    }
    Ok(())
}

pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus_value(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `f(x) = sum_k exp(-r_k x)` for a fixed set of positive rates.
///
/// When consecutive sorted rates differ by exact powers of two, only the
/// smallest rate calls `exp`; the rest come from repeated squaring.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpMixture {
    rates: Vec<f64>,
    squarings: Option<Vec<u32>>,
}

impl ExpMixture {
    pub fn new(rates: &[f64]) -> Result<Self> {
        if rates.is_empty() || rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::Argument("mixture rates must be positive and finite".into()));
        }
        let mut rates = rates.to_vec();
        rates.sort_by(|a, b| a.total_cmp(b));
        let squarings = rates
            .windows(2)
            .map(|w| {
                let ratio = w[1] / w[0];
                let m = ratio.log2().round();
                (m >= 0.0 && m <= 16.0 && 2f64.powi(m as i32) == ratio && w[0] * ratio == w[1])
                    .then_some(m as u32)
            })
            .collect::<Option<Vec<u32>>>();
        Ok(ExpMixture { rates, squarings })
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    /// `(f(x), f'(x))`.
    pub fn eval(&self, x: f64) -> (f64, f64) {
        match &self.squarings {
            Some(steps) => {
                let mut e = (-self.rates[0] * x).exp();
                let (mut f, mut df) = (e, -self.rates[0] * e);
                for (rate, &m) in self.rates[1..].iter().zip(steps) {
                    for _ in 0..m {
                        e *= e;
                    }
                    f += e;
                    df -= rate * e;
                }
                (f, df)
            }
            None => self.rates.iter().fold((0.0, 0.0), |(f, df), &r| {
                let e = (-r * x).exp();
                (f + e, df - r * e)
            }),
        }
    }
}

/// `d/dA sum_ij W_ij |a_i - b_j|^2 = 2 (rowsum(W) * A - W B)`.
fn sq_dist_grad_lhs(w: &Matrix, a: &Matrix, b: &Matrix) -> Matrix {
    let row = w.sum_axis(Axis(1)).insert_axis(Axis(1));
    (a * &row - w.dot(b)) * 2.0
}

/// Gram matrix of `f(|a_i - b_j|^2)` and its slopes. With `b = None` the
/// Gram of `a` with itself is filled from one triangle.
fn gram_with_slopes(a: &Matrix, b: Option<&Matrix>, f: &ExpMixture) -> Result<(Matrix, Matrix)> {
    let n = a.nrows();
    let m = b.map_or(n, |b| b.nrows());
    let d = a.ncols();
    let a_std = a.as_standard_layout();
    let b_std = b.map(|b| b.as_standard_layout());
    let av = a_std.as_slice().expect("standard layout");
    let bv = b_std.as_ref().map_or(av, |b| b.as_slice().expect("standard layout"));
    let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut k = vec![0.0; n * m];
    let mut slope = vec![0.0; n * m];
    if b.is_none() {
        let (f0, s0) = f.eval(0.0);
        for i in 0..n {
            let ai = &av[i * d..(i + 1) * d];
            k[i * n + i] = f0;
            slope[i * n + i] = s0;
            for j in 0..i {
                let (v, s) = f.eval(sq(ai, &av[j * d..(j + 1) * d]));
                k[i * n + j] = v;
                k[j * n + i] = v;
                slope[i * n + j] = s;
                slope[j * n + i] = s;
            }
        }
    } else {
        for i in 0..n {
            let ai = &av[i * d..(i + 1) * d];
            for j in 0..m {
                let (v, s) = f.eval(sq(ai, &bv[j * d..(j + 1) * d]));
                k[i * m + j] = v;
                slope[i * m + j] = s;
            }
        }
    }
    let k = Matrix::from_shape_vec((n, m), k).expect("n*m entries");
    check_finite("mmd2", &k)?;
    Ok((k, Matrix::from_shape_vec((n, m), slope).expect("n*m entries")))
}

/// Squared Euclidean distance between every row of `a` and every row of `b`,
/// accumulated coordinate-wise so that `pairwise_sq_dist(a, a)` is exactly
/// symmetric with an exactly zero diagonal.
pub fn pairwise_sq_dist(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let (n, d) = a.dim();
    let (m, db) = b.dim();
    if d != db {
        return Err(Error::Dimension {
            op: "pairwise_sq_dist",
            lhs: (n, d),
            rhs: (m, db),
        });
    }
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let (a, b) = (a.as_slice().unwrap(), b.as_slice().unwrap());
    let mut out = Vec::with_capacity(n * m);
    for ai in a.chunks_exact(d.max(1)).take(n) {
        for bj in b.chunks_exact(d.max(1)).take(m) {
            let mut acc = 0.0;
            for (x, y) in ai.iter().zip(bj) {
                let t = x - y;
                acc += t * t;
            }
            out.push(if d == 0 { 0.0 } else { acc });
        }
    }
    Ok(Matrix::from_shape_vec((n, m), out).expect("n*m entries"))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.nodes[var.0].value.dim()
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Matrix,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        check_finite(name, &value)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    /// Binds a [`Tensor`] as a leaf; the value is copied onto the tape.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(tensor.data.clone(), Op::Leaf, tensor.requires_grad())
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradients, for ad-hoc differentiation.
    pub fn variable(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Detached copy of a node's value.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.nodes[var.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: av.dim(),
                rhs: bv.dim(),
            });
        }
        let out = av.dot(bv);
        self.push_checked("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add_rowvector_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.nrows() != 1 || bv.ncols() != xv.ncols() {
            return Err(Error::Dimension {
                op: "add_rowvector_bias",
                lhs: xv.dim(),
                rhs: bv.dim(),
            });
        }
        let out = xv + bv;
        self.push_checked("add_rowvector_bias", out, Op::AddRowBias(x, bias), &[x, bias])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = self.value(a) + self.value(b);
        self.push_checked("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = self.value(a) - self.value(b);
        self.push_checked("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = self.value(a) * self.value(b);
        self.push_checked("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).mapv(|v| v.max(0.0));
        self.push_checked("relu", out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).mapv(stable_sigmoid);
        self.push_checked("sigmoid", out, Op::Sigmoid(x), &[x])
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).mapv(softplus_value);
        self.push_checked("softplus", out, Op::Softplus(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).mapv(f64::exp);
        self.push_checked("exp", out, Op::Exp(x), &[x])
    }

    pub fn negate(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).mapv(|v| -v);
        self.push_checked("negate", out, Op::Neg(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).mapv(|v| v * v);
        self.push_checked("square", out, Op::Square(x), &[x])
    }

    pub fn scalar_mul(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x) * c;
        self.push_checked("scalar_mul", out, Op::Scale(x, c), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::Argument("mean_all of an empty tensor".into()));
        }
        let out = Matrix::from_elem((1, 1), v.sum() / v.len() as f64);
        self.push_checked("mean_all", out, Op::MeanAll(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let out = Matrix::from_elem((1, 1), self.value(x).sum());
        self.push_checked("sum_all", out, Op::SumAll(x), &[x])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.nrows() != bv.nrows() {
            return Err(Error::Dimension {
                op: "concat_cols",
                lhs: av.dim(),
                rhs: bv.dim(),
            });
        }
        let out = ndarray::concatenate(Axis(1), &[av.view(), bv.view()]).expect("rows agree");
        self.push_checked("concat_cols", out, Op::ConcatCols(a, b), &[a, b])
    }

    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = pairwise_sq_dist(self.value(a), self.value(b))?;
        self.push_checked("pairwise_sq_dist", out, Op::PairwiseSqDist(a, b), &[a, b])
    }

    /// `logits + ln u - ln(1 - u)` for a constant uniform draw `u`.
    pub fn logistic_noise_shift(&mut self, logits: Var, uniform: &Matrix) -> Result<Var> {
        let lv = self.value(logits);
        same_shape("logistic_noise_shift", lv, uniform)?;
        if uniform.iter().any(|&u| !(u > 0.0 && u < 1.0)) {
            return Err(Error::Argument(
                "logistic noise requires uniforms strictly inside (0, 1)".into(),
            ));
        }
        let mut out = lv.clone();
        Zip::from(&mut out)
            .and(uniform)
            .for_each(|o, &u| *o += u.ln() - (-u).ln_1p());
        self.push_checked("logistic_noise_shift", out, Op::LogisticNoiseShift(logits), &[logits])
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= v.nrows()) {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: v.dim(),
                rhs: (bad, 0),
            });
        }
        let out = v.select(Axis(0), rows);
        self.push_checked("gather_rows", out, Op::GatherRows(x, rows.to_vec()), &[x])
    }

    /// Reverse pass from a 1x1 `loss`.
    /// Elementwise [`ExpMixture`].
    pub fn exp_mixture(&mut self, x: Var, mixture: &ExpMixture) -> Result<Var> {
        let xv = self.value(x);
        let mut out = Matrix::zeros(xv.dim());
        let mut slope = Matrix::zeros(xv.dim());
        Zip::from(&mut out)
            .and(&mut slope)
            .and(xv)
            .for_each(|o, s, &v| (*o, *s) = mixture.eval(v));
        check_finite("exp_mixture", &slope)?;
        self.push_checked("exp_mixture", out, Op::ExpMixture(x, slope), &[x])
    }

    /// Biased squared MMD `mean(Kxx) + mean(Kyy) - 2 mean(Kxy)` with
    /// `k(a, b) = f(|a - b|^2)` for the mixture `f`, as a single node.
    pub fn mmd2(&mut self, x: Var, y: Var, kernel: &ExpMixture) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        let ((n, d), (m, dy)) = (xv.dim(), yv.dim());
        if d != dy {
            return Err(Error::Dimension {
                op: "mmd2",
                lhs: (n, d),
                rhs: (m, dy),
            });
        }
        if n == 0 || m == 0 {
            return Err(Error::Argument("MMD needs at least one row per sample".into()));
        }
        let (kxx, sxx) = gram_with_slopes(xv, None, kernel)?;
        let (kyy, syy) = gram_with_slopes(yv, None, kernel)?;
        let (kxy, sxy) = gram_with_slopes(xv, Some(yv), kernel)?;
        let value = (kxx.sum() / (n * n) as f64 + kyy.sum() / (m * m) as f64)
            - 2.0 * (kxy.sum() / (n * m) as f64);
        let out = Matrix::from_elem((1, 1), value);
        self.push_checked("mmd2", out, Op::Mmd2 { x, y, sxx, syy, sxy }, &[x, y])
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::Dimension {
                op: "backward",
                lhs: shape,
                rhs: (1, 1),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (g, node) in grads.iter().zip(&self.nodes) {
            if let (Some(g), Op::Leaf) = (g, &node.op) {
                check_finite("backward", g)?;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, contrib: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => *acc += &contrib,
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if rg(*a) {
                    send(*a, g.dot(&self.value(*b).t()));
                }
                if rg(*b) {
                    send(*b, self.value(*a).t().dot(g));
                }
            }
            Op::AddRowBias(x, b) => {
                send(*x, g.clone());
                if rg(*b) {
                    send(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                if rg(*b) {
                    send(*b, -g);
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    send(*a, g * self.value(*b));
                }
                if rg(*b) {
                    send(*b, g * self.value(*a));
                }
            }
            Op::Relu(x) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*x))
                    .for_each(|d, &v| {
                        if v <= 0.0 {
                            *d = 0.0
                        }
                    });
                send(*x, d);
            }
            Op::Sigmoid(x) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &s| *d *= s * (1.0 - s));
                send(*x, d);
            }
            Op::Softplus(x) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*x))
                    .for_each(|d, &v| *d *= stable_sigmoid(v));
                send(*x, d);
            }
            Op::Exp(x) => send(*x, g * &node.value),
            Op::Neg(x) => send(*x, -g),
            Op::Square(x) => send(*x, g * self.value(*x) * 2.0),
            Op::Scale(x, c) => send(*x, g * *c),
            Op::MeanAll(x) => {
                let v = self.value(*x);
                send(*x, Matrix::from_elem(v.dim(), g[[0, 0]] / v.len() as f64));
            }
            Op::SumAll(x) => send(*x, Matrix::from_elem(self.shape(*x), g[[0, 0]])),
            Op::ConcatCols(a, b) => {
                let split = self.shape(*a).1;
                if rg(*a) {
                    send(*a, g.slice(s![.., ..split]).to_owned());
                }
                if rg(*b) {
                    send(*b, g.slice(s![.., split..]).to_owned());
                }
            }
            Op::PairwiseSqDist(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if rg(*a) {
                    let row = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let d = (av * &row - g.dot(bv)) * 2.0;
                    send(*a, d);
                }
                if rg(*b) {
                    let col = g.sum_axis(Axis(0)).insert_axis(Axis(1));
                    let d = (bv * &col - g.t().dot(av)) * 2.0;
                    send(*b, d);
                }
            }
            Op::LogisticNoiseShift(x) => send(*x, g.clone()),
            Op::ExpMixture(x, slope) => send(*x, g * slope),
            Op::Mmd2 { x, y, sxx, syy, sxy } => {
                let g = g[[0, 0]];
                let (xv, yv) = (self.value(*x), self.value(*y));
                let (n, m) = (xv.nrows() as f64, yv.nrows() as f64);
                let cross = sxy * (-2.0 * g / (n * m));
                if rg(*x) {
                    let within = sxx * (g / (n * n));
                    let mut d = sq_dist_grad_lhs(&within, xv, xv) * 2.0;
                    d += &sq_dist_grad_lhs(&cross, xv, yv);
                    send(*x, d);
                }
                if rg(*y) {
                    let within = syy * (g / (m * m));
                    let mut d = sq_dist_grad_lhs(&within, yv, yv) * 2.0;
                    d += &sq_dist_grad_lhs(&cross.t().to_owned(), yv, xv);
                    send(*y, d);
                }
            }
            Op::GatherRows(x, rows) => {
                if rg(*x) {
                    let mut d = Matrix::zeros(self.shape(*x));
                    for (src, &dst) in rows.iter().enumerate() {
                        let mut row = d.row_mut(dst);
                        row += &g.row(src);
                    }
                    send(*x, d);
                }
            }
        }
    }
}
