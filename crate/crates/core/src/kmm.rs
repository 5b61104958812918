//! Kernel mean matching: nonnegative training-sample weights whose weighted
//! kernel mean embedding matches the test embedding.
//!
//! Solves `min 0.5 b'Kb - kappa'b` subject to `0 <= b_i <= B` and
//! `|sum(b) - n| <= n * eps` with accelerated projected gradient descent
//! (Nesterov momentum, restarted whenever the objective rises). The
//! projection onto the box-and-slab set is exact: clamp, and if the sum
//! leaves the slab, find by bisection the uniform shift whose clamped
//! result sits on the nearest slab face.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{mixture_gram_values, KernelSpec};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KmmConfig {
    pub kernel: KernelSpec,
    pub upper_bound: f64,
    /// Sum slack; `None` means `(sqrt(n) - 1) / sqrt(n)`.
    pub slack: Option<f64>,
    pub max_iters: usize,
    /// `None` means `1 / max_i sum_j K_ij`.
    pub step_size: Option<f64>,
    /// Stop once no weight moves by more than this in one iteration.
    pub tolerance: f64,
}

impl Default for KmmConfig {
    fn default() -> Self {
        KmmConfig {
            kernel: KernelSpec::default(),
            upper_bound: 1000.0,
            slack: None,
            max_iters: 5000,
            step_size: None,
            tolerance: 1e-8,
        }
    }
}

impl KmmConfig {
    pub fn slack_for(&self, n: usize) -> f64 {
        self.slack.unwrap_or_else(|| {
            let r = (n as f64).sqrt();
            (r - 1.0) / r
        })
    }

    fn check(&self, n: usize) -> Result<f64> {
        let eps = self.slack_for(n);
        if !(self.upper_bound > 0.0) {
            return Err(Error::Config("KMM upper bound must be positive".into()));
        }
        if !(eps >= 0.0) {
            return Err(Error::Config("KMM slack must be nonnegative".into()));
        }
        if self.upper_bound * (n as f64) < (n as f64) * (1.0 - eps) {
            return Err(Error::Config(format!(
                "infeasible KMM constraints: B*n = {} < n(1-eps) = {}",
                self.upper_bound * n as f64,
                n as f64 * (1.0 - eps)
            )));
        }
        Ok(eps)
    }
}

/// Projects onto `[0, B]^n ∩ {|sum - n| <= n*eps}`.
pub fn project_feasible(beta: &[f64], config: &KmmConfig) -> Result<Vec<f64>> {
    let n = beta.len();
    let eps = config.check(n)?;
    let b = config.upper_bound;
    let clamp = |v: f64| v.clamp(0.0, b);
    let mut out: Vec<f64> = beta.iter().map(|&v| clamp(v)).collect();
    let (lo, hi) = (n as f64 * (1.0 - eps), n as f64 * (1.0 + eps));
    let sum: f64 = out.iter().sum();
    let target = if sum < lo {
        lo
    } else if sum > hi {
        hi
    } else {
        return Ok(out);
    };

    let shifted_sum = |t: f64| beta.iter().map(|&v| clamp(v + t)).sum::<f64>();
    let max = beta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = beta.iter().cloned().fold(f64::INFINITY, f64::min);
    let (mut t_lo, mut t_hi) = (-max, b - min);
    for _ in 0..200 {
        let mid = 0.5 * (t_lo + t_hi);
        if shifted_sum(mid) < target {
            t_lo = mid;
        } else {
            t_hi = mid;
        }
        if t_hi - t_lo <= f64::EPSILON * (1.0 + t_hi.abs()) {
            break;
        }
    }
    // pick the bracket end that is inside the slab
    let t = if (lo..=hi).contains(&shifted_sum(t_hi)) { t_hi } else { t_lo };
    out = beta.iter().map(|&v| clamp(v + t)).collect();
    Ok(out)
}

/// Quadratic-program data for one train/test pair.
#[derive(Debug, Clone)]
pub struct KmmProblem {
    pub gram: Matrix,
    pub kappa: Vec<f64>,
    /// `mean_{j,j'} k(x'_j, x'_j')`, for discrepancy reporting.
    pub test_mean_kernel: f64,
}

const BLOCK: usize = 512;

impl KmmProblem {
    pub fn new(train: &Matrix, test: &Matrix, kernel: &KernelSpec) -> Result<Self> {
        let (n, m) = (train.nrows(), test.nrows());
        if n == 0 || m == 0 {
            return Err(Error::Argument("KMM needs nonempty train and test sets".into()));
        }
        if train.ncols() != test.ncols() {
            return Err(Error::Dimension {
                op: "kmm",
                lhs: train.dim(),
                rhs: test.dim(),
            });
        }
        let gram = mixture_gram_values(train, train, kernel)?;
        let mut kappa = vec![0.0; n];
        let scale = n as f64 / m as f64;
        for start in (0..n).step_by(BLOCK) {
            let end = (start + BLOCK).min(n);
            let block = mixture_gram_values(
                &train.slice(ndarray::s![start..end, ..]).to_owned(),
                test,
                kernel,
            )?;
            for (r, row) in block.rows().into_iter().enumerate() {
                kappa[start + r] = scale * row.sum();
            }
        }
        let mut test_sum = 0.0;
        for start in (0..m).step_by(BLOCK) {
            let end = (start + BLOCK).min(m);
            let block = mixture_gram_values(
                &test.slice(ndarray::s![start..end, ..]).to_owned(),
                test,
                kernel,
            )?;
            test_sum += block.sum();
        }
        Ok(KmmProblem {
            gram,
            kappa,
            test_mean_kernel: test_sum / (m * m) as f64,
        })
    }

    pub fn n(&self) -> usize {
        self.kappa.len()
    }

    fn gradient(&self, beta: &[f64]) -> Vec<f64> {
        let b = ndarray::ArrayView1::from(beta);
        let kb = self.gram.dot(&b);
        kb.iter().zip(&self.kappa).map(|(k, c)| k - c).collect()
    }

    /// `0.5 b'Kb - kappa'b`.
    pub fn objective(&self, beta: &[f64]) -> f64 {
        let b = ndarray::ArrayView1::from(beta);
        let kb = self.gram.dot(&b);
        0.5 * b.dot(&kb) - b.iter().zip(&self.kappa).map(|(x, c)| x * c).sum::<f64>()
    }

    /// `|| (1/n) sum b_i phi(x_i) - (1/m) sum phi(x'_j) ||^2`.
    pub fn discrepancy(&self, beta: &[f64]) -> f64 {
        let n2 = (self.n() * self.n()) as f64;
        2.0 * self.objective(beta) / n2 + self.test_mean_kernel
    }

    pub fn default_step(&self) -> f64 {
        let max_row = self
            .gram
            .rows()
            .into_iter()
            .map(|r| r.sum())
            .fold(0.0, f64::max);
        1.0 / max_row
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmmSolution {
    pub weights: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

impl KmmSolution {
    /// `(sum residual beyond the slab, largest box violation)`; both zero
    /// for a feasible point.
    pub fn feasibility_residuals(&self, config: &KmmConfig) -> (f64, f64) {
        let n = self.weights.len() as f64;
        let eps = config.slack_for(self.weights.len());
        let sum: f64 = self.weights.iter().sum();
        let slab = ((sum - n).abs() - n * eps).max(0.0);
        let boxv = self
            .weights
            .iter()
            .map(|&b| (-b).max(b - config.upper_bound).max(0.0))
            .fold(0.0, f64::max);
        (slab, boxv)
    }
}

pub fn solve_problem(problem: &KmmProblem, config: &KmmConfig) -> Result<KmmSolution> {
    let n = problem.n();
    config.check(n)?;
    let step = config.step_size.unwrap_or_else(|| problem.default_step());
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config(format!("invalid KMM step size {step}")));
    }
    let mut beta = project_feasible(&vec![1.0; n], config)?;
    let mut prev = beta.clone();
    let mut obj = problem.objective(&beta);
    let mut best = (beta.clone(), obj);
    let mut momentum = 1.0f64;
    let mut rising = 0usize;
    let mut trace = vec![obj];
    let mut iterations = 0;
    for it in 0..config.max_iters {
        iterations = it + 1;
        let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        let mix = (momentum - 1.0) / next_momentum;
        let look: Vec<f64> = beta.iter().zip(&prev).map(|(b, p)| b + mix * (b - p)).collect();
        let grad = problem.gradient(&look);
        let proposal: Vec<f64> = look.iter().zip(&grad).map(|(b, g)| b - step * g).collect();
        let next = project_feasible(&proposal, config)?;
        let next_obj = problem.objective(&next);
        let moved = next
            .iter()
            .zip(&beta)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if next_obj > obj {
            rising += 1;
            // adaptive restart: drop the momentum once the objective goes up
            momentum = 1.0;
        } else {
            rising = 0;
            momentum = next_momentum;
        }
        prev = std::mem::replace(&mut beta, next);
        obj = next_obj;
        trace.push(obj);
        if obj < best.1 {
            best = (beta.clone(), obj);
        }
        if rising >= 100 {
            return Err(Error::Solver {
                iterations,
                reason: "objective increased for 100 consecutive iterations".into(),
                trace,
            });
        }
        if moved < config.tolerance {
            break;
        }
    }
    Ok(KmmSolution {
        weights: best.0,
        objective: best.1,
        iterations,
    })
}

pub fn solve_kmm(train: &Matrix, test: &Matrix, config: &KmmConfig) -> Result<KmmSolution> {
    let problem = KmmProblem::new(train, test, &config.kernel)?;
    solve_problem(&problem, config)
}

/// Single-column CSV aligned with the training rows.
pub fn write_weights_csv(path: &Path, weights: &[f64]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(w, "weight").map_err(io)?;
    for b in weights {
        writeln!(w, "{b}").map_err(io)?;
    }
    w.flush().map_err(io)
}
