//! Mixture-of-RBF Gram matrices and biased (V-statistic) MMD² estimators.
//!
//! The kernel is `k(a, b) = sum_s exp(-|a - b|^2 / (2 s^2))` over the
//! bandwidths `s` of a [`KernelSpec`]. All estimators keep the diagonal
//! terms, so `mmd2_biased(X, X) == 0` exactly and the statistic is never
//! negative beyond rounding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{pairwise_sq_dist, ExpMixture, Matrix, Tape, Var};

pub const DEFAULT_BANDWIDTHS: [f64; 6] = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0];

/// How the configured bandwidth numbers map onto the RBF kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthSemantics {
    /// Values are `s` in `exp(-d / (2 s^2))`.
    #[default]
    Sigma,
    /// Values are `s^2`.
    Variance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct KernelSpec {
    bandwidths: Vec<f64>,
}

impl KernelSpec {
    pub fn new(bandwidths: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() {
            return Err(Error::Config("kernel needs at least one bandwidth".into()));
        }
        if let Some(bad) = bandwidths.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Config(format!("bandwidth must be positive, got {bad}")));
        }
        Ok(KernelSpec { bandwidths })
    }

    pub fn with_semantics(values: Vec<f64>, semantics: BandwidthSemantics) -> Result<Self> {
        let spec = Self::new(values)?;
        Ok(match semantics {
            BandwidthSemantics::Sigma => spec,
            BandwidthSemantics::Variance => KernelSpec {
                bandwidths: spec.bandwidths.iter().map(|v| v.sqrt()).collect(),
            },
        })
    }

    pub fn single(sigma: f64) -> Result<Self> {
        Self::new(vec![sigma])
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    /// Number of mixture components; also the value of `k(a, a)`.
    pub fn len(&self) -> usize {
        self.bandwidths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bandwidths.is_empty()
    }

    fn mixture(&self) -> ExpMixture {
        let rates: Vec<f64> = self.bandwidths.iter().map(|s| 1.0 / (2.0 * s * s)).collect();
        ExpMixture::new(&rates).expect("bandwidths validated positive")
    }

    /// Kernel value from a squared distance.
    pub fn eval_sq_dist(&self, d2: f64) -> f64 {
        self.mixture().eval(d2).0
    }
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            bandwidths: DEFAULT_BANDWIDTHS.to_vec(),
        }
    }
}

impl TryFrom<Vec<f64>> for KernelSpec {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        KernelSpec::new(v)
    }
}

impl From<KernelSpec> for Vec<f64> {
    fn from(k: KernelSpec) -> Self {
        k.bandwidths
    }
}

/// Differentiable mixture Gram matrix between the rows of `a` and `b`.
pub fn mixture_gram(tape: &mut Tape, a: Var, b: Var, spec: &KernelSpec) -> Result<Var> {
    let d2 = tape.pairwise_sq_dist(a, b)?;
    tape.exp_mixture(d2, &spec.mixture())
}

/// Plain Gram matrix, no tape.
pub fn mixture_gram_values(a: &Matrix, b: &Matrix, spec: &KernelSpec) -> Result<Matrix> {
    let mut d2 = pairwise_sq_dist(a, b)?;
    let mix = spec.mixture();
    d2.mapv_inplace(|d| mix.eval(d).0);
    Ok(d2)
}

fn check_sets(tape: &Tape, x: Var, y: Var) -> Result<()> {
    let (xs, ys) = (tape.shape(x), tape.shape(y));
    if xs.0 == 0 || ys.0 == 0 {
        return Err(Error::Argument("MMD needs at least one row per sample".into()));
    }
    if xs.1 != ys.1 {
        return Err(Error::Dimension {
            op: "mmd2",
            lhs: xs,
            rhs: ys,
        });
    }
    Ok(())
}

/// `mean(Kxx) + mean(Kyy) - 2 mean(Kxy)` on precomputed Gram nodes.
fn combine(tape: &mut Tape, kxx: Var, kyy: Var, kxy: Var) -> Result<Var> {
    let mxx = tape.mean_all(kxx)?;
    let myy = tape.mean_all(kyy)?;
    let mxy = tape.mean_all(kxy)?;
    let within = tape.add(mxx, myy)?;
    let cross = tape.scalar_mul(mxy, 2.0)?;
    tape.sub(within, cross)
}

pub fn mmd2_biased(tape: &mut Tape, x: Var, y: Var, spec: &KernelSpec) -> Result<Var> {
    check_sets(tape, x, y)?;
    tape.mmd2(x, y, &spec.mixture())
}

/// Convenience evaluation of [`mmd2_biased`] on plain matrices.
pub fn mmd2_value(x: &Matrix, y: &Matrix, spec: &KernelSpec) -> Result<f64> {
    let mut tape = Tape::new();
    let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let out = mmd2_biased(&mut tape, xv, yv, spec)?;
    Ok(tape.scalar(out))
}

fn check_layers(tape: &Tape, xs: &[Var], ys: &[Var]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::Argument(format!(
            "layer lists differ in length: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.is_empty() {
        return Err(Error::Argument("at least one layer is required".into()));
    }
    for (&x, &y) in xs.iter().zip(ys) {
        check_sets(tape, x, y)?;
    }
    let (nx, ny) = (tape.shape(xs[0]).0, tape.shape(ys[0]).0);
    if xs.iter().any(|&v| tape.shape(v).0 != nx) || ys.iter().any(|&v| tape.shape(v).0 != ny) {
        return Err(Error::Argument("layers of one sample must share a row count".into()));
    }
    Ok(())
}

/// Sum of per-layer MMD² (DAN-style).
pub fn mmd2_multilayer(tape: &mut Tape, xs: &[Var], ys: &[Var], spec: &KernelSpec) -> Result<Var> {
    check_layers(tape, xs, ys)?;
    let mut total = mmd2_biased(tape, xs[0], ys[0], spec)?;
    for (&x, &y) in xs.iter().zip(ys).skip(1) {
        let term = mmd2_biased(tape, x, y, spec)?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// Joint MMD² (JAN-style): the per-layer Gram matrices are multiplied
/// entrywise before the usual combination.
pub fn mmd2_joint(tape: &mut Tape, xs: &[Var], ys: &[Var], spec: &KernelSpec) -> Result<Var> {
    check_layers(tape, xs, ys)?;
    let mut grams: Option<(Var, Var, Var)> = None;
    for (&x, &y) in xs.iter().zip(ys) {
        let kxx = mixture_gram(tape, x, x, spec)?;
        let kyy = mixture_gram(tape, y, y, spec)?;
        let kxy = mixture_gram(tape, x, y, spec)?;
        grams = Some(match grams {
            None => (kxx, kyy, kxy),
            Some((a, b, c)) => (tape.mul(a, kxx)?, tape.mul(b, kyy)?, tape.mul(c, kxy)?),
        });
    }
    let (kxx, kyy, kxy) = grams.expect("at least one layer");
    combine(tape, kxx, kyy, kxy)
}
