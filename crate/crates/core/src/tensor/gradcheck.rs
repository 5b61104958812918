use crate::error::Result;

use super::{Matrix, Tape, Var};

/// Compares the reverse-mode gradient of a scalar function against central
/// differences.
///
/// Returns the largest `|analytic - numeric| / max(1, |analytic|)` over all
/// entries of `x`.
pub fn gradient_check<F>(f: F, x: &Matrix, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.variable(x.clone());
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Matrix::zeros(x.dim()));

    let eval = |probe: Matrix| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(probe);
        let out = f(&mut tape, v)?;
        Ok(tape.scalar(out))
    };

    let mut worst = 0.0f64;
    for (idx, &a) in analytic.indexed_iter() {
        let mut plus = x.clone();
        plus[idx] += step;
        let mut minus = x.clone();
        minus[idx] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
