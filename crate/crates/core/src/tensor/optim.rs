use crate::error::{Error, Result};

use super::{Matrix, Tensor};

/// RMSProp with the square-root-then-eps convention:
/// `s <- a*s + (1-a)*g^2`, `theta <- theta - lr * g / (sqrt(s) + eps)`.
///
/// Running averages are keyed by the position of each parameter in the
/// slice handed to [`RmsProp::step`], so callers must pass parameters in a
/// stable order.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub alpha: f64,
    pub eps: f64,
    square_avg: Vec<Matrix>,
}

impl RmsProp {
    pub const DEFAULT_ALPHA: f64 = 0.99;
    pub const DEFAULT_EPS: f64 = 1e-8;

    pub fn new(learning_rate: f64) -> Result<Self> {
        Self::with_params(learning_rate, Self::DEFAULT_ALPHA, Self::DEFAULT_EPS)
    }

    pub fn with_params(learning_rate: f64, alpha: f64, eps: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1), got {alpha}")));
        }
        if !(eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {eps}")));
        }
        Ok(RmsProp {
            learning_rate,
            alpha,
            eps,
            square_avg: Vec::new(),
        })
    }

    /// Running square averages, one per parameter seen so far.
    pub fn square_averages(&self) -> &[Matrix] {
        &self.square_avg
    }

    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if params.iter().any(|p| p.grad().is_none()) {
            return Err(Error::State("rmsprop step on a parameter without grad".into()));
        }
        if self.square_avg.is_empty() {
            self.square_avg = params.iter().map(|p| Matrix::zeros(p.shape())).collect();
        }
        if self.square_avg.len() != params.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} parameters, got {}",
                self.square_avg.len(),
                params.len()
            )));
        }
        let (lr, alpha, eps) = (self.learning_rate, self.alpha, self.eps);
        for (p, s) in params.iter_mut().zip(&mut self.square_avg) {
            let grad = p.grad().expect("checked above").clone();
            if s.dim() != grad.dim() {
                return Err(Error::State("parameter shape changed between steps".into()));
            }
            ndarray::Zip::from(&mut *s)
                .and(p.data_mut())
                .and(&grad)
                .for_each(|s, theta, &g| {
                    *s = alpha * *s + (1.0 - alpha) * g * g;
                    *theta -= lr * g / (s.sqrt() + eps);
                });
        }
        Ok(())
    }
}
