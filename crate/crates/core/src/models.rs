//! MLP feature extractor / prediction head, and the masker network with
//! Relaxed-Bernoulli mask sampling.

use ndarray::Array1;
use rand::distributions::{Distribution, Open01, Uniform};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Matrix, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    #[default]
    Linear,
    /// The network emits a logit; the loss applies the sigmoid.
    SigmoidLogit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_sizes: Vec<usize>, output_dim: usize) -> Self {
        MlpSpec {
            input_dim,
            hidden_sizes,
            output_dim,
            activation: Activation::Relu,
            output_activation: OutputActivation::Linear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("network dimensions must be at least 1".into()));
        }
        if self.hidden_sizes.is_empty() {
            return Err(Error::Config("at least one hidden layer is required".into()));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be at least 1".into()));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_sizes.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in self.hidden_sizes.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims
    }

    /// Total number of weights and biases.
    pub fn parameter_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Fully connected ReLU network. All but the last layer form the feature
/// extractor; the last layer is the prediction head.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Dense>,
}

/// Parameter handles of an [`Mlp`] on one tape.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    vars: Vec<(Var, Var)>,
}

/// Glorot-uniform weights, zero biases.
pub fn init_mlp(spec: &MlpSpec, seed: u64) -> Result<Mlp> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec
        .layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            let w = Matrix::from_shape_simple_fn((fan_in, fan_out), || dist.sample(&mut rng));
            Dense {
                weight: Tensor::param(w),
                bias: Tensor::param(Matrix::zeros((1, fan_out))),
            }
        })
        .collect();
    Ok(Mlp {
        spec: spec.clone(),
        layers,
    })
}

impl Mlp {
    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Flattened copy of every parameter, layer by layer (weights then bias).
    pub fn flat_parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.data().iter().chain(l.bias.data().iter()).copied())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        let vars = self
            .layers
            .iter()
            .map(|l| (tape.leaf(&l.weight), tape.leaf(&l.bias)))
            .collect();
        BoundMlp { vars }
    }

    pub fn accumulate_grads(&mut self, bound: &BoundMlp, grads: &Gradients) -> Result<()> {
        for (layer, &(w, b)) in self.layers.iter_mut().zip(&bound.vars) {
            grads.accumulate(w, &mut layer.weight)?;
            grads.accumulate(b, &mut layer.bias)?;
        }
        Ok(())
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let shape = tape.shape(x);
        if shape.1 != self.spec.input_dim {
            return Err(Error::Dimension {
                op: "mlp input",
                lhs: shape,
                rhs: (shape.0, self.spec.input_dim),
            });
        }
        Ok(())
    }

    /// Activations of every hidden layer; the last entry is the embedding.
    pub fn forward_features(&self, tape: &mut Tape, bound: &BoundMlp, x: Var) -> Result<Vec<Var>> {
        self.check_input(tape, x)?;
        let hidden = self.layers.len() - 1;
        let mut h = x;
        let mut acts = Vec::with_capacity(hidden);
        for &(w, b) in &bound.vars[..hidden] {
            let z = tape.matmul(h, w)?;
            let z = tape.add_rowvector_bias(z, b)?;
            h = match self.spec.activation {
                Activation::Relu => tape.relu(z)?,
            };
            acts.push(h);
        }
        Ok(acts)
    }

    /// The prediction head applied to an embedding. Output is linear (or a
    /// raw logit for classification).
    pub fn forward_predict(&self, tape: &mut Tape, bound: &BoundMlp, emb: Var) -> Result<Var> {
        let (w, b) = *bound.vars.last().expect("at least one layer");
        let expected = self.layers.last().expect("at least one layer").weight.shape().0;
        let shape = tape.shape(emb);
        if shape.1 != expected {
            return Err(Error::Dimension {
                op: "prediction head input",
                lhs: shape,
                rhs: (shape.0, expected),
            });
        }
        let z = tape.matmul(emb, w)?;
        tape.add_rowvector_bias(z, b)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundMlp, x: Var) -> Result<(Vec<Var>, Var)> {
        let hidden = self.forward_features(tape, bound, x)?;
        let out = self.forward_predict(tape, bound, *hidden.last().expect("hidden layer"))?;
        Ok((hidden, out))
    }

    /// Inference without keeping a tape around.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let (_, out) = self.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(out).clone())
    }

    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let hidden = self.forward_features(&mut tape, &bound, xv)?;
        Ok(tape.value(*hidden.last().expect("hidden layer")).clone())
    }
}

/// The three networks of a hybrid model. `predictor` holds both the feature
/// extractor (hidden layers) and the prediction head (output layer).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub masker: Option<Mlp>,
    pub predictor: Mlp,
}

impl ModelBundle {
    pub fn validate(&self) -> Result<()> {
        if let Some(m) = &self.masker {
            if m.spec.input_dim != 2 * m.spec.output_dim {
                return Err(Error::Config(
                    "masker input must be features concatenated with indicators".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One mask logit per row and maskable feature. `x` must already be
/// imputed; the masker sees `[x | indicators]`.
pub fn masker_forward(
    tape: &mut Tape,
    masker: &Mlp,
    bound: &BoundMlp,
    x: Var,
    indicators: Var,
) -> Result<Var> {
    let input = tape.concat_cols(x, indicators)?;
    let (_, logits) = masker.forward(tape, bound, input)?;
    Ok(logits)
}

/// Uniform draws strictly inside (0, 1).
pub fn uniform_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_shape_simple_fn((rows, cols), || Open01.sample(rng))
}

/// `sigmoid((logits + ln u - ln(1 - u)) / tau)` for the given noise.
pub fn relaxed_mask_with_noise(
    tape: &mut Tape,
    logits: Var,
    uniform: &Matrix,
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Argument(format!("temperature must be positive, got {tau}")));
    }
    let shifted = tape.logistic_noise_shift(logits, uniform)?;
    let scaled = tape.scalar_mul(shifted, 1.0 / tau)?;
    tape.sigmoid(scaled)
}

/// Reparameterized Relaxed-Bernoulli sample with fresh noise.
pub fn sample_relaxed_mask<R: Rng + ?Sized>(
    tape: &mut Tape,
    logits: Var,
    tau: f64,
    rng: &mut R,
) -> Result<Var> {
    let (r, c) = tape.shape(logits);
    let u = uniform_noise(r, c, rng);
    relaxed_mask_with_noise(tape, logits, &u, tau)
}

/// Differentiable masking: `Î = I + (1 - I) * m` (equal to `max(I, m)`
/// for binary `I`) and `X' = X * (1 - Î) + impute * Î`.
///
/// Returns `(X', Î)`.
pub fn apply_mask_soft(
    tape: &mut Tape,
    x: Var,
    indicators: Var,
    mask: Var,
    impute: &[f64],
) -> Result<(Var, Var)> {
    let (n, d) = tape.shape(x);
    if tape.shape(indicators) != (n, d) || tape.shape(mask) != (n, d) || impute.len() != d {
        return Err(Error::Dimension {
            op: "apply_mask",
            lhs: (n, d),
            rhs: tape.shape(mask),
        });
    }
    let observed = tape.value(indicators).mapv(|i| 1.0 - i);
    let observed = tape.constant(observed);
    let added = tape.mul(observed, mask)?;
    let ind_hat = tape.add(indicators, added)?;

    let ones = tape.constant(Matrix::ones((n, d)));
    let keep = tape.sub(ones, ind_hat)?;
    let kept = tape.mul(x, keep)?;
    let fill = Array1::from(impute.to_vec());
    let fill = tape.constant(Matrix::from_shape_fn((n, d), |(_, j)| fill[j]));
    let filled = tape.mul(fill, ind_hat)?;
    let x_prime = tape.add(kept, filled)?;
    Ok((x_prime, ind_hat))
}

/// Training rows after learned masking.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedDataset {
    pub features_prime: Matrix,
    pub indicator_hat: Matrix,
}

impl MaskedDataset {
    /// Fraction of rows whose column `j` is missing after masking.
    pub fn mask_rate(&self, j: usize) -> f64 {
        let col = self.indicator_hat.column(j);
        col.sum() / col.len().max(1) as f64
    }
}

/// Matrix version of the masking rule. In hard mode `m` is thresholded at
/// 0.5 first, so `Î` is binary.
pub fn apply_mask(
    x: &Matrix,
    indicators: &Matrix,
    mask: &Matrix,
    impute: &[f64],
    hard: bool,
) -> Result<MaskedDataset> {
    let (n, d) = x.dim();
    if indicators.dim() != (n, d) || mask.dim() != (n, d) || impute.len() != d {
        return Err(Error::Dimension {
            op: "apply_mask",
            lhs: (n, d),
            rhs: mask.dim(),
        });
    }
    let m = if hard {
        mask.mapv(|v| if v > 0.5 { 1.0 } else { 0.0 })
    } else {
        mask.clone()
    };
    let ind_hat = ndarray::Zip::from(indicators)
        .and(&m)
        .map_collect(|&i, &m| i.max(m));
    let features_prime = Matrix::from_shape_fn((n, d), |(r, c)| {
        let h = ind_hat[[r, c]];
        if hard && h == 1.0 {
            impute[c]
        } else {
            x[[r, c]] * (1.0 - h) + impute[c] * h
        }
    });
    Ok(MaskedDataset {
        features_prime,
        indicator_hat: ind_hat,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskerConfig {
    pub tau_start: f64,
    pub tau_end: f64,
    pub hidden_sizes: Vec<usize>,
    pub seed: u64,
}

impl Default for MaskerConfig {
    fn default() -> Self {
        MaskerConfig {
            tau_start: 0.1,
            tau_end: 0.01,
            hidden_sizes: vec![32, 32, 20],
            seed: 0,
        }
    }
}

impl MaskerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_end > 0.0 && self.tau_end <= self.tau_start) {
            return Err(Error::Config(format!(
                "need 0 < tau_end <= tau_start, got {} and {}",
                self.tau_end, self.tau_start
            )));
        }
        Ok(())
    }
}

/// Geometric temperature schedule from `tau_start` (first epoch) to
/// `tau_end` (last epoch).
pub fn anneal_tau(config: &MaskerConfig, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs < 2 {
        return config.tau_start;
    }
    let frac = epoch.min(total_epochs - 1) as f64 / (total_epochs - 1) as f64;
    config.tau_start * (config.tau_end / config.tau_start).powf(frac)
}
