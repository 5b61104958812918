//! Training loops: plain MLP, MMD on the representation, learned masking,
//! the alternating hybrid, multi-layer DAN / JAN, and importance-weighted
//! training.
//!
//! Every loop draws from independent ChaCha streams derived from the seed
//! (initialization, row shuffling, test sampling, mask noise), so methods
//! that degenerate to the baseline reproduce its loss trace exactly.

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{mmd2_biased, mmd2_joint, mmd2_multilayer, KernelSpec};
use crate::models::{
    anneal_tau, apply_mask, apply_mask_soft, init_mlp, masker_forward, relaxed_mask_with_noise,
    uniform_noise, MaskedDataset, MaskerConfig, Mlp, MlpSpec, ModelBundle, OutputActivation,
};
use crate::tensor::{Matrix, RmsProp, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    WeightedBaseline,
    Dan,
    Jan,
    MmdRepr,
    MmdMask,
    MmdHybrid,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Baseline,
        Method::WeightedBaseline,
        Method::Dan,
        Method::Jan,
        Method::MmdRepr,
        Method::MmdMask,
        Method::MmdHybrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::WeightedBaseline => "weighted_baseline",
            Method::Dan => "dan",
            Method::Jan => "jan",
            Method::MmdRepr => "mmd_repr",
            Method::MmdMask => "mmd_mask",
            Method::MmdHybrid => "mmd_hybrid",
        }
    }

    /// Whether the objective has an MMD term scaled by lambda.
    pub fn uses_lambda(self) -> bool {
        matches!(self, Method::Dan | Method::Jan | Method::MmdRepr | Method::MmdHybrid)
    }

    pub fn uses_masker(self) -> bool {
        matches!(self, Method::MmdMask | Method::MmdHybrid)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let m = match s {
            "baseline" => Method::Baseline,
            "weighted_baseline" | "kmm" => Method::WeightedBaseline,
            "dan" => Method::Dan,
            "jan" => Method::Jan,
            "mmd_repr" | "repr" => Method::MmdRepr,
            "mmd_mask" | "mask" => Method::MmdMask,
            "mmd_hybrid" | "hybrid" => Method::MmdHybrid,
            other => return Err(Error::Argument(format!("unknown method `{other}`"))),
        };
        Ok(m)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Regression,
    BinaryClassification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub method: Method,
    pub lambda: f64,
    pub epochs: usize,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    pub hidden_sizes: Vec<usize>,
    pub masker: MaskerConfig,
    /// Masker-only epochs for `mmd_mask`; defaults to `epochs`.
    pub masker_epochs: Option<usize>,
    pub seed: u64,
    pub task: Task,
    pub kernel: KernelSpec,
    /// Rows per sample in every MMD term. `None` uses the whole batch
    /// (and the whole test set when training full-batch).
    pub mmd_batch: Option<usize>,
    /// Number of trailing hidden layers matched by DAN / JAN.
    pub mmd_layers: usize,
    /// Hold the masker fixed in the hybrid loop.
    pub freeze_masker: bool,
    /// Independent hard masks per training row for the `mmd_mask`
    /// downstream model.
    pub mask_copies: usize,
    /// Also keep the unmasked rows in the `mmd_mask` downstream data.
    pub include_original: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            method: Method::Baseline,
            lambda: 1.0,
            epochs: 5000,
            batch_size: None,
            learning_rate: 0.01,
            hidden_sizes: vec![16, 16, 16],
            masker: MaskerConfig::default(),
            masker_epochs: None,
            seed: 0,
            task: Task::Regression,
            kernel: KernelSpec::default(),
            mmd_batch: None,
            mmd_layers: 2,
            freeze_masker: false,
            mask_copies: 1,
            include_original: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Argument("at least one epoch is required".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == Some(0) || self.mmd_batch == Some(0) {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if matches!(self.method, Method::Dan | Method::Jan)
            && (self.mmd_layers == 0 || self.mmd_layers > self.hidden_sizes.len())
        {
            return Err(Error::Config(format!(
                "{} matches {} hidden layers but the network has {}",
                self.method,
                self.mmd_layers,
                self.hidden_sizes.len()
            )));
        }
        if self.method.uses_masker() {
            self.masker.validate()?;
            if self.mask_copies == 0 {
                return Err(Error::Config("mask_copies must be at least 1".into()));
            }
        }
        Ok(())
    }

    fn predictor_spec(&self, input_dim: usize) -> MlpSpec {
        let mut spec = MlpSpec::new(input_dim, self.hidden_sizes.clone(), 1);
        if self.task == Task::BinaryClassification {
            spec.output_activation = OutputActivation::SigmoidLogit;
        }
        spec
    }
}

/// Per-epoch losses. For minibatch training each entry is the
/// row-weighted mean over the epoch's batches.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub total: Vec<f64>,
    pub task: Vec<f64>,
    pub mmd: Vec<f64>,
}

impl LossTrace {
    pub fn len(&self) -> usize {
        self.total.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: TrainingConfig,
    pub bundle: ModelBundle,
    pub trace: LossTrace,
    /// Joint MMD of the masking step, per epoch.
    pub masker_trace: Option<Vec<f64>>,
    /// Training rows under one hard mask draw from the final masker.
    pub masked_train: Option<MaskedDataset>,
}

impl TrainedModel {
    /// Raw network output on `(features, indicators)`: the regression
    /// estimate, or the logit for classification.
    pub fn predict_raw(&self, data: &Dataset) -> Result<Vec<f64>> {
        let out = self.bundle.predictor.predict(&data.model_input())?;
        Ok(out.column(0).to_vec())
    }

    /// Regression estimate, or positive-class probability.
    pub fn predict(&self, data: &Dataset) -> Result<Vec<f64>> {
        let raw = self.predict_raw(data)?;
        Ok(match self.config.task {
            Task::Regression => raw,
            Task::BinaryClassification => raw.into_iter().map(crate::tensor::stable_sigmoid).collect(),
        })
    }

    /// Last-hidden-layer activations.
    pub fn embeddings(&self, data: &Dataset) -> Result<Matrix> {
        self.bundle.predictor.embed(&data.model_input())
    }
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_TEST: u64 = 2;
const STREAM_NOISE: u64 = 3;
const MASKER_SEED_SALT: u64 = 0x6d61_736b;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum MmdTerm {
    None,
    LastLayer,
    Multi(usize),
    Joint(usize),
}

/// Losses of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub task: f64,
    pub mmd: f64,
}

fn task_loss(
    tape: &mut Tape,
    out: Var,
    target: &[f64],
    weights: Option<&[f64]>,
    task: Task,
) -> Result<Var> {
    let y = tape.constant(Matrix::from_shape_vec((target.len(), 1), target.to_vec()).expect("column"));
    let per_row = match task {
        Task::Regression => {
            let diff = tape.sub(out, y)?;
            tape.square(diff)?
        }
        Task::BinaryClassification => {
            // softplus(z) - y z == -y log s(z) - (1 - y) log(1 - s(z))
            let sp = tape.softplus(out)?;
            let yz = tape.mul(y, out)?;
            tape.sub(sp, yz)?
        }
    };
    match weights {
        None => tape.mean_all(per_row),
        Some(w) => {
            let total: f64 = w.iter().sum();
            if !(total > 0.0) {
                return Err(Error::Argument("sample weights sum to zero in a batch".into()));
            }
            let wv = tape.constant(Matrix::from_shape_vec((w.len(), 1), w.to_vec()).expect("column"));
            let weighted = tape.mul(per_row, wv)?;
            let sum = tape.sum_all(weighted)?;
            tape.scalar_mul(sum, 1.0 / total)
        }
    }
}

/// Everything the predictor step needs for one batch.
pub struct PredictorBatch<'a> {
    pub input: &'a Matrix,
    pub target: &'a [f64],
    pub weights: Option<&'a [f64]>,
    /// Test inputs for the MMD term.
    pub test_input: Option<&'a Matrix>,
    /// Rows of `input` entering the MMD term; `None` means all.
    pub mmd_rows: Option<&'a [usize]>,
}

/// One RMSProp step of the predictor on `task + lambda * mmd`.
pub fn predictor_step(
    model: &mut Mlp,
    opt: &mut RmsProp,
    batch: &PredictorBatch<'_>,
    term: MmdTermSpec,
    lambda: f64,
    kernel: &KernelSpec,
    task: Task,
) -> Result<StepLoss> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.constant(batch.input.clone());
    let (hidden, out) = model.forward(&mut tape, &bound, x)?;
    let task_var = task_loss(&mut tape, out, batch.target, batch.weights, task)?;
    let term = term.0;
    let (loss, mmd) = if term == MmdTerm::None {
        (task_var, 0.0)
    } else {
        let test = batch
            .test_input
            .ok_or_else(|| Error::Argument("MMD term needs test inputs".into()))?;
        let tv = tape.constant(test.clone());
        let test_hidden = model.forward_features(&mut tape, &bound, tv)?;
        let n_layers = match term {
            MmdTerm::Multi(k) | MmdTerm::Joint(k) => k,
            _ => 1,
        };
        let take = |tape: &mut Tape, layers: &[Var], rows: Option<&[usize]>| -> Result<Vec<Var>> {
            layers[layers.len() - n_layers..]
                .iter()
                .map(|&v| match rows {
                    Some(r) => tape.gather_rows(v, r),
                    None => Ok(v),
                })
                .collect()
        };
        let xs = take(&mut tape, &hidden, batch.mmd_rows)?;
        let ys = take(&mut tape, &test_hidden, None)?;
        let mmd_var = match term {
            MmdTerm::LastLayer => mmd2_biased(&mut tape, xs[0], ys[0], kernel)?,
            MmdTerm::Multi(_) => mmd2_multilayer(&mut tape, &xs, &ys, kernel)?,
            MmdTerm::Joint(_) => mmd2_joint(&mut tape, &xs, &ys, kernel)?,
            MmdTerm::None => unreachable!(),
        };
        let scaled = tape.scalar_mul(mmd_var, lambda)?;
        (tape.add(task_var, scaled)?, tape.scalar(mmd_var))
    };
    let grads = tape.backward(loss)?;
    model.zero_grad();
    model.accumulate_grads(&bound, &grads)?;
    opt.step(&mut model.params_mut())?;
    Ok(StepLoss {
        total: tape.scalar(loss),
        task: tape.scalar(task_var),
        mmd,
    })
}

/// Opaque selector of the MMD term used by [`predictor_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmdTermSpec(MmdTerm);

impl MmdTermSpec {
    pub fn none() -> Self {
        MmdTermSpec(MmdTerm::None)
    }

    pub fn last_layer() -> Self {
        MmdTermSpec(MmdTerm::LastLayer)
    }

    pub fn multilayer(layers: usize) -> Self {
        MmdTermSpec(MmdTerm::Multi(layers))
    }

    pub fn joint(layers: usize) -> Self {
        MmdTermSpec(MmdTerm::Joint(layers))
    }
}

/// Result of a masker step: the soft-masked batch (values only) and the
/// joint MMD before the update.
#[derive(Debug, Clone)]
pub struct MaskerStepOutput {
    pub masked: MaskedDataset,
    pub mmd: f64,
}

/// Test-side data for the masker's joint MMD.
pub struct MaskerBatch<'a> {
    pub features: &'a Matrix,
    pub indicators: &'a Matrix,
    pub impute: &'a [f64],
    /// `[X_te | I_te]` rows.
    pub test_joint: &'a Matrix,
    pub noise: &'a Matrix,
    pub mmd_rows: Option<&'a [usize]>,
    /// Return the masked version of every batch row rather than only the
    /// MMD rows.
    pub full_output: bool,
}

/// Soft-masked `(X', Î)` for `rows` of the batch (all rows when `None`).
fn soft_masked(
    tape: &mut Tape,
    masker: &Mlp,
    batch: &MaskerBatch<'_>,
    rows: Option<&[usize]>,
    tau: f64,
) -> Result<(crate::models::BoundMlp, Var, Var)> {
    let pick = |m: &Matrix| match rows {
        Some(r) => m.select(Axis(0), r),
        None => m.clone(),
    };
    let bound = masker.bind(tape);
    let x = tape.constant(pick(batch.features));
    let ind = tape.constant(pick(batch.indicators));
    let logits = masker_forward(tape, masker, &bound, x, ind)?;
    let mask = relaxed_mask_with_noise(tape, logits, &pick(batch.noise), tau)?;
    let (x_prime, ind_hat) = apply_mask_soft(tape, x, ind, mask, batch.impute)?;
    Ok((bound, x_prime, ind_hat))
}

/// One RMSProp step of the masker on the joint MMD between
/// `[X' | Î]` and `[X_te | I_te]`. With `update == false` only the
/// forward pass runs. The masked output reflects the parameters before
/// the update.
pub fn masker_step(
    masker: &mut Mlp,
    opt: &mut RmsProp,
    batch: &MaskerBatch<'_>,
    tau: f64,
    kernel: &KernelSpec,
    update: bool,
) -> Result<MaskerStepOutput> {
    let mut tape = Tape::new();
    let (bound, x_prime, ind_hat) = soft_masked(&mut tape, masker, batch, batch.mmd_rows, tau)?;
    let joint = tape.concat_cols(x_prime, ind_hat)?;
    let test = tape.constant(batch.test_joint.clone());
    let loss = mmd2_biased(&mut tape, joint, test, kernel)?;

    let masked = if batch.full_output && batch.mmd_rows.is_some() {
        let mut full = Tape::new();
        let (_, xp, ih) = soft_masked(&mut full, masker, batch, None, tau)?;
        MaskedDataset {
            features_prime: full.value(xp).clone(),
            indicator_hat: full.value(ih).clone(),
        }
    } else {
        MaskedDataset {
            features_prime: tape.value(x_prime).clone(),
            indicator_hat: tape.value(ind_hat).clone(),
        }
    };
    if update {
        let grads = tape.backward(loss)?;
        masker.zero_grad();
        masker.accumulate_grads(&bound, &grads)?;
        opt.step(&mut masker.params_mut())?;
    }
    Ok(MaskerStepOutput {
        masked,
        mmd: tape.scalar(loss),
    })
}

/// Draws one hard mask per entry (`P(mask) = sigmoid(logit)`) and applies it.
pub fn sample_hard_mask<R: Rng + ?Sized>(
    masker: &Mlp,
    data: &Dataset,
    rng: &mut R,
) -> Result<MaskedDataset> {
    let mut tape = Tape::new();
    let bound = masker.bind(&mut tape);
    let x = tape.constant(data.features.clone());
    let ind = tape.constant(data.indicators.clone());
    let logits = masker_forward(&mut tape, masker, &bound, x, ind)?;
    let (n, d) = data.features.dim();
    let u = uniform_noise(n, d, rng);
    // thresholding a relaxed sample at 0.5 is an exact Bernoulli draw
    let mask = relaxed_mask_with_noise(&mut tape, logits, &u, 1.0)?;
    apply_mask(
        &data.features,
        &data.indicators,
        tape.value(mask),
        &data.impute_vector(),
        true,
    )
}

/// Row-index batches for one epoch.
fn epoch_batches(n: usize, batch_size: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    match batch_size {
        Some(b) if b < n => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            idx.chunks(b).map(|c| c.to_vec()).collect()
        }
        _ => vec![(0..n).collect()],
    }
}

/// Test rows for one step: the whole set when training full-batch without
/// an MMD subsample, otherwise a uniform draw with replacement.
fn test_rows(n_test: usize, size: Option<usize>, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
    size.map(|s| (0..s).map(|_| rng.gen_range(0..n_test)).collect())
}

/// Rows of the current batch that enter the MMD term.
fn mmd_subsample(batch_len: usize, mmd_batch: Option<usize>, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
    match mmd_batch {
        Some(m) if m < batch_len => Some(rand::seq::index::sample(rng, batch_len, m).into_vec()),
        _ => None,
    }
}

fn check_training_data(train: &Dataset, config: &TrainingConfig) -> Result<()> {
    config.validate()?;
    train.validate()?;
    let y = train.target_or_err()?;
    if train.n_rows() == 0 {
        return Err(Error::Argument("training set is empty".into()));
    }
    if config.task == Task::BinaryClassification && y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Argument("classification targets must be 0 or 1".into()));
    }
    Ok(())
}

fn check_test_data(train: &Dataset, test: &Dataset) -> Result<()> {
    test.validate()?;
    if test.n_features() != train.n_features() {
        return Err(Error::Schema(format!(
            "train has {} features, test has {}",
            train.n_features(),
            test.n_features()
        )));
    }
    if test.n_rows() == 0 {
        return Err(Error::Argument("test set is empty".into()));
    }
    Ok(())
}

fn as_training_error(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric { .. } => Error::Training {
            epoch,
            reason: e.to_string(),
        },
        other => other,
    }
}

fn finite_or_abort(epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Training {
            epoch,
            reason: format!("loss became {loss}"),
        })
    }
}

/// Shared predictor loop behind baseline, weighted, representation MMD,
/// DAN and JAN.
fn fit_predictor(
    input: &Matrix,
    target: &[f64],
    weights: Option<&[f64]>,
    test_input: Option<&Matrix>,
    term: MmdTerm,
    config: &TrainingConfig,
) -> Result<(Mlp, LossTrace)> {
    let n = input.nrows();
    let mut model = init_mlp(&config.predictor_spec(input.ncols()), config.seed)?;
    let mut opt = RmsProp::new(config.learning_rate)?;
    let mut shuffle = stream(config.seed, STREAM_SHUFFLE);
    let mut sampler = stream(config.seed, STREAM_TEST);
    let mut trace = LossTrace::default();
    for epoch in 0..config.epochs {
        let batches = epoch_batches(n, config.batch_size, &mut shuffle);
        let mut acc = [0.0; 3];
        for rows in &batches {
            let full = rows.len() == n;
            let xb = if full { input.clone() } else { input.select(Axis(0), rows) };
            let yb: Vec<f64> = rows.iter().map(|&r| target[r]).collect();
            let wb: Option<Vec<f64>> = weights.map(|w| rows.iter().map(|&r| w[r]).collect());
            let (tb, mmd_rows) = match (term, test_input) {
                (MmdTerm::None, _) | (_, None) => (None, None),
                (_, Some(test)) => {
                    let size = config.mmd_batch.or(if full { None } else { Some(rows.len()) });
                    let t = test_rows(test.nrows(), size, &mut sampler)
                        .map(|r| test.select(Axis(0), &r))
                        .unwrap_or_else(|| test.clone());
                    (Some(t), mmd_subsample(rows.len(), config.mmd_batch, &mut sampler))
                }
            };
            let batch = PredictorBatch {
                input: &xb,
                target: &yb,
                weights: wb.as_deref(),
                test_input: tb.as_ref(),
                mmd_rows: mmd_rows.as_deref(),
            };
            let step = predictor_step(
                &mut model,
                &mut opt,
                &batch,
                MmdTermSpec(term),
                config.lambda,
                &config.kernel,
                config.task,
            )
            .map_err(as_training_error(epoch))?;
            let frac = rows.len() as f64 / n as f64;
            acc[0] += step.total * frac;
            acc[1] += step.task * frac;
            acc[2] += step.mmd * frac;
        }
        finite_or_abort(epoch, acc[0])?;
        trace.total.push(acc[0]);
        trace.task.push(acc[1]);
        trace.mmd.push(acc[2]);
    }
    Ok((model, trace))
}

fn predictor_only(config: &TrainingConfig, model: Mlp, trace: LossTrace) -> TrainedModel {
    TrainedModel {
        config: config.clone(),
        bundle: ModelBundle {
            masker: None,
            predictor: model,
        },
        trace,
        masker_trace: None,
        masked_train: None,
    }
}

pub fn train_baseline(train: &Dataset, config: &TrainingConfig) -> Result<TrainedModel> {
    check_training_data(train, config)?;
    let (model, trace) = fit_predictor(
        &train.model_input(),
        train.target_or_err()?,
        None,
        None,
        MmdTerm::None,
        config,
    )?;
    Ok(predictor_only(config, model, trace))
}

/// Minimizes `(1 / sum b) * sum_i b_i * loss_i`.
pub fn train_weighted(train: &Dataset, weights: &[f64], config: &TrainingConfig) -> Result<TrainedModel> {
    check_training_data(train, config)?;
    if weights.len() != train.n_rows() {
        return Err(Error::Argument(format!(
            "{} weights for {} training rows",
            weights.len(),
            train.n_rows()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
        return Err(Error::Argument(format!("sample weights must be nonnegative, got {w}")));
    }
    let (model, trace) = fit_predictor(
        &train.model_input(),
        train.target_or_err()?,
        Some(weights),
        None,
        MmdTerm::None,
        config,
    )?;
    Ok(predictor_only(config, model, trace))
}

fn train_with_term(train: &Dataset, test: &Dataset, config: &TrainingConfig, term: MmdTerm) -> Result<TrainedModel> {
    check_training_data(train, config)?;
    check_test_data(train, test)?;
    let (model, trace) = fit_predictor(
        &train.model_input(),
        train.target_or_err()?,
        None,
        Some(&test.model_input()),
        term,
        config,
    )?;
    Ok(predictor_only(config, model, trace))
}

/// Task loss plus lambda times the MMD between last-hidden-layer
/// embeddings of train and (unlabeled) test rows.
pub fn train_mmd_repr(train: &Dataset, test: &Dataset, config: &TrainingConfig) -> Result<TrainedModel> {
    train_with_term(train, test, config, MmdTerm::LastLayer)
}

/// Sum of per-layer MMD over the last `mmd_layers` hidden layers.
pub fn train_dan(train: &Dataset, test: &Dataset, config: &TrainingConfig) -> Result<TrainedModel> {
    train_with_term(train, test, config, MmdTerm::Multi(config.mmd_layers))
}

/// Joint MMD over the last `mmd_layers` hidden layers.
pub fn train_jan(train: &Dataset, test: &Dataset, config: &TrainingConfig) -> Result<TrainedModel> {
    train_with_term(train, test, config, MmdTerm::Joint(config.mmd_layers))
}

fn masker_spec(train: &Dataset, config: &TrainingConfig) -> MlpSpec {
    let d = train.n_features();
    MlpSpec::new(2 * d, config.masker.hidden_sizes.clone(), d)
}

fn masker_seed(config: &TrainingConfig) -> u64 {
    config.masker.seed ^ config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ MASKER_SEED_SALT
}

fn joint(data: &Dataset) -> Matrix {
    data.model_input()
}

/// Trains the masker alone, then a fresh predictor on hard-masked
/// training rows (features and updated indicators).
pub fn train_mmd_mask(train: &Dataset, test: &Dataset, config: &TrainingConfig) -> Result<TrainedModel> {
    check_training_data(train, config)?;
    check_test_data(train, test)?;
    let epochs = config.masker_epochs.unwrap_or(config.epochs);
    if epochs == 0 {
        return Err(Error::Argument("at least one masker epoch is required".into()));
    }
    let mut masker = init_mlp(&masker_spec(train, config), masker_seed(config))?;
    let mut opt = RmsProp::new(config.learning_rate)?;
    let mut shuffle = stream(config.seed, STREAM_SHUFFLE);
    let mut sampler = stream(config.seed, STREAM_TEST);
    let mut noise = stream(config.seed, STREAM_NOISE);
    let impute = train.impute_vector();
    let test_joint = joint(test);
    let n = train.n_rows();
    let mut masker_trace = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let tau = anneal_tau(&config.masker, epoch, epochs);
        let batches = epoch_batches(n, config.batch_size, &mut shuffle);
        let mut acc = 0.0;
        for rows in &batches {
            let full = rows.len() == n;
            let (xb, ib) = if full {
                (train.features.clone(), train.indicators.clone())
            } else {
                (train.features.select(Axis(0), rows), train.indicators.select(Axis(0), rows))
            };
            let size = config.mmd_batch.or(if full { None } else { Some(rows.len()) });
            let tj = test_rows(test.n_rows(), size, &mut sampler)
                .map(|r| test_joint.select(Axis(0), &r))
                .unwrap_or_else(|| test_joint.clone());
            let mmd_rows = mmd_subsample(rows.len(), config.mmd_batch, &mut sampler);
            let u = uniform_noise(rows.len(), train.n_features(), &mut noise);
            let batch = MaskerBatch {
                features: &xb,
                indicators: &ib,
                impute: &impute,
                test_joint: &tj,
                noise: &u,
                mmd_rows: mmd_rows.as_deref(),
                full_output: false,
            };
            let out = masker_step(&mut masker, &mut opt, &batch, tau, &config.kernel, true)
                .map_err(as_training_error(epoch))?;
            acc += out.mmd * rows.len() as f64 / n as f64;
        }
        finite_or_abort(epoch, acc)?;
        masker_trace.push(acc);
    }

    let target = train.target_or_err()?;
    let mut parts = Vec::with_capacity(config.mask_copies + 1);
    let mut first_mask = None;
    for _ in 0..config.mask_copies {
        let masked = sample_hard_mask(&masker, train, &mut noise)?;
        parts.push(Dataset::new(
            masked.features_prime.clone(),
            masked.indicator_hat.clone(),
            Some(target.to_vec()),
            train.meta.clone(),
        )?);
        first_mask.get_or_insert(masked);
    }
    if config.include_original {
        parts.push(train.clone());
    }
    let downstream = Dataset::concat_rows(&parts)?;
    let (model, trace) = fit_predictor(
        &downstream.model_input(),
        downstream.target_or_err()?,
        None,
        None,
        MmdTerm::None,
        config,
    )?;
    Ok(TrainedModel {
        config: config.clone(),
        bundle: ModelBundle {
            masker: Some(masker),
            predictor: model,
        },
        trace,
        masker_trace: Some(masker_trace),
        masked_train: first_mask,
    })
}

/// Starting state of the hybrid loop; exposed so callers can supply a
/// prepared masker (for instance a frozen one).
pub fn init_hybrid(train: &Dataset, config: &TrainingConfig) -> Result<ModelBundle> {
    Ok(ModelBundle {
        masker: Some(init_mlp(&masker_spec(train, config), masker_seed(config))?),
        predictor: init_mlp(&config.predictor_spec(2 * train.n_features()), config.seed)?,
    })
}

/// Alternating updates per batch: a masker step on the joint MMD, then a
/// predictor step on `task + lambda * MMD(embeddings)` using the masked
/// batch as a constant input.
pub fn train_mmd_hybrid(train: &Dataset, test: &Dataset, config: &TrainingConfig) -> Result<TrainedModel> {
    check_training_data(train, config)?;
    let bundle = init_hybrid(train, config)?;
    train_mmd_hybrid_from(train, test, config, bundle)
}

pub fn train_mmd_hybrid_from(
    train: &Dataset,
    test: &Dataset,
    config: &TrainingConfig,
    bundle: ModelBundle,
) -> Result<TrainedModel> {
    check_training_data(train, config)?;
    check_test_data(train, test)?;
    bundle.validate()?;
    let ModelBundle { masker, predictor } = bundle;
    let mut masker = masker.ok_or_else(|| Error::Config("hybrid training needs a masker".into()))?;
    let mut predictor = predictor;
    let mut masker_opt = RmsProp::new(config.learning_rate)?;
    let mut opt = RmsProp::new(config.learning_rate)?;
    let mut shuffle = stream(config.seed, STREAM_SHUFFLE);
    let mut sampler = stream(config.seed, STREAM_TEST);
    let mut noise = stream(config.seed, STREAM_NOISE);
    let impute = train.impute_vector();
    let test_input = joint(test);
    let target = train.target_or_err()?;
    let n = train.n_rows();
    let mut trace = LossTrace::default();
    let mut masker_trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let tau = anneal_tau(&config.masker, epoch, config.epochs);
        let batches = epoch_batches(n, config.batch_size, &mut shuffle);
        let mut acc = [0.0; 4];
        for rows in &batches {
            let full = rows.len() == n;
            let (xb, ib) = if full {
                (train.features.clone(), train.indicators.clone())
            } else {
                (train.features.select(Axis(0), rows), train.indicators.select(Axis(0), rows))
            };
            let yb: Vec<f64> = rows.iter().map(|&r| target[r]).collect();
            let size = config.mmd_batch.or(if full { None } else { Some(rows.len()) });
            let tb = test_rows(test.n_rows(), size, &mut sampler)
                .map(|r| test_input.select(Axis(0), &r))
                .unwrap_or_else(|| test_input.clone());
            let mmd_rows = mmd_subsample(rows.len(), config.mmd_batch, &mut sampler);
            let u = uniform_noise(rows.len(), train.n_features(), &mut noise);

            let mb = MaskerBatch {
                features: &xb,
                indicators: &ib,
                impute: &impute,
                test_joint: &tb,
                noise: &u,
                mmd_rows: mmd_rows.as_deref(),
                full_output: true,
            };
            let masked = masker_step(
                &mut masker,
                &mut masker_opt,
                &mb,
                tau,
                &config.kernel,
                !config.freeze_masker,
            )
            .map_err(as_training_error(epoch))?;

            let input = ndarray::concatenate(
                Axis(1),
                &[masked.masked.features_prime.view(), masked.masked.indicator_hat.view()],
            )
            .expect("same rows");
            let pb = PredictorBatch {
                input: &input,
                target: &yb,
                weights: None,
                test_input: Some(&tb),
                mmd_rows: mmd_rows.as_deref(),
            };
            let step = predictor_step(
                &mut predictor,
                &mut opt,
                &pb,
                MmdTermSpec(MmdTerm::LastLayer),
                config.lambda,
                &config.kernel,
                config.task,
            )
            .map_err(as_training_error(epoch))?;
            let frac = rows.len() as f64 / n as f64;
            acc[0] += step.total * frac;
            acc[1] += step.task * frac;
            acc[2] += step.mmd * frac;
            acc[3] += masked.mmd * frac;
        }
        finite_or_abort(epoch, acc[0])?;
        finite_or_abort(epoch, acc[3])?;
        trace.total.push(acc[0]);
        trace.task.push(acc[1]);
        trace.mmd.push(acc[2]);
        masker_trace.push(acc[3]);
    }
    let masked_train = Some(sample_hard_mask(&masker, train, &mut noise)?);
    Ok(TrainedModel {
        config: config.clone(),
        bundle: ModelBundle {
            masker: Some(masker),
            predictor,
        },
        trace,
        masker_trace: Some(masker_trace),
        masked_train,
    })
}

/// Dispatches on `config.method`. `weights` is required for the weighted
/// baseline and ignored otherwise.
pub fn train_method(
    train: &Dataset,
    test: &Dataset,
    weights: Option<&[f64]>,
    config: &TrainingConfig,
) -> Result<TrainedModel> {
    match config.method {
        Method::Baseline => train_baseline(train, config),
        Method::WeightedBaseline => {
            let w = weights.ok_or_else(|| Error::Argument("weighted baseline needs sample weights".into()))?;
            train_weighted(train, w, config)
        }
        Method::Dan => train_dan(train, test, config),
        Method::Jan => train_jan(train, test, config),
        Method::MmdRepr => train_mmd_repr(train, test, config),
        Method::MmdMask => train_mmd_mask(train, test, config),
        Method::MmdHybrid => train_mmd_hybrid(train, test, config),
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub const AUTO_LAMBDA_PROBE_EPOCHS: usize = 50;

/// Magnitude-matching lambda: a short probe run at lambda = 1, then
/// `median(task loss) / median(mmd loss)` over its epochs.
pub fn auto_lambda(train: &Dataset, test: &Dataset, config: &TrainingConfig) -> Result<f64> {
    if !config.method.uses_lambda() {
        return Err(Error::Argument(format!("{} has no lambda", config.method)));
    }
    let probe = TrainingConfig {
        lambda: 1.0,
        epochs: AUTO_LAMBDA_PROBE_EPOCHS,
        ..config.clone()
    };
    let run = train_method(train, test, None, &probe)?;
    let mmd = median(&run.trace.mmd);
    if !(mmd > 0.0) {
        return Err(Error::Numeric { op: "auto_lambda" });
    }
    Ok(median(&run.trace.task) / mmd)
}

/// Validation loss for each grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub scores: Vec<(f64, f64)>,
}

/// Picks the grid lambda with the lowest task loss on a held-out quarter
/// of the training rows.
pub fn select_lambda(
    train: &Dataset,
    test: &Dataset,
    weights: Option<&[f64]>,
    config: &TrainingConfig,
    grid: &[f64],
) -> Result<LambdaSelection> {
    if grid.is_empty() {
        return Err(Error::Argument("empty lambda grid".into()));
    }
    let (idx_tr, idx_val) = crate::data::split_indices(train.n_rows(), 0.75, config.seed)?;
    let (sub, val) = (train.select_rows(&idx_tr), train.select_rows(&idx_val));
    let sub_w: Option<Vec<f64>> = weights.map(|w| idx_tr.iter().map(|&i| w[i]).collect());
    let y_val = val.target_or_err()?;
    let mut scores = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let cfg = TrainingConfig {
            lambda,
            ..config.clone()
        };
        let model = train_method(&sub, test, sub_w.as_deref(), &cfg)?;
        let raw = model.predict_raw(&val)?;
        let loss = match config.task {
            Task::Regression => raw.iter().zip(y_val).map(|(p, y)| (p - y).powi(2)).sum::<f64>(),
            Task::BinaryClassification => raw
                .iter()
                .zip(y_val)
                .map(|(&z, &y)| crate::tensor::softplus_value(z) - y * z)
                .sum::<f64>(),
        } / y_val.len() as f64;
        scores.push((lambda, loss));
    }
    let best = scores
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("nonempty grid")
        .0;
    Ok(LambdaSelection { lambda: best, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureMeta;
    use ndarray::Array2;

    fn toy(n: usize, f: impl Fn(f64) -> f64) -> Dataset {
        let x = Array2::from_shape_fn((n, 1), |(i, _)| -1.0 + 2.0 * i as f64 / (n - 1) as f64);
        let y = x.column(0).iter().map(|&v| f(v)).collect();
        Dataset::new(x, Array2::zeros((n, 1)), Some(y), vec![FeatureMeta::numeric("x", 0.0)]).unwrap()
    }

    fn quick(method: Method, epochs: usize) -> TrainingConfig {
        TrainingConfig {
            method,
            epochs,
            hidden_sizes: vec![8, 8],
            masker: MaskerConfig {
                hidden_sizes: vec![8],
                ..MaskerConfig::default()
            },
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn zero_epochs_rejected() {
        let err = train_baseline(&toy(10, |x| x), &quick(Method::Baseline, 0)).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    #[test]
    fn constant_target_is_learned() {
        let data = toy(100, |_| 3.0);
        let cfg = TrainingConfig {
            epochs: 500,
            learning_rate: 1e-3,
            ..TrainingConfig::default()
        };
        let model = train_baseline(&data, &cfg).unwrap();
        let pred = model.predict(&data).unwrap();
        let mse = pred.iter().map(|p| (p - 3.0).powi(2)).sum::<f64>() / 100.0;
        assert!(mse < 1e-3, "{mse}");
        assert_eq!(model.trace.len(), 500);
    }

    #[test]
    fn same_seed_same_trace() {
        let data = toy(40, |x| 2.0 * x);
        let cfg = quick(Method::Baseline, 30);
        let a = train_baseline(&data, &cfg).unwrap();
        let b = train_baseline(&data, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn minibatch_trace_has_one_entry_per_epoch() {
        let data = toy(50, |x| x);
        let cfg = TrainingConfig {
            batch_size: Some(16),
            ..quick(Method::Baseline, 7)
        };
        assert_eq!(train_baseline(&data, &cfg).unwrap().trace.len(), 7);
    }

    #[test]
    fn negative_weight_rejected() {
        let data = toy(4, |x| x);
        let err = train_weighted(&data, &[1.0, -1.0, 1.0, 1.0], &quick(Method::WeightedBaseline, 1)).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    #[test]
    fn dan_needs_enough_layers() {
        let data = toy(10, |x| x);
        let cfg = TrainingConfig {
            hidden_sizes: vec![8],
            ..quick(Method::Dan, 1)
        };
        assert!(matches!(train_dan(&data, &data, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn classification_targets_checked() {
        let data = toy(10, |x| x);
        let cfg = TrainingConfig {
            task: Task::BinaryClassification,
            ..quick(Method::Baseline, 1)
        };
        assert!(matches!(train_baseline(&data, &cfg), Err(Error::Argument(_))));
    }

    #[test]
    fn diverging_run_reports_epoch() {
        let data = toy(20, |x| 1e200 * x);
        let err = train_baseline(&data, &quick(Method::Baseline, 3)).unwrap_err();
        assert!(matches!(err, Error::Training { epoch: 0, .. }), "{err:?}");
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("nope".parse::<Method>().is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
