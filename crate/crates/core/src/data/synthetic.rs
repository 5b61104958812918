//! Two-feature regression data with an injected missingness shift and a
//! distribution shift on the first feature.
//!
//! Generative process, per training row:
//!
//! ```text
//! t  ~ Uniform(latent_lo, latent_hi)
//! y  = slope * t + intercept
//! x1 = t + N(0, noise_x1_sd)
//! x2 = s * sqrt(y / curvature) + N(0, noise_x2_sd),   s uniform on {-1, +1}
//! ```
//!
//! The test set resamples training rows with replacement; rows whose `x1`
//! falls in `missing_range` lose `x1` (imputed with the training mean),
//! rows whose `x1` falls in `shift_range` get `x1 -= N(shift_mean, shift_sd)`.

use ndarray::Array2;
use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use super::{Dataset, FeatureMeta};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub noise_x1_sd: f64,
    pub noise_x2_sd: f64,
    pub shift_mean: f64,
    pub shift_sd: f64,
    /// Closed interval of `x1` values that go missing in the test set.
    pub missing_range: (f64, f64),
    /// Half-open interval `(lo, hi]` of `x1` values shifted in the test set.
    pub shift_range: (f64, f64),
    pub latent_range: (f64, f64),
    pub slope: f64,
    pub intercept: f64,
    pub curvature: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_train: 5000,
            noise_x1_sd: 0.1,
            noise_x2_sd: 0.5,
            shift_mean: 1.0,
            shift_sd: 0.1,
            missing_range: (-3.5, 0.0),
            shift_range: (0.0, 3.5),
            latent_range: (-3.5, 3.5),
            slope: 2.0,
            intercept: 7.0,
            curvature: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("noise_x1_sd", self.noise_x1_sd),
            ("noise_x2_sd", self.noise_x2_sd),
            ("shift_sd", self.shift_sd),
            ("curvature", self.curvature),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.n_train == 0 {
            return Err(Error::Config("n_train must be at least 1".into()));
        }
        for (name, (lo, hi)) in [
            ("missing_range", self.missing_range),
            ("shift_range", self.shift_range),
            ("latent_range", self.latent_range),
        ] {
            if !(lo < hi) {
                return Err(Error::Config(format!("{name} must satisfy lo < hi")));
            }
        }
        let (lo, hi) = self.latent_range;
        if self.slope * lo + self.intercept < 0.0 || self.slope * hi + self.intercept < 0.0 {
            return Err(Error::Config(
                "slope/intercept must keep the target nonnegative over the latent range".into(),
            ));
        }
        Ok(())
    }

    pub fn region_of(&self, x1: f64) -> ShiftRegion {
        let (mlo, mhi) = self.missing_range;
        let (slo, shi) = self.shift_range;
        if x1 >= mlo && x1 <= mhi {
            ShiftRegion::Missingness
        } else if x1 > slo && x1 <= shi {
            ShiftRegion::Distribution
        } else {
            ShiftRegion::None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftRegion {
    None,
    Missingness,
    Distribution,
}

/// The generator's exact mean function of the latent variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoldenModel {
    pub slope: f64,
    pub intercept: f64,
}

impl GoldenModel {
    pub fn mean(&self, latent: f64) -> f64 {
        self.slope * latent + self.intercept
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: Dataset,
    pub test: Dataset,
    pub golden: GoldenModel,
    pub train_latent: Vec<f64>,
    pub test_latent: Vec<f64>,
    /// Training row each test row was resampled from.
    pub test_source: Vec<usize>,
    /// Test `x1` before masking or shifting.
    pub test_x1_original: Vec<f64>,
    pub test_regions: Vec<ShiftRegion>,
}

impl SyntheticData {
    /// Golden predictions for the test rows.
    pub fn golden_test_predictions(&self) -> Vec<f64> {
        self.test_latent.iter().map(|&t| self.golden.mean(t)).collect()
    }
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.n_train;
    let latent = Uniform::new(config.latent_range.0, config.latent_range.1);
    let e1 = Normal::new(0.0, config.noise_x1_sd).expect("validated sd");
    let e2 = Normal::new(0.0, config.noise_x2_sd).expect("validated sd");
    let shift = Normal::new(config.shift_mean, config.shift_sd).expect("validated sd");
    let golden = GoldenModel {
        slope: config.slope,
        intercept: config.intercept,
    };

    let mut train_latent = Vec::with_capacity(n);
    let mut features = Array2::zeros((n, 2));
    let mut target = Vec::with_capacity(n);
    for i in 0..n {
        let t = latent.sample(&mut rng);
        let y = golden.mean(t);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        features[[i, 0]] = t + e1.sample(&mut rng);
        features[[i, 1]] = sign * (y / config.curvature).sqrt() + e2.sample(&mut rng);
        train_latent.push(t);
        target.push(y);
    }
    let x1_mean = features.column(0).mean().unwrap_or(0.0);
    let x2_mean = features.column(1).mean().unwrap_or(0.0);
    let meta = vec![
        FeatureMeta::numeric("x1", x1_mean),
        FeatureMeta::numeric("x2", x2_mean),
    ];
    let train = Dataset::new(features, Array2::zeros((n, 2)), Some(target), meta.clone())?;

    let pick = Uniform::new(0, n);
    let test_source: Vec<usize> = (0..n).map(|_| pick.sample(&mut rng)).collect();
    let mut test = train.select_rows(&test_source);
    let test_latent: Vec<f64> = test_source.iter().map(|&i| train_latent[i]).collect();
    let test_x1_original: Vec<f64> = test.features.column(0).to_vec();
    let mut test_regions = Vec::with_capacity(n);
    for (r, &x1) in test_x1_original.iter().enumerate() {
        let region = config.region_of(x1);
        match region {
            ShiftRegion::Missingness => {
                test.features[[r, 0]] = x1_mean;
                test.indicators[[r, 0]] = 1.0;
            }
            ShiftRegion::Distribution => {
                test.features[[r, 0]] = x1 - shift.sample(&mut rng);
            }
            ShiftRegion::None => {}
        }
        test_regions.push(region);
    }
    test.validate()?;

    Ok(SyntheticData {
        train,
        test,
        golden,
        train_latent,
        test_latent,
        test_source,
        test_x1_original,
        test_regions,
    })
}
