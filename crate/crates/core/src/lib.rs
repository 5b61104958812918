//! Training predictive models under covariate and missingness shift by
//! minimizing maximum mean discrepancy (MMD) between training and test
//! data, in input space (a learned masker), representation space, or both.
//!
//! Modules, bottom-up:
//!
//! * [`tensor`]: reverse-mode autodiff over dense matrices, RMSProp.
//! * [`kernels`]: mixture-of-RBF Gram matrices and MMD² estimators.
//! * [`models`]: MLPs, masker network, Relaxed-Bernoulli masks.
//! * [`data`]: synthetic shift generator, CSV ingestion, preprocessing.
//! * [`kmm`]: kernel mean matching sample weights.
//! * [`train`]: baseline, MMD representation / mask / hybrid, DAN, JAN and
//!   weighted training loops.
//! * [`eval`]: metrics, residual buckets, mask histograms, exports.
//! * [`experiment`]: config documents, per-seed cells, comparison report.

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod kernels;
pub mod kmm;
pub mod models;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
