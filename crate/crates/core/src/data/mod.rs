//! Datasets: the shifted synthetic generator, CSV ingestion and
//! train-only preprocessing.

mod preprocess;
mod synthetic;
mod table;

pub use preprocess::{fit_preprocess, transform, FittedColumn, PreprocessSpec};
pub use synthetic::{generate_synthetic, GoldenModel, ShiftRegion, SyntheticConfig, SyntheticData};
pub use table::{load_csv, read_csv, ColumnKind, ColumnSchema, DateRange, RawTable, Schema};

use std::io::Write;
use std::path::Path;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Suffix of the indicator columns in exported datasets.
pub const INDICATOR_SUFFIX: &str = "__missing";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Numeric,
    Ordinal,
    OneHot { group: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
    pub impute: f64,
}

impl FeatureMeta {
    pub fn numeric(name: impl Into<String>, impute: f64) -> Self {
        FeatureMeta {
            name: name.into(),
            kind: FeatureKind::Numeric,
            impute,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetTransform {
    #[default]
    None,
    Log1p,
}

impl TargetTransform {
    pub fn apply(self, y: f64) -> f64 {
        match self {
            TargetTransform::None => y,
            TargetTransform::Log1p => y.ln_1p(),
        }
    }

    pub fn invert(self, y: f64) -> f64 {
        match self {
            TargetTransform::None => y,
            TargetTransform::Log1p => y.exp_m1(),
        }
    }
}

/// Imputed features, original missingness indicators (1 = missing) and an
/// optional target.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub indicators: Matrix,
    pub target: Option<Vec<f64>>,
    pub meta: Vec<FeatureMeta>,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        indicators: Matrix,
        target: Option<Vec<f64>>,
        meta: Vec<FeatureMeta>,
    ) -> Result<Self> {
        let ds = Dataset {
            features,
            indicators,
            target,
            meta,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = self.features.dim();
        if self.indicators.dim() != (n, d) {
            return Err(Error::Dimension {
                op: "dataset indicators",
                lhs: (n, d),
                rhs: self.indicators.dim(),
            });
        }
        if self.meta.len() != d {
            return Err(Error::Schema(format!(
                "{} feature columns but {} metadata entries",
                d,
                self.meta.len()
            )));
        }
        if let Some(y) = &self.target {
            if y.len() != n {
                return Err(Error::Dimension {
                    op: "dataset target",
                    lhs: (n, d),
                    rhs: (y.len(), 1),
                });
            }
        }
        if self.indicators.iter().any(|&i| i != 0.0 && i != 1.0) {
            return Err(Error::Schema("indicators must be 0 or 1".into()));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema("features must be finite after imputation".into()));
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn feature_names(&self) -> Vec<&str> {
        self.meta.iter().map(|m| m.name.as_str()).collect()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.meta.iter().position(|m| m.name == name)
    }

    pub fn impute_vector(&self) -> Vec<f64> {
        self.meta.iter().map(|m| m.impute).collect()
    }

    /// Network input: features followed by indicators.
    pub fn model_input(&self) -> Matrix {
        ndarray::concatenate(Axis(1), &[self.features.view(), self.indicators.view()])
            .expect("row counts agree")
    }

    pub fn target_or_err(&self) -> Result<&[f64]> {
        self.target
            .as_deref()
            .ok_or_else(|| Error::Argument("dataset has no target".into()))
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), rows),
            indicators: self.indicators.select(Axis(0), rows),
            target: self
                .target
                .as_ref()
                .map(|y| rows.iter().map(|&r| y[r]).collect()),
            meta: self.meta.clone(),
        }
    }

    /// Stacks rows of datasets sharing a schema.
    pub fn concat_rows(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("nothing to concatenate".into()))?;
        if parts.iter().any(|p| p.meta != first.meta) {
            return Err(Error::Schema("cannot stack datasets with different schemas".into()));
        }
        let feats: Vec<_> = parts.iter().map(|p| p.features.view()).collect();
        let inds: Vec<_> = parts.iter().map(|p| p.indicators.view()).collect();
        let target = if parts.iter().all(|p| p.target.is_some()) {
            Some(parts.iter().flat_map(|p| p.target.clone().unwrap()).collect())
        } else {
            None
        };
        Dataset::new(
            ndarray::concatenate(Axis(0), &feats).expect("same width"),
            ndarray::concatenate(Axis(0), &inds).expect("same width"),
            target,
            first.meta.clone(),
        )
    }

    /// CSV with the feature columns, one indicator column per feature and
    /// the target (when present) last.
    pub fn write_csv(&self, path: &Path, target_name: &str) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let mut header: Vec<String> = self.meta.iter().map(|m| m.name.clone()).collect();
        header.extend(self.meta.iter().map(|m| format!("{}{INDICATOR_SUFFIX}", m.name)));
        if self.target.is_some() {
            header.push(target_name.to_string());
        }
        let io = |e| Error::io(path, e);
        writeln!(w, "{}", header.join(",")).map_err(io)?;
        for r in 0..self.n_rows() {
            let mut cells: Vec<String> = self.features.row(r).iter().map(|v| v.to_string()).collect();
            cells.extend(self.indicators.row(r).iter().map(|v| format!("{}", *v as u8)));
            if let Some(y) = &self.target {
                cells.push(y[r].to_string());
            }
            writeln!(w, "{}", cells.join(",")).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Shuffled row indices split into `(first, second)` with
/// `round(n * ratio)` rows in the first part.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Argument(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((n as f64) * ratio).round() as usize;
    let second = idx.split_off(cut);
    Ok((idx, second))
}

/// Disjoint random train / validation split.
pub fn split_train_val(data: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (a, b) = split_indices(data.n_rows(), ratio, seed)?;
    Ok((data.select_rows(&a), data.select_rows(&b)))
}
