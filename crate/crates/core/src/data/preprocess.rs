use std::cmp::Ordering;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::table::{ColumnKind, RawTable, Schema};
use super::{Dataset, FeatureKind, FeatureMeta, TargetTransform};
use crate::error::{Error, Result};

/// Per-column state learned from the training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FittedColumn {
    Numeric {
        name: String,
        mean: f64,
    },
    Ordinal {
        name: String,
        /// Training categories in rank order; a category maps to its index.
        categories: Vec<String>,
        mean: f64,
    },
    OneHot {
        name: String,
        categories: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub columns: Vec<FittedColumn>,
    pub target: Option<String>,
    pub target_transform: TargetTransform,
}

fn parse_number(name: &str, row: usize, cell: &str) -> Result<f64> {
    let v: f64 = cell.parse().map_err(|_| Error::Csv {
        line: row + 2,
        reason: format!("column {name}: {cell:?} is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Csv {
            line: row + 2,
            reason: format!("column {name}: non-finite value"),
        });
    }
    Ok(v)
}

/// Numeric order when every category parses as a number, lexicographic
/// otherwise.
fn rank_categories(mut cats: Vec<String>) -> Vec<String> {
    cats.sort();
    cats.dedup();
    if cats.iter().all(|c| c.parse::<f64>().is_ok()) {
        cats.sort_by(|a, b| {
            let (x, y) = (a.parse::<f64>().unwrap(), b.parse::<f64>().unwrap());
            x.partial_cmp(&y).unwrap_or(Ordering::Equal)
        });
    }
    cats
}

fn mean_or_zero(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Learns imputation means, ordinal maps and one-hot layouts from
/// training rows only.
pub fn fit_preprocess(train: &RawTable, schema: &Schema) -> Result<PreprocessSpec> {
    if train.n_rows() == 0 {
        return Err(Error::Argument("cannot fit preprocessing on an empty table".into()));
    }
    if train.has_indicator_columns() {
        return Err(Error::Schema("table is already preprocessed".into()));
    }
    let mut columns = Vec::new();
    for col in schema.features() {
        let cells: Vec<Option<&str>> = train.column(&col.name)?.collect();
        let fitted = match col.kind {
            ColumnKind::Numeric => {
                let mut vals = Vec::new();
                for (r, c) in cells.iter().enumerate() {
                    if let Some(c) = c {
                        vals.push(parse_number(&col.name, r, c)?);
                    }
                }
                FittedColumn::Numeric {
                    name: col.name.clone(),
                    mean: mean_or_zero(vals.into_iter()),
                }
            }
            ColumnKind::Ordinal => {
                let categories =
                    rank_categories(cells.iter().flatten().map(|c| c.to_string()).collect());
                let mean = mean_or_zero(
                    cells
                        .iter()
                        .flatten()
                        .map(|c| categories.iter().position(|k| k == c).unwrap() as f64),
                );
                FittedColumn::Ordinal {
                    name: col.name.clone(),
                    categories,
                    mean,
                }
            }
            ColumnKind::OneHot => FittedColumn::OneHot {
                name: col.name.clone(),
                categories: rank_categories(cells.iter().flatten().map(|c| c.to_string()).collect()),
            },
            ColumnKind::Date | ColumnKind::Ignore => unreachable!("filtered by Schema::features"),
        };
        columns.push(fitted);
    }
    Ok(PreprocessSpec {
        columns,
        target: schema.target().map(|t| t.name.clone()),
        target_transform: schema.target_transform,
    })
}

impl PreprocessSpec {
    pub fn feature_meta(&self) -> Vec<FeatureMeta> {
        let mut meta = Vec::new();
        for col in &self.columns {
            match col {
                FittedColumn::Numeric { name, mean } => meta.push(FeatureMeta {
                    name: name.clone(),
                    kind: FeatureKind::Numeric,
                    impute: *mean,
                }),
                FittedColumn::Ordinal { name, mean, .. } => meta.push(FeatureMeta {
                    name: name.clone(),
                    kind: FeatureKind::Ordinal,
                    impute: *mean,
                }),
                FittedColumn::OneHot { name, categories } => {
                    for cat in categories {
                        meta.push(FeatureMeta {
                            name: format!("{name}={cat}"),
                            kind: FeatureKind::OneHot { group: name.clone() },
                            impute: 0.0,
                        });
                    }
                }
            }
        }
        meta
    }
}

/// Applies a fitted spec. Missing and unseen values are imputed and
/// flagged in the indicator matrix.
pub fn transform(table: &RawTable, spec: &PreprocessSpec) -> Result<Dataset> {
    if table.has_indicator_columns() {
        return Err(Error::Schema("table is already preprocessed".into()));
    }
    let meta = spec.feature_meta();
    let n = table.n_rows();
    let mut features = Array2::zeros((n, meta.len()));
    let mut indicators = Array2::zeros((n, meta.len()));
    let mut offset = 0;
    for col in &spec.columns {
        match col {
            FittedColumn::Numeric { name, mean } => {
                for (r, cell) in table.column(name)?.enumerate() {
                    match cell {
                        Some(c) => features[[r, offset]] = parse_number(name, r, c)?,
                        None => {
                            features[[r, offset]] = *mean;
                            indicators[[r, offset]] = 1.0;
                        }
                    }
                }
                offset += 1;
            }
            FittedColumn::Ordinal {
                name,
                categories,
                mean,
            } => {
                for (r, cell) in table.column(name)?.enumerate() {
                    match cell.and_then(|c| categories.iter().position(|k| k == c)) {
                        Some(rank) => features[[r, offset]] = rank as f64,
                        None => {
                            features[[r, offset]] = *mean;
                            indicators[[r, offset]] = 1.0;
                        }
                    }
                }
                offset += 1;
            }
            FittedColumn::OneHot { name, categories } => {
                let width = categories.len();
                for (r, cell) in table.column(name)?.enumerate() {
                    match cell.and_then(|c| categories.iter().position(|k| k == c)) {
                        Some(k) => features[[r, offset + k]] = 1.0,
                        None => {
                            for k in 0..width {
                                indicators[[r, offset + k]] = 1.0;
                            }
                        }
                    }
                }
                offset += width;
            }
        }
    }
    let target = match &spec.target {
        Some(name) => {
            let mut y = Vec::with_capacity(n);
            for (r, cell) in table.column(name)?.enumerate() {
                let cell = cell.ok_or_else(|| Error::Csv {
                    line: r + 2,
                    reason: format!("missing target {name}"),
                })?;
                y.push(spec.target_transform.apply(parse_number(name, r, cell)?));
            }
            Some(y)
        }
        None => None,
    };
    Dataset::new(features, indicators, target, meta)
}
