use std::collections::HashSet;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{TargetTransform, INDICATOR_SUFFIX};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Ordinal,
    OneHot,
    /// ISO `YYYY-MM-DD` dates, used for row filters only.
    Date,
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default)]
    pub target: bool,
}

/// Inclusive date interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn contains(&self, d: NaiveDate) -> bool {
        d >= self.start && d <= self.end
    }
}

fn default_sentinels() -> Vec<String> {
    ["", "NA", "NaN", "null"].iter().map(|s| s.to_string()).collect()
}

/// Column layout of a CSV source plus optional date filters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<ColumnSchema>,
    #[serde(default = "default_sentinels")]
    pub missing_sentinels: Vec<String>,
    #[serde(default)]
    pub target_transform: TargetTransform,
    #[serde(default)]
    pub date_column: Option<String>,
    #[serde(default)]
    pub train_dates: Option<DateRange>,
    #[serde(default)]
    pub test_dates: Option<DateRange>,
}

impl Schema {
    pub fn from_toml(text: &str) -> Result<Self> {
        let schema: Schema = toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column {}", c.name)));
            }
        }
        if self.columns.iter().filter(|c| c.target).count() > 1 {
            return Err(Error::Schema("at most one target column".into()));
        }
        if let Some(dc) = &self.date_column {
            match self.columns.iter().find(|c| &c.name == dc) {
                Some(c) if c.kind == ColumnKind::Date => {}
                _ => {
                    return Err(Error::Schema(format!(
                        "date column {dc} must be declared with kind = \"date\""
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn target(&self) -> Option<&ColumnSchema> {
        self.columns.iter().find(|c| c.target)
    }

    /// Feature columns in declaration order.
    pub fn features(&self) -> impl Iterator<Item = &ColumnSchema> {
        self.columns.iter().filter(|c| {
            !c.target && matches!(c.kind, ColumnKind::Numeric | ColumnKind::Ordinal | ColumnKind::OneHot)
        })
    }
}

/// String cells as read from disk; `None` marks a missing cell.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<Option<String>>>,
}

impl RawTable {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("unknown column {name}")))
    }

    pub fn column<'a>(&'a self, name: &str) -> Result<impl Iterator<Item = Option<&'a str>> + 'a> {
        let idx = self.column_index(name)?;
        Ok(self.rows.iter().map(move |r| r[idx].as_deref()))
    }

    pub fn select_rows(&self, idx: &[usize]) -> RawTable {
        RawTable {
            headers: self.headers.clone(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Rows whose `column` date lies in `range`. Unparseable or missing
    /// dates are an error.
    pub fn filter_dates(&self, column: &str, range: &DateRange) -> Result<RawTable> {
        let idx = self.column_index(column)?;
        let mut rows = Vec::new();
        for (line, row) in self.rows.iter().enumerate() {
            let cell = row[idx].as_deref().ok_or_else(|| Error::Csv {
                line: line + 2,
                reason: format!("missing date in {column}"),
            })?;
            let date = NaiveDate::parse_from_str(cell, "%Y-%m-%d").map_err(|e| Error::Csv {
                line: line + 2,
                reason: format!("bad date {cell:?}: {e}"),
            })?;
            if range.contains(date) {
                rows.push(row.clone());
            }
        }
        Ok(RawTable {
            headers: self.headers.clone(),
            rows,
        })
    }

    pub fn has_indicator_columns(&self) -> bool {
        self.headers.iter().any(|h| h.ends_with(INDICATOR_SUFFIX))
    }
}

/// Reads any comma-separated file with a header row.
pub fn read_csv(path: &Path, sentinels: &[String]) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Csv {
                line: 1,
                reason: format!("{other:?}"),
            },
        })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Csv {
            line: 1,
            reason: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Csv {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            reason: e.to_string(),
        })?;
        let row = record
            .iter()
            .map(|cell| {
                let cell = cell.trim();
                if sentinels.iter().any(|s| s == cell) {
                    None
                } else {
                    Some(cell.to_string())
                }
            })
            .collect();
        rows.push(row);
    }
    Ok(RawTable { headers, rows })
}

/// Reads a CSV and checks that every schema column is present.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<RawTable> {
    let table = read_csv(path, &schema.missing_sentinels)?;
    for c in &schema.columns {
        table.column_index(&c.name)?;
    }
    Ok(table)
}
