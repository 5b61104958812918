//! Multi-method, multi-seed experiments: config documents, data
//! preparation, single (method, seed) cells and the aggregated report.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{
    fit_preprocess, generate_synthetic, load_csv, transform, Dataset, RawTable, Schema, SyntheticConfig, SyntheticData,
    TargetTransform,
};
use crate::error::{Error, Result};
use crate::eval::{auc, mean_std, mse, rmse};
use crate::kernels::KernelSpec;
use crate::kmm::{solve_kmm, KmmConfig, KmmSolution};
use crate::train::{auto_lambda, select_lambda, train_method, LambdaSelection, Method, Task, TrainedModel, TrainingConfig};

/// A report row: a trained method, or the generator's mean function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Entry {
    Model(Method),
    Golden,
}

impl Entry {
    pub fn name(self) -> &'static str {
        match self {
            Entry::Model(m) => m.name(),
            Entry::Golden => "golden",
        }
    }
}

impl FromStr for Entry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "golden" {
            Ok(Entry::Golden)
        } else {
            s.parse().map(Entry::Model)
        }
    }
}

impl fmt::Display for Entry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Rows of the default comparison, in report order.
pub const DEFAULT_ENTRIES: [Entry; 8] = [
    Entry::Model(Method::Baseline),
    Entry::Model(Method::WeightedBaseline),
    Entry::Model(Method::Dan),
    Entry::Model(Method::Jan),
    Entry::Model(Method::MmdRepr),
    Entry::Model(Method::MmdMask),
    Entry::Model(Method::MmdHybrid),
    Entry::Golden,
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaChoice {
    Fixed(f64),
    /// Magnitude matching after a short probe run.
    Auto,
    /// Validation-selected from the experiment's lambda grid.
    Grid,
}

impl FromStr for LambdaChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(LambdaChoice::Auto),
            "grid" => Ok(LambdaChoice::Grid),
            other => other
                .parse::<f64>()
                .ok()
                .filter(|v| *v >= 0.0 && v.is_finite())
                .map(LambdaChoice::Fixed)
                .ok_or_else(|| Error::Argument(format!("lambda must be a number >= 0, `auto` or `grid`, got `{s}`"))),
        }
    }
}

impl fmt::Display for LambdaChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaChoice::Fixed(v) => write!(f, "{v}"),
            LambdaChoice::Auto => f.write_str("auto"),
            LambdaChoice::Grid => f.write_str("grid"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Mse,
    Rmse,
    Auc,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Mse => "mse",
            MetricKind::Rmse => "rmse",
            MetricKind::Auc => "auc",
        }
    }

    pub fn compute(self, pred: &[f64], truth: &[f64]) -> Result<f64> {
        match self {
            MetricKind::Mse => mse(pred, truth),
            MetricKind::Rmse => rmse(pred, truth),
            MetricKind::Auc => auc(pred, truth),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSource {
    pub schema: PathBuf,
    pub train: PathBuf,
    /// Separate test file; otherwise both splits come from `train`
    /// through the schema's date filters.
    #[serde(default)]
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic(SyntheticConfig),
    Csv(CsvSource),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic(SyntheticConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSettings {
    pub training: TrainingConfig,
    pub lambda: LambdaChoice,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub entries: Vec<Entry>,
    pub settings: BTreeMap<Method, MethodSettings>,
    pub seeds: Vec<u64>,
    pub kernel: KernelSpec,
    pub kmm: KmmConfig,
    pub lambda_grid: Option<Vec<f64>>,
    pub metric: MetricKind,
    pub output_dir: Option<PathBuf>,
}

/// On-disk layout. `[training]` holds defaults shared by every method;
/// `[method.<name>]` tables override individual keys, and may set
/// `lambda` to a number, `"auto"` or `"grid"`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    #[serde(default)]
    dataset: DatasetConfig,
    #[serde(default)]
    methods: Option<Vec<String>>,
    #[serde(default)]
    seeds: Option<Vec<u64>>,
    #[serde(default)]
    kernel: Option<KernelSpec>,
    #[serde(default)]
    kmm: Option<toml::Table>,
    #[serde(default)]
    lambda_grid: Option<Vec<f64>>,
    #[serde(default)]
    metric: Option<MetricKind>,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    #[serde(default)]
    training: toml::Table,
    #[serde(default)]
    method: BTreeMap<String, toml::Table>,
}

fn config_err(e: impl fmt::Display) -> Error {
    Error::Config(e.to_string())
}

fn lambda_from_value(v: &toml::Value) -> Result<LambdaChoice> {
    match v {
        toml::Value::Float(f) => format!("{f}").parse(),
        toml::Value::Integer(i) => format!("{i}").parse(),
        toml::Value::String(s) => s.parse(),
        other => Err(Error::Config(format!("lambda must be a number or string, got {other}"))),
    }
    .map_err(config_err)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawExperiment = toml::from_str(text).map_err(config_err)?;
        let kernel = raw.kernel.unwrap_or_default();
        let entries = match raw.methods {
            Some(names) => names.iter().map(|n| n.parse()).collect::<Result<Vec<Entry>>>()?,
            None => DEFAULT_ENTRIES.to_vec(),
        };
        for name in raw.method.keys() {
            name.parse::<Method>().map_err(config_err)?;
        }

        let mut base = raw.training;
        base.entry("kernel")
            .or_insert_with(|| toml::Value::try_from(&kernel).expect("kernel serializes"));
        let base_lambda = base.remove("lambda").map(|v| lambda_from_value(&v)).transpose()?;

        let mut settings = BTreeMap::new();
        for method in Method::ALL {
            let mut table = base.clone();
            let mut lambda = base_lambda.unwrap_or(LambdaChoice::Fixed(1.0));
            let overrides = raw.method.iter().filter(|(k, _)| k.parse::<Method>().ok() == Some(method));
            for (_, over) in overrides {
                for (k, v) in over {
                    if k == "lambda" {
                        lambda = lambda_from_value(v)?;
                    } else {
                        table.insert(k.clone(), v.clone());
                    }
                }
            }
            table.insert("method".into(), toml::Value::String(method.name().into()));
            let training: TrainingConfig = table.try_into().map_err(config_err)?;
            settings.insert(method, MethodSettings { training, lambda });
        }

        let mut kmm_table = raw.kmm.unwrap_or_default();
        kmm_table
            .entry("kernel")
            .or_insert_with(|| toml::Value::try_from(&kernel).expect("kernel serializes"));
        let kmm: KmmConfig = kmm_table.try_into().map_err(config_err)?;

        let metric = raw.metric.unwrap_or(match &raw.dataset {
            DatasetConfig::Synthetic(_) => MetricKind::Mse,
            DatasetConfig::Csv(_) => MetricKind::Rmse,
        });
        let config = ExperimentConfig {
            dataset: raw.dataset,
            entries,
            settings,
            seeds: raw.seeds.unwrap_or_else(|| vec![0]),
            kernel,
            kmm,
            lambda_grid: raw.lambda_grid,
            metric,
            output_dir: raw.output_dir,
        };
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file. Relative CSV paths resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            config.resolve_paths(dir);
        }
        config.check_files()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let DatasetConfig::Csv(src) = &mut self.dataset {
            for p in [Some(&mut src.schema), Some(&mut src.train), src.test.as_mut()].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        match &self.dataset {
            DatasetConfig::Synthetic(s) => s.validate()?,
            DatasetConfig::Csv(_) => {
                if self.entries.contains(&Entry::Golden) {
                    return Err(Error::Config("golden is only defined for synthetic data".into()));
                }
            }
        }
        if let Some(grid) = &self.lambda_grid {
            if grid.is_empty() || grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
                return Err(Error::Config("lambda_grid needs finite values >= 0".into()));
            }
        }
        for entry in &self.entries {
            if let Entry::Model(m) = entry {
                let s = &self.settings[m];
                s.training.validate()?;
                if s.lambda == LambdaChoice::Grid && self.lambda_grid.is_none() {
                    return Err(Error::Config(format!("{m} uses lambda = \"grid\" but no lambda_grid is set")));
                }
            }
        }
        Ok(())
    }

    /// Referenced input files must exist.
    pub fn check_files(&self) -> Result<()> {
        if let DatasetConfig::Csv(src) = &self.dataset {
            for p in [Some(&src.schema), Some(&src.train), src.test.as_ref()].into_iter().flatten() {
                if !p.exists() {
                    return Err(Error::Config(format!("{} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn settings(&self, method: Method) -> &MethodSettings {
        &self.settings[&method]
    }

    pub fn settings_mut(&mut self, method: Method) -> &mut MethodSettings {
        self.settings.get_mut(&method).expect("every method has settings")
    }

    /// Applies one lambda choice to every method.
    pub fn set_lambda(&mut self, lambda: LambdaChoice) {
        for s in self.settings.values_mut() {
            s.lambda = lambda;
        }
    }
}

/// Train/test data ready for training, plus what reporting needs.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub target_transform: TargetTransform,
    /// Present for synthetic data.
    pub synthetic: Option<SyntheticData>,
}

impl PreparedData {
    /// Test targets on the reporting scale.
    pub fn test_truth(&self) -> Result<Vec<f64>> {
        let y = self.test.target_or_err()?;
        Ok(y.iter().map(|&v| self.target_transform.invert(v)).collect())
    }
}

/// Synthetic data is regenerated per seed (generator seed plus run
/// seed); CSV data is the same for every seed.
pub fn prepare_data(dataset: &DatasetConfig, seed: u64) -> Result<PreparedData> {
    match dataset {
        DatasetConfig::Synthetic(cfg) => {
            let data = generate_synthetic(&SyntheticConfig {
                seed: cfg.seed.wrapping_add(seed),
                ..cfg.clone()
            })?;
            Ok(PreparedData {
                train: data.train.clone(),
                test: data.test.clone(),
                target_transform: TargetTransform::None,
                synthetic: Some(data),
            })
        }
        DatasetConfig::Csv(src) => {
            let schema = Schema::load(&src.schema)?;
            let (train_raw, test_raw) = load_csv_split(src, &schema)?;
            let spec = fit_preprocess(&train_raw, &schema)?;
            Ok(PreparedData {
                train: transform(&train_raw, &spec)?,
                test: transform(&test_raw, &spec)?,
                target_transform: spec.target_transform,
                synthetic: None,
            })
        }
    }
}

/// Raw train and test tables, date-filtered when the schema says so.
pub fn load_csv_split(src: &CsvSource, schema: &Schema) -> Result<(RawTable, RawTable)> {
    let train = load_csv(&src.train, schema)?;
    let test = match &src.test {
        Some(p) => load_csv(p, schema)?,
        None => train.clone(),
    };
    let filter = |table: RawTable, range| -> Result<RawTable> {
        match (&schema.date_column, range) {
            (Some(col), Some(r)) => table.filter_dates(col, &r),
            _ => Ok(table),
        }
    };
    let train = filter(train, schema.train_dates)?;
    let test = filter(test, schema.test_dates)?;
    if src.test.is_none() && schema.test_dates.is_none() {
        return Err(Error::Schema("a single CSV needs test_dates to carve out the test split".into()));
    }
    Ok((train, test))
}

/// How lambda was settled for one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaRecord {
    pub used: f64,
    /// Magnitude-matching value, reported next to grid selections.
    pub magnitude_matched: Option<f64>,
    pub selection: Option<LambdaSelection>,
}

/// One finished (entry, seed) cell.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub entry: Entry,
    pub seed: u64,
    pub metric: f64,
    /// Test predictions on the reporting scale.
    pub predictions: Vec<f64>,
    pub lambda: Option<LambdaRecord>,
    pub model: Option<TrainedModel>,
    pub kmm: Option<KmmSolution>,
}

fn resolve_lambda(
    exp: &ExperimentConfig,
    data: &PreparedData,
    weights: Option<&[f64]>,
    cfg: &TrainingConfig,
    choice: LambdaChoice,
) -> Result<LambdaRecord> {
    Ok(match choice {
        LambdaChoice::Fixed(v) => LambdaRecord {
            used: v,
            magnitude_matched: None,
            selection: None,
        },
        LambdaChoice::Auto => {
            let v = auto_lambda(&data.train, &data.test, cfg)?;
            LambdaRecord {
                used: v,
                magnitude_matched: Some(v),
                selection: None,
            }
        }
        LambdaChoice::Grid => {
            let grid = exp.lambda_grid.as_deref().ok_or_else(|| Error::Config("no lambda_grid".into()))?;
            let sel = select_lambda(&data.train, &data.test, weights, cfg, grid)?;
            LambdaRecord {
                used: sel.lambda,
                magnitude_matched: auto_lambda(&data.train, &data.test, cfg).ok(),
                selection: Some(sel),
            }
        }
    })
}

/// Trains (or, for golden, evaluates) one entry on one seed.
pub fn run_cell(exp: &ExperimentConfig, data: &PreparedData, entry: Entry, seed: u64) -> Result<CellOutcome> {
    let truth = data.test_truth()?;
    let method = match entry {
        Entry::Golden => {
            let synth = data
                .synthetic
                .as_ref()
                .ok_or_else(|| Error::Config("golden is only defined for synthetic data".into()))?;
            let predictions = synth.golden_test_predictions();
            return Ok(CellOutcome {
                entry,
                seed,
                metric: exp.metric.compute(&predictions, &truth)?,
                predictions,
                lambda: None,
                model: None,
                kmm: None,
            });
        }
        Entry::Model(m) => m,
    };
    let settings = exp.settings(method);
    let mut cfg = TrainingConfig {
        seed,
        ..settings.training.clone()
    };
    let kmm = if method == Method::WeightedBaseline {
        Some(solve_kmm(&data.train.model_input(), &data.test.model_input(), &exp.kmm)?)
    } else {
        None
    };
    let weights = kmm.as_ref().map(|s| s.weights.as_slice());
    let lambda = if method.uses_lambda() {
        let record = resolve_lambda(exp, data, weights, &cfg, settings.lambda)?;
        cfg.lambda = record.used;
        Some(record)
    } else {
        None
    };
    let model = train_method(&data.train, &data.test, weights, &cfg)?;
    let raw = model.predict(&data.test)?;
    let predictions: Vec<f64> = match cfg.task {
        Task::Regression => raw.iter().map(|&v| data.target_transform.invert(v)).collect(),
        Task::BinaryClassification => raw,
    };
    Ok(CellOutcome {
        entry,
        seed,
        metric: exp.metric.compute(&predictions, &truth)?,
        predictions,
        lambda,
        model: Some(model),
        kmm,
    })
}

/// One report line; `mean` is absent when every seed failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub metric: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub per_seed: Vec<Option<f64>>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
}

/// Assembles the report in config order. `cells[i][k]` is entry `i` on
/// seed `k`; a failed cell is recorded by its error message.
pub fn assemble_report(exp: &ExperimentConfig, cells: &[Vec<std::result::Result<f64, String>>]) -> CompareReport {
    let rows = exp
        .entries
        .iter()
        .zip(cells)
        .map(|(entry, per_seed)| {
            let values: Vec<f64> = per_seed.iter().filter_map(|c| c.as_ref().ok().copied()).collect();
            let (mean, std) = if values.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&values);
                (Some(m), s)
            };
            ReportRow {
                method: entry.name().to_string(),
                metric: exp.metric.name().to_string(),
                mean,
                std,
                per_seed: per_seed.iter().map(|c| c.as_ref().ok().copied()).collect(),
                failures: per_seed
                    .iter()
                    .zip(&exp.seeds)
                    .filter_map(|(c, s)| c.as_ref().err().map(|e| format!("seed {s}: {e}")))
                    .collect(),
            }
        })
        .collect();
    CompareReport {
        seeds: exp.seeds.clone(),
        rows,
    }
}

impl CompareReport {
    /// `method,metric,mean[,std],failed`. The std column is left out
    /// when there is a single seed; failed cells leave `NA` gaps.
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        let with_std = self.seeds.len() > 1;
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        if with_std {
            writeln!(out, "method,metric,mean,std,failed")?;
        } else {
            writeln!(out, "method,metric,mean,failed")?;
        }
        for row in &self.rows {
            if with_std {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    row.method,
                    row.metric,
                    fmt(row.mean),
                    fmt(row.std),
                    row.failures.len()
                )?;
            } else {
                writeln!(out, "{},{},{},{}", row.method, row.metric, fmt(row.mean), row.failures.len())?;
            }
        }
        Ok(())
    }

    pub fn row(&self, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}
