use std::path::{Path, PathBuf};

use mmdshift::data::{ShiftRegion, INDICATOR_SUFFIX};
use mmdshift::eval::{self, write_mask_csv, write_summary, MetricReport, Summary};
use mmdshift::experiment::{
    assemble_report, prepare_data, run_cell, CellOutcome, DatasetConfig, Entry, ExperimentConfig, LambdaChoice,
    PreparedData,
};
use mmdshift::kmm::{solve_kmm, write_weights_csv};
use mmdshift::train::Method;
use mmdshift::Error;
use rayon::prelude::*;
use serde::Serialize;

use crate::artifacts::{sha256_hex, write_json, write_manifest, write_params, write_series, write_trace};
use crate::Common;

/// Exit code 2 for `Usage`, 1 for `Runtime`.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Argument(_) | Error::Schema(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn io_failure(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", path.display()))
}

type CliResult<T> = std::result::Result<T, Failure>;

struct Loaded {
    exp: ExperimentConfig,
    hash: String,
    root: PathBuf,
}

fn parse_override(table: &mut toml::Table, spec: &str) -> CliResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{spec}`")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut node = table;
    for p in path {
        node = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Failure::Usage(format!("`{p}` in `{key}` is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// Config file plus `--set` overrides and flags. Every failure here is a
/// usage error. `only` narrows the method list for single-run commands.
fn load(common: &Common, only: Option<&str>) -> CliResult<Loaded> {
    let (text, base) = match &common.config {
        Some(p) => (
            std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
            p.parent().map(Path::to_path_buf).unwrap_or_default(),
        ),
        None => (String::new(), PathBuf::from(".")),
    };
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| Failure::Usage(e.to_string()))?;
    for spec in &common.overrides {
        parse_override(&mut table, spec)?;
    }
    if let Some(name) = only {
        table.insert("methods".into(), toml::Value::Array(vec![toml::Value::String(name.into())]));
    }
    if let Some(seed) = common.seed {
        table.insert("seeds".into(), toml::Value::Array(vec![toml::Value::Integer(seed as i64)]));
    }
    let doc = toml::to_string(&table).map_err(|e| Failure::Usage(e.to_string()))?;
    let usage = |e: Error| Failure::Usage(e.to_string());
    let mut exp = ExperimentConfig::from_toml(&doc).map_err(usage)?;
    if let Some(l) = &common.lambda {
        exp.set_lambda(l.parse::<LambdaChoice>().map_err(usage)?);
        exp.validate().map_err(usage)?;
    }
    exp.resolve_paths(&base);
    exp.check_files().map_err(usage)?;
    let flags = format!(
        "method={:?}\nlambda={:?}\n",
        common.method, common.lambda
    );
    let hash = sha256_hex(format!("{doc}\n{flags}").as_bytes());
    let root = common
        .out
        .clone()
        .or_else(|| exp.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    Ok(Loaded { exp, hash, root })
}

fn entry_flag(common: &Common, default: Option<Method>) -> CliResult<Method> {
    let name = match (&common.method, default) {
        (Some(n), _) => n.clone(),
        (None, Some(m)) => return Ok(m),
        (None, None) => return Err(Failure::Usage("--method is required".into())),
    };
    match name.parse::<Entry>() {
        Ok(Entry::Model(m)) => Ok(m),
        Ok(Entry::Golden) => Err(Failure::Usage("golden is not a trainable method".into())),
        Err(e) => Err(Failure::Usage(e.to_string())),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(io_failure(dir))
}

pub fn synth(common: &Common) -> CliResult<()> {
    let loaded = load(common, Some("golden"))?;
    if !matches!(loaded.exp.dataset, DatasetConfig::Synthetic(_)) {
        return Err(Failure::Usage("synth needs a synthetic dataset section".into()));
    }
    let seed = loaded.exp.seeds[0];
    let data = prepare_data(&loaded.exp.dataset, seed)?;
    let synth = data.synthetic.as_ref().expect("synthetic dataset");
    let dir = loaded.root.join(format!("synth-seed{seed}"));
    create_dir(&dir)?;
    data.train.write_csv(&dir.join("train.csv"), "y")?;
    data.test.write_csv(&dir.join("test.csv"), "y")?;
    let golden = dir.join("golden.csv");
    let text: String = std::iter::once("golden\n".to_string())
        .chain(synth.golden_test_predictions().iter().map(|v| format!("{v}\n")))
        .collect();
    std::fs::write(&golden, text).map_err(io_failure(&golden))?;
    write_manifest(&dir, "synth", &loaded.hash, &[seed]).map_err(io_failure(&dir))?;

    let n = synth.test_regions.len() as f64;
    let frac = |r: ShiftRegion| synth.test_regions.iter().filter(|&&x| x == r).count() as f64 / n;
    println!("train rows: {}", data.train.n_rows());
    println!("test rows: {}", data.test.n_rows());
    println!("test missingness-shift fraction: {:.4}", frac(ShiftRegion::Missingness));
    println!("test distribution-shift fraction: {:.4}", frac(ShiftRegion::Distribution));
    println!("written to {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct RunMetrics<'a> {
    method: &'a str,
    seed: u64,
    metric: &'a str,
    value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<&'a mmdshift::experiment::LambdaRecord>,
    final_total_loss: Option<f64>,
    final_task_loss: Option<f64>,
    final_mmd_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mask_rates: Option<Vec<(String, f64)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kmm_objective: Option<f64>,
}

fn mask_rates(cell: &CellOutcome, data: &PreparedData) -> Option<Vec<(String, f64)>> {
    let masked = cell.model.as_ref()?.masked_train.as_ref()?;
    Some(
        data.train
            .feature_names()
            .iter()
            .enumerate()
            .map(|(j, n)| (n.to_string(), masked.mask_rate(j)))
            .collect(),
    )
}

fn write_mask(dir: &Path, cell: &CellOutcome, data: &PreparedData) -> CliResult<bool> {
    let Some(masked) = cell.model.as_ref().and_then(|m| m.masked_train.as_ref()) else {
        return Ok(false);
    };
    let names: Vec<String> = data
        .train
        .feature_names()
        .iter()
        .map(|n| format!("{n}{INDICATOR_SUFFIX}"))
        .collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    write_mask_csv(&dir.join("mask.csv"), &refs, &masked.indicator_hat)?;
    Ok(true)
}

/// Everything `train` leaves in a run directory.
fn write_run(dir: &Path, exp: &ExperimentConfig, cell: &CellOutcome, data: &PreparedData) -> CliResult<()> {
    create_dir(dir)?;
    let io = io_failure(dir);
    let model = cell.model.as_ref();
    if let Some(m) = model {
        write_trace(&dir.join("loss_trace.csv"), &m.trace).map_err(&io)?;
        write_params(&dir.join("params.json"), &m.bundle.predictor, m.bundle.masker.as_ref()).map_err(&io)?;
        if let Some(t) = &m.masker_trace {
            write_series(&dir.join("masker_trace.csv"), "joint_mmd", t).map_err(&io)?;
        }
    }
    write_mask(dir, cell, data)?;
    if let Some(k) = &cell.kmm {
        write_weights_csv(&dir.join("weights.csv"), &k.weights)?;
    }
    let preds: String = std::iter::once("prediction\n".to_string())
        .chain(cell.predictions.iter().map(|v| format!("{v}\n")))
        .collect();
    std::fs::write(dir.join("predictions.csv"), preds).map_err(&io)?;
    let last = |v: Option<&Vec<f64>>| v.and_then(|x| x.last().copied());
    write_json(
        &dir.join("metrics.json"),
        &RunMetrics {
            method: cell.entry.name(),
            seed: cell.seed,
            metric: exp.metric.name(),
            value: cell.metric,
            lambda: cell.lambda.as_ref(),
            final_total_loss: last(model.map(|m| &m.trace.total)),
            final_task_loss: last(model.map(|m| &m.trace.task)),
            final_mmd_loss: last(model.map(|m| &m.trace.mmd)),
            mask_rates: mask_rates(cell, data),
            kmm_objective: cell.kmm.as_ref().map(|k| k.objective),
        },
    )
    .map_err(&io)
}

fn train_one(common: &Common, default: Option<Method>) -> CliResult<(Loaded, PreparedData, CellOutcome, PathBuf)> {
    let method = entry_flag(common, default)?;
    let loaded = load(common, Some(method.name()))?;
    let seed = loaded.exp.seeds[0];
    let data = prepare_data(&loaded.exp.dataset, seed)?;
    eprintln!("training {method} (seed {seed})");
    let cell = run_cell(&loaded.exp, &data, Entry::Model(method), seed)?;
    let dir = loaded.root.join(format!("{}-seed{seed}", method.name()));
    Ok((loaded, data, cell, dir))
}

pub fn train(common: &Common) -> CliResult<()> {
    let (loaded, data, cell, dir) = train_one(common, None)?;
    write_run(&dir, &loaded.exp, &cell, &data)?;
    write_manifest(&dir, "train", &loaded.hash, &[cell.seed]).map_err(io_failure(&dir))?;
    println!("{} {} = {}", cell.entry, loaded.exp.metric.name(), cell.metric);
    println!("written to {}", dir.display());
    Ok(())
}

pub fn export_masks(common: &Common) -> CliResult<()> {
    let (loaded, data, cell, dir) = train_one(common, Some(Method::MmdMask))?;
    if !cell.model.as_ref().is_some_and(|m| m.config.method.uses_masker()) {
        return Err(Failure::Usage(format!("{} does not learn a mask", cell.entry)));
    }
    create_dir(&dir)?;
    write_mask(&dir, &cell, &data)?;
    let rates_path = dir.join("mask_rates.csv");
    let mut text = String::from("feature,train_missing,test_missing,masked_train_missing\n");
    let rate = |m: &mmdshift::tensor::Matrix, j: usize| m.column(j).sum() / m.nrows().max(1) as f64;
    let masked = &cell.model.as_ref().and_then(|m| m.masked_train.as_ref()).expect("masker output").indicator_hat;
    for (j, name) in data.train.feature_names().iter().enumerate() {
        text.push_str(&format!(
            "{name},{},{},{}\n",
            rate(&data.train.indicators, j),
            rate(&data.test.indicators, j),
            rate(masked, j)
        ));
    }
    std::fs::write(&rates_path, text).map_err(io_failure(&rates_path))?;
    write_manifest(&dir, "export-masks", &loaded.hash, &[cell.seed]).map_err(io_failure(&dir))?;
    println!("written to {}", dir.display());
    Ok(())
}

pub fn export_embeddings(common: &Common) -> CliResult<()> {
    let (loaded, data, cell, dir) = train_one(common, Some(Method::Baseline))?;
    create_dir(&dir)?;
    let model = cell.model.as_ref().expect("trained model");
    eval::export_embeddings(model, &data.train, &data.test, &dir.join("embeddings.csv"))?;
    write_manifest(&dir, "export-embeddings", &loaded.hash, &[cell.seed]).map_err(io_failure(&dir))?;
    println!("written to {}", dir.display());
    Ok(())
}

pub fn kmm(common: &Common) -> CliResult<()> {
    let loaded = load(common, Some("weighted_baseline"))?;
    let seed = loaded.exp.seeds[0];
    let data = prepare_data(&loaded.exp.dataset, seed)?;
    let sol = solve_kmm(&data.train.model_input(), &data.test.model_input(), &loaded.exp.kmm)?;
    let dir = loaded.root.join(format!("kmm-seed{seed}"));
    create_dir(&dir)?;
    write_weights_csv(&dir.join("weights.csv"), &sol.weights)?;
    write_manifest(&dir, "kmm", &loaded.hash, &[seed]).map_err(io_failure(&dir))?;
    let (slab, boxv) = sol.feasibility_residuals(&loaded.exp.kmm);
    println!("weights: {}", sol.weights.len());
    println!("objective: {}", sol.objective);
    println!("iterations: {}", sol.iterations);
    println!("sum constraint residual: {slab}");
    println!("box constraint residual: {boxv}");
    println!("written to {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct CellRecord {
    method: String,
    seed: u64,
    value: Option<f64>,
    lambda: Option<f64>,
    magnitude_matched_lambda: Option<f64>,
    error: Option<String>,
}

pub fn compare(common: &Common, threads: Option<usize>) -> CliResult<()> {
    let loaded = load(common, None)?;
    let exp = &loaded.exp;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let dir = loaded.root.join("compare");
    create_dir(&dir)?;

    let data: Vec<Result<PreparedData, String>> = pool.install(|| {
        exp.seeds
            .par_iter()
            .map(|&s| prepare_data(&exp.dataset, s).map_err(|e| e.to_string()))
            .collect()
    });
    let jobs: Vec<(usize, usize)> = (0..exp.entries.len())
        .flat_map(|i| (0..exp.seeds.len()).map(move |k| (i, k)))
        .collect();
    let outcomes: Vec<Result<CellOutcome, String>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, k)| {
                let (entry, seed) = (exp.entries[i], exp.seeds[k]);
                let d = data[k].as_ref().map_err(Clone::clone)?;
                let out = run_cell(exp, d, entry, seed).map_err(|e| e.to_string());
                match &out {
                    Ok(c) => eprintln!("{entry} seed {seed}: {} = {}", exp.metric.name(), c.metric),
                    Err(e) => eprintln!("{entry} seed {seed}: failed: {e}"),
                }
                out
            })
            .collect()
    });

    let mut grid: Vec<Vec<Result<f64, String>>> = vec![Vec::new(); exp.entries.len()];
    let mut records = Vec::new();
    for (&(i, k), out) in jobs.iter().zip(&outcomes) {
        grid[i].push(out.as_ref().map(|c| c.metric).map_err(Clone::clone));
        let lambda = out.as_ref().ok().and_then(|c| c.lambda.as_ref());
        records.push(CellRecord {
            method: exp.entries[i].name().to_string(),
            seed: exp.seeds[k],
            value: out.as_ref().ok().map(|c| c.metric),
            lambda: lambda.map(|l| l.used),
            magnitude_matched_lambda: lambda.and_then(|l| l.magnitude_matched),
            error: out.as_ref().err().cloned(),
        });
    }
    let report = assemble_report(exp, &grid);

    let io = io_failure(&dir);
    let mut csv = Vec::new();
    report.write_csv(&mut csv).map_err(&io)?;
    std::fs::write(dir.join("report.csv"), &csv).map_err(&io)?;
    write_json(&dir.join("report.json"), &report).map_err(&io)?;
    write_json(&dir.join("cells.json"), &records).map_err(&io)?;
    let mut summary = Summary::new();
    for row in &report.rows {
        let ok: Vec<f64> = row.per_seed.iter().flatten().copied().collect();
        if let Ok(r) = MetricReport::from_values(row.metric.clone(), ok) {
            summary.insert(row.method.clone(), r);
        }
    }
    write_summary(&dir.join("summary.json"), &summary)?;
    write_manifest(&dir, "compare", &loaded.hash, &exp.seeds).map_err(&io)?;
    print!("{}", String::from_utf8_lossy(&csv));

    let failed = records.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} cells failed", records.len())));
    }
    Ok(())
}
