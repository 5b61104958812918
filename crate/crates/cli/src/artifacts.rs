//! Run-directory files: parameter dumps, loss traces, manifests.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use mmdshift::models::Mlp;
use mmdshift::train::LossTrace;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize)]
struct LayerDump {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

fn dump(net: &Mlp) -> Vec<LayerDump> {
    net.layers()
        .iter()
        .map(|l| LayerDump {
            weight: l.weight.data().rows().into_iter().map(|r| r.to_vec()).collect(),
            bias: l.bias.data().iter().copied().collect(),
        })
        .collect()
}

pub fn write_params(path: &Path, predictor: &Mlp, masker: Option<&Mlp>) -> std::io::Result<()> {
    #[derive(Serialize)]
    struct Params {
        predictor: Vec<LayerDump>,
        #[serde(skip_serializing_if = "Option::is_none")]
        masker: Option<Vec<LayerDump>>,
    }
    let params = Params {
        predictor: dump(predictor),
        masker: masker.map(dump),
    };
    write_json(path, &params)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    std::fs::write(path, text + "\n")
}

pub fn write_trace(path: &Path, trace: &LossTrace) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,total,task,mmd")?;
    for e in 0..trace.len() {
        writeln!(w, "{},{},{},{}", e + 1, trace.total[e], trace.task[e], trace.mmd[e])?;
    }
    w.flush()
}

pub fn write_series(path: &Path, header: &str, values: &[f64]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,{header}")?;
    for (e, v) in values.iter().enumerate() {
        writeln!(w, "{},{v}", e + 1)?;
    }
    w.flush()
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_sha256: &'a str,
    seeds: &'a [u64],
    artifacts: BTreeMap<String, String>,
}

/// Hashes every file already in `dir` and writes `manifest.json`.
pub fn write_manifest(dir: &Path, command: &str, config_hash: &str, seeds: &[u64]) -> std::io::Result<()> {
    let mut artifacts = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if path.is_file() && name != "manifest.json" {
            artifacts.insert(name, sha256_hex(&std::fs::read(&path)?));
        }
    }
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            command,
            config_sha256: config_hash,
            seeds,
            artifacts,
        },
    )
}
