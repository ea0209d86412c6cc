//! Run manifests with content hashes, and the cross-run results table.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::evaluator::{format_mean_ci, EvalReport, Protocol};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Fields left out of artifact hashes.
const VOLATILE_FIELDS: &[&str] = &["wallclock"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub experiment_id: String,
    pub config_path: Option<String>,
    pub config_hash: Option<String>,
    pub dataset_root: Option<String>,
    pub split_file: Option<String>,
    pub permset_file: Option<String>,
    pub output_dir: String,
    pub seed: Option<u64>,
    /// Training configuration of the run, when it trained a model.
    #[serde(default)]
    pub train_config: Option<serde_json::Value>,
    pub artifacts: Vec<Artifact>,
}

fn hex_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn strip_volatile(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            for f in VOLATILE_FIELDS {
                map.remove(*f);
            }
            map.values_mut().for_each(strip_volatile);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_volatile),
        _ => {}
    }
}

/// SHA-256 of a file. JSON and JSON-lines files are hashed with wallclock
/// fields removed.
pub fn artifact_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let normalised = match ext {
        "jsonl" => {
            let text = String::from_utf8_lossy(&bytes);
            let mut out = String::new();
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let mut v: serde_json::Value =
                    serde_json::from_str(line).map_err(|e| Error::parse("log line", &e))?;
                strip_volatile(&mut v);
                out.push_str(&v.to_string());
                out.push('\n');
            }
            out.into_bytes()
        }
        "json" => match serde_json::from_slice::<serde_json::Value>(&bytes) {
            Ok(mut v) => {
                strip_volatile(&mut v);
                v.to_string().into_bytes()
            }
            Err(_) => bytes,
        },
        _ => bytes,
    };
    Ok(hex_digest(&normalised))
}

pub fn bytes_hash(bytes: &[u8]) -> String {
    hex_digest(bytes)
}

impl ExperimentManifest {
    pub fn new(output_dir: &Path) -> Self {
        Self {
            output_dir: output_dir.display().to_string(),
            ..Default::default()
        }
    }

    pub fn path_in(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_FILE)
    }

    /// Existing manifest of `dir`, or an empty one.
    pub fn load_or_new(dir: &Path) -> Result<Self> {
        let path = Self::path_in(dir);
        if path.exists() {
            Self::load(&path)
        } else {
            Ok(Self::new(dir))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse("manifest", &e))
    }

    /// Hashes `file` (inside `dir`) and records or replaces its entry.
    pub fn record(&mut self, dir: &Path, file: &Path) -> Result<()> {
        let rel = file
            .strip_prefix(dir)
            .unwrap_or(file)
            .to_string_lossy()
            .replace('\\', "/");
        let sha256 = artifact_hash(file)?;
        self.artifacts.retain(|a| a.path != rel);
        self.artifacts.push(Artifact { path: rel, sha256 });
        self.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(())
    }

    /// Recomputes the id from the identifying fields and writes
    /// `dir/manifest.json`.
    pub fn save(&mut self, dir: &Path) -> Result<PathBuf> {
        let key = serde_json::json!([
            self.config_hash,
            self.dataset_root,
            self.split_file,
            self.permset_file,
            self.seed,
            self.train_config,
        ]);
        self.experiment_id = hex_digest(key.to_string().as_bytes())[..16].to_string();
        let path = Self::path_in(dir);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Checks every listed artifact against its recorded hash.
    pub fn verify(&self, dir: &Path) -> Result<Vec<String>> {
        let mut mismatched = Vec::new();
        for a in &self.artifacts {
            let p = dir.join(&a.path);
            if !p.exists() || artifact_hash(&p)? != a.sha256 {
                mismatched.push(a.path.clone());
            }
        }
        Ok(mismatched)
    }
}

// ------------------------------------------------------------------ report

/// One row of the results table: one run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub dataset: String,
    pub loss: String,
    pub degrade: String,
    /// `"mean ± ci"` per meta-test geometry, e.g. `"5-way 5-shot"`.
    pub meta_test: BTreeMap<String, String>,
    pub standard: Option<String>,
}

/// Loss-variant label such as `ProtoNet + Jigsaw` or `Softmax`.
pub fn loss_label(config: &serde_json::Value) -> String {
    let base = match config.get("mode").and_then(|v| v.as_str()) {
        Some("standard") => "Softmax",
        _ => "ProtoNet",
    };
    match config.get("ssl_task").and_then(|v| v.as_str()) {
        Some("jigsaw") => format!("{base} + Jigsaw"),
        Some("rotation") => format!("{base} + Rotation"),
        _ => base.to_string(),
    }
}

fn row_for(dir: &Path, root: &Path, manifest: &ExperimentManifest) -> Result<ReportRow> {
    let mut reports = Vec::new();
    for a in &manifest.artifacts {
        if a.path.ends_with(".json") {
            if let Ok(r) = EvalReport::load(&dir.join(&a.path)) {
                reports.push(r);
            }
        }
    }
    let config = manifest
        .train_config
        .clone()
        .or_else(|| reports.iter().map(|r| r.config.clone()).find(|c| !c.is_null()))
        .unwrap_or(serde_json::Value::Null);
    let dataset = manifest
        .dataset_root
        .clone()
        .or_else(|| config.get("dataset").and_then(|v| v.as_str()).map(str::to_string))
        .map(|d| {
            Path::new(&d)
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or(d)
        })
        .unwrap_or_else(|| "-".into());
    let mut meta_test = BTreeMap::new();
    let mut standard = None;
    for r in &reports {
        match r.protocol {
            Protocol::MetaTest => {
                let key = format!("{}-way {}-shot", r.n_way.unwrap_or(0), r.k_shot.unwrap_or(0));
                meta_test.insert(key, format_mean_ci(r.mean_accuracy, r.ci95));
            }
            Protocol::Standard => standard = Some(format!("{:.1}", r.mean_accuracy)),
        }
    }
    let run = dir
        .strip_prefix(root)
        .ok()
        .map(|p| p.to_string_lossy().into_owned())
        .filter(|p| !p.is_empty())
        .unwrap_or_else(|| ".".into());
    Ok(ReportRow {
        run,
        dataset,
        loss: loss_label(&config),
        degrade: config
            .get("degrade")
            .and_then(|v| v.as_str())
            .unwrap_or("none")
            .to_string(),
        meta_test,
        standard,
    })
}

/// One row per `manifest.json` found below `root`, in path order.
pub fn collect_report(root: &Path) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    let mut dirs: Vec<PathBuf> = WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.file_name() == MANIFEST_FILE)
        .filter_map(|e| e.path().parent().map(Path::to_path_buf))
        .collect();
    dirs.sort();
    for dir in dirs {
        let manifest = ExperimentManifest::load(&ExperimentManifest::path_in(&dir))?;
        rows.push(row_for(&dir, root, &manifest)?);
    }
    Ok(rows)
}

/// Markdown table with one column per meta-test geometry seen in `rows`.
pub fn render_table(rows: &[ReportRow]) -> String {
    let mut geometries: Vec<&String> = rows.iter().flat_map(|r| r.meta_test.keys()).collect();
    geometries.sort();
    geometries.dedup();
    let mut header = vec!["run", "dataset", "loss", "degrade"];
    header.extend(geometries.iter().map(|g| g.as_str()));
    header.push("standard");
    let mut out = format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len()));
    for r in rows {
        let mut cells = vec![r.run.clone(), r.dataset.clone(), r.loss.clone(), r.degrade.clone()];
        cells.extend(geometries.iter().map(|g| r.meta_test.get(*g).cloned().unwrap_or_else(|| "-".into())));
        cells.push(r.standard.clone().unwrap_or_else(|| "-".into()));
        out.push_str(&format!("| {} |\n", cells.join(" | ")));
    }
    out
}
