//! On-disk artifact conventions: checkpoint paths, the backdoor corpus
//! index, and deterministic CSV/JSON writers. Every row carries the master
//! seed and config hash; no command ever writes a timestamp, so re-running
//! with the same config and seed reproduces files byte for byte.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use driftlab::attack::BackdoorResult;
use driftlab::engine::{load_model_path, Model};

use crate::CliError;

pub fn baseline_path(out: &Path) -> PathBuf {
    out.join("baseline.ckpt")
}

pub fn backdoor_dir(out: &Path) -> PathBuf {
    out.join("backdoors")
}

pub fn backdoor_ckpt(out: &Path, run_index: usize) -> PathBuf {
    backdoor_dir(out).join(format!("b{run_index:04}.ckpt"))
}

pub fn index_path(out: &Path) -> PathBuf {
    backdoor_dir(out).join("index.json")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetMeta {
    pub train_index: usize,
    pub source_class: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackdoorEntry {
    pub id: String,
    pub run_index: usize,
    pub success: bool,
    pub per_target_success: Vec<bool>,
    pub mechanism: String,
    pub mechanism_detail: String,
    pub iterations: usize,
    pub baseline_accuracy: f32,
    pub accuracy_ratio: f32,
    pub targets: Vec<TargetMeta>,
    /// Prediction per target, backend name -> class, h1 first.
    pub predictions: Vec<Vec<(String, usize)>>,
    /// Checkpoint file, present only for successful runs.
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackdoorIndex {
    pub master_seed: u64,
    pub config_hash: String,
    pub h1: String,
    pub h2: Vec<String>,
    pub mode: String,
    pub variant: String,
    pub entries: Vec<BackdoorEntry>,
}

impl BackdoorIndex {
    pub fn successes(&self) -> impl Iterator<Item = &BackdoorEntry> {
        self.entries.iter().filter(|e| e.success)
    }
}

pub fn entry_from_result(result: &BackdoorResult, checkpoint: Option<String>) -> BackdoorEntry {
    BackdoorEntry {
        id: format!("b{:04}", result.run_index),
        run_index: result.run_index,
        success: result.success,
        per_target_success: result.per_target_success.clone(),
        mechanism: result.mechanism.label().into(),
        mechanism_detail: result.mechanism.detail(),
        iterations: result.iterations,
        baseline_accuracy: result.baseline_accuracy,
        accuracy_ratio: result.accuracy_ratio,
        targets: result
            .targets
            .iter()
            .map(|t| TargetMeta {
                train_index: t.index,
                source_class: t.source_class,
            })
            .collect(),
        predictions: result.predictions.clone(),
        checkpoint,
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut writer = BufWriter::new(create_file(path)?);
    serde_json::to_writer_pretty(&mut writer, value)
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))?;
    writer
        .write_all(b"\n")
        .and_then(|_| writer.flush())
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let file = File::open(path).map_err(|_| CliError::MissingPrerequisite {
        path: path.to_path_buf(),
        hint: "run the producing subcommand first",
    })?;
    serde_json::from_reader(file)
        .map_err(|e| CliError::Runtime(format!("parsing {}: {e}", path.display())))
}

pub fn load_index(out: &Path) -> Result<BackdoorIndex, CliError> {
    read_json(&index_path(out))
}

pub fn load_backdoor_model(out: &Path, entry: &BackdoorEntry) -> Result<Model, CliError> {
    let name = entry
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Runtime(format!("entry {} has no checkpoint", entry.id)))?;
    load_model_path(backdoor_dir(out).join(name)).map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn ensure_out_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::OutputDir {
        path: out.to_path_buf(),
        source: e,
    })?;
    // Probe writability early so the failure mode is crisp.
    let probe = out.join(".write-probe");
    std::fs::write(&probe, b"ok").map_err(|e| CliError::OutputDir {
        path: out.to_path_buf(),
        source: e,
    })?;
    let _ = std::fs::remove_file(&probe);
    Ok(())
}

pub fn create_file(path: &Path) -> Result<File, CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::OutputDir {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    File::create(path).map_err(|e| CliError::OutputDir {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Minimal deterministic CSV writer: fixed header, plain `Display` fields.
pub struct CsvWriter {
    writer: BufWriter<File>,
    path: PathBuf,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &str) -> Result<Self, CliError> {
        let mut writer = BufWriter::new(create_file(path)?);
        writeln!(writer, "{header}")
            .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))?;
        Ok(Self {
            writer,
            path: path.to_path_buf(),
        })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<(), CliError> {
        writeln!(self.writer, "{}", fields.join(","))
            .map_err(|e| CliError::Runtime(format!("writing {}: {e}", self.path.display())))
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.writer
            .flush()
            .map_err(|e| CliError::Runtime(format!("writing {}: {e}", self.path.display())))
    }
}
