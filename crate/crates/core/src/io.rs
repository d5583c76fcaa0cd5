//! Versioned JSON blobs for checkpoints, flat CSV metrics, and run
//! directory layout. Blob floats round-trip bitwise so a resumed run can
//! reproduce the original exactly.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CtrlFlowError, Result};

pub const BLOB_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Blob<T> {
    format_version: u32,
    /// What the payload is (e.g. "sac-agent", "cfm-model"); load rejects a
    /// blob of the wrong kind instead of misreading it.
    kind: String,
    data: T,
}

/// Writes `value` as a versioned, kind-tagged JSON blob.
pub fn save_blob<T: Serialize>(path: &Path, kind: &str, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let blob = Blob {
        format_version: BLOB_VERSION,
        kind: kind.to_string(),
        data: value,
    };
    let text = serde_json::to_string(&blob)?;
    fs::write(path, text)?;
    Ok(())
}

/// Reads a blob back, checking version and kind before touching the payload.
pub fn load_blob<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| {
        CtrlFlowError::config(format!("cannot read {}: {e}", path.display()))
    })?;
    let blob: Blob<serde_json::Value> = serde_json::from_str(&text)?;
    if blob.format_version != BLOB_VERSION {
        return Err(CtrlFlowError::config(format!(
            "blob version {} unsupported (expected {BLOB_VERSION})",
            blob.format_version
        )));
    }
    if blob.kind != kind {
        return Err(CtrlFlowError::config(format!(
            "blob holds '{}', expected '{kind}'",
            blob.kind
        )));
    }
    Ok(serde_json::from_value(blob.data)?)
}

/// Append-oriented CSV writer: the header is written once at creation and
/// every row is flushed immediately, so partial runs leave readable files.
pub struct CsvWriter {
    file: File,
    columns: usize,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut file = File::create(path)?;
        writeln!(file, "{}", header.join(","))?;
        file.flush()?;
        Ok(Self {
            file,
            columns: header.len(),
        })
    }

    /// Reopens an existing file for appending without rewriting the header.
    pub fn append(path: &Path, header: &[&str]) -> Result<Self> {
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            file,
            columns: header.len(),
        })
    }

    pub fn write_row(&mut self, fields: &[String]) -> Result<()> {
        if fields.len() != self.columns {
            return Err(CtrlFlowError::config(format!(
                "csv row has {} fields, header has {}",
                fields.len(),
                self.columns
            )));
        }
        writeln!(self.file, "{}", fields.join(","))?;
        self.file.flush()?;
        Ok(())
    }
}

/// Formats a float for CSV so that parsing it back yields the same bits.
pub fn csv_float(x: f64) -> String {
    let mut buf = ryu_format(x);
    if buf.is_empty() {
        buf = format!("{x}");
    }
    buf
}

fn ryu_format(x: f64) -> String {
    // serde_json already ships the shortest-roundtrip formatter; reuse it
    // instead of pulling another dependency.
    serde_json::to_string(&x).unwrap_or_default()
}

/// Standard run directory: a config snapshot next to metrics, checkpoints,
/// and reports.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root.join("checkpoints"))?;
        fs::create_dir_all(root.join("reports"))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn checkpoint_path(&self, round: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("round_{round:05}.json"))
    }

    pub fn latest_checkpoint(&self) -> Option<PathBuf> {
        let dir = self.root.join("checkpoints");
        let mut entries: Vec<PathBuf> = fs::read_dir(&dir)
            .ok()?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.extension().is_some_and(|ext| ext == "json")
                    && p.file_stem()
                        .and_then(|s| s.to_str())
                        .is_some_and(|s| s.starts_with("round_"))
            })
            .collect();
        entries.sort();
        entries.pop()
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }
}
