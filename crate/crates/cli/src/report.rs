//! Append-only run reports, one JSON object per line.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::hex_digest;
use crate::error::{CliError, CliResult};

pub const REPORT_FILE: &str = "runs.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Ok(FileDigest {
            path: path.display().to_string(),
            sha256: hex_digest(&bytes),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_time_s: f64,
    pub exit_code: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub summary: serde_json::Value,
}

impl RunReport {
    /// Append as one line. The line is assembled first and written with a
    /// single call so concurrent appenders do not interleave.
    pub fn append(&self, path: &Path) -> CliResult<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        let mut line =
            serde_json::to_string(self).map_err(|e| CliError::validation(e.to_string()))?;
        line.push('\n');
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| CliError::io(path, e))?;
        f.write_all(line.as_bytes())
            .map_err(|e| CliError::io(path, e))
    }
}

pub fn read_reports(path: &Path) -> CliResult<Vec<RunReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                CliError::validation(format!("{} line {}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

/// Default report location: `runs.jsonl` next to the primary output.
pub fn default_report_path(primary_output: &Path, is_dir: bool) -> PathBuf {
    let dir = if is_dir {
        primary_output.to_path_buf()
    } else {
        primary_output
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
    };
    dir.join(REPORT_FILE)
}
