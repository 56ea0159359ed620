//! Append-only JSONL record files.
//!
//! The first line of a file names the config (hash plus full config); each
//! later line is one run. Runs are keyed by `(config_hash, label, index)`
//! so an interrupted matrix resumes where it stopped.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use conflicts_core::{MetricKind, PrivacyBudget, WmConfidence};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

/// One training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    /// `"<mechanism>-alone"` or `"combined"`.
    pub label: String,
    /// Position among the label's repeats.
    pub index: usize,
    pub seed: u64,
    pub metrics: BTreeMap<MetricKind, f64>,
    #[serde(default)]
    pub privacy: Option<PrivacyBudget>,
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub wm_confidence: Option<WmConfidence>,
    #[serde(default)]
    pub warnings: Vec<String>,
    pub wall_time_s: f64,
    /// Set when the run failed; failed runs carry no metrics.
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub artifacts: Vec<PathBuf>,
}

impl RunRecord {
    pub fn key(&self) -> RunKey {
        RunKey {
            config_hash: self.config_hash.clone(),
            label: self.label.clone(),
            index: self.index,
        }
    }

    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RunKey {
    pub config_hash: String,
    pub label: String,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Entry {
    Config {
        hash: String,
        config: Box<ExperimentConfig>,
    },
    Run(Box<RunRecord>),
}

/// Contents of a record file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecordFile {
    pub configs: BTreeMap<String, ExperimentConfig>,
    pub runs: Vec<RunRecord>,
}

impl RecordFile {
    /// Reads a record file; a missing file is empty. A truncated last line
    /// (crash mid-append) is skipped.
    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let mut out = Self::default();
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(e).with_context(|| format!("opening {}", path.display())),
        };
        let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>()?;
        let last = lines.len().saturating_sub(1);
        for (n, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Entry>(line) {
                Ok(Entry::Config { hash, config }) => {
                    out.configs.insert(hash, *config);
                }
                Ok(Entry::Run(run)) => out.runs.push(*run),
                Err(_) if n == last => {}
                Err(e) => bail!("{}:{}: {e}", path.display(), n + 1),
            }
        }
        Ok(out)
    }

    /// Latest successful run per key for one config.
    pub fn completed(&self, config_hash: &str) -> BTreeMap<RunKey, RunRecord> {
        self.runs
            .iter()
            .filter(|r| r.config_hash == config_hash && r.succeeded())
            .map(|r| (r.key(), r.clone()))
            .collect()
    }
}

/// Appends entries, flushing after each so a crash loses at most the line
/// being written.
pub struct RecordWriter {
    out: BufWriter<File>,
}

impl RecordWriter {
    pub fn open(path: &Path) -> anyhow::Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        // Drop a torn last line so the next entry starts cleanly.
        if let Ok(bytes) = std::fs::read(path) {
            if bytes.last().is_some_and(|&c| c != b'\n') {
                let keep = bytes.iter().rposition(|&c| c == b'\n').map_or(0, |i| i + 1);
                OpenOptions::new().write(true).open(path)?.set_len(keep as u64)?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .with_context(|| format!("opening {}", path.display()))?;
        let out = BufWriter::new(file);
        Ok(Self { out })
    }

    pub fn append(&mut self, entry: &Entry) -> anyhow::Result<()> {
        serde_json::to_writer(&mut self.out, entry)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}
