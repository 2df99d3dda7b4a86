//! Output bookkeeping: every file a stage writes goes through [`StageWriter`]
//! so the run index can list it with its hash.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use neuromotor_core::ingest::write_series_csv;
use neuromotor_core::SampledSeries;

pub const INDEX_FILE: &str = "index.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    /// Hash of the config the stage ran under.
    pub config_sha256: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Paths relative to the run root.
    pub files: BTreeMap<String, FileRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunIndex {
    pub config: Option<FileRecord>,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn record(path: &Path) -> Result<FileRecord> {
    let bytes = fs::read(path).with_context(|| format!("reading back {}", path.display()))?;
    Ok(FileRecord {
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}

impl RunIndex {
    pub fn load_or_default(root: &Path) -> RunIndex {
        fs::read_to_string(root.join(INDEX_FILE))
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or_default()
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        write_json_file(&root.join(INDEX_FILE), self)
    }
}

pub fn write_json_file<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Collects the files one stage writes under the run root.
pub struct StageWriter {
    root: PathBuf,
    files: BTreeMap<String, FileRecord>,
    pub notes: Vec<String>,
}

impl StageWriter {
    pub fn new(root: &Path) -> StageWriter {
        StageWriter {
            root: root.to_path_buf(),
            files: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn prepare(&self, rel: &str) -> Result<PathBuf> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        Ok(path)
    }

    fn track(&mut self, rel: &str, path: &Path) -> Result<()> {
        self.files.insert(rel.to_string(), record(path)?);
        Ok(())
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, rel: &str, value: &T) -> Result<()> {
        let path = self.prepare(rel)?;
        write_json_file(&path, value)?;
        self.track(rel, &path)
    }

    pub fn csv<H, R, I, S>(&mut self, rel: &str, header: &[H], rows: R) -> Result<()>
    where
        H: AsRef<[u8]>,
        R: IntoIterator<Item = I>,
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        let path = self.prepare(rel)?;
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
        w.write_record(header)?;
        for row in rows {
            w.write_record(row)?;
        }
        w.flush()?;
        drop(w);
        self.track(rel, &path)
    }

    /// One CSV row per record, header from the field names.
    pub fn rows<T: Serialize>(&mut self, rel: &str, records: &[T]) -> Result<()> {
        let path = self.prepare(rel)?;
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
        for r in records {
            w.serialize(r)?;
        }
        w.flush()?;
        drop(w);
        self.track(rel, &path)
    }

    pub fn series(&mut self, rel: &str, series: &SampledSeries) -> Result<()> {
        let path = self.prepare(rel)?;
        write_series_csv(&path, series)?;
        self.track(rel, &path)
    }

    pub fn note(&mut self, message: impl Into<String>) {
        let message = message.into();
        log::warn!("{message}");
        self.notes.push(message);
    }

    pub fn finish(self, config_sha256: &str, error: Option<String>) -> StageRecord {
        StageRecord {
            status: if error.is_some() {
                StageStatus::Failed
            } else {
                StageStatus::Complete
            },
            config_sha256: config_sha256.to_string(),
            notes: self.notes,
            error,
            files: self.files,
        }
    }
}
