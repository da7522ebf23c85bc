//! Run directories, CSV tables and JSONL metadata.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

/// Overrides the run directory when set.
pub const RUN_DIR_ENV: &str = "DRF_RUN_DIR";
/// Version of every CSV table layout, emitted as the first column.
pub const CSV_SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = concat!("drf ", env!("CARGO_PKG_VERSION"));

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Resolves the directory: explicit flag, then [`RUN_DIR_ENV`], then
    /// `runs/<UTC timestamp>-seed<seed>`.
    pub fn create(explicit: Option<&Path>, seed: u64) -> Result<Self> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => match std::env::var_os(RUN_DIR_ENV) {
                Some(p) => PathBuf::from(p),
                None => {
                    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
                    PathBuf::from("runs").join(format!("{stamp}-seed{seed}"))
                }
            },
        };
        fs::create_dir_all(&path).with_context(|| format!("creating run directory {}", path.display()))?;
        Ok(Self { path })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn checkpoint_dir(&self) -> Result<PathBuf> {
        let dir = self.path.join("checkpoints");
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    /// Appends one JSON object per line to `run.jsonl`.
    pub fn log<T: Serialize>(&self, record: &T) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(self.file("run.jsonl"))?;
        writeln!(f, "{}", serde_json::to_string(record)?)?;
        Ok(())
    }
}

/// Rows buffered in memory and written in one piece, so a failed command
/// never leaves a partial table behind.
pub struct Table {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&'static str]) -> Self {
        let mut header = vec!["schema_version"];
        header.extend_from_slice(columns);
        Self { header, rows: Vec::new() }
    }

    pub fn push(&mut self, fields: Vec<String>) {
        assert_eq!(fields.len() + 1, self.header.len(), "row width");
        let mut row = vec![CSV_SCHEMA_VERSION.to_string()];
        row.extend(fields);
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        Ok(w.into_inner()?)
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("csv.partial");
        let mut f = File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
