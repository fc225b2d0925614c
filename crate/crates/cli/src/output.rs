//! Output directory: data files, the verdict and the run manifest.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use qpsde::acceptance::Check;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const VERDICT_SCHEMA_VERSION: u32 = 1;

pub struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
}

impl Artifacts {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Opens `name` for writing and records it in the manifest.
    pub fn file(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        self.record(name);
        Ok(BufWriter::new(f))
    }

    /// Records a file some library routine wrote into the directory.
    pub fn record(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut out = self.file(name)?;
        serde_json::to_writer_pretty(&mut out, value)?;
        writeln!(out)?;
        out.flush()?;
        Ok(())
    }

    pub fn text(&mut self, name: &str, body: &str) -> Result<()> {
        let mut out = self.file(name)?;
        out.write_all(body.as_bytes())?;
        out.flush()?;
        Ok(())
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }
}

/// Machine-readable outcome of one task, written even when the task fails.
#[derive(Debug, Serialize)]
pub struct Verdict {
    pub schema_version: u32,
    pub task: String,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub details: Value,
    pub error: Option<String>,
}

impl Verdict {
    pub fn new(task: &str, checks: Vec<Check>, details: Value, error: Option<String>) -> Self {
        Verdict {
            schema_version: VERDICT_SCHEMA_VERSION,
            task: task.to_string(),
            passed: error.is_none() && checks.iter().all(|c| c.passed),
            checks,
            details,
            error,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub task: String,
    pub config_sha256: String,
    /// Inclusive; `None` for tasks that draw no noise.
    pub seed_range: Option<(u64, u64)>,
    pub threads: usize,
    pub versions: Versions,
    pub files: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub qpsde: &'static str,
    pub qpsde_cli: &'static str,
}

impl Versions {
    pub fn current() -> Self {
        Versions {
            qpsde: qpsde::VERSION,
            qpsde_cli: env!("CARGO_PKG_VERSION"),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
