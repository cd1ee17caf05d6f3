//! Per-run output directories and their manifests.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use time::format_description::well_known::Rfc3339;
use time::macros::format_description;
use time::OffsetDateTime;

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const OUT_DIR_ENV: &str = "SECURE_OUT_DIR";

#[derive(Debug, Clone, Serialize)]
pub struct Artifact {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub started_at: String,
    pub finished_at: String,
}

/// Wall-clock time, or `SOURCE_DATE_EPOCH` when it is set.
pub fn now() -> OffsetDateTime {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|s| OffsetDateTime::from_unix_timestamp(s).ok())
        .unwrap_or_else(OffsetDateTime::now_utc)
}

fn rfc3339(t: OffsetDateTime) -> String {
    t.format(&Rfc3339).expect("UTC timestamps format")
}

pub fn sha256_file(path: &Path) -> Result<Artifact> {
    let data = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Artifact {
        path: path.display().to_string(),
        bytes: data.len() as u64,
        sha256: hex::encode(Sha256::digest(&data)),
    })
}

/// Writes `data` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, data: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("writing {}", path.display()))?;
    tmp.write_all(data)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .map_err(|e| e.error)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn pretty_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

/// An open run: its directory, the artifacts written so far and the inputs
/// it read.
pub struct Run {
    pub dir: PathBuf,
    command: String,
    seed: Option<u64>,
    started: OffsetDateTime,
    inputs: Vec<Artifact>,
    outputs: Vec<PathBuf>,
}

impl Run {
    /// Opens `explicit`, or a fresh `<command>-<timestamp>-seed<seed>`
    /// directory under `$SECURE_OUT_DIR` (default `runs`).
    pub fn open(command: &str, seed: Option<u64>, explicit: Option<&Path>) -> Result<Self> {
        let started = now();
        let dir = match explicit {
            Some(d) => d.to_path_buf(),
            None => {
                let root = std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
                let stamp = started
                    .format(format_description!("[year][month][day]T[hour][minute][second]Z"))
                    .expect("UTC timestamps format");
                let base = format!("{command}-{stamp}-seed{}", seed.unwrap_or(0));
                let mut dir = root.join(&base);
                let mut k = 2;
                while dir.exists() {
                    dir = root.join(format!("{base}-{k}"));
                    k += 1;
                }
                dir
            }
        };
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Run {
            dir,
            command: command.into(),
            seed,
            started,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Records a file that was read.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let a = sha256_file(path)?;
        self.inputs.push(a);
        Ok(())
    }

    /// Records a file that was written by other means.
    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Writes `name` inside the run directory.
    pub fn write(&mut self, name: &str, data: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        write_atomic(&path, data)?;
        self.output(&path);
        Ok(path)
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.dir)
            .map_or_else(|_| path.display().to_string(), |p| p.display().to_string())
    }

    /// Checksums every output and writes the manifest.
    pub fn finish(self, config: Value) -> Result<RunManifest> {
        let mut outputs = Vec::with_capacity(self.outputs.len());
        for p in &self.outputs {
            let mut a = sha256_file(p)?;
            a.path = self.relative(p);
            outputs.push(a);
        }
        let manifest = RunManifest {
            command: self.command.clone(),
            version: env!("CARGO_PKG_VERSION").into(),
            config,
            seed: self.seed,
            inputs: self.inputs.clone(),
            outputs,
            started_at: rfc3339(self.started),
            finished_at: rfc3339(now()),
        };
        write_atomic(&self.path(MANIFEST_FILE), &pretty_json(&manifest))?;
        Ok(manifest)
    }
}
