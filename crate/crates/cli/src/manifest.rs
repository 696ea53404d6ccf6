//! Run manifests and the output-directory lock.

use std::fs::{File, OpenOptions};
use std::io::{ErrorKind, Read};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Usage;

pub const MANIFEST_FILE: &str = "manifest.json";
const LOCK_FILE: &str = ".occfield.lock";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

/// Record of one invocation: what was read, what was written, and with
/// which settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    pub config: Option<PathBuf>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, config: Option<&Path>) -> Self {
        Self {
            tool: "occfield".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            argv: std::env::args().collect(),
            seed,
            config: config.map(Path::to_path_buf),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Records a file, or every file below a directory in sorted order.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        for p in files_under(path)? {
            self.inputs.push(artifact(&p)?);
        }
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(artifact(path)?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        occfield::io::write_json(&path, self)?;
        Ok(path)
    }
}

fn files_under(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("listing {}", path.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for e in entries {
        if e.file_name().is_some_and(|n| n == LOCK_FILE || n == MANIFEST_FILE) {
            continue;
        }
        out.extend(files_under(&e)?);
    }
    Ok(out)
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let mut f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    let mut total = 0u64;
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        total += n as u64;
    }
    Ok((format!("{:x}", hasher.finalize()), total))
}

fn artifact(path: &Path) -> Result<Artifact> {
    let (sha256, bytes) = sha256_file(path)?;
    Ok(Artifact { path: path.to_path_buf(), sha256, bytes })
}

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(Usage(format!(
                "{} is in use by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ))
            .into()),
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
