//! Run manifest written next to every command's outputs.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub seed: Option<u64>,
    pub jobs: usize,
    pub wall_time: f64,
    /// Command specific extras such as per-pair timings.
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub details: serde_json::Value,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn digests(paths: &[PathBuf]) -> Result<Vec<InputDigest>> {
    paths
        .iter()
        .map(|p| {
            Ok(InputDigest {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        fs::write(dir.join(MANIFEST_FILE), s).with_context(|| format!("cannot write manifest in {}", dir.display()))
    }
}
