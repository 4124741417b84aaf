use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Serialize)]
struct OutputFile {
    file: String,
    bytes: usize,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    tool_version: &'a str,
    config_hash: String,
    config: BTreeMap<&'static str, String>,
    outputs: Vec<OutputFile>,
}

/// Collects the files a command writes, then records them with the config
/// that produced them.
pub struct Run {
    dir: PathBuf,
    outputs: Vec<OutputFile>,
}

impl Run {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
        Ok(Run {
            dir: dir.to_path_buf(),
            outputs: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
        self.outputs.push(OutputFile {
            file: name.to_string(),
            bytes: bytes.len(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Writes `config.txt` and `manifest.json`; call last.
    pub fn finish(mut self, command: &str, cfg: &RunConfig) -> Result<()> {
        self.write("config.txt", cfg.to_text().as_bytes())?;
        let manifest = Manifest {
            command,
            tool_version: env!("CARGO_PKG_VERSION"),
            config_hash: cfg.hash(),
            config: cfg.pairs().into_iter().collect(),
            outputs: std::mem::take(&mut self.outputs),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = self.path("manifest.json");
        fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))
    }
}
