//! The record every command leaves in its run directory.

use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    /// Fully resolved configuration, defaults included.
    pub config: serde_json::Value,
    /// Where each configuration value came from, lowest precedence first.
    pub config_sources: Vec<String>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<Artifact>,
    pub seeds: Vec<u64>,
    pub started: String,
    pub finished: String,
    pub success: bool,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn new(command: &str, argv: Vec<String>) -> Self {
        RunManifest {
            command: command.into(),
            argv,
            version: env!("CARGO_PKG_VERSION").into(),
            config: serde_json::Value::Null,
            config_sources: vec!["built-in defaults".into()],
            inputs: Vec::new(),
            outputs: Vec::new(),
            seeds: Vec::new(),
            started: now(),
            finished: String::new(),
            success: false,
            error: None,
        }
    }

    /// Hashes and records output files, skipping ones that do not exist.
    pub fn record_outputs<I: IntoIterator<Item = PathBuf>>(&mut self, paths: I) -> Result<()> {
        for path in paths {
            if path.is_file() {
                let sha256 = sha256_file(&path)?;
                self.outputs.push(Artifact { path, sha256 });
            }
        }
        Ok(())
    }

    pub fn write(&mut self, dir: &Path, result: &Result<()>) -> Result<PathBuf> {
        self.finished = now();
        self.success = result.is_ok();
        self.error = result.as_ref().err().map(|e| e.to_string());
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}
