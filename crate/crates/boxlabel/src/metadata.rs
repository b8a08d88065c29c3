//! Provenance record written next to every output tree.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{AppError, Result};

pub const METADATA_FILE: &str = "metadata.json";

#[derive(Debug, Clone, Serialize)]
pub struct RunMetadata {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    /// Every resolved option of the command.
    pub config: serde_json::Value,
    /// SHA-256 of each input file, keyed by its path as named by the user or
    /// relative to the manifest that listed it.
    pub inputs: BTreeMap<String, String>,
}

impl RunMetadata {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config,
            inputs: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, key: impl Into<String>, path: &Path) -> Result<()> {
        self.inputs.insert(key.into(), sha256_file(path)?);
        Ok(())
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        crate::dataio::write_json(self, &out_dir.join(METADATA_FILE))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let f = File::open(path).map_err(|e| AppError::io(path, e))?;
    let mut reader = BufReader::new(f);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = reader.read(&mut buf).map_err(|e| AppError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}
