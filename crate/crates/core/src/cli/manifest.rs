use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "run_manifest.json";

/// Record of one command invocation, written next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub seed: u64,
    /// Content hash over every input file; see [`hash_inputs`].
    pub inputs_sha256: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, config: impl Serialize, seed: u64, inputs: &[PathBuf]) -> Result<Self> {
        Ok(RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: serde_json::to_value(config)?,
            seed,
            inputs_sha256: hash_inputs(inputs)?,
            inputs: inputs.to_vec(),
            outputs: Vec::new(),
        })
    }

    /// Writes `run_manifest.json` into `dir` and returns its path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_NAME);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(path, e)))
            .collect::<Result<Vec<_>>>()?;
        entries.sort();
        for e in entries {
            collect_files(&e, out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// Hash of the inputs' contents, independent of where they live.
///
/// Each file (directories are walked in sorted order) contributes its
/// git-style blob hash, `sha256("blob <len>\0" ++ bytes)`; the result hashes
/// the concatenation of those.
pub fn hash_inputs(inputs: &[PathBuf]) -> Result<String> {
    let mut files = Vec::new();
    for p in inputs {
        collect_files(p, &mut files)?;
    }
    let mut outer = Sha256::new();
    for f in files {
        let bytes = fs::read(&f).map_err(|e| Error::io(&f, e))?;
        let blob = Sha256::new()
            .chain_update(format!("blob {}\0", bytes.len()))
            .chain_update(&bytes)
            .finalize();
        outer.update(blob);
    }
    Ok(hex::encode(outer.finalize()))
}
