//! Checkpoint directories: `manifest.json`, `vocab.txt` and one binary file
//! per tensor. Saving the same state twice produces identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{HistoryEntry, SamplerState, TrainConfig, Trainer};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const VOCAB_FILE: &str = "vocab.txt";
const TENSOR_DIR: &str = "tensors";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
    sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MomentEntry {
    name: String,
    m: TensorEntry,
    v: TensorEntry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AdamEntry {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    moments: Vec<MomentEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SamplerEntry {
    len: usize,
    state: SamplerState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    iteration: usize,
    config: TrainConfig,
    vocab_sha256: String,
    tensors: Vec<TensorEntry>,
    adam: AdamEntry,
    samplers: [SamplerEntry; 2],
    history: Vec<HistoryEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_tensor(dir: &Path, file: String, name: &str, t: &Tensor) -> Result<TensorEntry> {
    let bytes = t.to_bytes();
    write_file(&dir.join(&file), &bytes)?;
    Ok(TensorEntry {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        sha256: sha256_hex(&bytes),
        file,
    })
}

fn read_tensor(dir: &Path, entry: &TensorEntry) -> Result<Tensor> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(ckpt_err(&path, format!("checksum mismatch for {}", entry.name)));
    }
    let t = Tensor::read_from(&bytes[..]).map_err(|e| ckpt_err(&path, e.to_string()))?;
    if t.shape() != entry.shape {
        return Err(ckpt_err(
            &path,
            format!(
                "{} has shape {:?}, manifest says {:?}",
                entry.name,
                t.shape(),
                entry.shape
            ),
        ));
    }
    Ok(t)
}

/// Writes `trainer` to `dir`, creating it if needed. Returns the manifest path.
pub fn save_checkpoint(trainer: &Trainer, dir: &Path) -> Result<PathBuf> {
    let tdir = dir.join(TENSOR_DIR);
    fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    let store = trainer.model.store();
    let mut tensors = Vec::new();
    let mut moments = Vec::new();
    for (i, id) in store.ids().enumerate() {
        let name = store.name(id);
        tensors.push(write_tensor(
            dir,
            format!("{TENSOR_DIR}/{i:03}.bin"),
            name,
            store.get(id),
        )?);
        if let Some((m, v)) = trainer.adam.moments(id) {
            moments.push(MomentEntry {
                name: name.to_string(),
                m: write_tensor(dir, format!("{TENSOR_DIR}/{i:03}.adam_m.bin"), name, m)?,
                v: write_tensor(dir, format!("{TENSOR_DIR}/{i:03}.adam_v.bin"), name, v)?,
            });
        }
    }
    let vocab_text = trainer.vocab.to_file_string();
    write_file(&dir.join(VOCAB_FILE), vocab_text.as_bytes())?;
    let [(np, sp), (ns, ss)] = trainer.sampler_states();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        iteration: trainer.iteration,
        config: trainer.config.clone(),
        vocab_sha256: sha256_hex(vocab_text.as_bytes()),
        tensors,
        adam: AdamEntry {
            step: trainer.adam.step,
            beta1: trainer.adam.beta1,
            beta2: trainer.adam.beta2,
            eps: trainer.adam.eps,
            moments,
        },
        samplers: [SamplerEntry { len: np, state: sp }, SamplerEntry { len: ns, state: ss }],
        history: trainer.history.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_file(&path, text.as_bytes())?;
    Ok(path)
}

/// Restores a trainer saved by [`save_checkpoint`], verifying every checksum.
pub fn load_checkpoint(dir: &Path) -> Result<Trainer> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let version: serde_json::Value = serde_json::from_str(&text).map_err(|e| ckpt_err(&path, e.to_string()))?;
    match version.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        other => {
            return Err(ckpt_err(
                &path,
                format!("format version {other:?}, this build reads {FORMAT_VERSION}"),
            ))
        }
    }
    let m: Manifest = serde_json::from_value(version).map_err(|e| ckpt_err(&path, e.to_string()))?;

    let vpath = dir.join(VOCAB_FILE);
    let vtext = fs::read_to_string(&vpath).map_err(|e| Error::io(&vpath, e))?;
    if sha256_hex(vtext.as_bytes()) != m.vocab_sha256 {
        return Err(ckpt_err(&vpath, "checksum mismatch for the vocabulary"));
    }
    let vocab = Vocab::parse(&vtext)?;

    let [pairs, singles] = &m.samplers;
    let mut trainer = Trainer::new(m.config.clone(), vocab, pairs.len, singles.len)?;
    trainer.set_samplers([(pairs.len, pairs.state), (singles.len, singles.state)]);
    trainer.iteration = m.iteration;
    trainer.history = m.history.clone();

    let store = trainer.model.store_mut();
    let expected: Vec<String> = store.ids().map(|id| store.name(id).to_string()).collect();
    let found: Vec<&str> = m.tensors.iter().map(|t| t.name.as_str()).collect();
    if expected != found {
        return Err(ckpt_err(
            &path,
            format!("parameter names {found:?} do not match the configured model {expected:?}"),
        ));
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, entry) in ids.iter().zip(&m.tensors) {
        let t = read_tensor(dir, entry)?;
        store
            .set(*id, t)
            .map_err(|e| ckpt_err(&dir.join(&entry.file), e.to_string()))?;
    }
    trainer.adam.step = m.adam.step;
    trainer.adam.beta1 = m.adam.beta1;
    trainer.adam.beta2 = m.adam.beta2;
    trainer.adam.eps = m.adam.eps;
    for mom in &m.adam.moments {
        let id = trainer
            .model
            .store()
            .lookup(&mom.name)
            .ok_or_else(|| ckpt_err(&path, format!("optimizer state for unknown parameter {}", mom.name)))?;
        let (mt, vt) = (read_tensor(dir, &mom.m)?, read_tensor(dir, &mom.v)?);
        trainer.adam.set_moments(id, mt, vt);
    }
    Ok(trainer)
}
