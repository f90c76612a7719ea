//! Checkpoint directories: `manifest.json` plus `tensors.bin`, a flat blob of
//! little-endian f64 values concatenated in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::synthesis::SynthesisConfig;
use crate::tensor::Tensor;
use crate::training::TrainState;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub step: u64,
    pub endianness: String,
    pub one_hot_finetune: bool,
    /// Synthesis settings in effect at save time (fine-tuning hardens the mode).
    pub synthesis: SynthesisConfig,
    pub tensors: Vec<TensorEntry>,
    pub config: ExperimentConfig,
}

fn named_state(state: &TrainState) -> Vec<(String, &Tensor)> {
    let mut v = state.model.named_tensors();
    v.extend(state.rms.iter().enumerate().map(|(i, t)| (format!("opt.rms.{i}"), t)));
    v
}

pub fn save_checkpoint(state: &TrainState, config: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in named_state(state) {
        let offset = blob.len() as u64;
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            byte_len: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        schema_version: CHECKPOINT_VERSION,
        config_hash: config.hash(),
        step: state.step,
        endianness: "little".into(),
        one_hot_finetune: state.one_hot_finetune,
        synthesis: state.model.synthesis.clone(),
        tensors,
        config: config.clone(),
    };
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if m.schema_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
            m.schema_version
        )));
    }
    if m.endianness != "little" {
        return Err(Error::Checkpoint(format!("unsupported endianness '{}'", m.endianness)));
    }
    Ok(m)
}

/// Loads the state and the configuration embedded at save time.
pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, ExperimentConfig)> {
    let manifest = read_manifest(dir)?;
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let config = manifest.config.clone();
    config.validate()?;
    let mut model = config.build_model()?;
    model.synthesis = manifest.synthesis.clone();

    let expected: Vec<(String, Vec<usize>)> = model
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let model_count = expected.len();
    if manifest.tensors.len() < model_count {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, model needs {model_count}",
            manifest.tensors.len()
        )));
    }
    let mut loaded = Vec::with_capacity(manifest.tensors.len());
    for (i, entry) in manifest.tensors.iter().enumerate() {
        if let Some((name, shape)) = expected.get(i) {
            if &entry.name != name {
                return Err(Error::Checkpoint(format!("tensor {i}: expected '{name}', found '{}'", entry.name)));
            }
            if &entry.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}': manifest shape {:?} does not match model shape {shape:?}",
                    entry.shape
                )));
            }
        }
        loaded.push(read_tensor(entry, &blob)?);
    }
    let rms = loaded.split_off(model_count);
    for (dst, src) in model.tensors_mut().into_iter().zip(loaded) {
        *dst = src;
    }
    if !rms.is_empty() {
        let params: Vec<&[usize]> = model.named_tensors().into_iter().map(|(_, t)| t.shape()).collect::<Vec<_>>();
        let ok = rms.len() == params.len() && rms.iter().zip(&params).all(|(r, p)| r.shape() == *p);
        if !ok {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
    }
    let state = TrainState {
        model,
        step: manifest.step,
        rms,
        one_hot_finetune: manifest.one_hot_finetune,
    };
    Ok((state, config))
}

fn read_tensor(entry: &TensorEntry, blob: &[u8]) -> Result<Tensor> {
    let numel: usize = entry.shape.iter().product();
    if entry.byte_len != 8 * numel as u64 {
        return Err(Error::Checkpoint(format!(
            "tensor '{}': byte_len {} does not match shape {:?}",
            entry.name, entry.byte_len, entry.shape
        )));
    }
    let start = entry.offset as usize;
    let end = start + entry.byte_len as usize;
    let bytes = blob.get(start..end).ok_or_else(|| {
        Error::Checkpoint(format!("tensor '{}': blob truncated at offset {}", entry.name, entry.offset))
    })?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(entry.shape.clone(), data).map_err(|e| Error::Checkpoint(format!("tensor '{}': {e}", entry.name)))
}

/// Loads a checkpoint for continued training under `config`. A config whose
/// hash differs from the saved one is rejected unless `force` is set.
pub fn resume_checkpoint(dir: &Path, config: &ExperimentConfig, force: bool) -> Result<TrainState> {
    let manifest = read_manifest(dir)?;
    let hash = config.hash();
    if manifest.config_hash != hash && !force {
        return Err(Error::Checkpoint(format!(
            "config hash {hash} differs from checkpoint's {}",
            manifest.config_hash
        )));
    }
    let (state, _) = load_checkpoint(dir)?;
    Ok(state)
}
