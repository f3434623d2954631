//! `VCKPT001` checkpoints: magic, u32 version, length-prefixed JSON manifest,
//! then every tensor as little-endian f32 at the offsets the manifest lists.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SegmentationModel};
use crate::nn::{Adam, Module};
use crate::text::{Provider, TextBank};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VCKPT001";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    model: ModelConfig,
    train: TrainConfig,
    class_names: Vec<String>,
    step: u64,
    optimizer_step: u64,
    tensors: Vec<TensorEntry>,
}

struct Payload {
    entries: Vec<TensorEntry>,
    bytes: Vec<u8>,
}

impl Payload {
    fn push(&mut self, name: String, shape: Vec<usize>, values: &[f32]) {
        self.entries.push(TensorEntry {
            name,
            shape,
            offset: self.bytes.len(),
        });
        for v in values {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(trainer: &Trainer) -> Result<Vec<u8>> {
    let model = &trainer.model;
    let mut payload = Payload {
        entries: Vec::new(),
        bytes: Vec::new(),
    };
    let text = model.text_embeddings();
    payload.push("text.embeddings".into(), vec![text.nrows(), text.ncols()], text.as_slice().expect("contiguous"));
    let mut params = Vec::new();
    model.visit(&mut |p| params.push((p.name.clone(), p.shape.clone(), p.value.clone())));
    let st = &trainer.optimizer.state;
    for (i, (name, shape, value)) in params.iter().enumerate() {
        payload.push(name.clone(), shape.clone(), value);
        payload.push(format!("adam.first.{name}"), shape.clone(), &st.first[i]);
        payload.push(format!("adam.second.{name}"), shape.clone(), &st.second[i]);
    }
    let manifest = Manifest {
        model: model.config().clone(),
        train: trainer.config.clone(),
        class_names: model.class_names().to_vec(),
        step: trainer.step,
        optimizer_step: st.step,
        tensors: payload.entries,
    };
    let header = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.bytes.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload.bytes);
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Trainer> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("missing VCKPT001 magic"));
    }
    if bytes.len() < 16 {
        return Err(corrupt("truncated header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedCheckpointVersion(version));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let header = bytes.get(16..16 + hlen).ok_or_else(|| corrupt("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(header).map_err(|e| corrupt(format!("manifest: {e}")))?;
    let payload = &bytes[16 + hlen..];

    let mut expected_end = 0usize;
    let mut tensors = std::collections::HashMap::new();
    for t in &manifest.tensors {
        let n: usize = t.shape.iter().product();
        if t.offset != expected_end {
            return Err(corrupt(format!("tensor {} at unexpected offset", t.name)));
        }
        let raw = payload
            .get(t.offset..t.offset + 4 * n)
            .ok_or_else(|| corrupt(format!("tensor {} truncated", t.name)))?;
        let values: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        expected_end = t.offset + 4 * n;
        tensors.insert(t.name.as_str(), (t.shape.clone(), values));
    }
    if expected_end != payload.len() {
        return Err(corrupt("trailing bytes after last tensor"));
    }
    let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
        let (s, v) = tensors.remove(name).ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
        if s != shape {
            return Err(corrupt(format!("tensor {name} has shape {s:?}, expected {shape:?}")));
        }
        Ok(v)
    };

    let dim = manifest.model.encoder.token_dim;
    let n = manifest.class_names.len();
    let text = Array2::from_shape_vec((n, dim), take("text.embeddings", &[n, dim])?).expect("shape checked");
    // Any unit-norm table works for construction; the stored one replaces it below.
    let placeholder = TextBank::from_embeddings(
        manifest.class_names.clone(),
        Array2::from_elem((n, dim), 1.0),
        Provider::Synthetic { seed: 0 },
    )?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut model = SegmentationModel::<f32>::new(manifest.model.clone(), &placeholder, &mut rng)
        .map_err(|e| corrupt(format!("model config: {e}")))?;
    model.set_text_embeddings(manifest.class_names.clone(), text)?;

    let mut names = Vec::new();
    model.visit(&mut |p| names.push((p.name.clone(), p.shape.clone())));
    let mut values = Vec::with_capacity(names.len());
    let mut first = Vec::with_capacity(names.len());
    let mut second = Vec::with_capacity(names.len());
    for (name, shape) in &names {
        values.push(take(name, shape)?);
        first.push(take(&format!("adam.first.{name}"), shape)?);
        second.push(take(&format!("adam.second.{name}"), shape)?);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(corrupt(format!("unexpected tensor {extra}")));
    }
    let mut it = values.into_iter();
    model.visit_mut(&mut |p| p.value = it.next().expect("count checked"));
    let mut optimizer = Adam::new(manifest.train.optimizer, &model);
    optimizer.state.step = manifest.optimizer_step;
    optimizer.state.first = first;
    optimizer.state.second = second;
    Ok(Trainer {
        model,
        optimizer,
        config: manifest.train,
        step: manifest.step,
    })
}

pub fn save_checkpoint(trainer: &Trainer, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(trainer)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Trainer> {
    decode_checkpoint(&fs::read(path)?)
}
