//! `VEMB0001` embedding tables: magic, length-prefixed JSON header, f32 rows.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"VEMB0001";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    num_classes: usize,
    dim: usize,
    class_names: Vec<String>,
}

pub fn write_embeddings(path: impl AsRef<Path>, class_names: &[String], table: &Array2<f64>) -> Result<()> {
    if class_names.len() != table.nrows() {
        return Err(Error::ClassCountMismatch {
            expected: table.nrows(),
            found: class_names.len(),
        });
    }
    let header = serde_json::to_vec(&Header {
        num_classes: table.nrows(),
        dim: table.ncols(),
        class_names: class_names.to_vec(),
    })?;
    let mut out = Vec::with_capacity(12 + header.len() + table.len() * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for &v in table.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<(Vec<String>, Array2<f64>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[..8] != EMBEDDING_MAGIC {
        return Err(Error::UnsupportedFormat("missing VEMB0001 magic".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| Error::CorruptPayload("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.class_names.len() != header.num_classes {
        return Err(Error::CorruptPayload("class name count differs from num_classes".into()));
    }
    let payload = &bytes[12 + hlen..];
    let expected = header.num_classes * header.dim * 4;
    if payload.len() != expected {
        return Err(Error::CorruptPayload(format!(
            "expected {expected} payload bytes, found {}",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let table = Array2::from_shape_vec((header.num_classes, header.dim), values)
        .map_err(|e| Error::CorruptPayload(e.to_string()))?;
    Ok((header.class_names, table))
}
