//! `VVOL0001` volume files: magic, length-prefixed JSON header, f32 intensities,
//! optional u16 labels. All numbers little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::volume::{LabelVolume, Volume};
use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 8] = b"VVOL0001";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    shape: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    num_classes: Option<usize>,
    label_dtype: Option<String>,
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume, l: Option<&LabelVolume>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_volume_to(&mut w, v, l)?;
    w.flush()?;
    Ok(())
}

pub fn write_volume_to<W: Write>(w: &mut W, v: &Volume, l: Option<&LabelVolume>) -> Result<()> {
    if let Some(l) = l {
        if l.shape() != v.shape() {
            return Err(Error::ShapeMismatch(format!(
                "labels {:?} vs volume {:?}",
                l.shape(),
                v.shape()
            )));
        }
    }
    let header = Header {
        shape: v.shape(),
        spacing: v.spacing(),
        dtype: "float32".into(),
        num_classes: l.map(|l| l.num_classes()),
        label_dtype: l.map(|_| "uint16".into()),
    };
    let text = serde_json::to_vec(&header)?;
    w.write_all(VOLUME_MAGIC)?;
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(&text)?;
    let mut buf = Vec::with_capacity(v.len() * 4);
    for x in v.as_slice() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    if let Some(l) = l {
        buf.clear();
        for x in l.as_slice() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<(Volume, Option<LabelVolume>)> {
    let mut r = BufReader::new(File::open(path)?);
    read_volume_from(&mut r)
}

pub fn read_volume_from<R: Read>(r: &mut R) -> Result<(Volume, Option<LabelVolume>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[..8] != VOLUME_MAGIC {
        return Err(Error::UnsupportedFormat("missing VVOL0001 magic".into()));
    }
    if bytes.len() < 12 {
        return Err(Error::CorruptPayload("truncated header length".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() < hlen {
        return Err(Error::CorruptPayload("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])
        .map_err(|e| Error::UnsupportedFormat(format!("header: {e}")))?;
    if header.dtype != "float32" {
        return Err(Error::UnsupportedFormat(format!("dtype {}", header.dtype)));
    }
    let labelled = match (&header.num_classes, header.label_dtype.as_deref()) {
        (Some(_), Some("uint16")) => true,
        (None, None) => false,
        _ => return Err(Error::UnsupportedFormat("inconsistent label fields".into())),
    };
    let n: usize = header.shape.iter().product();
    let payload = &body[hlen..];
    let expected = n * 4 + if labelled { n * 2 } else { 0 };
    if payload.len() != expected {
        return Err(Error::CorruptPayload(format!(
            "expected {expected} payload bytes for shape {:?}, found {}",
            header.shape,
            payload.len()
        )));
    }
    let voxels: Vec<f32> = payload[..n * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let [d, h, w] = header.shape;
    let data = Array3::from_shape_vec((d, h, w), voxels)
        .map_err(|e| Error::CorruptPayload(e.to_string()))?;
    let volume = Volume::new(data, header.spacing)?;
    let labels = if labelled {
        let ls: Vec<u16> = payload[n * 4..]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Some(LabelVolume::from_vec(header.shape, header.num_classes.unwrap(), ls)?)
    } else {
        None
    };
    Ok((volume, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomSpec};

    fn encode(v: &Volume, l: Option<&LabelVolume>) -> Vec<u8> {
        let mut out = Vec::new();
        write_volume_to(&mut out, v, l).unwrap();
        out
    }

    #[test]
    fn phantom_roundtrip_is_bit_identical() {
        let spec = PhantomSpec::synthetic([8, 12, 16], 3, 4).unwrap();
        let (v, l, _) = generate_phantom(&spec).unwrap();
        let bytes = encode(&v, Some(&l));
        let (rv, rl) = read_volume_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(rv.spacing(), v.spacing());
        assert!(rv.as_slice().iter().zip(v.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(rl.as_ref(), Some(&l));
        assert_eq!(encode(&rv, rl.as_ref()), bytes);
    }

    #[test]
    fn truncation_is_corrupt_payload() {
        let v = Volume::from_vec([2, 2, 2], [1.0; 3], (0..8).map(|x| x as f32).collect()).unwrap();
        let mut bytes = encode(&v, None);
        bytes.pop();
        assert!(matches!(
            read_volume_from(&mut bytes.as_slice()),
            Err(Error::CorruptPayload(_))
        ));
    }

    #[test]
    fn bad_magic_is_unsupported() {
        let v = Volume::from_vec([1, 1, 2], [1.0; 3], vec![1.0, 2.0]).unwrap();
        let mut bytes = encode(&v, None);
        bytes[7] = b'2';
        assert!(matches!(
            read_volume_from(&mut bytes.as_slice()),
            Err(Error::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn hand_built_file_decodes_last_voxel() {
        let header = br#"{"shape":[2,2,2],"spacing":[1.5,1.5,1.5],"dtype":"float32","num_classes":null,"label_dtype":null}"#;
        let mut bytes = VOLUME_MAGIC.to_vec();
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(header);
        let values = [0.5f32, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, -7.25];
        for x in values {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        let (v, l) = read_volume_from(&mut bytes.as_slice()).unwrap();
        assert!(l.is_none());
        assert_eq!(v.get([1, 1, 1]), -7.25);
        assert_eq!(v.get([0, 0, 1]), 1.0);
        assert_eq!(v.spacing(), [1.5; 3]);
    }
}
