//! IDX files: two zero bytes, a type code, a dimension count, big-endian
//! `u32` dimensions, then big-endian payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LabeledSet, Record, Role};
use crate::error::{Error, Result};

const U8: u8 = 0x08;
const I8: u8 = 0x09;
const I16: u8 = 0x0B;
const I32: u8 = 0x0C;
const F32: u8 = 0x0D;
const F64: u8 = 0x0E;

/// Decoded IDX payload.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub type_code: u8,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset: offset as u64,
        message: message.into(),
    }
}

fn width(type_code: u8) -> Option<usize> {
    match type_code {
        U8 | I8 => Some(1),
        I16 => Some(2),
        I32 | F32 => Some(4),
        F64 => Some(8),
        _ => None,
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(parse_err(bytes.len(), "truncated magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(parse_err(0, "magic number must start with two zero bytes"));
    }
    let type_code = bytes[2];
    let size = width(type_code).ok_or_else(|| parse_err(2, format!("unknown type code {type_code:#04x}")))?;
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(parse_err(3, "zero dimensions"));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(parse_err(bytes.len(), "truncated dimension header"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| parse_err(4, "dimension product overflows"))?;
    let expected = header + count * size;
    if bytes.len() != expected {
        return Err(parse_err(
            bytes.len().min(expected),
            format!(
                "payload holds {} bytes, header promises {}",
                bytes.len() - header,
                count * size
            ),
        ));
    }
    let body = &bytes[header..];
    let values = match type_code {
        U8 => body.iter().map(|&b| b as f64).collect(),
        I8 => body.iter().map(|&b| b as i8 as f64).collect(),
        I16 => body
            .chunks_exact(2)
            .map(|c| i16::from_be_bytes([c[0], c[1]]) as f64)
            .collect(),
        I32 => body
            .chunks_exact(4)
            .map(|c| i32::from_be_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_be_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        _ => body
            .chunks_exact(8)
            .map(|c| f64::from_be_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    };
    Ok(IdxArray {
        type_code,
        dims,
        values,
    })
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    parse_idx(&fs::read(path)?)
}

/// Role and naming metadata stored next to an IDX image file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    role: Role,
    source_name: String,
    num_classes: usize,
}

fn sidecar_path(images: &Path) -> PathBuf {
    let mut name = images.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

/// Reads an image file and a label file into one set. Byte images are
/// scaled by 1/255; float images are taken as stored. A `.meta.json`
/// sidecar, when present, supplies the role, source name and class count.
pub fn read_idx_pair(images: &Path, labels: &Path, role: Role, num_classes: Option<usize>) -> Result<LabeledSet> {
    let img = read_idx(images)?;
    let lab = read_idx(labels)?;
    if lab.dims.len() != 1 || lab.dims[0] != img.dims[0] {
        return Err(Error::input(format!(
            "{} labels for {} images",
            lab.dims.first().copied().unwrap_or(0),
            img.dims[0]
        )));
    }
    if matches!(lab.type_code, F32 | F64) {
        return Err(Error::input("labels must use an integer type"));
    }
    let shape = match img.dims[1..] {
        [] => return Err(Error::input("image file has no per-record dimensions")),
        [h, w] => vec![1, h, w],
        ref rest => rest.to_vec(),
    };
    let scale = if img.type_code == U8 { 1.0 / 255.0 } else { 1.0 };
    let width: usize = shape.iter().product();
    let mut records = Vec::with_capacity(img.dims[0]);
    for (i, &label) in lab.values.iter().enumerate() {
        if label < 0.0 {
            return Err(Error::input(format!("record {i} has negative label")));
        }
        records.push(Record {
            input: img.values[i * width..(i + 1) * width]
                .iter()
                .map(|v| v * scale)
                .collect(),
            label: label as usize,
        });
    }
    let meta_path = sidecar_path(images);
    let meta: Option<Sidecar> = if meta_path.exists() {
        Some(serde_json::from_str(&fs::read_to_string(&meta_path)?)?)
    } else {
        None
    };
    let inferred = records.iter().map(|r| r.label + 1).max().unwrap_or(0).max(2);
    let classes = num_classes.or(meta.as_ref().map(|m| m.num_classes)).unwrap_or(inferred);
    let (role, name) = match meta {
        Some(m) => (m.role, m.source_name),
        None => (
            role,
            images
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
        ),
    };
    LabeledSet::new(records, shape, classes, role, name)
}

fn encode(type_code: u8, dims: &[usize], payload: impl Iterator<Item = Vec<u8>>) -> Result<Vec<u8>> {
    let mut out = vec![0, 0, type_code, dims.len() as u8];
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::input("dimension exceeds the IDX u32 limit"))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    payload.for_each(|b| out.extend(b));
    Ok(out)
}

/// Writes `set` as a float64 image file, a label file and a metadata
/// sidecar; reading them back yields an identical set.
pub fn write_idx_pair(set: &LabeledSet, images: &Path, labels: &Path) -> Result<()> {
    let mut dims = vec![set.len()];
    dims.extend_from_slice(set.input_shape());
    let img = encode(
        F64,
        &dims,
        set.records()
            .iter()
            .flat_map(|r| r.input.iter().map(|v| v.to_be_bytes().to_vec())),
    )?;
    let lab = if set.num_classes() <= 256 {
        encode(U8, &[set.len()], set.records().iter().map(|r| vec![r.label as u8]))?
    } else {
        encode(
            I32,
            &[set.len()],
            set.records().iter().map(|r| (r.label as i32).to_be_bytes().to_vec()),
        )?
    };
    fs::write(images, img)?;
    fs::write(labels, lab)?;
    let meta = Sidecar {
        role: set.role(),
        source_name: set.source_name().to_string(),
        num_classes: set.num_classes(),
    };
    fs::write(sidecar_path(images), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}
