//! Parameter checkpoint files.
//!
//! Byte layout, all integers little-endian:
//!
//! | bytes          | content                                              |
//! |----------------|------------------------------------------------------|
//! | 4              | magic `VTXM`                                         |
//! | 4              | format version (`u32`, currently 1)                  |
//! | 4              | header length `n` (`u32`)                            |
//! | n              | UTF-8 JSON header: `config`, `layout`, `len`         |
//! | 4 * len        | parameters as `f32`, in layout order                 |
//! | 4              | CRC-32 (IEEE) of every preceding byte                |

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayoutEntry, ModelConfig, ModelParameters};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VTXM";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    layout: Vec<LayoutEntry>,
    len: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

pub fn write_checkpoint(params: &ModelParameters, mut out: impl Write) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        config: params.config().clone(),
        layout: params.layout().to_vec(),
        len: params.len(),
    })?;
    let mut buf = Vec::with_capacity(16 + header.len() + 4 * params.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for v in params.values() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(mut input: impl Read) -> Result<ModelParameters> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    if buf.len() < 16 {
        return Err(corrupt("file shorter than the fixed header"));
    }
    if &buf[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let (body, crc) = buf.split_at(buf.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
        return Err(corrupt("checksum mismatch"));
    }
    let hlen = u32_at(8) as usize;
    let header_end = 12usize
        .checked_add(hlen)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt("header length exceeds file"))?;
    let header: Header = serde_json::from_slice(&body[12..header_end])
        .map_err(|e| corrupt(format!("header: {e}")))?;
    let data = &body[header_end..];
    if data.len() != 4 * header.len {
        return Err(corrupt(format!(
            "expected {} parameter bytes, found {}",
            4 * header.len,
            data.len()
        )));
    }
    let values: Vec<f64> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let params = ModelParameters::from_values(&header.config, values)
        .map_err(|e| corrupt(e.to_string()))?;
    if params.layout() != header.layout.as_slice() {
        return Err(corrupt("layout does not match the configuration"));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParameters, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf)?;
    crate::io::write_atomic(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParameters> {
    read_checkpoint(std::fs::File::open(path)?)
}
