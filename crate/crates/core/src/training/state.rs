//! Full-precision training state for exact resumption.
//!
//! Layout (little-endian): magic `VTXS`, `u32` version, `u32` header length,
//! JSON header, then `len` `f64` parameters, `len` first moments, `len`
//! second moments, and a CRC-32 of every preceding byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VTXS";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateHeader {
    /// Hash of the configuration that produced this state.
    pub fingerprint: u64,
    pub epochs_done: usize,
    pub best_epoch: Option<usize>,
    pub best_val_cpsnr: Option<f64>,
    pub adam_step: u64,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub header: StateHeader,
    pub params: Vec<f64>,
    pub adam: AdamState,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&state.header)?;
    let mut buf = Vec::with_capacity(16 + header.len() + 24 * state.params.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for block in [&state.params, &state.adam.m, &state.adam.v] {
        for v in block.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn decode(buf: &[u8]) -> Result<TrainState> {
    if buf.len() < 16 || &buf[..4] != MAGIC {
        return Err(corrupt("not a training state file"));
    }
    let (body, crc) = buf.split_at(buf.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
        return Err(corrupt("training state checksum mismatch"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(body[i..i + 4].try_into().expect("4 bytes"));
    if u32_at(4) != VERSION {
        return Err(corrupt("unsupported training state version"));
    }
    let end = 12 + u32_at(8) as usize;
    if end > body.len() {
        return Err(corrupt("training state header truncated"));
    }
    let header: StateHeader =
        serde_json::from_slice(&body[12..end]).map_err(|e| corrupt(format!("state header: {e}")))?;
    let data = &body[end..];
    if data.len() != 24 * header.len {
        return Err(corrupt("training state payload has the wrong size"));
    }
    let mut blocks = data.chunks_exact(8 * header.len.max(1)).map(|b| {
        b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect::<Vec<f64>>()
    });
    let (params, m, v) = if header.len == 0 {
        (Vec::new(), Vec::new(), Vec::new())
    } else {
        (
            blocks.next().expect("three blocks"),
            blocks.next().expect("three blocks"),
            blocks.next().expect("three blocks"),
        )
    };
    Ok(TrainState {
        adam: AdamState {
            m,
            v,
            step: header.adam_step,
        },
        header,
        params,
    })
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &encode(state)?)
}

pub fn load(path: &Path) -> Result<TrainState> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact() {
        let s = TrainState {
            header: StateHeader {
                fingerprint: 42,
                epochs_done: 3,
                best_epoch: Some(2),
                best_val_cpsnr: Some(21.5),
                adam_step: 120,
                len: 3,
            },
            params: vec![0.1, -1e-300, 3.0],
            adam: AdamState { m: vec![1.0, 2.0, 3.0], v: vec![4.0, 5.0, 6.0], step: 120 },
        };
        let bytes = encode(&s).unwrap();
        assert_eq!(decode(&bytes).unwrap(), s);
        let mut bad = bytes.clone();
        bad[30] ^= 4;
        assert!(decode(&bad).is_err());
        assert!(decode(&bytes[..bytes.len() - 5]).is_err());
    }
}
