//! VTXD per-scan binary blobs.
//!
//! All integers and floats are little-endian.
//!
//! | field                 | type / size                                        |
//! |-----------------------|----------------------------------------------------|
//! | magic                 | `b"VTXD"`                                          |
//! | version               | `u32`, currently 1                                 |
//! | coils, height, width, slices | 4 x `u32`                                   |
//! | flags                 | `u32`: bit 0 k-space fully sampled, bit 1 images   |
//! | acceleration          | `f64`                                              |
//! | calibration h, w      | 2 x `u32`                                          |
//! | mask seed             | `u64`                                              |
//! | maps                  | `C*H*W` complex, coil-major, row-major             |
//! | mask                  | `H` rows of `ceil(W/8)` bytes, bit `c % 8` of byte `c / 8`, LSB first |
//! | k-space               | `S*C*H*W` complex, slice-major then coil-major     |
//! | images (if flagged)   | `S*H*W` complex                                    |
//! | supports (if flagged) | `S` bit-packed masks as above                      |
//! | checksum              | `u32` CRC-32 (IEEE) of every preceding byte        |
//!
//! A complex value is two `f64` (real, imaginary).

use crate::error::{Error, Result};
use crate::mri::{KSpaceTensor, SensitivityMaps, UndersamplingMask};
use crate::numerics::{ComplexTensor, C64};

const MAGIC: &[u8; 4] = b"VTXD";
pub const VERSION: u32 = 1;
const FLAG_FULLY_SAMPLED: u32 = 1;
const FLAG_IMAGES: u32 = 2;

/// Contents of one blob.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanBlob {
    pub maps: SensitivityMaps,
    pub mask: UndersamplingMask,
    pub fully_sampled: bool,
    pub kspace: Vec<KSpaceTensor>,
    /// Ground-truth images and supports, one per slice.
    pub images: Option<(Vec<ComplexTensor>, Vec<Vec<bool>>)>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptDataset(msg.into())
}

fn put_complex(buf: &mut Vec<u8>, values: &[C64]) {
    for v in values {
        buf.extend_from_slice(&v.re.to_le_bytes());
        buf.extend_from_slice(&v.im.to_le_bytes());
    }
}

fn put_bits(buf: &mut Vec<u8>, bits: &[bool], width: usize) {
    for row in bits.chunks_exact(width) {
        for byte in row.chunks(8) {
            buf.push(
                byte.iter()
                    .enumerate()
                    .fold(0u8, |acc, (i, &b)| acc | ((b as u8) << i)),
            );
        }
    }
}

pub fn encode(blob: &ScanBlob) -> Vec<u8> {
    let (h, w) = blob.maps.dims();
    let coils = blob.maps.coils();
    let mut flags = 0;
    if blob.fully_sampled {
        flags |= FLAG_FULLY_SAMPLED;
    }
    if blob.images.is_some() {
        flags |= FLAG_IMAGES;
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    for v in [VERSION, coils as u32, h as u32, w as u32, blob.kspace.len() as u32, flags] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&blob.mask.acceleration().to_le_bytes());
    let (ch, cw) = blob.mask.calibration();
    buf.extend_from_slice(&(ch as u32).to_le_bytes());
    buf.extend_from_slice(&(cw as u32).to_le_bytes());
    buf.extend_from_slice(&blob.mask.seed().to_le_bytes());
    put_complex(&mut buf, blob.maps.data());
    put_bits(&mut buf, blob.mask.bits(), w);
    for k in &blob.kspace {
        put_complex(&mut buf, k.data());
    }
    if let Some((images, supports)) = &blob.images {
        for x in images {
            put_complex(&mut buf, x.data());
        }
        for s in supports {
            put_bits(&mut buf, s, w);
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt("blob truncated"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn complex(&mut self, n: usize) -> Result<Vec<C64>> {
        let bytes = self.take(n.checked_mul(16).ok_or_else(|| corrupt("size overflow"))?)?;
        Ok(bytes
            .chunks_exact(16)
            .map(|c| {
                C64::new(
                    f64::from_le_bytes(c[..8].try_into().expect("8 bytes")),
                    f64::from_le_bytes(c[8..].try_into().expect("8 bytes")),
                )
            })
            .collect())
    }

    fn bits(&mut self, h: usize, w: usize) -> Result<Vec<bool>> {
        let row_bytes = w.div_ceil(8);
        let bytes = self.take(h * row_bytes)?;
        let mut out = Vec::with_capacity(h * w);
        for row in bytes.chunks_exact(row_bytes) {
            out.extend((0..w).map(|c| row[c / 8] >> (c % 8) & 1 == 1));
        }
        Ok(out)
    }
}

pub fn decode(buf: &[u8]) -> Result<ScanBlob> {
    if buf.len() < 8 {
        return Err(corrupt("blob truncated"));
    }
    if &buf[..4] != MAGIC {
        return Err(corrupt("bad blob magic"));
    }
    let (body, crc) = buf.split_at(buf.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
        return Err(corrupt("blob checksum mismatch"));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported blob version {version}")));
    }
    let coils = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let slices = r.u32()? as usize;
    let flags = r.u32()?;
    let acceleration = r.f64()?;
    let cal = (r.u32()? as usize, r.u32()? as usize);
    let seed = r.u64()?;
    let plane = h.checked_mul(w).ok_or_else(|| corrupt("size overflow"))?;
    let per_slice = coils.checked_mul(plane).ok_or_else(|| corrupt("size overflow"))?;
    let bad = |e: Error| corrupt(e.to_string());
    let maps = SensitivityMaps::new(coils, h, w, r.complex(per_slice)?).map_err(bad)?;
    let mask = UndersamplingMask::from_bits(h, w, acceleration, cal, seed, r.bits(h, w)?).map_err(bad)?;
    let mut kspace = Vec::with_capacity(slices);
    for _ in 0..slices {
        kspace.push(KSpaceTensor::new(coils, h, w, r.complex(per_slice)?).map_err(bad)?);
    }
    let images = if flags & FLAG_IMAGES != 0 {
        let mut images = Vec::with_capacity(slices);
        for _ in 0..slices {
            images.push(ComplexTensor::new(vec![h, w], r.complex(plane)?).map_err(bad)?);
        }
        let mut supports = Vec::with_capacity(slices);
        for _ in 0..slices {
            supports.push(r.bits(h, w)?);
        }
        Some((images, supports))
    } else {
        None
    };
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes after blob payload"));
    }
    Ok(ScanBlob {
        maps,
        mask,
        fully_sampled: flags & FLAG_FULLY_SAMPLED != 0,
        kspace,
        images,
    })
}
