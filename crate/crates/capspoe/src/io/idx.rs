//! IDX image files (MNIST, Fashion-MNIST): big-endian header, unsigned
//! byte payload.

use std::path::Path;

use capspoe_core::Tensor;

use crate::{Error, Result};

/// Magic for a rank-3 unsigned byte tensor.
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const HEADER_LEN: usize = 16;

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Parses an image IDX file into `[n, rows, cols]` with values `byte / 255`.
pub fn parse_idx(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let dims = [be_u32(bytes, 4), be_u32(bytes, 8), be_u32(bytes, 12)].map(|d| d as usize);
    if dims.contains(&0) {
        return Err(Error::DimensionMismatch(format!("zero extent in {dims:?}")));
    }
    let payload = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::DimensionMismatch(format!("extents {dims:?} overflow")))?;
    let available = bytes.len() - HEADER_LEN;
    if available < payload {
        return Err(Error::Truncated {
            expected: HEADER_LEN + payload,
            found: bytes.len(),
        });
    }
    if available > payload {
        return Err(Error::DimensionMismatch(format!(
            "header declares {dims:?} ({payload} bytes) but the payload has {available}"
        )));
    }
    let data = bytes[HEADER_LEN..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::from_vec(&dims, data)?)
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes)
}

/// Serializes `[n, rows, cols]` images with values in `[0, 1]`, rounding to
/// the nearest byte.
pub fn encode_idx(images: &Tensor) -> Result<Vec<u8>> {
    let shape = images.shape();
    if shape.len() != 3 {
        return Err(Error::DimensionMismatch(format!(
            "IDX images must be rank 3, got {shape:?}"
        )));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + images.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for &d in shape {
        let d = u32::try_from(d)
            .map_err(|_| Error::DimensionMismatch(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend(images.data().iter().map(|&v| crate::io::quantize(v)));
    Ok(out)
}
