//! CIFAR-10 binary batches: records of one label byte followed by a planar
//! 3x32x32 RGB image.

use std::path::Path;

use capspoe_core::Tensor;

use crate::{Error, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Parses concatenated records into `[n, 32, 32, 3]` with values `byte / 255`.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Tensor> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::RecordSize {
            len: bytes.len(),
            record: CIFAR_RECORD,
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut data = Vec::with_capacity(n * 3 * plane);
    for record in bytes.chunks_exact(CIFAR_RECORD) {
        let pixels = &record[1..];
        for p in 0..plane {
            for c in 0..3 {
                data.push(pixels[c * plane + p] as f64 / 255.0);
            }
        }
    }
    Ok(Tensor::from_vec(&[n, CIFAR_SIDE, CIFAR_SIDE, 3], data)?)
}

pub fn load_cifar10(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10(&bytes)
}
