//! File formats: IDX and CIFAR-10 loaders, PGM/PPM grids, SVG diagrams and
//! checkpoints.

pub mod checkpoint;
pub mod cifar;
pub mod idx;
pub mod pnm;
pub mod svg;

use std::path::Path;

use crate::{Error, Result};

/// `[0, 1]` to a byte, rounding to nearest; out-of-range values clamp.
pub fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `bytes`, creating parent directories as needed.
pub fn write_file(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
