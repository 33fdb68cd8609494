//! Binary PGM (P5) and PPM (P6) image grids.

use std::path::Path;

use capspoe_core::Tensor;

use crate::{Error, Result};

/// Byte used for the border and the 1-pixel separators.
pub const SEPARATOR: u8 = 128;

/// Tiles `images` (`[H, W, 1]` or `[H, W, 3]`, values in `[0, 1]`) row-major
/// into a `rows x cols` grid with a 1-pixel border and separators.
pub fn encode_image_grid(images: &[Tensor], rows: usize, cols: usize) -> Result<Vec<u8>> {
    if rows == 0 || cols == 0 || rows * cols != images.len() {
        return Err(Error::CountMismatch {
            rows,
            cols,
            count: images.len(),
        });
    }
    let shape = images[0].shape().to_vec();
    let (h, w, c) = match shape[..] {
        [h, w, c] if c == 1 || c == 3 => (h, w, c),
        _ => {
            return Err(Error::DimensionMismatch(format!(
                "grid images must be [H, W, 1] or [H, W, 3], got {shape:?}"
            )))
        }
    };
    if let Some(bad) = images.iter().find(|t| t.shape() != shape.as_slice()) {
        return Err(Error::DimensionMismatch(format!(
            "mixed image shapes {shape:?} and {:?}",
            bad.shape()
        )));
    }
    let gw = cols * (w + 1) + 1;
    let gh = rows * (h + 1) + 1;
    let mut pixels = vec![SEPARATOR; gw * gh * c];
    for (k, img) in images.iter().enumerate() {
        let (r, q) = (k / cols, k % cols);
        let (y0, x0) = (1 + r * (h + 1), 1 + q * (w + 1));
        for y in 0..h {
            let src = &img.data()[y * w * c..(y + 1) * w * c];
            let dst = ((y0 + y) * gw + x0) * c;
            for (d, &v) in pixels[dst..dst + w * c].iter_mut().zip(src) {
                *d = super::quantize(v);
            }
        }
    }
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{gw} {gh}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

pub fn emit_image_grid(
    images: &[Tensor],
    rows: usize,
    cols: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let bytes = encode_image_grid(images, rows, cols)?;
    super::write_file(path, &bytes)
}

/// Reads back a P5/P6 file as `(width, height, channels, pixels)`.
pub fn decode_pnm(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bad = || Error::Input("malformed PNM header".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    let c = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(bad()),
    };
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    if fields[3] != "255" {
        return Err(bad());
    }
    let body = &bytes[pos + 1..];
    if body.len() != w * h * c {
        return Err(Error::Truncated {
            expected: w * h * c,
            found: body.len(),
        });
    }
    Ok((w, h, c, body.to_vec()))
}
