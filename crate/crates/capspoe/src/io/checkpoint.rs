//! CPOE checkpoints: named tensors with little-endian f64 payloads and a
//! trailing FNV-1a 64 checksum.
//!
//! ```text
//! "CPOE" | version u32 | section count u32
//! per section: name length u32 | name | rank u32 | extents u64 x rank | f64 x len
//! checksum u64 over every preceding byte
//! ```
//! All integers are little-endian.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::path::Path;

use capspoe_core::Tensor;

use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CPOE";
pub const CHECKPOINT_VERSION: u32 = 1;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    sections: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a section. Names must be non-empty, ASCII and unique.
    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if name.is_empty() || !name.is_ascii() {
            return Err(bad(format!("section name {name:?} must be non-empty ASCII")));
        }
        if self.get(name).is_some() {
            return Err(bad(format!("duplicate section {name:?}")));
        }
        self.sections.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn insert_scalar(&mut self, name: &str, v: f64) -> Result<()> {
        self.insert(name, Tensor::from_vec(&[1], vec![v])?)
    }

    /// Stores a `u64` exactly as its high and low 32-bit halves.
    pub fn insert_u64(&mut self, name: &str, v: u64) -> Result<()> {
        let halves = vec![(v >> 32) as f64, (v & 0xffff_ffff) as f64];
        self.insert(name, Tensor::from_vec(&[2], halves)?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.sections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sections.is_empty()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, t) in &self.sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(Error::Truncated {
                expected: 20,
                found: bytes.len(),
            });
        }
        if bytes[..4] != CHECKPOINT_MAGIC {
            let found = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
            return Err(Error::BadMagic {
                expected: u32::from_be_bytes(CHECKPOINT_MAGIC),
                found,
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        let computed = fnv1a64(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Cursor { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let count = r.u32()? as usize;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| bad("section name is not ASCII"))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| bad("extent overflows usize"))?);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .and_then(|n| n.checked_mul(8).map(|_| n))
                .ok_or_else(|| bad(format!("section {name:?} is too large")))?;
            let payload = r.take(len * 8)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::from_vec(&shape, data)
                .map_err(|e| bad(format!("section {name:?}: {e}")))?;
            ckpt.insert(&name, t)?;
        }
        if r.pos != body.len() {
            return Err(bad(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(ckpt)
    }

    /// A reader that remembers which sections were consumed.
    pub fn reader(&self) -> CheckpointReader<'_> {
        CheckpointReader {
            ckpt: self,
            used: RefCell::new(BTreeSet::new()),
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(
            Error::Truncated {
                expected: self.pos.saturating_add(n),
                found: self.bytes.len(),
            },
        )?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub struct CheckpointReader<'a> {
    ckpt: &'a Checkpoint,
    used: RefCell<BTreeSet<String>>,
}

impl CheckpointReader<'_> {
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let t = self
            .ckpt
            .get(name)
            .ok_or_else(|| bad(format!("missing section {name:?}")))?;
        self.used.borrow_mut().insert(name.to_string());
        Ok(t.clone())
    }

    pub fn tensor_shaped(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self.tensor(name)?;
        if t.shape() != shape {
            return Err(bad(format!(
                "section {name:?} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        Ok(self.tensor_shaped(name, &[1])?.data()[0])
    }

    pub fn usize(&self, name: &str) -> Result<usize> {
        let v = self.scalar(name)?;
        if v < 0.0 || v.fract() != 0.0 || v > (1u64 << 53) as f64 {
            return Err(bad(format!("section {name:?} is not a count: {v}")));
        }
        Ok(v as usize)
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        let t = self.tensor_shaped(name, &[2])?;
        let half = |v: f64| {
            if (0.0..=u32::MAX as f64).contains(&v) && v.fract() == 0.0 {
                Ok(v as u64)
            } else {
                Err(bad(format!("section {name:?} is not a u64")))
            }
        };
        Ok(half(t.data()[0])? << 32 | half(t.data()[1])?)
    }

    /// Sections never read; each is logged as a warning and ignored.
    pub fn finish(self) -> Vec<String> {
        let used = self.used.into_inner();
        let unknown: Vec<String> = self
            .ckpt
            .names()
            .filter(|n| !used.contains(*n))
            .map(str::to_string)
            .collect();
        for name in &unknown {
            log::warn!("skipping unknown checkpoint section {name:?}");
        }
        unknown
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    super::write_file(path, &ckpt.encode())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use capspoe_core::SeededRng;

    fn sample() -> Checkpoint {
        let mut rng = SeededRng::new(8);
        let mut c = Checkpoint::new();
        let t = capspoe_core::rng::gaussian_sample(&mut rng, &[3, 2, 4]).unwrap();
        c.insert("weights", t).unwrap();
        c.insert_scalar("lr", 0.05).unwrap();
        c.insert_u64("rng", u64::MAX - 12345).unwrap();
        c.insert("odd", Tensor::from_vec(&[2], vec![-0.0, f64::MIN_POSITIVE]).unwrap()).unwrap();
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        assert_eq!(back.get("odd").unwrap().data()[0].to_bits(), (-0.0f64).to_bits());
        let r = back.reader();
        assert_eq!(r.u64("rng").unwrap(), u64::MAX - 12345);
        assert_eq!(r.scalar("lr").unwrap(), 0.05);
        assert_eq!(r.finish(), vec!["weights".to_string(), "odd".to_string()]);
    }

    #[test]
    fn header_layout() {
        let mut c = Checkpoint::new();
        c.insert_scalar("a", 1.0).unwrap();
        let b = c.encode();
        assert_eq!(&b[..4], b"CPOE");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(b[16], b'a');
        assert_eq!(&b[17..21], &1u32.to_le_bytes());
        assert_eq!(&b[21..29], &1u64.to_le_bytes());
        assert_eq!(&b[29..37], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 37 + 8);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().encode();
        for k in [5, 20, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[k] ^= 0x10;
            assert!(matches!(Checkpoint::decode(&bad), Err(Error::Checksum { .. })), "byte {k}");
        }
        assert!(matches!(Checkpoint::decode(&bytes[..10]), Err(Error::Truncated { .. })));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(Checkpoint::decode(&wrong), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = sample().encode();
        bytes[4] = 2;
        let n = bytes.len();
        let sum = fnv1a64(&bytes[..n - 8]);
        bytes[n - 8..].copy_from_slice(&sum.to_le_bytes());
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::Version { found: 2, .. })));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn names_are_checked() {
        let mut c = Checkpoint::new();
        c.insert_scalar("x", 1.0).unwrap();
        assert!(c.insert_scalar("x", 2.0).is_err());
        assert!(c.insert_scalar("é", 2.0).is_err());
        assert!(c.insert_scalar("", 2.0).is_err());
    }
}
