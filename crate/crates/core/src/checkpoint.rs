//! Binary container for model weights and training state.
//!
//! Layout (little-endian): the 8-byte magic `RRAECKPT`, a `u32` version, a
//! `u64` manifest length and that many bytes of UTF-8 JSON, a `u64` array
//! count, then per array a `u32` name length, the name, a `u32` rank, `rank`
//! `u64` extents, and the `f64` values in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RRAECKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub manifest: serde_json::Value,
    pub arrays: Vec<(String, Tensor)>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = self.manifest.to_string();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(r.fail("not a checkpoint (bad magic)"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.fail(&format!("unsupported version {version}")));
        }
        let len = r.len("manifest length")?;
        let text = std::str::from_utf8(r.take(len, "manifest")?)
            .map_err(|_| r.fail("manifest is not UTF-8"))?;
        let manifest = serde_json::from_str(text).map_err(|e| r.fail(&format!("manifest: {e}")))?;
        let count = r.len("array count")?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let n = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(n, "array name")?)
                .map_err(|_| r.fail("array name is not UTF-8"))?
                .to_owned();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.len("extent")?);
            }
            let elements = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&e| e.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| r.fail(&format!("array {name} shape {shape:?} exceeds file")))?;
            let raw = r.take(elements * 8, "array data")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| r.fail(&e.to_string()))?;
            arrays.push((name, t));
        }
        if r.remaining() != 0 {
            return Err(r.fail("trailing bytes"));
        }
        Ok(Container { manifest, arrays })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: &str) -> Error {
        Error::Format {
            what: "checkpoint".into(),
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.fail(&format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| self.fail(&format!("{what} overflows")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        Container {
            manifest: serde_json::json!({"format": "test", "n": 2}),
            arrays: vec![
                (
                    "a".into(),
                    Tensor::new(vec![2, 2], vec![1.0, -2.5, f64::MIN_POSITIVE, 1e300]).unwrap(),
                ),
                ("b.c".into(), Tensor::scalar(0.1)),
            ],
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(
            back.array("b.c").unwrap().data()[0].to_bits(),
            0.1f64.to_bits()
        );
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let bytes = sample().to_bytes();
        for cut in 0..bytes.len() {
            let err = Container::from_bytes(&bytes[..cut]).unwrap_err();
            assert_eq!(err.category(), "format", "cut at {cut}");
        }
    }

    #[test]
    fn corrupt_magic_and_trailing_bytes() {
        let mut bytes = sample().to_bytes();
        bytes.push(0);
        assert!(Container::from_bytes(&bytes).is_err());
        bytes.pop();
        bytes[0] = b'X';
        match Container::from_bytes(&bytes).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 8),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn huge_declared_shape_is_rejected_without_allocating() {
        let mut c = sample();
        c.arrays.truncate(1);
        let mut bytes = c.to_bytes();
        // Overwrite the first extent (after name "a" and rank) with u64::MAX.
        let ext = bytes.len() - 4 * 8 - 2 * 8;
        bytes[ext..ext + 8].copy_from_slice(&u64::MAX.to_le_bytes());
        assert_eq!(
            Container::from_bytes(&bytes).unwrap_err().category(),
            "format"
        );
    }
}
