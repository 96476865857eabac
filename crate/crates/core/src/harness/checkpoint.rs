//! Little-endian archive of named f64 arrays, used for training checkpoints
//! and materialized weights.
//!
//! ```text
//! magic    8 bytes  "NPASARCH"
//! version  u32      1
//! kind     u32      0 = checkpoint, 1 = materialized
//! census   u64      trainable scalars (checkpoint) or weights (materialized)
//! n_meta   u32, then n_meta × (key: str, value: str)
//! n_arrays u32, then n_arrays × (name: str, ndim: u32, dims: ndim × u64, data: Π dims × f64)
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"NPASARCH";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchiveKind {
    Checkpoint,
    Materialized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub kind: ArchiveKind,
    pub census: u64,
    pub meta: Vec<(String, String)>,
    pub arrays: Vec<(String, Tensor)>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} reading {what}", self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8")))
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let at = self.at;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} at byte {at} is not UTF-8")))
    }
}

impl Archive {
    pub fn new(kind: ArchiveKind, census: u64) -> Self {
        Archive {
            kind,
            census,
            meta: Vec::new(),
            arrays: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let kind: u32 = match self.kind {
            ArchiveKind::Checkpoint => 0,
            ArchiveKind::Materialized => 1,
        };
        out.extend_from_slice(&kind.to_le_bytes());
        out.extend_from_slice(&self.census.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not an archive".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = match r.u32("kind")? {
            0 => ArchiveKind::Checkpoint,
            1 => ArchiveKind::Materialized,
            k => return Err(Error::Checkpoint(format!("unknown archive kind {k}"))),
        };
        let mut a = Archive::new(kind, r.u64("census")?);
        for _ in 0..r.u32("meta count")? {
            let k = r.str("meta key")?;
            let v = r.str("meta value")?;
            a.meta.push((k, v));
        }
        for _ in 0..r.u32("array count")? {
            let name = r.str("array name")?;
            let ndim = r.u32("ndim")? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64("dim").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.saturating_mul(8), &name)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::Checkpoint(format!("array '{name}': {e}")))?;
            a.arrays.push((name, t));
        }
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last array",
                bytes.len() - r.at
            )));
        }
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut a = Archive::new(ArchiveKind::Checkpoint, 7);
        a.meta.push(("config".into(), "x = 1\n".into()));
        a.arrays.push(("theta.0".into(), Tensor::vector(vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300])));
        a.arrays.push(("w".into(), Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap()));
        let b = Archive::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(a, b);
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.arrays[0].1), bits(&b.arrays[0].1));
        assert_eq!(b.meta("config"), Some("x = 1\n"));
    }

    #[test]
    fn rejects_damage() {
        let mut a = Archive::new(ArchiveKind::Materialized, 2);
        a.arrays.push(("w".into(), Tensor::vector(vec![1.0, 2.0])));
        let bytes = a.to_bytes();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Archive::from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Archive::from_bytes(&magic).is_err());
        let mut version = bytes;
        version[8] = 9;
        assert!(Archive::from_bytes(&version).is_err());
    }

    #[test]
    fn size_is_header_plus_payload() {
        let mut a = Archive::new(ArchiveKind::Materialized, 6);
        a.arrays.push(("ab".into(), Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap()));
        // fixed 24 + meta count 4 + array count 4 + name 4+2 + ndim 4 + dims 16
        assert_eq!(a.to_bytes().len(), 6 * 8 + 24 + 4 + 4 + 6 + 4 + 16);
    }
}
