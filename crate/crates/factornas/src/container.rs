//! The `FNAS` binary container used for checkpoints and trained models.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "FNAS" | u32 version | [u8; 32] config digest | str kind
//! u32 meta count   | (str key, str value)*
//! u32 array count  | (str name, u32 rank, u64 dims*, f64 values*)*
//! [u8; 32] SHA-256 of every preceding byte
//! ```
//!
//! where `str` is a `u32` byte length followed by UTF-8 bytes.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FNAS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub config_digest: [u8; 32],
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<NamedArray>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    src: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n).filter(|&end| end <= self.bytes.len()) {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.src, self.pos as u64, format!("truncated {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let at = self.pos;
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::format(self.src, at as u64, format!("{what} is not UTF-8")))
    }
}

impl Container {
    pub fn new(kind: &str, config_digest: [u8; 32]) -> Self {
        Container { kind: kind.to_string(), config_digest, meta: BTreeMap::new(), arrays: Vec::new() }
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.meta.insert(key.to_string(), value.into());
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: &[f64]) {
        self.arrays.push(NamedArray { name: name.into(), shape: shape.to_vec(), data: data.to_vec() });
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_digest);
        put_str(&mut out, &self.kind);
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            put_str(&mut out, &a.name);
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &a.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn decode(bytes: &[u8], src: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, src };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format(src, 0, "bad magic, expected FNAS"));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::format(src, 4, format!("unsupported format version {version}")));
        }
        if bytes.len() < 32 {
            return Err(Error::format(src, bytes.len() as u64, "truncated checksum"));
        }
        let body = bytes.len() - 32;
        if Sha256::digest(&bytes[..body]).as_slice() != &bytes[body..] {
            return Err(Error::format(src, body as u64, "checksum mismatch"));
        }
        let r = &mut Reader { bytes: &bytes[..body], pos: r.pos, src };
        let config_digest: [u8; 32] = r.take(32, "config digest")?.try_into().expect("32 bytes");
        let kind = r.str("kind")?;
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32("meta count")? {
            let k = r.str("meta key")?;
            let v = r.str("meta value")?;
            meta.insert(k, v);
        }
        let count = r.u32("array count")?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let name = r.str("array name")?;
            let at = r.pos;
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64("dimension")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= (r.bytes.len() - r.pos) / 8)
                .ok_or_else(|| Error::format(src, at as u64, format!("array `{name}` exceeds the file")))?;
            let raw = r.take(n * 8, "array data")?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != body {
            return Err(Error::format(src, r.pos as u64, "unexpected bytes before checksum"));
        }
        Ok(Container { kind, config_digest, meta, arrays })
    }

    pub fn expect_kind(&self, kind: &str, src: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Usage(format!("{src} holds a `{}`, expected a `{kind}`", self.kind)));
        }
        Ok(())
    }

    pub fn meta(&self, key: &str, src: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| Error::Usage(format!("{src} lacks `{key}`")))
    }

    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }
}
