//! Binary container for named f32 tensors plus a JSON metadata header.
//!
//! Layout: 8-byte magic, u32 format version, u64 header length, the JSON
//! header, then every blob as little-endian f32 at its recorded offset.
//! Files are written to a sibling temp file and renamed into place.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use edgebridge_tensor::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EDGEBRDG";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    meta: serde_json::Value,
    blobs: Vec<BlobEntry>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Store {
    pub meta: serde_json::Value,
    blobs: Vec<(String, Tensor<f32>)>,
}

impl Store {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, blobs: Vec::new() }
    }

    pub fn put(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        let name = name.into();
        assert!(self.get(&name).is_none(), "duplicate blob {name}");
        self.blobs.push((name, t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blobs.iter().map(|(n, _)| n.as_str())
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing blob `{name}`")))
    }

    pub fn put_params(&mut self, prefix: &str, ps: &ParamSet<f32>) {
        for (n, t) in ps.names().iter().zip(ps.tensors()) {
            self.put(format!("{prefix}.{n}"), t.clone());
        }
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.names().any(|n| n.starts_with(&p))
    }

    /// Reads tensors named like `template` under `prefix`, checking shapes.
    pub fn params(&self, prefix: &str, template: &ParamSet<f32>) -> Result<ParamSet<f32>> {
        let mut out = ParamSet::new();
        for (n, t) in template.names().iter().zip(template.tensors()) {
            let key = format!("{prefix}.{n}");
            let got = self.require(&key)?;
            if got.shape() != t.shape() {
                return Err(Error::CorruptCheckpoint(format!(
                    "blob `{key}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
            out.push(n.clone(), got.clone());
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let blobs = self
            .blobs
            .iter()
            .map(|(name, t)| {
                let e = BlobEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.numel() as u64;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            dtype: "f32".into(),
            meta: self.meta.clone(),
            blobs,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(FORMAT_VERSION).expect("vec write");
        out.write_u64::<LittleEndian>(header.len() as u64).expect("vec write");
        out.extend_from_slice(&header);
        for (_, t) in &self.blobs {
            for &v in t.data() {
                out.write_f32::<LittleEndian>(v).expect("vec write");
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| Error::CorruptCheckpoint(what.to_string());
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic).map_err(|_| corrupt("truncated magic"))?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = cur.read_u32::<LittleEndian>().map_err(|_| corrupt("truncated version"))?;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let hlen = cur.read_u64::<LittleEndian>().map_err(|_| corrupt("truncated header length"))? as usize;
        let start = cur.position() as usize;
        let hbytes = bytes
            .get(start..start.checked_add(hlen).ok_or_else(|| corrupt("header length overflow"))?)
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(hbytes).map_err(|e| corrupt(&format!("header: {e}")))?;
        if header.dtype != "f32" {
            return Err(corrupt(&format!("unsupported dtype {}", header.dtype)));
        }
        let data = &bytes[start + hlen..];
        let mut blobs = Vec::with_capacity(header.blobs.len());
        for b in header.blobs {
            let n: usize = b.shape.iter().product();
            let lo = b.offset as usize;
            let raw = lo
                .checked_add(4 * n)
                .and_then(|hi| data.get(lo..hi))
                .ok_or_else(|| corrupt(&format!("blob `{}` runs past end of file", b.name)))?;
            let mut rd = Cursor::new(raw);
            let mut v = vec![0f32; n];
            rd.read_f32_into::<LittleEndian>(&mut v).map_err(|_| corrupt("blob read"))?;
            blobs.push((b.name, Tensor::new(&b.shape, v)));
        }
        Ok(Self {
            meta: header.meta,
            blobs,
        })
    }

    /// Atomic write: the destination is either the old file or the complete new one.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Store {
        let mut s = Store::new(serde_json::json!({"step": 3}));
        s.put("a.w", Tensor::new(&[2, 2], vec![1.0, -2.5, f32::MIN_POSITIVE, 7.0]));
        s.put("b", Tensor::new(&[3], vec![0.1, 0.2, 0.3]));
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        assert_eq!(Store::from_bytes(&s.to_bytes().unwrap()).unwrap(), s);
    }

    #[test]
    fn version_mismatch_names_both() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        match Store::from_bytes(&bytes) {
            Err(Error::CheckpointVersion { found: 7, expected: FORMAT_VERSION }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [4, 15, 30, bytes.len() - 1] {
            assert!(matches!(Store::from_bytes(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))), "cut {cut}");
        }
    }

    #[test]
    fn save_replaces_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        sample().save(&p).unwrap();
        assert_eq!(Store::load(&p).unwrap(), sample());
        assert!(!p.with_extension("tmp").exists());
    }
}
