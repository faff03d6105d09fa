//! Portable named-tensor container (`.urw`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic       b"URW1"
//! version     u32            (currently 1)
//! count       u32
//! count x {
//!     name_len  u16
//!     name      [u8; name_len]   UTF-8
//!     rank      u8
//!     dims      [u32; rank]
//!     data      [f32; prod(dims)]
//! }
//! ```
//!
//! Entries are written in sorted-name order and names are unique, so a
//! store has exactly one encoding.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{KinError, Result};

pub const MAGIC: &[u8; 4] = b"URW1";
pub const VERSION: u32 = 1;

/// A named array of any rank.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedArray {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(KinError::Shape(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(NamedArray { dims, data })
    }
}

/// Name-keyed parameter store backed by the container format.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    entries: BTreeMap<String, NamedArray>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: NamedArray) -> Option<NamedArray> {
        self.entries.insert(name.into(), array)
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.entries.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<NamedArray> {
        self.entries.remove(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NamedArray)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.entries.len()).map_err(too_big)?.to_le_bytes());
        for (name, arr) in &self.entries {
            let name_len = u16::try_from(name.len())
                .map_err(|_| KinError::Format(format!("name `{name}` is too long")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(arr.dims.len())
                .map_err(|_| KinError::Format(format!("`{name}` has rank > 255")))?;
            out.push(rank);
            for &d in &arr.dims {
                out.extend_from_slice(&u32::try_from(d).map_err(too_big)?.to_le_bytes());
            }
            out.reserve(arr.data.len() * 4);
            for v in &arr.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(KinError::Format("bad magic, expected URW1".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(KinError::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = BTreeMap::new();
        let mut previous: Option<String> = None;
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| KinError::Format("entry name is not UTF-8".into()))?
                .to_owned();
            if let Some(prev) = &previous {
                if *prev >= name {
                    return Err(KinError::Format(format!(
                        "entries out of order or duplicated at `{name}`"
                    )));
                }
            }
            let rank = r.take(1)?[0] as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| KinError::Format(format!("`{name}` dims overflow")))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| {
                KinError::Format(format!("`{name}` dims overflow"))
            })?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            previous = Some(name.clone());
            entries.insert(name, NamedArray { dims, data });
        }
        if r.pos != bytes.len() {
            return Err(KinError::Format(format!(
                "{} trailing bytes after the last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(WeightStore { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

fn too_big(_: std::num::TryFromIntError) -> KinError {
    KinError::Format("value does not fit in u32".into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| KinError::Format("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut s = WeightStore::new();
        s.insert("b", NamedArray::new(vec![2], vec![1.0, -2.0]).unwrap());
        s.insert("a", NamedArray::new(vec![], vec![0.5]).unwrap());
        let bytes = s.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"URW1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        // first entry is "a": name_len, name, rank 0, one float
        assert_eq!(&bytes[12..14], &1u16.to_le_bytes());
        assert_eq!(bytes[14], b'a');
        assert_eq!(bytes[15], 0);
        assert_eq!(&bytes[16..20], &0.5f32.to_le_bytes());
        // total length derivable from header: 12 + (2+1+1+4) + (2+1+1+4+8)
        assert_eq!(bytes.len(), 12 + 8 + 16);
    }

    #[test]
    fn rejects_corruption() {
        let mut s = WeightStore::new();
        s.insert("w", NamedArray::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let bytes = s.to_bytes().unwrap();
        assert!(WeightStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(WeightStore::from_bytes(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(WeightStore::from_bytes(&bad).is_err());
    }

    #[test]
    fn rejects_unsorted_entries() {
        // hand-build two entries in the wrong order
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"URW1");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        for name in ["z", "a"] {
            bytes.extend_from_slice(&1u16.to_le_bytes());
            bytes.extend_from_slice(name.as_bytes());
            bytes.push(0);
            bytes.extend_from_slice(&1.0f32.to_le_bytes());
        }
        assert!(matches!(
            WeightStore::from_bytes(&bytes),
            Err(KinError::Format(_))
        ));
    }

    proptest! {
        #[test]
        fn bytes_roundtrip(entries in prop::collection::btree_map(
            "[a-z][a-z0-9._]{0,12}",
            prop::collection::vec(-1e3f32..1e3, 0..12),
            0..6,
        )) {
            let mut s = WeightStore::new();
            for (name, data) in entries {
                let dims = vec![data.len()];
                s.insert(name, NamedArray::new(dims, data).unwrap());
            }
            let bytes = s.to_bytes().unwrap();
            let back = WeightStore::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}
