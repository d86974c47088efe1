//! Binary container for named f64/f32 arrays plus one JSON metadata
//! document. Used for checkpoints and for serialized backbone weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "GLARCH01" (8 bytes)
//! u64 meta_len, meta JSON bytes
//! u64 entry_count
//! per entry:
//!   u32 name_len, name bytes (UTF-8)
//!   u8  dtype (1 = f64, 2 = f32)
//!   u8  ndim
//!   ndim x u64 dims
//!   payload (row-major, little-endian)
//! ```
//!
//! Entries are written in sorted name order, so archives with equal
//! content are byte-identical. f64 entries round-trip bit-exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};

use crate::error::{GlocalError, Result};

const MAGIC: &[u8; 8] = b"GLARCH01";

/// On-disk element type of one entry. Arrays are always exposed as f64;
/// `F32` trades precision for size (useful for bulky score maps).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

/// An in-memory collection of named arrays plus a JSON metadata document.
#[derive(Clone, Debug, Default)]
pub struct NamedArchive {
    meta: serde_json::Value,
    entries: BTreeMap<String, (Dtype, ArrayD<f64>)>,
}

impl NamedArchive {
    pub fn new() -> Self {
        Self {
            meta: serde_json::Value::Null,
            entries: BTreeMap::new(),
        }
    }

    pub fn set_meta(&mut self, meta: serde_json::Value) {
        self.meta = meta;
    }

    pub fn meta(&self) -> &serde_json::Value {
        &self.meta
    }

    /// Insert an array stored at full precision.
    pub fn insert<D: ndarray::Dimension>(&mut self, name: &str, array: ndarray::Array<f64, D>) {
        self.entries
            .insert(name.to_string(), (Dtype::F64, array.into_dyn()));
    }

    /// Insert an array stored at f32 precision (lossy for wide values).
    pub fn insert_f32<D: ndarray::Dimension>(
        &mut self,
        name: &str,
        array: ndarray::Array<f64, D>,
    ) {
        self.entries
            .insert(name.to_string(), (Dtype::F32, array.into_dyn()));
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.entries.get(name).map(|(_, a)| a)
    }

    /// Fetch an entry or fail with [`GlocalError::MissingEntry`].
    pub fn require(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.get(name)
            .ok_or_else(|| GlocalError::MissingEntry(name.to_string()))
    }

    /// Fetch a 2-d entry, validating its exact shape.
    pub fn require_2d(&self, name: &str, shape: (usize, usize)) -> Result<ndarray::Array2<f64>> {
        let arr = self.require(name)?;
        let found = arr.shape().to_vec();
        if found != [shape.0, shape.1] {
            return Err(GlocalError::ShapeMismatch {
                name: name.to_string(),
                expected: vec![shape.0, shape.1],
                found,
            });
        }
        Ok(arr
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("shape checked above"))
    }

    /// Fetch a 1-d entry, validating its exact length.
    pub fn require_1d(&self, name: &str, len: usize) -> Result<ndarray::Array1<f64>> {
        let arr = self.require(name)?;
        let found = arr.shape().to_vec();
        if found != [len] {
            return Err(GlocalError::ShapeMismatch {
                name: name.to_string(),
                expected: vec![len],
                found,
            });
        }
        Ok(arr
            .clone()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("shape checked above"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        let meta_bytes = serde_json::to_vec(&self.meta)?;
        buf.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
        buf.extend_from_slice(&meta_bytes);
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, (dtype, array)) in &self.entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(match dtype {
                Dtype::F64 => 1,
                Dtype::F32 => 2,
            });
            buf.push(array.ndim() as u8);
            for &dim in array.shape() {
                buf.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            match dtype {
                Dtype::F64 => {
                    for &v in array.iter() {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Dtype::F32 => {
                    for &v in array.iter() {
                        buf.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cursor = Cursor {
            bytes: &bytes,
            pos: 0,
            path: path.to_path_buf(),
        };

        let magic = cursor.take(8)?;
        if magic != MAGIC {
            return Err(cursor.format_error("bad magic"));
        }
        let meta_len = cursor.read_u64()? as usize;
        let meta_bytes = cursor.take(meta_len)?.to_vec();
        let meta: serde_json::Value = serde_json::from_slice(&meta_bytes)?;
        let entry_count = cursor.read_u64()? as usize;

        let mut entries = BTreeMap::new();
        for _ in 0..entry_count {
            let name_len = cursor.read_u32()? as usize;
            let name = String::from_utf8(cursor.take(name_len)?.to_vec())
                .map_err(|_| cursor.format_error("entry name is not UTF-8"))?;
            let dtype = match cursor.read_u8()? {
                1 => Dtype::F64,
                2 => Dtype::F32,
                other => {
                    return Err(cursor.format_error(&format!("unknown dtype tag {other}")));
                }
            };
            let ndim = cursor.read_u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(cursor.read_u64()? as usize);
            }
            let count: usize = dims.iter().product();
            let data = match dtype {
                Dtype::F64 => {
                    let raw = cursor.take(count * 8)?;
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                        .collect::<Vec<f64>>()
                }
                Dtype::F32 => {
                    let raw = cursor.take(count * 4)?;
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
                        .collect::<Vec<f64>>()
                }
            };
            let array = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| cursor.format_error(&format!("bad entry shape: {e}")))?;
            entries.insert(name, (dtype, array));
        }
        if cursor.pos != bytes.len() {
            return Err(cursor.format_error("trailing bytes after final entry"));
        }
        Ok(Self { meta, entries })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Cursor<'a> {
    fn format_error(&self, detail: &str) -> GlocalError {
        GlocalError::ArchiveFormat {
            path: self.path.clone(),
            detail: format!("{detail} (offset {})", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.format_error("unexpected end of file"));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn read_u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn read_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn read_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.gar");

        let mut archive = NamedArchive::new();
        archive.set_meta(serde_json::json!({"kind": "test", "n": 3}));
        archive.insert("alpha", arr2(&[[1.0f64, -2.5], [3.25, f64::MIN_POSITIVE]]));
        archive.insert("beta", arr1(&[0.1f64, 0.2, 0.3]));
        archive.save(&path).unwrap();

        let loaded = NamedArchive::load(&path).unwrap();
        assert_eq!(loaded.meta()["kind"], "test");
        assert_eq!(loaded.get("alpha").unwrap(), archive.get("alpha").unwrap());
        assert_eq!(
            loaded.get("alpha").unwrap().as_slice().unwrap()[3].to_bits(),
            f64::MIN_POSITIVE.to_bits()
        );
        assert_eq!(loaded.get("beta").unwrap(), archive.get("beta").unwrap());
    }

    #[test]
    fn equal_content_produces_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("one.gar");
        let p2 = dir.path().join("two.gar");

        let mut a = NamedArchive::new();
        a.insert("z", arr1(&[1.0f64]));
        a.insert("a", arr1(&[2.0f64]));
        a.save(&p1).unwrap();

        let mut b = NamedArchive::new();
        b.insert("a", arr1(&[2.0f64]));
        b.insert("z", arr1(&[1.0f64]));
        b.save(&p2).unwrap();

        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn missing_entry_is_reported_by_name() {
        let archive = NamedArchive::new();
        let err = archive.require("prompt.global.normal").unwrap_err();
        assert!(matches!(err, GlocalError::MissingEntry(name) if name == "prompt.global.normal"));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut archive = NamedArchive::new();
        archive.insert("w", arr2(&[[1.0f64, 2.0]]));
        let err = archive.require_2d("w", (2, 2)).unwrap_err();
        match err {
            GlocalError::ShapeMismatch {
                name,
                expected,
                found,
            } => {
                assert_eq!(name, "w");
                assert_eq!(expected, vec![2, 2]);
                assert_eq!(found, vec![1, 2]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.gar");
        let mut archive = NamedArchive::new();
        archive.insert("x", arr1(&[1.0f64, 2.0, 3.0]));
        archive.save(&path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = NamedArchive::load(&path).unwrap_err();
        assert!(matches!(err, GlocalError::ArchiveFormat { .. }));
    }

    #[test]
    fn f32_entries_load_with_reduced_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f32.gar");
        let mut archive = NamedArchive::new();
        archive.insert_f32("m", arr1(&[0.1f64, 1.0, -3.5]));
        archive.save(&path).unwrap();

        let loaded = NamedArchive::load(&path).unwrap();
        let m = loaded.get("m").unwrap();
        assert_eq!(m[[1]], 1.0);
        assert!((m[[0]] - 0.1).abs() < 1e-7);
    }
}
