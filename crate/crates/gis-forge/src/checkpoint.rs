//! Single-file archive for checkpoints and resumable training state.
//!
//! Layout: an 8-byte magic, a little-endian u64 header length, a JSON
//! header (version, kind, config echo, metadata, array directory), then the
//! raw array blobs. Inference checkpoints store parameters as little-endian
//! f32; training state stores f64 plus optimizer moments so resumption is
//! bit-identical. Writes go through a temp file and an atomic rename.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::GisError;

const MAGIC: &[u8; 8] = b"GISARCH1";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: String,
    config: serde_json::Value,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

/// Write an archive atomically.
pub fn write_archive(
    path: &Path,
    kind: &str,
    config: &serde_json::Value,
    meta: &serde_json::Value,
    arrays: &[(String, Dtype, &ArrayD<f64>)],
) -> Result<(), GisError> {
    let mut entries = Vec::with_capacity(arrays.len());
    let mut blobs: Vec<u8> = Vec::new();
    for (name, dtype, data) in arrays {
        let offset = blobs.len() as u64;
        match dtype {
            Dtype::F32 => {
                for &v in data.iter() {
                    blobs.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            Dtype::F64 => {
                for &v in data.iter() {
                    blobs.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        entries.push(ArrayEntry {
            name: name.clone(),
            dtype: *dtype,
            shape: data.shape().to_vec(),
            offset,
            byte_len: blobs.len() as u64 - offset,
        });
    }
    let header = Header {
        version: ARCHIVE_VERSION,
        kind: kind.to_string(),
        config: config.clone(),
        meta: meta.clone(),
        arrays: entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| GisError::io(&tmp, e))?;
        f.write_all(MAGIC).map_err(|e| GisError::io(&tmp, e))?;
        f.write_all(&(header_bytes.len() as u64).to_le_bytes()).map_err(|e| GisError::io(&tmp, e))?;
        f.write_all(&header_bytes).map_err(|e| GisError::io(&tmp, e))?;
        f.write_all(&blobs).map_err(|e| GisError::io(&tmp, e))?;
        f.sync_all().map_err(|e| GisError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| GisError::io(path, e))
}

/// Parsed archive with arrays widened to f64.
pub struct Archive {
    pub kind: String,
    pub version: u32,
    pub config: serde_json::Value,
    pub meta: serde_json::Value,
    arrays: Vec<(String, ArrayD<f64>)>,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn arrays(&self) -> &[(String, ArrayD<f64>)] {
        &self.arrays
    }
}

pub fn read_archive(path: &Path) -> Result<Archive, GisError> {
    let bytes = fs::read(path).map_err(|e| GisError::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(GisError::Checkpoint(format!("{} is not an archive", path.display())));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(GisError::Checkpoint("truncated archive header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])?;
    if header.version != ARCHIVE_VERSION {
        return Err(GisError::Checkpoint(format!("unsupported archive version {}", header.version)));
    }
    let blob_base = 16 + header_len;
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for e in &header.arrays {
        let start = blob_base + e.offset as usize;
        let end = start + e.byte_len as usize;
        if end > bytes.len() {
            return Err(GisError::Checkpoint(format!("array {} out of bounds", e.name)));
        }
        let blob = &bytes[start..end];
        let n: usize = e.shape.iter().product();
        let data: Vec<f64> = match e.dtype {
            Dtype::F32 => {
                if blob.len() != n * 4 {
                    return Err(GisError::Checkpoint(format!("array {} size mismatch", e.name)));
                }
                blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
            }
            Dtype::F64 => {
                if blob.len() != n * 8 {
                    return Err(GisError::Checkpoint(format!("array {} size mismatch", e.name)));
                }
                blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
            }
        };
        let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), data)
            .map_err(|e2| GisError::Checkpoint(format!("array {}: {e2}", e.name)))?;
        arrays.push((e.name.clone(), arr));
    }
    Ok(Archive { kind: header.kind, version: header.version, config: header.config, meta: header.meta, arrays })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_both_dtypes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        let x = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, -0.5, 0.25, 3.0, 1e-7, 9.0]).unwrap();
        let y = ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        write_archive(
            &path,
            "checkpoint",
            &serde_json::json!({"k": 3}),
            &serde_json::json!({"step": 7}),
            &[("x".into(), Dtype::F64, &x), ("y".into(), Dtype::F32, &y)],
        )
        .unwrap();
        let a = read_archive(&path).unwrap();
        assert_eq!(a.kind, "checkpoint");
        assert_eq!(a.meta["step"], 7);
        assert_eq!(a.get("x").unwrap(), &x);
        // f32 storage loses precision but round-trips through the cast.
        let y2 = a.get("y").unwrap();
        for (a, b) in y.iter().zip(y2.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"not an archive at all").unwrap();
        assert!(read_archive(&path).is_err());
    }
}
