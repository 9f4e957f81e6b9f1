//! Binary container shared by dataset and checkpoint files.
//!
//! Layout: the 8-byte magic `KOOPBIN\0`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then every block's values as little-endian `f64`
//! in row-major order, blocks in header order.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"KOOPBIN\0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    meta: serde_json::Value,
    blocks: Vec<BlockHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub format: String,
    pub meta: serde_json::Value,
    pub blocks: Vec<(String, Array2<f64>)>,
}

impl Container {
    pub fn new(format: impl Into<String>, meta: serde_json::Value) -> Self {
        Container {
            format: format.into(),
            meta,
            blocks: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, data: Array2<f64>) {
        self.blocks.push((name.into(), data));
    }

    pub fn block(&self, name: &str) -> Result<&Array2<f64>> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b)
            .ok_or_else(|| Error::MissingBlock(name.to_string()))
    }

    pub fn take(&mut self, name: &str) -> Result<Array2<f64>> {
        let idx = self
            .blocks
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::MissingBlock(name.to_string()))?;
        Ok(self.blocks.remove(idx).1)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: self.format.clone(),
            meta: self.meta.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|(name, b)| BlockHeader {
                    name: name.clone(),
                    rows: b.nrows(),
                    cols: b.ncols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let n_values: usize = self.blocks.iter().map(|(_, b)| b.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * n_values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, b) in &self.blocks {
            for v in b.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Container {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let mut payload = &body[hlen..];
        let mut blocks = Vec::with_capacity(header.blocks.len());
        for bh in header.blocks {
            let n = bh.rows * bh.cols;
            if payload.len() < 8 * n {
                return Err(bad("truncated payload"));
            }
            let values: Vec<f64> = payload[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            payload = &payload[8 * n..];
            let data = Array2::from_shape_vec((bh.rows, bh.cols), values)
                .map_err(|_| bad("block shape"))?;
            blocks.push((bh.name, data));
        }
        if !payload.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Container {
            format: header.format,
            meta: header.meta,
            blocks,
        })
    }

    /// Writes via a temporary sibling file and a rename.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path, expected_format: &str) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let c = Container::from_bytes(&bytes, path)?;
        if c.format != expected_format {
            return Err(Error::Format {
                expected: expected_format.to_string(),
                found: c.format,
            });
        }
        Ok(c)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_and_format_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let mut c = Container::new("test/v1", serde_json::json!({"k": 1}));
        c.push("a", array![[1.0, 2.0], [3.0, f64::MIN_POSITIVE]]);
        c.push("empty", Array2::zeros((0, 5)));
        c.write(&path).unwrap();
        let back = Container::read(&path, "test/v1").unwrap();
        assert_eq!(back, c);
        assert!(matches!(
            Container::read(&path, "other/v1"),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn rejects_truncation() {
        let mut c = Container::new("t", serde_json::Value::Null);
        c.push("a", array![[1.0, 2.0]]);
        let bytes = c.to_bytes().unwrap();
        let p = Path::new("mem");
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        assert!(Container::from_bytes(&bytes[1..], p).is_err());
    }
}
