//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//! - magic `GZMO` (4 bytes)
//! - format version, u32
//! - config snapshot: u64 byte length + UTF-8 JSON
//! - parameter blocks until EOF, each:
//!   u64 name length + UTF-8 name, u64 rows, u64 cols,
//!   rows*cols IEEE-754 f64 values

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{GzslError, Result};
use crate::numerics::matrix::Matrix;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GZMO";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    /// JSON snapshot of the run configuration that produced the blocks.
    pub config_json: String,
    /// Named parameter blocks, in serialization order.
    pub blocks: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn new(config_json: String, blocks: Vec<(String, Matrix)>) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_json,
            blocks,
        }
    }

    pub fn block_map(&self) -> BTreeMap<&str, &Matrix> {
        self.blocks
            .iter()
            .map(|(name, m)| (name.as_str(), m))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(&CHECKPOINT_MAGIC);
        buf.extend_from_slice(&self.version.to_le_bytes());
        let config = self.config_json.as_bytes();
        buf.extend_from_slice(&(config.len() as u64).to_le_bytes());
        buf.extend_from_slice(config);
        for (name, matrix) in &self.blocks {
            let name_bytes = name.as_bytes();
            buf.extend_from_slice(&(name_bytes.len() as u64).to_le_bytes());
            buf.extend_from_slice(name_bytes);
            buf.extend_from_slice(&(matrix.rows() as u64).to_le_bytes());
            buf.extend_from_slice(&(matrix.cols() as u64).to_le_bytes());
            for v in matrix.as_slice() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut reader = ByteReader::new(&bytes, path);
        let magic = reader.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(GzslError::Checkpoint(format!(
                "{}: bad magic {magic:?}",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(reader.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(GzslError::Checkpoint(format!(
                "{}: version mismatch: file has {version}, supported {CHECKPOINT_VERSION}",
                path.display()
            )));
        }
        let config_len = reader.take_u64()? as usize;
        let config_json = String::from_utf8(reader.take(config_len)?.to_vec())
            .map_err(|_| reader.err("config snapshot is not UTF-8"))?;
        let mut blocks = Vec::new();
        while !reader.done() {
            let name_len = reader.take_u64()? as usize;
            let name = String::from_utf8(reader.take(name_len)?.to_vec())
                .map_err(|_| reader.err("block name is not UTF-8"))?;
            let rows = reader.take_u64()? as usize;
            let cols = reader.take_u64()? as usize;
            let mut values = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                values.push(f64::from_le_bytes(reader.take(8)?.try_into().unwrap()));
            }
            let matrix = Matrix::from_vec(rows, cols, values)
                .map_err(|e| reader.err(format!("block {name}: {e}")))?;
            blocks.push((name, matrix));
        }
        Ok(Checkpoint {
            version,
            config_json,
            blocks,
        })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: String,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8], path: &Path) -> Self {
        ByteReader {
            bytes,
            offset: 0,
            path: path.display().to_string(),
        }
    }

    fn err(&self, message: impl Into<String>) -> GzslError {
        GzslError::Checkpoint(format!("{}: {}", self.path, message.into()))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(self.err(format!(
                "truncated at byte {} (wanted {n} more)",
                self.offset
            )));
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn take_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.offset == self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        let blocks = vec![
            (
                "a.w".to_string(),
                Matrix::from_vec(2, 3, vec![1.0, -2.5, 3.25, 0.1, 1e-300, -7.75]).unwrap(),
            ),
            ("a.b".to_string(), Matrix::zeros(1, 4)),
        ];
        let ckpt = Checkpoint::new("{\"seed\":42}".to_string(), blocks.clone());
        ckpt.write(&path).unwrap();
        let loaded = Checkpoint::read(&path).unwrap();
        assert_eq!(loaded.version, CHECKPOINT_VERSION);
        assert_eq!(loaded.config_json, "{\"seed\":42}");
        assert_eq!(loaded.blocks.len(), 2);
        for ((n1, m1), (n2, m2)) in blocks.iter().zip(&loaded.blocks) {
            assert_eq!(n1, n2);
            assert_eq!(m1.as_slice(), m2.as_slice());
        }
    }

    #[test]
    fn version_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v9.ckpt");
        let mut ckpt = Checkpoint::new("{}".to_string(), vec![]);
        ckpt.version = 9;
        ckpt.write(&path).unwrap();
        let err = Checkpoint::read(&path).unwrap_err();
        assert!(err.to_string().contains("version mismatch"), "{err}");
    }

    #[test]
    fn truncated_file_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ckpt");
        let ckpt = Checkpoint::new(
            "{}".to_string(),
            vec![("x".to_string(), Matrix::zeros(4, 4))],
        );
        ckpt.write(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(Checkpoint::read(&path).is_err());
    }
}
