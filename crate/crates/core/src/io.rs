//! Matrix file: a two-line text header followed by raw little-endian f32
//! values in row-major order.
//!
//! ```text
//! fracvit-matrix v1
//! <rows> <cols>
//! ```
//!
//! Feature vectors use one row per sample; raw grayscale images use one row
//! per pixel row.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &str = "fracvit-matrix v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Shape(format!("row of width {} among rows of width {cols}", bad.len())));
        }
        Self::new(rows.len(), cols, rows.concat())
    }
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "{} {}", m.rows, m.cols)?;
    for v in &m.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    decode_matrix(&std::fs::read(path)?)
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix> {
    let mut parts = bytes.splitn(3, |&b| b == b'\n');
    let (magic, dims, payload) = (parts.next(), parts.next(), parts.next());
    if magic != Some(MAGIC.as_bytes()) {
        return Err(Error::Parse { line: 1, msg: "not a matrix file".into() });
    }
    let bad_dims = || Error::Parse { line: 2, msg: "expected \"<rows> <cols>\"".into() };
    let dims: Vec<usize> = std::str::from_utf8(dims.unwrap_or_default())
        .map_err(|_| bad_dims())?
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad_dims())?;
    let [rows, cols] = dims[..] else { return Err(bad_dims()) };
    let payload = payload.unwrap_or_default();
    if payload.len() != rows * cols * 4 {
        return Err(Error::Shape(format!(
            "matrix holds {} bytes of data, expected {}",
            payload.len(),
            rows * cols * 4
        )));
    }
    let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Matrix::new(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let m = Matrix::new(2, 3, vec![1.0, -2.5, 3.0, 0.0, f32::MIN_POSITIVE, 7.25]).unwrap();
        write_matrix(&path, &m).unwrap();
        assert_eq!(read_matrix(&path).unwrap(), m);
    }

    #[test]
    fn truncated_data_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        write_matrix(&path, &Matrix::new(2, 2, vec![0.0; 4]).unwrap()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(read_matrix(&path).is_err());
    }
}
