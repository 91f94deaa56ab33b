//! Binary feature codec.
//!
//! Layout, all little-endian: `b"EVTF"`, `u32` version (1), `u32` rows, `u32` cols,
//! then `rows · cols` `f32` values in row-major order.

use std::path::Path;

use crate::diff::Matrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EVTF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

/// Row-major `f32` matrix as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "FeatureMatrix::new",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("FeatureMatrix::from_rows", "ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    /// Narrowing conversion from the compute representation.
    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            data: m.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::new(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("shape invariant")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, so `-0.0 != 0.0` and identical NaN payloads compare equal.
    pub fn bits_eq(&self, other: &FeatureMatrix) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub fn encoded_len(rows: usize, cols: usize) -> usize {
    HEADER_LEN + rows * cols * 4
}

pub fn encode_features(m: &FeatureMatrix) -> Result<Vec<u8>> {
    if !m.is_finite() {
        return Err(Error::Numeric("feature matrix contains NaN or Inf".into()));
    }
    let rows = u32::try_from(m.rows).map_err(|_| Error::Argument("too many rows".into()))?;
    let cols = u32::try_from(m.cols).map_err(|_| Error::Argument("too many columns".into()))?;
    let mut out = Vec::with_capacity(encoded_len(m.rows, m.cols));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Decodes one matrix. `bytes` must hold exactly one encoded matrix.
pub fn decode_features(bytes: &[u8]) -> Result<FeatureMatrix> {
    let (m, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::format(
            "payload",
            format!("{used} bytes"),
            format!("{} bytes", bytes.len()),
        ));
    }
    Ok(m)
}

/// Decodes the matrix at the start of `bytes`, returning it and the bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(FeatureMatrix, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            "header",
            format!("{HEADER_LEN} bytes"),
            format!("{} bytes", bytes.len()),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(
            "magic",
            "EVTF",
            String::from_utf8_lossy(&bytes[0..4]),
        ));
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(Error::format("version", VERSION, version));
    }
    let rows = read_u32(bytes, 8) as usize;
    let cols = read_u32(bytes, 12) as usize;
    let need = encoded_len(rows, cols);
    if bytes.len() < need {
        return Err(Error::format(
            "payload",
            format!("{need} bytes for {rows}x{cols}"),
            format!("{} bytes", bytes.len()),
        ));
    }
    let data = bytes[HEADER_LEN..need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((FeatureMatrix { rows, cols, data }, need))
}

pub fn write_features(m: &FeatureMatrix, path: &Path) -> Result<()> {
    let bytes = encode_features(m)?;
    std::fs::write(path, bytes).map_err(|e| Error::ingest(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::ingest(path, e))?;
    decode_features(&bytes)
}
