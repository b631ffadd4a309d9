//! Dense row-major f32 matrices plus a tiny binary tensor format.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "PQTN"
//! 4       4     dtype: 1 = f32, 2 = f16
//! 8       4     rows (u32)
//! 12      4     cols (u32)
//! 16      ...   payload, row-major, dtype-sized little-endian scalars
//! ```
//!
//! f16 files are a storage option only; matrices are f32 in memory and
//! loading an f16 file widens each scalar back to f32.

use std::io::{Read, Write};
use std::path::Path;

use half::f16;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng;

const MAGIC: &[u8; 4] = b"PQTN";

/// Scalar width used on disk by [`save_tensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F16,
}

impl DType {
    fn code(self) -> u32 {
        match self {
            DType::F32 => 1,
            DType::F16 => 2,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            1 => Ok(DType::F32),
            2 => Ok(DType::F16),
            other => Err(Error::format(format!("unknown tensor dtype code {other}"))),
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f16" => Ok(DType::F16),
            other => Err(Error::invalid_arg(format!("unknown dtype {other:?}, expected f32 or f16"))),
        }
    }
}

/// A dense n x d matrix of f32 embeddings, one row per vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    /// Wraps a row-major buffer.  Dimensions must be positive, the buffer
    /// length must be `rows * cols`, and every entry must be finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid_arg(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::invalid_arg(format!(
                "buffer length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid_arg(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(EmbeddingMatrix { rows, cols, data })
    }

    /// n x d matrix of iid standard normal entries, reproducible from `seed`.
    pub fn generate_gaussian(rows: usize, cols: usize, seed: u64) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid_arg(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        let mut rng = rng::prng(seed);
        let data = (0..rows * cols)
            .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
            .collect();
        Ok(EmbeddingMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.cols)
    }
}

/// Writes `matrix` to `path` in the PQTN layout described in the module docs.
pub fn save_tensor(matrix: &EmbeddingMatrix, path: impl AsRef<Path>, dtype: DType) -> Result<()> {
    let mut out = Vec::with_capacity(16 + matrix.data.len() * dtype.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&dtype.code().to_le_bytes());
    let rows = u32::try_from(matrix.rows)
        .map_err(|_| Error::invalid_arg("row count exceeds u32 range"))?;
    let cols = u32::try_from(matrix.cols)
        .map_err(|_| Error::invalid_arg("column count exceeds u32 range"))?;
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    match dtype {
        DType::F32 => {
            for &v in &matrix.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        DType::F16 => {
            for &v in &matrix.data {
                out.extend_from_slice(&f16::from_f32(v).to_le_bytes());
            }
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Reads a PQTN file back into memory, validating layout and payload.
pub fn load_tensor(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(Error::format(format!("tensor file truncated at {} bytes", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format("bad tensor magic, expected \"PQTN\""));
    }
    let dtype = DType::from_code(u32::from_le_bytes(bytes[4..8].try_into().unwrap()))?;
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let payload = &bytes[16..];
    let expect = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(dtype.size()))
        .ok_or_else(|| Error::format("tensor shape overflows"))?;
    if payload.len() != expect {
        return Err(Error::format(format!(
            "payload is {} bytes, expected {expect} for {rows}x{cols} {dtype:?}",
            payload.len()
        )));
    }
    let data: Vec<f32> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::F16 => payload
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes(c.try_into().unwrap()).to_f32())
            .collect(),
    };
    EmbeddingMatrix::new(rows, cols, data)
        .map_err(|e| Error::format(format!("invalid tensor payload: {e}")))
}
