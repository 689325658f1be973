//! The `DPSL0001` tensor container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic   8 bytes  "DPSL0001"
//! dtype   1 byte   0 = f32, 1 = u8
//! rank    1 byte
//! shape   rank x u64
//! payload product(shape) x width(dtype), row-major
//! ```

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DPSL0001";

/// Upper bound on decoded element count, so a corrupt header cannot ask for
/// an absurd allocation before the payload length check runs.
const MAX_ELEMENTS: u64 = 1 << 34;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::U8 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::U8),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    shape: Vec<u64>,
    data: TensorData,
}

impl TensorFile {
    pub fn new(shape: Vec<u64>, data: TensorData) -> Result<Self> {
        if shape.len() > u8::MAX as usize {
            return Err(Error::Format(format!("rank {} too large", shape.len())));
        }
        let count = element_count(&shape)?;
        if count != data.len() as u64 {
            return Err(Error::Format(format!(
                "shape {shape:?} needs {count} elements, payload has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f32(shape: &[usize], values: Vec<f32>) -> Result<Self> {
        Self::new(shape.iter().map(|&d| d as u64).collect(), TensorData::F32(values))
    }

    pub fn from_u8(shape: &[usize], values: Vec<u8>) -> Result<Self> {
        Self::new(shape.iter().map(|&d| d as u64).collect(), TensorData::U8(values))
    }

    /// Matrix of f64 rows stored as f32 `[rows, cols]`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Validation("ragged rows".into()));
        }
        let values = rows.iter().flatten().map(|&v| v as f32).collect();
        Self::from_f32(&[rows.len(), cols], values)
    }

    pub fn shape(&self) -> &[u64] {
        &self.shape
    }

    pub fn dims(&self) -> Vec<usize> {
        self.shape.iter().map(|&d| d as usize).collect()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    /// Values widened to f64 (u8 is returned raw, not normalized).
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    /// Inverse of [`TensorFile::from_rows`] for rank-2 tensors.
    pub fn to_rows(&self) -> Result<Vec<Vec<f64>>> {
        if self.shape.len() != 2 {
            return Err(Error::Format(format!("expected rank 2, got {}", self.shape.len())));
        }
        let cols = self.shape[1] as usize;
        let flat = self.to_f64();
        if cols == 0 {
            return Ok(vec![Vec::new(); self.shape[0] as usize]);
        }
        Ok(flat.chunks(cols).map(<[f64]>::to_vec).collect())
    }

    pub fn encode(&self) -> Vec<u8> {
        let width = self.dtype().width();
        let mut out = Vec::with_capacity(10 + 8 * self.shape.len() + width * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(self.dtype().code());
        out.push(self.shape.len() as u8);
        for d in &self.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 {
            return Err(Error::Format("truncated header".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let dtype = DType::from_code(bytes[8])?;
        let rank = bytes[9] as usize;
        let header_len = 10 + 8 * rank;
        if bytes.len() < header_len {
            return Err(Error::Format("truncated shape".into()));
        }
        let shape: Vec<u64> = bytes[10..header_len]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let count = element_count(&shape)?;
        let payload = &bytes[header_len..];
        let expected = count
            .checked_mul(dtype.width() as u64)
            .ok_or_else(|| Error::Format("payload size overflow".into()))?;
        if payload.len() as u64 != expected {
            return Err(Error::Format(format!(
                "payload is {} bytes, shape {shape:?} needs {expected}",
                payload.len()
            )));
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(payload.to_vec()),
        };
        Ok(Self { shape, data })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }
}

fn element_count(shape: &[u64]) -> Result<u64> {
    let mut count: u64 = 1;
    for &d in shape {
        count = count
            .checked_mul(d)
            .filter(|&c| c <= MAX_ELEMENTS)
            .ok_or_else(|| Error::Format(format!("shape {shape:?} too large")))?;
    }
    Ok(count)
}
