//! "MMEB" embedding exchange files.
//!
//! ```text
//! magic      4 bytes  "MMEB"
//! version    u16      = 1
//! dtype      u16      0 = f32, 1 = bf16
//! rank       u32      >= 1
//! dims       u64 × rank
//! row_ids    u64 × dims[0]
//! payload    Π dims values, little-endian
//! ```

use std::io::{Read, Write};

use super::bf16::{bf16_bits_to_f32, Bf16Rounding};
use super::{Matrix, NumericsError};

pub const MAGIC: &[u8; 4] = b"MMEB";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u16)]
pub enum DType {
    F32 = 0,
    Bf16 = 1,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    Bf16(Vec<u16>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::Bf16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::Bf16(_) => DType::Bf16,
        }
    }

    pub fn value(&self, i: usize) -> f32 {
        match self {
            Payload::F32(v) => v[i],
            Payload::Bf16(v) => bf16_bits_to_f32(v[i]),
        }
    }
}

/// One embedding shard: a tensor whose leading axis is keyed by row ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingFile {
    pub dims: Vec<u64>,
    pub row_ids: Vec<u64>,
    pub payload: Payload,
}

impl EmbeddingFile {
    pub fn new(dims: Vec<u64>, row_ids: Vec<u64>, payload: Payload) -> Result<Self, NumericsError> {
        let f = Self {
            dims,
            row_ids,
            payload,
        };
        f.validate()?;
        Ok(f)
    }

    /// Rank-2 f32 file from a matrix with row ids `0..rows`.
    pub fn from_matrix(m: &Matrix<f32>) -> Self {
        Self {
            dims: vec![m.rows() as u64, m.cols() as u64],
            row_ids: (0..m.rows() as u64).collect(),
            payload: Payload::F32(m.data().to_vec()),
        }
    }

    pub fn from_rows_bf16(
        row_ids: Vec<u64>,
        rows: &[Vec<f32>],
        rounding: Bf16Rounding,
    ) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut bits = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NumericsError::Format("ragged rows".into()));
            }
            bits.extend(super::bf16::encode(r, rounding));
        }
        Self::new(
            vec![rows.len() as u64, cols as u64],
            row_ids,
            Payload::Bf16(bits),
        )
    }

    fn validate(&self) -> Result<(), NumericsError> {
        if self.dims.is_empty() {
            return Err(NumericsError::Format("rank must be >= 1".into()));
        }
        if self.row_ids.len() as u64 != self.dims[0] {
            return Err(NumericsError::Format(format!(
                "{} row ids for leading dimension {}",
                self.row_ids.len(),
                self.dims[0]
            )));
        }
        let n = self
            .dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| NumericsError::Format("dims overflow".into()))?;
        if n != self.payload.len() as u64 {
            return Err(NumericsError::Format(format!(
                "dims {:?} describe {n} values, payload has {}",
                self.dims,
                self.payload.len()
            )));
        }
        Ok(())
    }

    /// Width of one row (product of trailing dims).
    pub fn row_width(&self) -> usize {
        self.dims[1..].iter().product::<u64>() as usize
    }

    pub fn row(&self, index: usize) -> Vec<f32> {
        let w = self.row_width();
        (index * w..(index + 1) * w)
            .map(|i| self.payload.value(i))
            .collect()
    }

    pub fn to_matrix(&self) -> Result<Matrix<f32>, NumericsError> {
        if self.dims.len() != 2 {
            return Err(NumericsError::Format(format!(
                "expected rank 2, got {}",
                self.dims.len()
            )));
        }
        let data = (0..self.payload.len())
            .map(|i| self.payload.value(i))
            .collect();
        Matrix::new(self.dims[0] as usize, self.dims[1] as usize, data)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), NumericsError> {
        self.validate()?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.payload.dtype() as u16).to_le_bytes())?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for d in &self.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        for id in &self.row_ids {
            w.write_all(&id.to_le_bytes())?;
        }
        match &self.payload {
            Payload::F32(v) => {
                let mut buf = Vec::with_capacity(v.len() * 4);
                for x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
            Payload::Bf16(v) => w.write_all(&super::bf16::bits_to_le_bytes(v))?,
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, NumericsError> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, NumericsError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NumericsError::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u16(&mut r)?;
        if version != VERSION {
            return Err(NumericsError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let dtype = match read_u16(&mut r)? {
            0 => DType::F32,
            1 => DType::Bf16,
            t => return Err(NumericsError::Format(format!("unknown dtype tag {t}"))),
        };
        let rank = read_u32(&mut r)? as usize;
        if rank == 0 || rank > 8 {
            return Err(NumericsError::Format(format!("unsupported rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| read_u64(&mut r))
            .collect::<Result<Vec<_>, _>>()?;
        let n = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| NumericsError::Format("dims overflow".into()))? as usize;
        let mut ids = vec![0u8; dims[0] as usize * 8];
        r.read_exact(&mut ids)?;
        let row_ids = ids
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let payload = match dtype {
            DType::F32 => {
                let mut buf = vec![0u8; n * 4];
                r.read_exact(&mut buf)?;
                Payload::F32(
                    buf.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            DType::Bf16 => {
                let mut buf = vec![0u8; n * 2];
                r.read_exact(&mut buf)?;
                Payload::Bf16(super::bf16::bits_from_le_bytes(&buf)?)
            }
        };
        Self::new(dims, row_ids, payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NumericsError> {
        Self::read_from(bytes)
    }
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, NumericsError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NumericsError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, NumericsError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let f = EmbeddingFile::new(vec![2, 3], vec![7, 9], Payload::F32(vec![0.0; 6])).unwrap();
        let bytes = f.to_bytes().unwrap();
        assert_eq!(&bytes[0..4], b"MMEB");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..8], &[0, 0]);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(bytes[28..36].try_into().unwrap()), 7);
        assert_eq!(bytes.len(), 44 + 6 * 4);
        assert_eq!(EmbeddingFile::from_bytes(&bytes).unwrap(), f);
    }

    #[test]
    fn bf16_rows_roundtrip() {
        let rows = vec![vec![0.6, 0.8], vec![1.0, 0.0]];
        let f =
            EmbeddingFile::from_rows_bf16(vec![1, 2], &rows, Bf16Rounding::NearestEven).unwrap();
        let back = EmbeddingFile::from_bytes(&f.to_bytes().unwrap()).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.row(1), vec![1.0, 0.0]);
        assert!((back.row(0)[0] - 0.6).abs() < 1e-2);
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(EmbeddingFile::from_bytes(b"NOPE").is_err());
        let f = EmbeddingFile::from_matrix(&Matrix::identity(2));
        let bytes = f.to_bytes().unwrap();
        assert!(EmbeddingFile::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(EmbeddingFile::new(vec![2, 2], vec![0], Payload::F32(vec![0.0; 4])).is_err());
    }
}
