//! BFloat16 storage codec.
//!
//! Values are kept as raw `u16` bit patterns (the upper half of an IEEE-754
//! binary32) and serialized little-endian.

use half::bf16;

use super::NumericsError;

/// How `f32` values are narrowed to 16 bits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Bf16Rounding {
    #[default]
    NearestEven,
    /// Drop the low 16 bits. Only for byte-compatibility with truncating writers.
    Truncate,
}

#[inline]
pub fn f32_to_bf16_bits(v: f32, rounding: Bf16Rounding) -> u16 {
    match rounding {
        Bf16Rounding::NearestEven => bf16::from_f32(v).to_bits(),
        Bf16Rounding::Truncate => {
            let bits = v.to_bits();
            if v.is_nan() {
                // keep NaN a NaN even when the payload lives in the low half
                ((bits >> 16) as u16) | 0x0040
            } else {
                (bits >> 16) as u16
            }
        }
    }
}

#[inline]
pub fn bf16_bits_to_f32(bits: u16) -> f32 {
    bf16::from_bits(bits).to_f32()
}

pub fn encode(values: &[f32], rounding: Bf16Rounding) -> Vec<u16> {
    values
        .iter()
        .map(|&v| f32_to_bf16_bits(v, rounding))
        .collect()
}

pub fn decode(bits: &[u16]) -> Vec<f32> {
    bits.iter().map(|&b| bf16_bits_to_f32(b)).collect()
}

/// Narrows every value to bfloat16 (round-to-nearest-even) and widens it back.
pub fn bf16_roundtrip(values: &[f32]) -> Vec<f32> {
    decode(&encode(values, Bf16Rounding::NearestEven))
}

pub fn bits_to_le_bytes(bits: &[u16]) -> Vec<u8> {
    let mut out = Vec::with_capacity(bits.len() * 2);
    for b in bits {
        out.extend_from_slice(&b.to_le_bytes());
    }
    out
}

pub fn bits_from_le_bytes(bytes: &[u8]) -> Result<Vec<u16>, NumericsError> {
    if bytes.len() % 2 != 0 {
        return Err(NumericsError::Format(format!(
            "bf16 payload has odd length {}",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect())
}

/// Shaped bfloat16 tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bf16Buffer {
    dims: Vec<usize>,
    payload: Vec<u16>,
}

impl Bf16Buffer {
    pub fn encode(
        dims: Vec<usize>,
        values: &[f32],
        rounding: Bf16Rounding,
    ) -> Result<Self, NumericsError> {
        let expected: usize = dims.iter().product();
        if expected != values.len() {
            return Err(NumericsError::Format(format!(
                "dims {dims:?} describe {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            dims,
            payload: encode(values, rounding),
        })
    }

    pub fn from_bits(dims: Vec<usize>, payload: Vec<u16>) -> Result<Self, NumericsError> {
        let expected: usize = dims.iter().product();
        if expected != payload.len() {
            return Err(NumericsError::Format(format!(
                "dims {dims:?} describe {expected} values, payload has {}",
                payload.len()
            )));
        }
        Ok(Self { dims, payload })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn bits(&self) -> &[u16] {
        &self.payload
    }

    pub fn decode(&self) -> Vec<f32> {
        decode(&self.payload)
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        bits_to_le_bytes(&self.payload)
    }
}
