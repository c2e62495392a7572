//! Minimal tensor substrate: a float element trait shared by the single- and
//! double-precision paths, plus index-map utilities and a reverse-mode tape.

pub mod index_maps;
pub mod tape;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

/// Element dtype tag, recorded in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

/// Scalar element for all tensor math. Implemented for `f32` and `f64`.
pub trait Element:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Append the little-endian byte encoding of `values` to `out`.
    fn write_le(values: &[Self], out: &mut Vec<u8>);
    /// Decode `count` little-endian values from the front of `bytes`.
    fn read_le(bytes: &[u8], count: usize) -> Option<Vec<Self>>;
    /// Bytes per element.
    fn byte_width() -> usize;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(values: &[Self], out: &mut Vec<u8>) {
        out.reserve(values.len() * 4);
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn read_le(bytes: &[u8], count: usize) -> Option<Vec<Self>> {
        if bytes.len() < count * 4 {
            return None;
        }
        Some(
            bytes[..count * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        )
    }
    fn byte_width() -> usize {
        4
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(values: &[Self], out: &mut Vec<u8>) {
        out.reserve(values.len() * 8);
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn read_le(bytes: &[u8], count: usize) -> Option<Vec<Self>> {
        if bytes.len() < count * 8 {
            return None;
        }
        Some(
            bytes[..count * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect(),
        )
    }
    fn byte_width() -> usize {
        8
    }
}

/// Cast an f64 array to the working element type.
pub fn cast_from_f64<E: Element>(a: &ndarray::ArrayD<f64>) -> ndarray::ArrayD<E> {
    a.mapv(E::from_f64)
}

/// Cast a working-precision array up to f64 (for metrics and reporting).
pub fn cast_to_f64<E: Element>(a: &ndarray::ArrayD<E>) -> ndarray::ArrayD<f64> {
    a.mapv(E::to_f64)
}
