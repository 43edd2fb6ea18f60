use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssignOps};

/// Scalar types the numeric core is generic over.
///
/// `f32` is the training precision; `f64` backs the gradient-check and parser
/// verification suites, where finite differences need the extra mantissa.
pub trait Scalar:
    Float + NumAssignOps + Default + Debug + Display + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn cast(v: f64) -> Self;
    fn as_f64(self) -> f64;

    fn to_le_bytes(self, out: &mut Vec<u8>);
    fn from_le_slice(src: &[u8]) -> Self;
    /// Serialized width in bytes.
    fn width() -> usize;
}

/// Scalar type tag used by checkpoint files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    F32,
    F64,
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    #[inline]
    fn cast(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn to_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&f32::to_le_bytes(self));
    }

    fn from_le_slice(src: &[u8]) -> Self {
        f32::from_le_bytes([src[0], src[1], src[2], src[3]])
    }

    fn width() -> usize {
        4
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    #[inline]
    fn cast(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn to_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&f64::to_le_bytes(self));
    }

    fn from_le_slice(src: &[u8]) -> Self {
        f64::from_le_bytes([
            src[0], src[1], src[2], src[3], src[4], src[5], src[6], src[7],
        ])
    }

    fn width() -> usize {
        8
    }
}
