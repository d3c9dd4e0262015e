use ndarray::NdFloat;
use num_traits::ToPrimitive;

/// Scalar element type for all tensor math. Implemented for `f32` and `f64`;
/// the training pipeline runs on `f32`, precision-sensitive tests on `f64`.
pub trait Scalar: NdFloat + ToPrimitive + Default {
    const BYTES: usize;
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self {
        num_traits::cast(v).expect("finite f64 converts to scalar")
    }

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }

    fn into_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const BYTES: usize = 4;
    const DTYPE: &'static str = "f32";

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;
    const DTYPE: &'static str = "f64";

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}
