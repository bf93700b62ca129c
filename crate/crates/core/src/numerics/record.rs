//! Flat little-endian tensor records.
//!
//! ```text
//! "INOT" | version: u8 | rank: u8 | extents: rank × u32 | dtype: u8 | values
//! ```
//!
//! `dtype` is 0 for f32 and 1 for f64; values are raw little-endian in
//! row-major order.

use super::real::{DType, Real};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"INOT";
pub const TENSOR_VERSION: u8 = 1;

pub fn write_tensor<T: Real>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(TENSOR_VERSION);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    out.push(T::DTYPE.tag());
    out.reserve(t.numel() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn tensor_to_bytes<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::new();
    write_tensor(t, &mut out);
    out
}

/// A decoded record of either precision.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested precision (exact when it already matches).
    pub fn cast<T: Real>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

/// Sequential reader over a byte buffer.
pub struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8], what: &'a str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.what,
                format!("truncated at byte {} (wanted {n} more)", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn tensor(&mut self) -> Result<AnyTensor> {
        if self.take(4)? != TENSOR_MAGIC {
            return Err(Error::format(self.what, "bad tensor magic"));
        }
        let version = self.u8()?;
        if version != TENSOR_VERSION {
            return Err(Error::format(
                self.what,
                format!("unsupported tensor record version {version}"),
            ));
        }
        let rank = self.u8()? as usize;
        let shape = (0..rank)
            .map(|_| self.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let tag = self.u8()?;
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::format(self.what, format!("unknown dtype tag {tag}")))?;
        let numel: usize = shape.iter().product();
        let raw = self.take(numel * dtype.size())?;
        Ok(match dtype {
            DType::F32 => AnyTensor::F32(Tensor::new(
                shape,
                raw.chunks_exact(4).map(f32::read_le).collect(),
            )?),
            DType::F64 => AnyTensor::F64(Tensor::new(
                shape,
                raw.chunks_exact(8).map(f64::read_le).collect(),
            )?),
        })
    }
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<AnyTensor> {
    let mut r = ByteReader::new(bytes, "tensor record");
    let t = r.tensor()?;
    if !r.is_empty() {
        return Err(Error::format("tensor record", "trailing bytes"));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::<f32>::from_f64(vec![2, 1], &[1.0, -2.0]).unwrap();
        let bytes = tensor_to_bytes(&t);
        let mut expected = b"INOT".to_vec();
        expected.extend_from_slice(&[1, 2, 2, 0, 0, 0, 1, 0, 0, 0, 0]);
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::<f64>::ones(&[3]);
        let mut bytes = tensor_to_bytes(&t);
        assert!(tensor_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(tensor_from_bytes(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_both_precisions(
            shape in proptest::collection::vec(1usize..4, 1..4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let vals: Vec<f64> = (0..n).map(|i| ((seed as f64) * 1e-9 + i as f64).sin()).collect();
            let t64 = Tensor::<f64>::from_f64(shape.clone(), &vals).unwrap();
            prop_assert_eq!(tensor_from_bytes(&tensor_to_bytes(&t64)).unwrap(), AnyTensor::F64(t64));
            let t32 = Tensor::<f32>::from_f64(shape, &vals).unwrap();
            prop_assert_eq!(tensor_from_bytes(&tensor_to_bytes(&t32)).unwrap(), AnyTensor::F32(t32));
        }
    }
}
