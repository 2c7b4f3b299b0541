//! `CAMT` tensor encoding: 4-byte magic, version, dtype, ndim, a reserved
//! zero byte, `ndim` u64 dims, then the row-major little-endian payload.

use crate::error::{FormatError, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"CAMT";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_F64: u8 = 2;

/// Element types the container can hold.
pub trait Element: Real {
    const DTYPE: u8;
    const SIZE: usize;
    fn put(self, out: &mut Vec<u8>);
    fn get(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: u8 = DTYPE_F32;
    const SIZE: usize = 4;

    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: u8 = DTYPE_F64;
    const SIZE: usize = 8;

    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// A decoded tensor of either element type.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        match self {
            AnyTensor::F32(t) => encode_into(t, out),
            AnyTensor::F64(t) => encode_into(t, out),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

/// Bounds-checked little-endian reader that reports absolute offsets.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], base: usize) -> Self {
        Self { bytes, pos: 0, base }
    }

    pub(crate) fn offset(&self) -> usize {
        self.base + self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if n > self.remaining() {
            return Err(FormatError::Truncated {
                offset: self.offset(),
                needed: n,
                available: self.remaining(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn invalid(&self, at: usize, reason: impl Into<String>) -> FormatError {
        FormatError::Invalid {
            offset: at,
            reason: reason.into(),
        }
    }
}

pub fn encode_into<T: Element>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, T::DTYPE, t.ndim() as u8, 0]);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.reserve(t.len() * T::SIZE);
    for &v in t.data() {
        v.put(out);
    }
}

pub fn encode<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::new();
    encode_into(t, &mut out);
    out
}

pub(crate) fn read_any(r: &mut Reader<'_>) -> Result<AnyTensor, FormatError> {
    let start = r.offset();
    if r.take(4)? != MAGIC {
        return Err(FormatError::BadMagic { offset: start });
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion {
            offset: start + 4,
            found: version,
        });
    }
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 && dtype != DTYPE_F64 {
        return Err(FormatError::UnsupportedDtype {
            offset: start + 5,
            found: dtype,
        });
    }
    let ndim = r.u8()? as usize;
    if ndim == 0 {
        return Err(r.invalid(start + 6, "tensor has no dimensions"));
    }
    let reserved = r.u8()?;
    if reserved != 0 {
        return Err(FormatError::Reserved {
            offset: start + 7,
            found: reserved,
        });
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let at = r.offset();
        let d = r.u64()?;
        if d == 0 {
            return Err(r.invalid(at, "zero-length dimension"));
        }
        shape.push(usize::try_from(d).map_err(|_| r.invalid(at, "dimension overflows usize"))?);
    }
    let size = if dtype == DTYPE_F32 { 4 } else { 8 };
    let payload_at = r.offset();
    let bytes = shape
        .iter()
        .try_fold(size, |a: usize, &d| a.checked_mul(d))
        .ok_or_else(|| r.invalid(payload_at, "payload size overflows"))?;
    let payload = r.take(bytes)?;
    Ok(if dtype == DTYPE_F32 {
        AnyTensor::F32(decode_payload(&shape, payload))
    } else {
        AnyTensor::F64(decode_payload(&shape, payload))
    })
}

fn decode_payload<T: Element>(shape: &[usize], payload: &[u8]) -> Tensor<T> {
    let data = payload.chunks_exact(T::SIZE).map(T::get).collect();
    Tensor::new(shape, data).expect("validated shape")
}

/// Decodes one tensor occupying all of `bytes`.
pub fn decode_any(bytes: &[u8]) -> Result<AnyTensor> {
    let mut r = Reader::new(bytes, 0);
    let t = read_any(&mut r)?;
    if r.remaining() != 0 {
        return Err(r.invalid(r.offset(), "trailing bytes after tensor").into());
    }
    Ok(t)
}

pub fn decode_f32(bytes: &[u8]) -> Result<Tensor<f32>> {
    match decode_any(bytes)? {
        AnyTensor::F32(t) => Ok(t),
        AnyTensor::F64(_) => Err(FormatError::Invalid {
            offset: 5,
            reason: "expected a 32-bit float tensor".into(),
        }
        .into()),
    }
}

pub fn decode_f64(bytes: &[u8]) -> Result<Tensor<f64>> {
    match decode_any(bytes)? {
        AnyTensor::F64(t) => Ok(t),
        AnyTensor::F32(_) => Err(FormatError::Invalid {
            offset: 5,
            reason: "expected a 64-bit float tensor".into(),
        }
        .into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;

    fn fmt_err(r: Result<AnyTensor>) -> FormatError {
        match r {
            Err(Error::Format(e)) => e,
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn golden_bytes() {
        let t = Tensor::new(&[2], vec![1.0f32, -2.0]).unwrap();
        let mut want = b"CAMT".to_vec();
        want.extend([1, 1, 1, 0]);
        want.extend(2u64.to_le_bytes());
        want.extend([0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0]);
        assert_eq!(encode(&t), want);
    }

    #[test]
    fn truncated_payload_names_offset() {
        let t = Tensor::from_fn(&[3, 4], |i| i as f32);
        let bytes = encode(&t);
        // header 8 + 2 dims × 8 = 24; payload 48 bytes
        let cut = &bytes[..24 + 10];
        assert_eq!(
            fmt_err(decode_any(cut)),
            FormatError::Truncated {
                offset: 24,
                needed: 48,
                available: 10
            }
        );
        assert_eq!(
            fmt_err(decode_any(&bytes[..13])),
            FormatError::Truncated {
                offset: 8,
                needed: 8,
                available: 5
            }
        );
    }

    #[test]
    fn header_errors() {
        let mut bytes = encode(&Tensor::from_fn(&[2, 2], |i| i as f64));
        bytes[5] = 7;
        assert_eq!(fmt_err(decode_any(&bytes)), FormatError::UnsupportedDtype { offset: 5, found: 7 });
        bytes[5] = 2;
        bytes[4] = 9;
        assert_eq!(fmt_err(decode_any(&bytes)), FormatError::UnsupportedVersion { offset: 4, found: 9 });
        bytes[4] = 1;
        bytes[7] = 1;
        assert_eq!(fmt_err(decode_any(&bytes)), FormatError::Reserved { offset: 7, found: 1 });
        bytes[7] = 0;
        bytes[0] = b'X';
        assert_eq!(fmt_err(decode_any(&bytes)), FormatError::BadMagic { offset: 0 });
        bytes[0] = b'C';
        bytes.push(0);
        assert!(matches!(fmt_err(decode_any(&bytes)), FormatError::Invalid { offset: 56, .. }));
        assert!(decode_f32(&bytes[..56]).is_err());
        assert!(decode_f64(&bytes[..56]).is_ok());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            shape in prop::collection::vec(1usize..5, 1..4),
            bits in prop::collection::vec(any::<u64>(), 64),
        ) {
            let n: usize = shape.iter().product();
            let t64 = Tensor::new(&shape, bits[..n].iter().map(|&b| f64::from_bits(b)).collect()).unwrap();
            let t32 = Tensor::new(&shape, bits[..n].iter().map(|&b| f32::from_bits(b as u32)).collect()).unwrap();
            let b64 = decode_f64(&encode(&t64)).unwrap();
            let b32 = decode_f32(&encode(&t32)).unwrap();
            prop_assert!(b64.data().iter().zip(t64.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert!(b32.data().iter().zip(t32.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(b64.shape(), &shape[..]);
        }
    }
}
