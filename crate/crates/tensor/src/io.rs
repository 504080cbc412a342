//! EVT1 single-tensor binary format.
//!
//! Layout: magic `EVT1`, dtype code (u8, 0 = f32, 1 = f64), rank (u8), one
//! little-endian u32 per extent, then the elements in row-major little-endian
//! order.

use std::io::{Read, Write};

use thiserror::Error;

use crate::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"EVT1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("byte {offset}: {detail}")]
    Format { offset: usize, detail: String },
    #[error("dtype mismatch: file holds {found}, caller asked for {expected}")]
    DType { expected: DType, found: DType },
}

fn format_err(offset: usize, detail: impl Into<String>) -> IoError {
    IoError::Format {
        offset,
        detail: detail.into(),
    }
}

/// A decoded tensor of either element type.
#[derive(Clone, Debug)]
pub enum DynTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl DynTensor {
    pub fn dtype(&self) -> DType {
        match self {
            DynTensor::F32(_) => DType::F32,
            DynTensor::F64(_) => DType::F64,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            DynTensor::F32(t) => t.dims(),
            DynTensor::F64(t) => t.dims(),
        }
    }

    /// Converts to `E`, casting if the stored dtype differs.
    pub fn into_element<E: Element>(self) -> Tensor<E> {
        match self {
            DynTensor::F32(t) => t.cast(),
            DynTensor::F64(t) => t.cast(),
        }
    }

    /// Returns the tensor only if it is already stored as `E`.
    pub fn expect<E: Element>(self) -> Result<Tensor<E>, IoError> {
        if self.dtype() != E::DTYPE {
            return Err(IoError::DType {
                expected: E::DTYPE,
                found: self.dtype(),
            });
        }
        Ok(self.into_element())
    }
}

impl<E: Element> From<Tensor<E>> for DynTensor {
    fn from(t: Tensor<E>) -> Self {
        match E::DTYPE {
            DType::F32 => DynTensor::F32(t.cast()),
            DType::F64 => DynTensor::F64(t.cast()),
        }
    }
}

pub fn encode<E: Element>(t: &Tensor<E>) -> Result<Vec<u8>, IoError> {
    if t.ndim() > u8::MAX as usize {
        return Err(format_err(5, format!("rank {} does not fit in a u8", t.ndim())));
    }
    let mut out = Vec::with_capacity(6 + 4 * t.ndim() + t.numel() * E::DTYPE.size_of());
    out.extend_from_slice(MAGIC);
    out.push(E::DTYPE.code());
    out.push(t.ndim() as u8);
    for (i, &d) in t.dims().iter().enumerate() {
        let d = u32::try_from(d)
            .map_err(|_| format_err(6 + 4 * i, format!("extent {d} does not fit in a u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

/// Decodes one tensor from the front of `bytes`, returning it and the bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(DynTensor, usize), IoError> {
    let need = |at: usize, n: usize, what: &str| -> Result<(), IoError> {
        if bytes.len() < at + n {
            Err(format_err(
                bytes.len(),
                format!("truncated {what}: need {n} bytes at offset {at}"),
            ))
        } else {
            Ok(())
        }
    };
    need(0, 4, "magic")?;
    if &bytes[..4] != MAGIC {
        return Err(format_err(0, format!("bad magic {:?}", &bytes[..4])));
    }
    need(4, 2, "header")?;
    let dtype =
        DType::from_code(bytes[4]).ok_or_else(|| format_err(4, format!("unknown dtype code {}", bytes[4])))?;
    let ndim = bytes[5] as usize;
    need(6, 4 * ndim, "extents")?;
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let at = 6 + 4 * i;
        let d = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
        if d == 0 {
            return Err(format_err(at, "zero extent"));
        }
        dims.push(d);
    }
    let start = 6 + 4 * ndim;
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err(6, "element count overflows"))?;
    let size = dtype.size_of();
    let nbytes = numel
        .checked_mul(size)
        .ok_or_else(|| format_err(6, "byte count overflows"))?;
    need(start, nbytes, "data")?;
    let body = &bytes[start..start + nbytes];
    let tensor = match dtype {
        DType::F32 => DynTensor::F32(read_body(&dims, body)),
        DType::F64 => DynTensor::F64(read_body(&dims, body)),
    };
    Ok((tensor, start + nbytes))
}

fn read_body<E: Element>(dims: &[usize], body: &[u8]) -> Tensor<E> {
    let data = body.chunks_exact(E::DTYPE.size_of()).map(E::read_le).collect();
    Tensor::from_vec(dims.to_vec(), data).expect("extents validated")
}

/// Decodes a buffer that must contain exactly one tensor.
pub fn decode(bytes: &[u8]) -> Result<DynTensor, IoError> {
    let (t, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(format_err(used, format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(t)
}

pub fn write_tensor<E: Element>(w: &mut impl Write, t: &Tensor<E>) -> Result<(), IoError> {
    w.write_all(&encode(t)?)?;
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<DynTensor, IoError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_both_dtypes() {
        let t = Tensor::<f32>::from_vec(vec![2, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-7, 9.0]).unwrap();
        let back = decode(&encode(&t).unwrap()).unwrap().expect::<f32>().unwrap();
        assert!(back.bit_eq(&t));
        let t = Tensor::<f64>::from_vec(vec![1], vec![std::f64::consts::PI]).unwrap();
        let back = decode(&encode(&t).unwrap()).unwrap().expect::<f64>().unwrap();
        assert!(back.bit_eq(&t));
    }

    #[test]
    fn header_bytes() {
        let t = Tensor::<f64>::zeros(vec![2, 1]).unwrap();
        let b = encode(&t).unwrap();
        assert_eq!(&b[..6], b"EVT1\x01\x02");
        assert_eq!(&b[6..14], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(b.len(), 14 + 16);
    }

    #[test]
    fn errors_carry_offsets() {
        let good = encode(&Tensor::<f32>::ones(vec![3]).unwrap()).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(IoError::Format { offset: 0, .. })));
        let mut bad = good.clone();
        bad[4] = 7;
        assert!(matches!(decode(&bad), Err(IoError::Format { offset: 4, .. })));
        let truncated = &good[..good.len() - 1];
        assert!(matches!(decode(truncated), Err(IoError::Format { offset, .. }) if offset == good.len() - 1));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(IoError::Format { offset, .. }) if offset == good.len()));
    }

    #[test]
    fn dtype_mismatch_is_reported() {
        let b = encode(&Tensor::<f32>::ones(vec![1]).unwrap()).unwrap();
        assert!(matches!(decode(&b).unwrap().expect::<f64>(), Err(IoError::DType { .. })));
    }
}
