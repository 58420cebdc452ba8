//! QTNS tensor container.
//!
//! Layout, bit-exact:
//!
//! ```text
//! magic   4 bytes   0x51 0x54 0x4E 0x53 ("QTNS")
//! version 1 byte    1
//! dtype   1 byte    1 = f32, 2 = f64
//! ndim    1 byte
//! reserved 1 byte   0
//! dims    ndim * u32, little-endian
//! payload row-major elements, little-endian
//! ```
//!
//! All persisted images, perturbations, and feature dumps use this format.

use std::fs;
use std::path::Path;

use crate::error::NumError;
use crate::tensor::{Real, Tensor};

const MAGIC: [u8; 4] = [0x51, 0x54, 0x4E, 0x53];
const VERSION: u8 = 1;

pub const DTYPE_F32: u8 = 1;
pub const DTYPE_F64: u8 = 2;

/// Serializes a tensor into QTNS bytes.
pub fn to_qtns_bytes<T: Real>(t: &Tensor<T>) -> Result<Vec<u8>, NumError> {
    let ndim = t.shape().len();
    if ndim > u8::MAX as usize {
        return Err(NumError::Format(format!("rank {ndim} exceeds u8")));
    }
    for &d in t.shape() {
        if d > u32::MAX as usize {
            return Err(NumError::Format(format!("dimension {d} exceeds u32")));
        }
    }
    let mut out = Vec::with_capacity(8 + 4 * ndim + t.len() * T::BYTE_WIDTH);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE_CODE);
    out.push(ndim as u8);
    out.push(0);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&t.to_le_bytes());
    Ok(out)
}

pub fn write_qtns<T: Real>(path: &Path, t: &Tensor<T>) -> Result<(), NumError> {
    Ok(fs::write(path, to_qtns_bytes(t)?)?)
}

/// Parses QTNS bytes into a tensor of the requested element type. The stored
/// dtype must match `T`'s dtype code exactly; no silent conversion.
pub fn from_qtns_bytes<T: Real>(bytes: &[u8]) -> Result<Tensor<T>, NumError> {
    if bytes.len() < 8 {
        return Err(NumError::Format("truncated header".into()));
    }
    if bytes[0..4] != MAGIC {
        return Err(NumError::Format(format!(
            "bad magic {:02x?}, expected \"QTNS\"",
            &bytes[0..4]
        )));
    }
    if bytes[4] != VERSION {
        return Err(NumError::Format(format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != T::DTYPE_CODE {
        return Err(NumError::Format(format!(
            "dtype code {} does not match requested element type (code {})",
            bytes[5],
            T::DTYPE_CODE
        )));
    }
    if bytes[7] != 0 {
        return Err(NumError::Format(format!(
            "reserved byte must be 0, got {}",
            bytes[7]
        )));
    }
    let ndim = bytes[6] as usize;
    let dims_end = 8 + 4 * ndim;
    if bytes.len() < dims_end {
        return Err(NumError::Format("truncated dimension list".into()));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = 8 + 4 * i;
        shape.push(u32::from_le_bytes([
            bytes[off],
            bytes[off + 1],
            bytes[off + 2],
            bytes[off + 3],
        ]) as usize);
    }
    let count: usize = shape.iter().product();
    let payload = &bytes[dims_end..];
    if payload.len() != count * T::BYTE_WIDTH {
        return Err(NumError::Format(format!(
            "payload is {} bytes, expected {} for shape {:?}",
            payload.len(),
            count * T::BYTE_WIDTH,
            shape
        )));
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        data.push(T::from_le_slice(&payload[i * T::BYTE_WIDTH..]));
    }
    Tensor::from_vec(shape, data)
}

pub fn read_qtns<T: Real>(path: &Path) -> Result<Tensor<T>, NumError> {
    from_qtns_bytes(&fs::read(path)?)
}

pub fn read_qtns_f32(path: &Path) -> Result<Tensor<f32>, NumError> {
    read_qtns(path)
}

pub fn read_qtns_f64(path: &Path) -> Result<Tensor<f64>, NumError> {
    read_qtns(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_layout_small_f32() {
        // 2x1 f32 tensor [1.0, -2.0]; header and payload spelled out by hand.
        let t = Tensor::new(vec![2, 1], vec![1.0f32, -2.0]);
        let bytes = to_qtns_bytes(&t).unwrap();
        let mut expected = vec![
            0x51, 0x54, 0x4E, 0x53, // magic
            1,    // version
            1,    // dtype f32
            2,    // ndim
            0,    // reserved
            2, 0, 0, 0, // dim 0
            1, 0, 0, 0, // dim 1
        ];
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn round_trip_f64() {
        let t = Tensor::new(vec![2, 3], vec![0.5f64, -1.25, 3.0, 4.5, -6.0, 7.75]);
        let bytes = to_qtns_bytes(&t).unwrap();
        let back: Tensor<f64> = from_qtns_bytes(&bytes).unwrap();
        assert_eq!(back, t);
        // Re-serialization is byte-identical.
        assert_eq!(to_qtns_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_magic_and_dtype() {
        let t = Tensor::new(vec![1], vec![1.0f32]);
        let mut bytes = to_qtns_bytes(&t).unwrap();
        assert!(from_qtns_bytes::<f64>(&bytes).is_err()); // dtype mismatch
        bytes[0] = b'X';
        assert!(from_qtns_bytes::<f32>(&bytes).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.qtns");
        let t = Tensor::new(vec![4], vec![1.0f32, 2.0, 3.0, 4.0]);
        write_qtns(&path, &t).unwrap();
        let back = read_qtns_f32(&path).unwrap();
        assert_eq!(back, t);
    }
}
