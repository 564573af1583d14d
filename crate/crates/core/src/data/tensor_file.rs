//! Binary tensor file format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   4 bytes  "PHMT"
//! version u32      1
//! dtype   u8       0 = f32, 1 = f64
//! ndim    u32
//! dims    ndim x u32
//! payload product(dims) elements, row-major
//! ```
//!
//! A rank-0 scalar is legal (`ndim = 0`, payload of one element). Round trips
//! are bit-exact; payloads containing non-finite values are rejected at write
//! time.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{AnyTensor, Dtype, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"PHMT";
pub const VERSION: u32 = 1;

/// Serialized size in bytes for a given shape and dtype.
pub fn file_size(shape: &[usize], dtype: Dtype) -> usize {
    4 + 4 + 1 + 4 + 4 * shape.len() + dtype.size_bytes() * shape.iter().product::<usize>()
}

pub fn write_tensor<E: Element>(path: &Path, t: &Tensor<E>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn write_tensor_to<E: Element, W: Write>(w: &mut W, t: &Tensor<E>) -> Result<()> {
    if !t.is_finite() {
        return Err(Error::TensorFile(
            "refusing to write non-finite payload".into(),
        ));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[E::DTYPE.code()])?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    match E::DTYPE {
        Dtype::F32 => {
            for &v in t.data() {
                w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for &v in t.data() {
                w.write_all(&v.to_f64().to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<AnyTensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor_from(&mut r)
}

pub fn read_tensor_from<R: Read>(r: &mut R) -> Result<AnyTensor> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::TensorFile(format!(
            "unsupported version {version}"
        )));
    }
    let mut dtype_code = [0u8; 1];
    read_exact(r, &mut dtype_code)?;
    let dtype = Dtype::from_code(dtype_code[0])?;
    let ndim = read_u32(r)? as usize;
    if ndim > 8 {
        return Err(Error::TensorFile(format!("implausible ndim {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = read_u32(r)? as usize;
        if d == 0 {
            return Err(Error::TensorFile("zero extent in stored shape".into()));
        }
        shape.push(d);
    }
    let count: usize = shape.iter().product();
    match dtype {
        Dtype::F32 => {
            let mut data = Vec::with_capacity(count);
            let mut buf = [0u8; 4];
            for _ in 0..count {
                read_exact(r, &mut buf)?;
                data.push(f32::from_le_bytes(buf));
            }
            Ok(AnyTensor::F32(Tensor::new(shape, data)?))
        }
        Dtype::F64 => {
            let mut data = Vec::with_capacity(count);
            let mut buf = [0u8; 8];
            for _ in 0..count {
                read_exact(r, &mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            Ok(AnyTensor::F64(Tensor::new(shape, data)?))
        }
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn round_trip_bytes<E: Element>(t: &Tensor<E>) -> Vec<u8> {
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, t).unwrap();
        buf
    }

    #[test]
    fn byte_count_matches_format_definition() {
        // 2x2 f32: 4 magic + 4 version + 1 dtype + 4 ndim + 8 dims + 16 payload.
        let t = Tensor::<f32>::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = round_trip_bytes(&t);
        assert_eq!(bytes.len(), 4 + 4 + 1 + 4 + 8 + 16);
        assert_eq!(bytes.len(), file_size(&[2, 2], Dtype::F32));
        let back = read_tensor_from(&mut Cursor::new(&bytes))
            .unwrap()
            .expect_f32()
            .unwrap();
        assert_eq!(back, t);
        // Bitwise: re-serialize and compare bytes.
        assert_eq!(round_trip_bytes(&back), bytes);
    }

    #[test]
    fn rank_zero_scalar_round_trips() {
        let t = Tensor::<f64>::scalar(-7.25);
        let bytes = round_trip_bytes(&t);
        assert_eq!(bytes.len(), file_size(&[], Dtype::F64));
        let back = read_tensor_from(&mut Cursor::new(&bytes)).unwrap().into_f64();
        assert_eq!(back, t);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let t = Tensor::<f32>::scalar(1.0);
        let mut bytes = round_trip_bytes(&t);
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            read_tensor_from(&mut Cursor::new(&bytes)),
            Err(Error::BadMagic)
        ));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let t = Tensor::<f32>::new(vec![4], vec![1.0; 4]).unwrap();
        let bytes = round_trip_bytes(&t);
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            read_tensor_from(&mut Cursor::new(cut)),
            Err(Error::Truncated)
        ));
    }

    #[test]
    fn unknown_dtype_code_is_rejected() {
        let t = Tensor::<f32>::scalar(1.0);
        let mut bytes = round_trip_bytes(&t);
        bytes[8] = 9;
        assert!(matches!(
            read_tensor_from(&mut Cursor::new(&bytes)),
            Err(Error::UnknownDtype(9))
        ));
    }

    #[test]
    fn nan_payload_rejected_at_write_time() {
        let t = Tensor::<f32>::new(vec![2], vec![1.0, f32::NAN]).unwrap();
        let mut buf = Vec::new();
        assert!(write_tensor_to(&mut buf, &t).is_err());
        let inf = Tensor::<f64>::new(vec![1], vec![f64::INFINITY]).unwrap();
        assert!(write_tensor_to(&mut buf, &inf).is_err());
    }
}
