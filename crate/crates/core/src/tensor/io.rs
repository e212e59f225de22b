//! `TNS1` tensor container.
//!
//! Layout (little-endian): magic `TNS1`, `u8` dtype code (0 = f32, 1 = u8),
//! `u8` rank, `rank × u32` extents, then the row-major payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{check_dims, Mask, Tensor};
use crate::error::{Error, Result};

pub const TNS_MAGIC: &[u8; 4] = b"TNS1";
const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

/// A decoded `TNS1` payload.
#[derive(Clone, Debug, PartialEq)]
pub enum Stored {
    F32(Tensor<f32>),
    U8 { dims: Vec<usize>, data: Vec<u8> },
}

impl Stored {
    pub fn into_f32(self) -> Result<Tensor<f32>> {
        match self {
            Stored::F32(t) => Ok(t),
            Stored::U8 { .. } => Err(Error::Format("expected an f32 tensor, found u8".into())),
        }
    }

    pub fn into_mask(self) -> Result<Mask> {
        match self {
            Stored::U8 { dims, data } => Mask::new(dims, data),
            Stored::F32(_) => Err(Error::Format("expected a u8 tensor, found f32".into())),
        }
    }
}

fn write_header(out: &mut impl Write, dtype: u8, dims: &[usize]) -> std::io::Result<()> {
    out.write_all(TNS_MAGIC)?;
    out.write_all(&[dtype, dims.len() as u8])?;
    for &d in dims {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    Ok(())
}

pub fn write_f32(out: &mut impl Write, t: &Tensor<f32>) -> std::io::Result<()> {
    write_header(out, DTYPE_F32, t.dims())?;
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

pub fn write_u8(out: &mut impl Write, dims: &[usize], data: &[u8]) -> std::io::Result<()> {
    write_header(out, DTYPE_U8, dims)?;
    out.write_all(data)
}

pub fn encode_f32(t: &Tensor<f32>) -> Vec<u8> {
    let mut v = Vec::new();
    write_f32(&mut v, t).expect("writing to a Vec cannot fail");
    v
}

pub fn encode_mask(m: &Mask) -> Vec<u8> {
    let mut v = Vec::new();
    write_u8(&mut v, m.dims(), m.data()).expect("writing to a Vec cannot fail");
    v
}

fn fmt_err(e: std::io::Error) -> Error {
    Error::Format(format!("truncated TNS1 stream: {e}"))
}

/// Reads one tensor from the stream, leaving it positioned after the payload.
pub fn read(input: &mut impl Read) -> Result<Stored> {
    let mut head = [0u8; 6];
    input.read_exact(&mut head).map_err(fmt_err)?;
    if &head[..4] != TNS_MAGIC {
        return Err(Error::Format(format!("bad TNS1 magic {:?}", &head[..4])));
    }
    let (dtype, rank) = (head[4], head[5] as usize);
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        input.read_exact(&mut b).map_err(fmt_err)?;
        dims.push(u32::from_le_bytes(b) as usize);
    }
    let n = check_dims(&dims).map_err(|e| Error::Format(e.to_string()))?;
    match dtype {
        DTYPE_F32 => {
            let mut bytes = vec![0u8; n * 4];
            input.read_exact(&mut bytes).map_err(fmt_err)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(Stored::F32(Tensor::from_parts_unchecked(dims, data)))
        }
        DTYPE_U8 => {
            let mut data = vec![0u8; n];
            input.read_exact(&mut data).map_err(fmt_err)?;
            Ok(Stored::U8 { dims, data })
        }
        other => Err(Error::Format(format!("unknown TNS1 dtype code {other}"))),
    }
}

pub fn load(path: impl AsRef<Path>) -> Result<Stored> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = bytes.as_slice();
    let t = read(&mut cur)?;
    if !cur.is_empty() {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes after tensor payload",
            path.display(),
            cur.len()
        )));
    }
    Ok(t)
}

pub fn save_f32(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_f32(t)).map_err(|e| Error::io(path, e))
}

pub fn save_mask(path: impl AsRef<Path>, m: &Mask) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_mask(m)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::new(vec![2, 1], vec![1.0f32, -2.5]).unwrap();
        let bytes = encode_f32(&t);
        let mut want = b"TNS1".to_vec();
        want.extend([0u8, 2]);
        want.extend(2u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.5f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn mask_header_uses_u8_code() {
        let m = Mask::new(vec![1, 3], vec![0, 4, 5]).unwrap();
        let bytes = encode_mask(&m);
        assert_eq!(&bytes[..6], &[b'T', b'N', b'S', b'1', 1, 2]);
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 4, 5]);
        let back = read(&mut bytes.as_slice()).unwrap().into_mask().unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read(&mut &b"TNS2\x00\x01"[..]).is_err());
        let mut bytes = encode_f32(&Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap());
        bytes.truncate(bytes.len() - 1);
        assert!(read(&mut bytes.as_slice()).is_err());
    }
}
