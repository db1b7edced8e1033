//! Binary tensor container.
//!
//! Layout, all little-endian: the magic `TTKT`, a `u32` version, a `u32`
//! dtype code (1 = f32, 2 = f64, 3 = i32), a `u32` rank, `rank` extents as
//! `u64`, then the row-major payload. Nothing follows the payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TTKT";
pub const VERSION: u32 = 1;
const HEADER: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    I32,
}

impl DType {
    pub fn code(self) -> u32 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
            DType::I32 => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            3 => Some(DType::I32),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 | DType::I32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
}

impl Payload {
    pub fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
            Payload::I32(_) => DType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl TensorFile {
    pub fn new(shape: &[usize], payload: Payload) -> Result<Self> {
        if shape.iter().product::<usize>() != payload.len() {
            return Err(Error::invalid(format!(
                "payload of {} values for shape {shape:?}",
                payload.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            payload,
        })
    }

    pub fn f64(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            payload: Payload::F64(t.data().to_vec()),
        }
    }

    /// Narrows to single precision.
    pub fn f32(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            payload: Payload::F32(t.data().iter().map(|&v| v as f32).collect()),
        }
    }

    pub fn i32(shape: &[usize], values: Vec<i32>) -> Result<Self> {
        Self::new(shape, Payload::I32(values))
    }

    /// Floating payloads widened to `f64`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let data = match &self.payload {
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::F64(v) => v.clone(),
            Payload::I32(_) => {
                return Err(Error::invalid(
                    "integer tensor file where floats were expected",
                ))
            }
        };
        Tensor::new(&self.shape, data)
    }

    pub fn to_i32(&self) -> Result<&[i32]> {
        match &self.payload {
            Payload::I32(v) => Ok(v),
            _ => Err(Error::invalid(
                "float tensor file where integers were expected",
            )),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let dtype = self.payload.dtype();
        let mut out =
            Vec::with_capacity(HEADER + 8 * self.shape.len() + dtype.size() * self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&dtype.code().to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.payload {
            Payload::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::I32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    /// Parses `bytes`; `origin` names the source in error messages.
    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(origin, msg);
        if bytes.len() < HEADER {
            return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad(format!("bad magic {:?}", &bytes[..4])));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != VERSION {
            return Err(bad(format!("version {version}, expected {VERSION}")));
        }
        let dtype = DType::from_code(word(8))
            .ok_or_else(|| bad(format!("unknown dtype code {}", word(8))))?;
        let rank = word(12) as usize;
        let dims_end = HEADER + 8 * rank;
        if bytes.len() < dims_end {
            return Err(bad(format!("truncated extents for rank {rank}")));
        }
        let shape: Vec<usize> = (0..rank)
            .map(|i| {
                let at = HEADER + 8 * i;
                u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes")) as usize
            })
            .collect();
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad(format!("extents {shape:?} overflow")))?;
        let body = &bytes[dims_end..];
        let want = count
            .checked_mul(dtype.size())
            .ok_or_else(|| bad(format!("extents {shape:?} overflow")))?;
        if body.len() < want {
            return Err(bad(format!(
                "truncated payload: {} of {want} bytes",
                body.len()
            )));
        }
        if body.len() > want {
            return Err(bad(format!(
                "{} trailing bytes after payload",
                body.len() - want
            )));
        }
        let payload = match dtype {
            DType::F32 => Payload::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            DType::F64 => Payload::F64(
                body.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            DType::I32 => Payload::I32(
                body.chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
        };
        Ok(Self { shape, payload })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let f = TensorFile::i32(&[2], vec![1, -1]).unwrap();
        let b = f.encode();
        assert_eq!(&b[..4], b"TTKT");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[3, 0, 0, 0]);
        assert_eq!(&b[12..16], &[1, 0, 0, 0]);
        assert_eq!(&b[16..24], &[2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&b[24..], &[1, 0, 0, 0, 255, 255, 255, 255]);
    }

    #[test]
    fn rejects_damage() {
        let origin = Path::new("x.ttkt");
        let good = TensorFile::f64(&Tensor::from_rows(&[&[1.0, 2.0]])).encode();
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(TensorFile::decode(&magic, origin)
            .unwrap_err()
            .to_string()
            .contains("x.ttkt"));
        let mut version = good.clone();
        version[4] = 9;
        assert!(TensorFile::decode(&version, origin)
            .unwrap_err()
            .to_string()
            .contains("version"));
        let truncated = &good[..good.len() - 1];
        assert!(TensorFile::decode(truncated, origin)
            .unwrap_err()
            .to_string()
            .contains("truncated"));
    }
}
