use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"LMT1";
pub const MAX_DIMS: usize = 4;

/// Dense row-major f32 array with 1 to 4 dimensions.
///
/// Stacks of planes are channel-major (`[C, H, W]`), so each plane is a
/// contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_DIMS {
            return Err(Error::shape(format!(
                "tensor must have 1..={MAX_DIMS} dims, got {}",
                dims.len()
            )));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { offset: i * 4 });
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let len = dims.iter().product();
        Tensor::new(dims, vec![0.0; len])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `[C, H, W]` view of this tensor. A 2-D tensor is treated as one plane.
    pub fn as_stack(&self) -> Result<(usize, usize, usize)> {
        match *self.dims.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            [h, w] => Ok((1, h, w)),
            _ => Err(Error::shape(format!(
                "expected a [C,H,W] or [H,W] tensor, got {:?}",
                self.dims
            ))),
        }
    }

    /// Plane `c` of a `[C, H, W]` stack.
    pub fn plane(&self, c: usize) -> &[f32] {
        let (_, h, w) = self.as_stack().expect("plane() on a non-stack tensor");
        &self.data[c * h * w..(c + 1) * h * w]
    }

    /// Size in bytes of the LMT1 encoding.
    pub fn encoded_len(&self) -> usize {
        4 + 1 + 4 * self.dims.len() + 4 * self.data.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != TENSOR_MAGIC {
            return Err(Error::BadMagic {
                offset: 0,
                expected: "LMT1",
            });
        }
        let mut cursor = 4;
        let ndim = *bytes.get(cursor).ok_or(Error::TruncatedPayload {
            offset: cursor,
            needed: 1,
        })? as usize;
        if ndim == 0 || ndim > MAX_DIMS {
            return Err(Error::BadHeader(format!(
                "ndim {ndim} at byte {cursor} not in 1..={MAX_DIMS}"
            )));
        }
        cursor += 1;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let raw = take4(bytes, cursor)?;
            dims.push(u32::from_le_bytes(raw) as usize);
            cursor += 4;
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::BadHeader(format!("dims {dims:?} overflow")))?;
        let payload_len = count
            .checked_mul(4)
            .ok_or_else(|| Error::BadHeader(format!("dims {dims:?} overflow")))?;
        let available = bytes.len() - cursor;
        if available < payload_len {
            return Err(Error::TruncatedPayload {
                offset: bytes.len(),
                needed: payload_len - available,
            });
        }
        if available > payload_len {
            return Err(Error::BadHeader(format!(
                "{} trailing bytes after payload ending at byte {}",
                available - payload_len,
                cursor + payload_len
            )));
        }
        let mut data = Vec::with_capacity(count);
        for chunk in bytes[cursor..].chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(Error::NonFiniteValue { offset: cursor });
            }
            data.push(v);
            cursor += 4;
        }
        Ok(Tensor { dims, data })
    }
}

fn take4(bytes: &[u8], at: usize) -> Result<[u8; 4]> {
    bytes
        .get(at..at + 4)
        .map(|s| [s[0], s[1], s[2], s[3]])
        .ok_or_else(|| Error::TruncatedPayload {
            offset: bytes.len(),
            needed: at + 4 - bytes.len(),
        })
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes)
}

pub fn write_tensor(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor.to_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_known_layout() {
        let mut bytes = b"LMT1".to_vec();
        bytes.push(2);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let t = Tensor::from_bytes(&bytes).unwrap();
        assert_eq!(t.dims(), &[2, 2]);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn single_scalar_is_thirteen_bytes() {
        let t = Tensor::new(vec![1], vec![0.0]).unwrap();
        assert_eq!(t.to_bytes().len(), 13);
        assert_eq!(t.encoded_len(), 13);
    }

    #[test]
    fn rejects_nan_payload_with_offset() {
        let mut bytes = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().to_bytes();
        let nan = f32::NAN.to_le_bytes();
        bytes[13..17].copy_from_slice(&nan);
        match Tensor::from_bytes(&bytes) {
            Err(Error::NonFiniteValue { offset }) => assert_eq!(offset, 13),
            other => panic!("expected NonFiniteValue, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(
            Tensor::from_bytes(b"LMT2\x01\x01\x00\x00\x00"),
            Err(Error::BadMagic { offset: 0, .. })
        ));
        let bytes = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().to_bytes();
        assert!(matches!(
            Tensor::from_bytes(&bytes[..bytes.len() - 2]),
            Err(Error::TruncatedPayload { needed: 2, .. })
        ));
        assert!(matches!(
            Tensor::from_bytes(&bytes[..6]),
            Err(Error::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn unwritable_path_is_io_failure() {
        let t = Tensor::new(vec![1], vec![0.0]).unwrap();
        let err = write_tensor(&t, "/nonexistent-dir/x/y.lmt").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.lmt");
        let t = Tensor::new(vec![2, 1, 3], vec![0.5, -1.0, 2.0, 3.5, 1e-30, -0.0]).unwrap();
        write_tensor(&t, &path).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.dims(), t.dims());
        let a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, t.encoded_len());
    }
}
