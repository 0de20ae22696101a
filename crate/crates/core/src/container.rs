//! "LDT" tensor container.
//!
//! ```text
//! magic "LDT1" | dtype u8 | ndim u8 | reserved u16 | ndim × u32 dims | payload
//! ```
//!
//! dtype 1 is float32, 2 is u32 (both little-endian), 3 is one byte per
//! element (used for 0/1 validity bitmaps). The payload is row-major. A file
//! may hold several records back to back.

use std::fs;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"LDT1";
pub const HEADER_LEN: usize = 8;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad container magic {0:02x?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("tensor dimensions {0:?} overflow the addressable size")]
    DimOverflow(Vec<u32>),
    #[error("truncated file: needed {expected} bytes, {actual} available")]
    TruncatedFile { expected: usize, actual: usize },
    #[error("expected {expected} record(s), found {found}")]
    RecordCount { expected: usize, found: usize },
    #[error("record {index}: expected {expected}, found {found}")]
    UnexpectedRecord {
        index: usize,
        expected: String,
        found: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U32(Vec<u32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype_code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 1,
            TensorData::U32(_) => 2,
            TensorData::U8(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn name(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::U32(_) => "u32",
            TensorData::U8(_) => "u8",
        }
    }
}

fn element_size(dtype: u8) -> Option<usize> {
    match dtype {
        1 | 2 => Some(4),
        3 => Some(1),
        _ => None,
    }
}

/// A dense row-major tensor.
///
/// `PartialEq` compares floats by value; use [`Tensor::to_bytes`] when bitwise
/// identity matters.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u32>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<u32>, data: TensorData) -> Self {
        let count: usize = dims.iter().map(|&d| d as usize).product();
        assert_eq!(count, data.len(), "dims {dims:?} do not match payload");
        Self { dims, data }
    }

    pub fn byte_len(&self) -> usize {
        HEADER_LEN + 4 * self.dims.len() + self.payload_len()
    }

    pub fn payload_len(&self) -> usize {
        self.data.len() * element_size(self.data.dtype_code()).unwrap()
    }

    pub fn write_into(&self, out: &mut Vec<u8>) {
        out.reserve(self.byte_len());
        out.extend_from_slice(&MAGIC);
        out.push(self.data.dtype_code());
        out.push(self.dims.len() as u8);
        out.extend_from_slice(&[0, 0]);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_into(&mut out);
        out
    }

    /// Parses one record from the front of `bytes`, returning it with the
    /// number of bytes consumed.
    pub fn parse(bytes: &[u8]) -> Result<(Tensor, usize), ContainerError> {
        let prefix = &bytes[..bytes.len().min(MAGIC.len())];
        if prefix != &MAGIC[..prefix.len()] {
            return Err(ContainerError::BadMagic(prefix.to_vec()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(ContainerError::TruncatedFile {
                expected: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        let dtype = bytes[4];
        let elem = element_size(dtype).ok_or(ContainerError::UnsupportedDtype(dtype))?;
        let ndim = bytes[5] as usize;
        let dims_end = HEADER_LEN + 4 * ndim;
        if bytes.len() < dims_end {
            return Err(ContainerError::TruncatedFile {
                expected: dims_end,
                actual: bytes.len(),
            });
        }
        let dims: Vec<u32> = bytes[HEADER_LEN..dims_end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let payload = dims
            .iter()
            .try_fold(elem, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| ContainerError::DimOverflow(dims.clone()))?;
        let end = dims_end
            .checked_add(payload)
            .ok_or_else(|| ContainerError::DimOverflow(dims.clone()))?;
        if bytes.len() < end {
            return Err(ContainerError::TruncatedFile {
                expected: end,
                actual: bytes.len(),
            });
        }
        let body = &bytes[dims_end..end];
        let data = match dtype {
            1 => TensorData::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            2 => TensorData::U32(
                body.chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            _ => TensorData::U8(body.to_vec()),
        };
        Ok((Tensor { dims, data }, end))
    }

    pub fn dims_usize(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    pub fn expect_f32(self, index: usize) -> Result<(Vec<usize>, Vec<f32>), ContainerError> {
        let dims = self.dims_usize();
        match self.data {
            TensorData::F32(v) => Ok((dims, v)),
            other => Err(unexpected(index, "f32", other.name())),
        }
    }

    pub fn expect_u32(self, index: usize) -> Result<(Vec<usize>, Vec<u32>), ContainerError> {
        let dims = self.dims_usize();
        match self.data {
            TensorData::U32(v) => Ok((dims, v)),
            other => Err(unexpected(index, "u32", other.name())),
        }
    }

    pub fn expect_u8(self, index: usize) -> Result<(Vec<usize>, Vec<u8>), ContainerError> {
        let dims = self.dims_usize();
        match self.data {
            TensorData::U8(v) => Ok((dims, v)),
            other => Err(unexpected(index, "u8", other.name())),
        }
    }
}

pub(crate) fn unexpected(index: usize, expected: &str, found: &str) -> ContainerError {
    ContainerError::UnexpectedRecord {
        index,
        expected: expected.to_owned(),
        found: found.to_owned(),
    }
}

pub fn encode_all(tensors: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::with_capacity(tensors.iter().map(Tensor::byte_len).sum());
    for t in tensors {
        t.write_into(&mut out);
    }
    out
}

pub fn decode_all(mut bytes: &[u8]) -> Result<Vec<Tensor>, ContainerError> {
    if bytes.is_empty() {
        return Err(ContainerError::TruncatedFile {
            expected: HEADER_LEN,
            actual: 0,
        });
    }
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let (t, used) = Tensor::parse(bytes)?;
        out.push(t);
        bytes = &bytes[used..];
    }
    Ok(out)
}

pub fn write_tensors(path: impl AsRef<Path>, tensors: &[Tensor]) -> Result<(), ContainerError> {
    fs::write(path, encode_all(tensors))?;
    Ok(())
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<Vec<Tensor>, ContainerError> {
    decode_all(&fs::read(path)?)
}

/// Reads a file that must contain exactly one record.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor, ContainerError> {
    let mut all = read_tensors(path)?;
    if all.len() != 1 {
        return Err(ContainerError::RecordCount {
            expected: 1,
            found: all.len(),
        });
    }
    Ok(all.pop().unwrap())
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<(), ContainerError> {
    write_tensors(path, std::slice::from_ref(tensor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes() {
        let t = Tensor::new(vec![2, 3], TensorData::U8(vec![1, 0, 1, 1, 0, 0]));
        let b = t.to_bytes();
        assert_eq!(&b[..8], b"LDT1\x03\x02\x00\x00");
        assert_eq!(&b[8..16], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(b.len(), 8 + 8 + 6);
    }

    #[test]
    fn payload_size_of_seven_channel_frame() {
        let t = Tensor::new(vec![7, 64, 512], TensorData::F32(vec![0.0; 7 * 64 * 512]));
        assert_eq!(t.payload_len(), 917_504);
        assert_eq!(t.to_bytes().len(), 8 + 12 + 917_504);
    }

    #[test]
    fn truncation_overflow_and_magic() {
        let t = Tensor::new(vec![4], TensorData::U32(vec![1, 2, 3, 4]));
        let b = t.to_bytes();
        for cut in [0, 3, 7, 11, b.len() - 1] {
            assert!(
                matches!(
                    decode_all(&b[..cut]),
                    Err(ContainerError::TruncatedFile { .. })
                ),
                "cut {cut}"
            );
        }
        let mut bad = b.clone();
        bad[2] = b'X';
        assert!(matches!(decode_all(&bad), Err(ContainerError::BadMagic(_))));
        let mut dtype = b.clone();
        dtype[4] = 9;
        assert!(matches!(
            decode_all(&dtype),
            Err(ContainerError::UnsupportedDtype(9))
        ));

        let mut huge = b"LDT1\x01\x03\x00\x00".to_vec();
        for _ in 0..3 {
            huge.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(
            decode_all(&huge),
            Err(ContainerError::DimOverflow(_))
        ));
    }

    #[test]
    fn multiple_records() {
        let a = Tensor::new(vec![2], TensorData::F32(vec![1.5, -0.0]));
        let b = Tensor::new(vec![1, 1], TensorData::U8(vec![1]));
        let bytes = encode_all(&[a.clone(), b.clone()]);
        assert_eq!(decode_all(&bytes).unwrap(), vec![a, b]);
    }

    proptest! {
        #[test]
        fn float_round_trip_is_bitwise(bits in prop::collection::vec(any::<u32>(), 0..64)) {
            let values: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
            let t = Tensor::new(vec![values.len() as u32], TensorData::F32(values));
            let bytes = t.to_bytes();
            let back = decode_all(&bytes).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(back[0].to_bytes(), bytes);
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let mut framed = b"LDT1".to_vec();
            framed.extend_from_slice(&bytes);
            let _ = decode_all(&framed);
            let _ = decode_all(&bytes);
        }
    }
}
