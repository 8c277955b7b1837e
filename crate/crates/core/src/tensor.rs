//! Dense `f32` tensors and the `DMT1` on-disk container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DMT1" | u8 ndim | ndim x u32 extent | product(extents) x f32 payload (row-major)
//! ```
//!
//! A file is exactly `5 + 4 * ndim + 4 * product(dims)` bytes long. NaN is
//! never written and is rejected on read.

use std::fs;
use std::path::Path;

use thiserror::Error;
use crate::fsutil::write_atomic;

/// Magic bytes opening every tensor file.
pub const MAGIC: &[u8; 4] = b"DMT1";
/// Largest supported rank.
pub const MAX_NDIM: usize = 5;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("tensor rank {0} outside 1..={MAX_NDIM}")]
    BadRank(usize),
    #[error("tensor extent at axis {axis} is zero")]
    ZeroExtent { axis: usize },
    #[error("tensor extent {0} does not fit in u32")]
    ExtentTooLarge(usize),
    #[error("dims {dims:?} require {expected} values, got {actual}")]
    LengthMismatch {
        dims: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("NaN at flat index {0}")]
    NaN(usize),
    #[error("bad magic {0:?}, expected \"DMT1\"")]
    BadMagic([u8; 4]),
    #[error("truncated tensor: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("{0} trailing bytes after tensor payload")]
    TrailingBytes(usize),
    #[error("tensor element count overflows")]
    Overflow,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Row-major dense array of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorMap {
    dims: Vec<usize>,
    data: Vec<f32>,
}

fn element_count(dims: &[usize]) -> Result<usize, TensorError> {
    if dims.is_empty() || dims.len() > MAX_NDIM {
        return Err(TensorError::BadRank(dims.len()));
    }
    let mut count = 1usize;
    for (axis, &d) in dims.iter().enumerate() {
        if d == 0 {
            return Err(TensorError::ZeroExtent { axis });
        }
        if d > u32::MAX as usize {
            return Err(TensorError::ExtentTooLarge(d));
        }
        count = count.checked_mul(d).ok_or(TensorError::Overflow)?;
    }
    Ok(count)
}

impl TensorMap {
    /// Builds a tensor, checking rank, extents and element count. NaN is
    /// allowed in memory; it is rejected when encoding.
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let expected = element_count(&dims)?;
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                dims,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self, TensorError> {
        let n = element_count(&dims)?;
        Ok(Self {
            dims,
            data: vec![0.0; n],
        })
    }

    /// Converts `f64` values, rounding to the nearest `f32`.
    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self, TensorError> {
        Self::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Flat row-major offset of a multi-index. Panics on rank mismatch or
    /// out-of-range index.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.dims.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {i} out of range for extent {d}");
                acc * d + i
            })
    }

    pub fn get(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    /// Serialized size in bytes.
    pub fn encoded_len(&self) -> usize {
        5 + 4 * self.dims.len() + 4 * self.data.len()
    }

    /// Encodes to the `DMT1` container. Fails if any value is NaN.
    pub fn encode(&self) -> Result<Vec<u8>, TensorError> {
        if let Some(i) = self.data.iter().position(|v| v.is_nan()) {
            return Err(TensorError::NaN(i));
        }
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    /// Decodes a complete `DMT1` buffer. The buffer must contain exactly one
    /// tensor with no trailing bytes.
    pub fn decode(bytes: &[u8]) -> Result<Self, TensorError> {
        if bytes.len() < 5 {
            return Err(TensorError::Truncated {
                needed: 5,
                available: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("length checked");
        if &magic != MAGIC {
            return Err(TensorError::BadMagic(magic));
        }
        let ndim = bytes[4] as usize;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(TensorError::BadRank(ndim));
        }
        let header_len = 5 + 4 * ndim;
        if bytes.len() < header_len {
            return Err(TensorError::Truncated {
                needed: header_len,
                available: bytes.len(),
            });
        }
        let dims: Vec<usize> = bytes[5..header_len]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("chunk of 4")) as usize)
            .collect();
        let count = element_count(&dims)?;
        let needed = count
            .checked_mul(4)
            .and_then(|n| n.checked_add(header_len))
            .ok_or(TensorError::Overflow)?;
        if bytes.len() < needed {
            return Err(TensorError::Truncated {
                needed,
                available: bytes.len(),
            });
        }
        if bytes.len() > needed {
            return Err(TensorError::TrailingBytes(bytes.len() - needed));
        }
        let mut data = Vec::with_capacity(count);
        for (i, c) in bytes[header_len..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(c.try_into().expect("chunk of 4"));
            if v.is_nan() {
                return Err(TensorError::NaN(i));
            }
            data.push(v);
        }
        Ok(Self { dims, data })
    }
}

/// Writes `t` to `path`. Nothing is written if the payload contains NaN.
pub fn write_tensor(t: &TensorMap, path: &Path) -> Result<(), TensorError> {
    let bytes = t.encode()?;
    write_atomic(path, &bytes).map_err(|source| TensorError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_tensor(path: &Path) -> Result<TensorMap, TensorError> {
    let bytes = fs::read(path).map_err(|source| TensorError::Io {
        path: path.display().to_string(),
        source,
    })?;
    TensorMap::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn smallest_tensor_layout() {
        let t = TensorMap::new(vec![1], vec![0.0]).unwrap();
        let bytes = t.encode().unwrap();
        assert_eq!(
            bytes,
            vec![b'D', b'M', b'T', b'1', 1, 1, 0, 0, 0, 0, 0, 0, 0]
        );
        assert_eq!(bytes.len(), t.encoded_len());
    }

    #[test]
    fn two_by_two_layout() {
        let t = TensorMap::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = t.encode().unwrap();
        assert_eq!(bytes.len(), 13 + 16);
        assert_eq!(&bytes[5..13], &[2, 0, 0, 0, 2, 0, 0, 0]);
        let payload: Vec<f32> = bytes[13..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(payload, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = TensorMap::new(vec![1], vec![1.0]).unwrap().encode().unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            TensorMap::decode(&bytes),
            Err(TensorError::BadMagic(_))
        ));
    }

    #[test]
    fn short_payload_is_truncation() {
        let bytes = TensorMap::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap()
            .encode()
            .unwrap();
        let cut = &bytes[..13 + 12];
        assert!(matches!(
            TensorMap::decode(cut),
            Err(TensorError::Truncated { .. })
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = TensorMap::new(vec![1], vec![1.0]).unwrap().encode().unwrap();
        bytes.push(0);
        assert!(matches!(
            TensorMap::decode(&bytes),
            Err(TensorError::TrailingBytes(1))
        ));
    }

    #[test]
    fn nan_rejected_both_ways() {
        let t = TensorMap::new(vec![2], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(t.encode(), Err(TensorError::NaN(1))));

        let mut bytes = TensorMap::new(vec![2], vec![1.0, 2.0]).unwrap().encode().unwrap();
        bytes[13..17].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(TensorMap::decode(&bytes), Err(TensorError::NaN(1))));
    }

    #[test]
    fn zero_extent_rejected() {
        let bytes = [b'D', b'M', b'T', b'1', 2, 2, 0, 0, 0, 0, 0, 0, 0];
        assert!(matches!(
            TensorMap::decode(&bytes),
            Err(TensorError::ZeroExtent { axis: 1 })
        ));
        assert!(TensorMap::new(vec![3, 0], vec![]).is_err());
    }

    #[test]
    fn huge_extents_do_not_allocate() {
        let mut bytes = vec![b'D', b'M', b'T', b'1', 5];
        for _ in 0..5 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(TensorMap::decode(&bytes).is_err());
    }

    #[test]
    fn write_read_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dmt");
        let t = TensorMap::new(vec![2, 3], (0..6).map(|v| v as f32 * 0.5).collect()).unwrap();
        write_tensor(&t, &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len() as usize, t.encoded_len());
        assert_eq!(read_tensor(&path).unwrap(), t);

        let bad = TensorMap::new(vec![1], vec![f32::NAN]).unwrap();
        let bad_path = dir.path().join("bad.dmt");
        assert!(write_tensor(&bad, &bad_path).is_err());
        assert!(!bad_path.exists());
    }

    fn arb_tensor() -> impl Strategy<Value = TensorMap> {
        prop::collection::vec(1usize..5, 1..=MAX_NDIM).prop_flat_map(|dims| {
            let n: usize = dims.iter().product();
            prop::collection::vec(
                any::<u32>().prop_filter("no NaN", |b| !f32::from_bits(*b).is_nan()),
                n,
            )
            .prop_map(move |bits| {
                TensorMap::new(dims.clone(), bits.into_iter().map(f32::from_bits).collect())
                    .unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(t in arb_tensor()) {
            let bytes = t.encode().unwrap();
            prop_assert_eq!(bytes.len(), 5 + 4 * t.ndim() + 4 * t.len());
            let back = TensorMap::decode(&bytes).unwrap();
            prop_assert_eq!(back.dims(), t.dims());
            let a: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let _ = TensorMap::decode(&bytes);
        }
    }
}
