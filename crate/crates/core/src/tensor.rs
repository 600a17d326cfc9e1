//! Dense row-major `f64` tensors and the `PJXT` binary container.
//!
//! Container layout (all little-endian):
//!
//! ```text
//! b"PJXT" | version: u8 = 1 | ndim: u8 | ndim x u32 extents | prod(extents) x f64
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PJXT_MAGIC: &[u8; 4] = b"PJXT";
pub const PJXT_VERSION: u8 = 1;

/// Dense row-major tensor of 64-bit reals.
///
/// The data length always equals the product of the extents. A rank-0
/// shape (`[]`) holds exactly one value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidTensor(format!("extents must be positive, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "vector must be non-empty");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn one_hot(len: usize, index: usize) -> Result<Self> {
        if index >= len {
            return Err(Error::OutOfVocabulary { id: index, size: len });
        }
        let mut t = Self::zeros(&[len]);
        t.data[index] = 1.0;
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Number of columns when the leading axis is treated as channels.
    pub(crate) fn columns(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * self.rank() + 8 * self.numel());
        out.extend_from_slice(PJXT_MAGIC);
        out.push(PJXT_VERSION);
        out.push(self.rank() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes a `PJXT` buffer. `origin` names the source in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            path: origin.to_string(),
            reason,
        };
        if bytes.len() < 6 {
            return Err(corrupt(format!("header truncated ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != PJXT_MAGIC {
            return Err(corrupt(format!("bad magic {:?}", &bytes[..4])));
        }
        if bytes[4] != PJXT_VERSION {
            return Err(corrupt(format!("unsupported version {}", bytes[4])));
        }
        let ndim = bytes[5] as usize;
        let header = 6 + 4 * ndim;
        if bytes.len() < header {
            return Err(corrupt("extent table truncated".into()));
        }
        let shape: Vec<usize> = bytes[6..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        if shape.contains(&0) {
            return Err(corrupt(format!("zero extent in {shape:?}")));
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| corrupt(format!("extent product overflows for {shape:?}")))?;
        let expected = n
            .checked_mul(8)
            .and_then(|b| b.checked_add(header))
            .ok_or_else(|| corrupt("payload size overflows".into()))?;
        if bytes.len() != expected {
            return Err(corrupt(format!(
                "payload is {} bytes, expected {}",
                bytes.len() - header,
                expected - header
            )));
        }
        let data = bytes[header..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Self { shape, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let write = || -> io::Result<()> {
            let mut f = fs::File::create(path)?;
            f.write_all(&self.to_bytes())?;
            f.flush()
        };
        write().map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn scalar_has_one_value() {
        let s = Tensor::scalar(3.5);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.item(), 3.5);
    }

    #[test]
    fn container_header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..4], b"PJXT");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(&b[10..14], &1u32.to_le_bytes());
        assert_eq!(&b[14..22], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 6 + 8 + 16);
    }

    #[test]
    fn truncated_buffer_is_corruption_not_panic() {
        let t = Tensor::ones(&[3, 2, 2]);
        let b = t.to_bytes();
        for cut in 0..b.len() {
            match Tensor::from_bytes(&b[..cut], "mem") {
                Err(Error::Corrupt { .. }) => {}
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        assert!(matches!(
            Tensor::from_bytes(b"NOPE\x01\x00", "mem"),
            Err(Error::Corrupt { .. })
        ));
    }

    #[test]
    fn file_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pjxt");
        let t = Tensor::new(vec![2, 2], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap();
        t.save(&p).unwrap();
        let back = Tensor::load(&p).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    proptest::proptest! {
        #[test]
        fn bytes_round_trip(shape in proptest::collection::vec(1usize..4, 0..4), seed in 0u64..1000) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| (i as f64 + seed as f64).sin() * 1e3).collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = Tensor::from_bytes(&t.to_bytes(), "mem").unwrap();
            proptest::prop_assert_eq!(back, t);
        }
    }
}
