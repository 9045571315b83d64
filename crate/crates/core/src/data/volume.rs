use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const RVF_MAGIC: &[u8; 4] = b"RVF1";
const HEADER_LEN: usize = 4 + 1 + 12 + 1;

/// A scalar volume with an optional label map of identical dims.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    values: Vec<f32>,
    labels: Option<Vec<u8>>,
    pub provenance: String,
}

impl Volume {
    pub fn new(dims: [usize; 3], values: Vec<f32>, labels: Option<Vec<u8>>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Invalid(format!("volume dims must be positive, got {dims:?}")));
        }
        let count = checked_count(dims)?;
        if values.len() != count {
            return Err(Error::Invalid(format!(
                "volume {dims:?} needs {count} values, got {}",
                values.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != count {
                return Err(Error::Invalid(format!("label map has {} entries, expected {count}", l.len())));
            }
        }
        Ok(Volume {
            dims,
            values,
            labels,
            provenance: String::new(),
        })
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = provenance.into();
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Largest label value plus one, or 0 without labels.
    pub fn label_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |&m| m as usize + 1)
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(self.dims.to_vec(), self.values.clone()).expect("dims validated")
    }

    pub fn map_values(&self, f: impl Fn(f32) -> f32) -> Volume {
        Volume {
            dims: self.dims,
            values: self.values.iter().map(|&v| f(v)).collect(),
            labels: self.labels.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// RVF1 encoding: magic, dtype code, three little-endian `u32` dims, label
    /// flag, raw `f32` values, then raw `u8` labels when flagged.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.values.len() * 5);
        out.extend_from_slice(RVF_MAGIC);
        out.push(DType::F32 as u8);
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(self.labels.is_some() as u8);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(l) = &self.labels {
            out.extend_from_slice(l);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        if &bytes[..4] != RVF_MAGIC {
            return Err(Error::Format(format!("bad magic {:?}, expected \"RVF1\"", &bytes[..4])));
        }
        if bytes[4] != DType::F32 as u8 {
            return Err(Error::Format(format!("unsupported dtype code {}", bytes[4])));
        }
        let mut dims = [0usize; 3];
        for (a, d) in dims.iter_mut().enumerate() {
            let o = 5 + 4 * a;
            *d = u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        }
        if dims.contains(&0) {
            return Err(Error::Format(format!("zero dimension in {dims:?}")));
        }
        let has_labels = match bytes[17] {
            0 => false,
            1 => true,
            f => return Err(Error::Format(format!("bad label flag {f}"))),
        };
        let count = checked_count(dims)?;
        let expected = count
            .checked_mul(if has_labels { 5 } else { 4 })
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::Format(format!(
                "{} trailing bytes after {expected}-byte volume",
                bytes.len() - expected
            )));
        }
        let body = &bytes[HEADER_LEN..];
        let values = body[..count * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels = has_labels.then(|| body[count * 4..].to_vec());
        Volume::new(dims, values, labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Volume::from_bytes(&bytes)?.with_provenance(path.display().to_string()))
    }
}

fn checked_count(dims: [usize; 3]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= u32::MAX as usize * 16)
        .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let values: Vec<f32> = (0..60).map(|i| (i as f32 * 0.37).sin() * 1e3).collect();
        let labels: Vec<u8> = (0..60).map(|i| (i % 3) as u8).collect();
        let v = Volume::new([3, 4, 5], values, Some(labels)).unwrap();
        let back = Volume::from_bytes(&v.to_bytes()).unwrap();
        assert_eq!(back, v);
        let unlabeled = Volume::new([1, 1, 2], vec![f32::MIN_POSITIVE, -0.0], None).unwrap();
        let back = Volume::from_bytes(&unlabeled.to_bytes()).unwrap();
        assert_eq!(back.values()[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn truncation_reports_expected_and_actual() {
        let v = Volume::new([2, 2, 2], vec![1.0; 8], None).unwrap();
        let bytes = v.to_bytes();
        let err = Volume::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            Error::Truncated { expected, actual } => {
                assert_eq!(expected, 18 + 32);
                assert_eq!(actual, 18 + 29);
            }
            other => panic!("unexpected {other}"),
        }
        assert!(err_text(&bytes[..10]).contains("expected 18"));
    }

    #[test]
    fn bad_magic_and_zero_dims_rejected() {
        let v = Volume::new([1, 1, 1], vec![0.0], None).unwrap();
        let mut bytes = v.to_bytes();
        bytes[0] = b'X';
        assert!(err_text(&bytes).contains("magic"));
        let mut bytes = v.to_bytes();
        bytes[5..9].copy_from_slice(&0u32.to_le_bytes());
        assert!(err_text(&bytes).contains("zero dimension"));
        assert!(Volume::new([0, 2, 2], vec![], None).is_err());
    }

    #[test]
    fn huge_dims_overflow() {
        let mut bytes = Volume::new([1, 1, 1], vec![0.0], None).unwrap().to_bytes();
        for a in 0..3 {
            bytes[5 + 4 * a..9 + 4 * a].copy_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(err_text(&bytes).contains("overflow"));
    }

    fn err_text(bytes: &[u8]) -> String {
        Volume::from_bytes(bytes).unwrap_err().to_string()
    }
}
