//! Dense row-major `f64` tensors and the `RCT1` container format.
//!
//! Container layout (all little-endian):
//!
//! ```text
//! b"RCT1" | rank: u32 | extents: rank x u32 | payload: f64 x product(extents)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RCT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::dim("from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.shape.len() + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &e in &self.shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a container; `origin` only labels errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |detail: String| Error::format(origin, detail);
        if bytes.len() < 8 {
            return Err(fail(format!("truncated header ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(fail(format!("bad magic {:?}", &bytes[..4])));
        }
        let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header = 8 + 4 * rank;
        if bytes.len() < header {
            return Err(fail(format!("truncated extents for rank {rank}")));
        }
        let shape: Vec<usize> = bytes[8..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| fail(format!("extents {shape:?} overflow")))?;
        let expected = numel
            .checked_mul(8)
            .and_then(|n| n.checked_add(header))
            .ok_or_else(|| fail(format!("extents {shape:?} overflow")))?;
        if bytes.len() != expected {
            return Err(fail(format!(
                "payload length {} does not match extents {shape:?} (expected {})",
                bytes.len() - header,
                expected - header
            )));
        }
        let data = bytes[header..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { shape, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn container_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..4], b"RCT1");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..24], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 32);
    }

    #[test]
    fn container_roundtrip_is_bit_exact() {
        let t = Tensor::new(
            vec![3],
            vec![f64::MIN_POSITIVE, -0.0, 0.1 + 0.2],
        )
        .unwrap();
        let back = Tensor::from_bytes(&t.to_bytes(), Path::new("mem")).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&t), bits(&back));
        assert_eq!(t.shape(), back.shape());
    }

    #[test]
    fn rejects_truncation_and_foreign_magic() {
        let t = Tensor::vector(vec![1.0, 2.0]);
        let b = t.to_bytes();
        let err = Tensor::from_bytes(&b[..b.len() - 3], Path::new("w.rct")).unwrap_err();
        assert!(err.to_string().contains("w.rct"));

        let mut swapped = b.clone();
        swapped[..4].copy_from_slice(b"1TCR");
        assert!(matches!(
            Tensor::from_bytes(&swapped, Path::new("x")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn scalar_has_rank_zero() {
        let s = Tensor::scalar(4.0);
        let back = Tensor::from_bytes(&s.to_bytes(), Path::new("s")).unwrap();
        assert_eq!(back.rank(), 0);
        assert_eq!(back.item(), 4.0);
    }
}
