//! Dense double-precision tensors and their on-disk format.
//!
//! Layout is row-major. Feature maps are rank 3 (`C×H×W`) or rank 4
//! (`N×C×H×W`); vectors and scalars use rank 1.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::TensorError;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "new" });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for kernels that already guarantee the length.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn vector(values: &[f64]) -> Result<Self, TensorError> {
        Self::new(&[values.len()], values.to_vec())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Interprets the tensor as `N×C×H×W`; rank-3 tensors get `N = 1`.
    pub fn nchw(&self) -> Result<[usize; 4], TensorError> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok([1, c, h, w]),
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(TensorError::Rank {
                expected: "3 or 4",
                shape: self.shape.clone(),
            }),
        }
    }

    /// Spatial dims `(H, W)` of a feature map.
    pub fn spatial(&self) -> Result<(usize, usize), TensorError> {
        let [_, _, h, w] = self.nchw()?;
        Ok((h, w))
    }

    pub fn item(&self) -> Result<f64, TensorError> {
        if self.data.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    /// Value at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {i} out of bound {d}");
            acc * d + i
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self, TensorError> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self, TensorError> {
        Self::new(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64, TensorError> {
        check_same_shape(self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Writes the tensor as a one-line JSON header followed by
    /// little-endian `f64` values in row-major order.
    pub fn write_to<W: Write>(&self, name: &str, mut out: W) -> Result<(), TensorError> {
        let header = TensorHeader {
            name: name.to_string(),
            shape: self.shape.clone(),
        };
        let line = serde_json::to_string(&header).map_err(|e| TensorError::Format(e.to_string()))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads one record written by [`Tensor::write_to`]; returns the name too.
    pub fn read_from<R: BufRead>(mut input: R) -> Result<(String, Tensor), TensorError> {
        let mut line = String::new();
        if input.read_line(&mut line)? == 0 {
            return Err(TensorError::Format("unexpected end of stream".into()));
        }
        let header: TensorHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| TensorError::Format(e.to_string()))?;
        let n: usize = header.shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        input.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok((header.name, Tensor::new(&header.shape, data)?))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

pub(crate) fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length_and_nan() {
        assert!(Tensor::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(matches!(
            Tensor::new(&[1], vec![f64::NAN]),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64).unwrap();
        assert_eq!(t.at(&[1, 2, 3]), 23.0);
        assert_eq!(t.nchw().unwrap(), [1, 2, 3, 4]);
    }

    #[test]
    fn serialization_round_trip() {
        let t = Tensor::from_fn(&[2, 1, 3], |i| i as f64 * 0.25 - 1.0).unwrap();
        let mut buf = Vec::new();
        t.write_to("p3", &mut buf).unwrap();
        t.write_to("p4", &mut buf).unwrap();
        let mut cursor = std::io::Cursor::new(buf);
        let (name, back) = Tensor::read_from(&mut cursor).unwrap();
        assert_eq!(name, "p3");
        assert_eq!(back, t);
        let (name, _) = Tensor::read_from(&mut cursor).unwrap();
        assert_eq!(name, "p4");
    }

    #[test]
    fn header_is_text_and_payload_little_endian() {
        let t = Tensor::vector(&[1.0]).unwrap();
        let mut buf = Vec::new();
        t.write_to("x", &mut buf).unwrap();
        let nl = buf.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(&buf[..nl], br#"{"name":"x","shape":[1]}"#);
        assert_eq!(&buf[nl + 1..], &1.0f64.to_le_bytes());
    }
}
