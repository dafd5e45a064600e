//! Dense row-major `f64` tensors.
//!
//! Four-dimensional tensors are laid out BHWC (batch, height, width,
//! channels). Lower ranks are used for vectors, matrices and scalars
//! (rank 0, one element).

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                op: "Tensor::new",
                detail: format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Panics when `data.len()` does not match `shape`; for internal use
    /// where the length is constructed from the shape.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut SeededRng) -> Self {
        Self::from_fn(shape, |_| std * rng.normal())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// `(b, h, w, c)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, h, w, c] => Ok((b, h, w, c)),
            _ => Err(Error::InvalidShape {
                op: "dims4",
                detail: format!("expected BHWC tensor, got shape {:?}", self.shape),
            }),
        }
    }

    /// Channel extent (last axis); 1 for scalars.
    pub fn channels(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Batch extent (first axis).
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.data.len() / self.shape[0]
        }
    }

    /// Batch item `i` as a tensor with a leading extent of 1.
    pub fn item_at(&self, i: usize) -> Tensor {
        let m = self.item_len();
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Self::from_parts(shape, self.data[i * m..(i + 1) * m].to_vec())
    }

    /// Gathers batch items by index.
    pub fn select(&self, indices: &[usize]) -> Tensor {
        let m = self.item_len();
        let mut data = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            data.extend_from_slice(&self.data[i * m..(i + 1) * m]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self::from_parts(shape, data)
    }

    /// Concatenates along the batch axis. All items must share trailing dims.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| Error::InvalidShape {
            op: "stack",
            detail: "no tensors to stack".into(),
        })?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut b = 0;
        for t in items {
            if &t.shape[1..] != tail {
                return Err(Error::Shape {
                    op: "stack",
                    lhs: first.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            b += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = b;
        Ok(Self::from_parts(shape, data))
    }

    /// Channels `[start, end)` of the last axis.
    pub fn slice_channels(&self, start: usize, end: usize) -> Tensor {
        let c = self.channels();
        debug_assert!(start <= end && end <= c);
        let w = end - start;
        let rows = self.data.len() / c;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * c + start..r * c + end]);
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = w;
        Self::from_parts(shape, data)
    }

    /// Concatenates along the last axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ra, rb) = (a.rank(), b.rank());
        if ra != rb || ra == 0 || a.shape[..ra - 1] != b.shape[..rb - 1] {
            return Err(Error::Shape {
                op: "concat_channels",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let (ca, cb) = (a.channels(), b.channels());
        let rows = a.data.len() / ca;
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        for r in 0..rows {
            data.extend_from_slice(&a.data[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&b.data[r * cb..(r + 1) * cb]);
        }
        let mut shape = a.shape.clone();
        *shape.last_mut().unwrap() = ca + cb;
        Ok(Self::from_parts(shape, data))
    }

    /// Errors if any element is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::scalar(2.0).len(), 1);
    }

    #[test]
    fn slice_and_concat_are_inverse() {
        let mut rng = SeededRng::new(0);
        let t = Tensor::randn(&[2, 3, 3, 6], 1.0, &mut rng);
        let a = t.slice_channels(0, 2);
        let b = t.slice_channels(2, 6);
        assert_eq!(a.shape(), &[2, 3, 3, 2]);
        let back = Tensor::concat_channels(&a, &b).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn select_and_stack() {
        let t = Tensor::from_fn(&[3, 2], |i| i as f64);
        let s = t.select(&[2, 0]);
        assert_eq!(s.data(), &[4.0, 5.0, 0.0, 1.0]);
        let st = Tensor::stack(&[t.item_at(1), t.item_at(2)]).unwrap();
        assert_eq!(st.data(), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn non_finite_is_reported() {
        let t = Tensor::new(&[2], vec![1.0, f64::NAN]).unwrap();
        assert!(t.check_finite("x").is_err());
    }
}
