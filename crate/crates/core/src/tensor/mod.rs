//! Dense row-major tensors and a tape-based reverse-mode autodiff graph.

mod graph;

#[cfg(test)]
mod gradcheck_tests;

pub use graph::{Gradients, Graph, LoraTerm, Var};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Contiguous row-major buffer with an explicit shape. A tensor with an empty
/// shape is a scalar holding one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: vec![0, 0],
            }),
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = *self.shape.last().unwrap_or(&1);
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn transposed(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        Ok(Self::from_fn([c, r], |i| self.data[(i % r) * c + i / r]))
    }

    /// Keep the listed rows of a rank-2 tensor, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let (_, c) = self.dims2("select_rows")?;
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self::new([rows.len(), c], data)
    }

    /// Keep the listed columns of a rank-2 tensor, in order.
    pub fn select_cols(&self, cols: &[usize]) -> Result<Self> {
        let (r, _) = self.dims2("select_cols")?;
        let mut data = Vec::with_capacity(r * cols.len());
        for i in 0..r {
            let row = self.row(i);
            data.extend(cols.iter().map(|&j| row[j]));
        }
        Self::new([r, cols.len()], data)
    }

    /// Dense `self · other` for rank-2 operands.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = Self::zeros([m, n]);
        if m > 0 && n > 0 && k > 0 {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &self.data,
                k as isize,
                1,
                &other.data,
                n as isize,
                1,
                T::zero(),
                &mut out.data,
                n as isize,
                1,
            );
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "add_assign",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn sum_squares(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise conversion to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_must_match_shape() {
        assert!(Tensor::<f64>::new([2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::<f64>::zeros([2, 3]).numel(), 6);
        assert_eq!(Tensor::<f32>::scalar(3.0).numel(), 1);
    }

    #[test]
    fn identity_matmul() {
        let a = Tensor::<f64>::new([2, 2], vec![1.5, -2.0, 0.25, 4.0]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn slicing_rows_and_cols() {
        let a = Tensor::<f64>::from_fn([3, 3], |i| i as f64);
        assert_eq!(a.select_rows(&[2, 0]).unwrap().data(), &[6.0, 7.0, 8.0, 0.0, 1.0, 2.0]);
        assert_eq!(a.select_cols(&[1]).unwrap().data(), &[1.0, 4.0, 7.0]);
        assert_eq!(a.transposed().unwrap().data()[1], 3.0);
    }
}
