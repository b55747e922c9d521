//! A minimal dense row-major tensor.
//!
//! The toolkit only ever needs rank-1 and rank-2 tensors (weight matrices,
//! activation sequences, logit blocks), so the container favours simplicity
//! and auditable indexing over generality: contiguous `Vec<T>` storage,
//! row-major layout, explicit shape checks at construction time.

use crate::error::{Error, Result};
use crate::numerics::Scalar;

/// Dense row-major tensor over a floating-point element type.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from an explicit shape and row-major data.
    ///
    /// Errors if the element count does not match the shape product or if any
    /// dimension is zero (empty tensors are never meaningful here and banning
    /// them removes a whole class of divide-by-zero edge cases downstream).
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape("Tensor::new", format!("degenerate shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} wants {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![T::zero(); numel])
    }

    /// Convenience rank-2 constructor.
    pub fn from_rows(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Shape as a slice, outermost dimension first.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// Always false: zero-sized tensors are rejected at construction.
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row-major data.
    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable row-major data.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Size of the trailing dimension (the "feature" axis for all kernels).
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// Checks the tensor is rank-2 and returns `(rows, cols)`.
    pub fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(op, format!("expected rank-2 tensor, got shape {other:?}"))),
        }
    }

    /// Borrow row `i` of a rank-2 tensor.
    ///
    /// Panics on rank/row violations; callers validate shape once via
    /// [`Tensor::expect_matrix`] and then index freely.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.last_dim();
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Mutable borrow of row `i` of a rank-2 tensor.
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let cols = self.last_dim();
        &mut self.data[i * cols..(i + 1) * cols]
    }

    /// Element accessor for rank-2 tensors.
    pub fn at(&self, i: usize, j: usize) -> T {
        self.row(i)[j]
    }

    /// Copies rows `range` of a rank-2 tensor into a new tensor.
    pub fn rows_range(&self, start: usize, end: usize) -> Result<Self> {
        let (rows, cols) = self.expect_matrix("Tensor::rows_range")?;
        if start >= end || end > rows {
            return Err(Error::shape(
                "Tensor::rows_range",
                format!("range {start}..{end} out of bounds for {rows} rows"),
            ));
        }
        Tensor::from_rows(end - start, cols, self.data[start * cols..end * cols].to_vec())
    }

    /// Copies a contiguous block of columns of a rank-2 tensor.
    pub fn cols_range(&self, start: usize, end: usize) -> Result<Self> {
        let (rows, cols) = self.expect_matrix("Tensor::cols_range")?;
        if start >= end || end > cols {
            return Err(Error::shape(
                "Tensor::cols_range",
                format!("range {start}..{end} out of bounds for {cols} columns"),
            ));
        }
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&self.row(r)[start..end]);
        }
        Tensor::from_rows(rows, end - start, out)
    }

    /// Stacks rank-2 tensors with equal column counts on top of each other.
    pub fn vcat(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("Tensor::vcat", "no tensors given".to_string()))?;
        let (_, cols) = first.expect_matrix("Tensor::vcat")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = p.expect_matrix("Tensor::vcat")?;
            if c != cols {
                return Err(Error::shape(
                    "Tensor::vcat",
                    format!("column mismatch: {cols} vs {c}"),
                ));
            }
            rows += r;
            data.extend_from_slice(p.data());
        }
        Tensor::from_rows(rows, cols, data)
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Applies `f` to every element, yielding a new tensor of the same shape.
    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_validates_shape_product() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![0], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![], vec![]).is_err());
    }

    #[test]
    fn row_major_indexing() {
        let t = Tensor::from_rows(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.row(0), &[1.0, 2.0, 3.0]);
        assert_eq!(t.row(1), &[4.0, 5.0, 6.0]);
        assert_eq!(t.at(1, 2), 6.0);
        assert_eq!(t.last_dim(), 3);
    }

    #[test]
    fn rows_and_cols_slicing() {
        let t = Tensor::from_rows(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mid = t.rows_range(1, 3).unwrap();
        assert_eq!(mid.shape(), &[2, 2]);
        assert_eq!(mid.data(), &[3.0, 4.0, 5.0, 6.0]);
        let right = t.cols_range(1, 2).unwrap();
        assert_eq!(right.shape(), &[3, 1]);
        assert_eq!(right.data(), &[2.0, 4.0, 6.0]);
        assert!(t.rows_range(2, 2).is_err());
        assert!(t.cols_range(0, 3).is_err());
    }

    #[test]
    fn vcat_stacks_and_validates() {
        let a = Tensor::from_rows(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_rows(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = Tensor::vcat(&[a.clone(), b]).unwrap();
        assert_eq!(s.shape(), &[3, 2]);
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let odd = Tensor::from_rows(1, 3, vec![0.0; 3]).unwrap();
        assert!(Tensor::vcat(&[a, odd]).is_err());
    }

    #[test]
    fn finiteness_probe() {
        let ok = Tensor::from_rows(1, 2, vec![1.0, -2.0]).unwrap();
        assert!(ok.all_finite());
        let bad = Tensor::from_rows(1, 2, vec![1.0, f64::NAN]).unwrap();
        assert!(!bad.all_finite());
    }
}
