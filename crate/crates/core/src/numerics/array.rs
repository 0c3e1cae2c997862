use serde::{Deserialize, Serialize};

use super::NumericsError;
use crate::scalar::Scalar;

/// Dense row-major array.
///
/// Rank-2 arrays are the working currency of the tape; rank-1 arrays are
/// treated as a single row wherever a matrix is expected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct NdArray<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> NdArray<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self, NumericsError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::Dimension(format!(
                "shape {:?} holds {} values but {} were given",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, NumericsError> {
        Self::from_vec(vec![rows, cols], data)
    }

    /// Single-row matrix.
    pub fn row(data: Vec<T>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
    }

    /// Builds a matrix from `f64` rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NumericsError::Dimension(format!(
                    "ragged rows: expected {} columns, found {}",
                    cols,
                    r.len()
                )));
            }
            data.extend(r.iter().map(|&v| T::lit(v)));
        }
        Self::matrix(rows.len(), cols, data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows when viewed as a matrix (rank 1 is a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, NumericsError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(NumericsError::Dimension(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn as_matrix_shape(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale_assign(&mut self, s: T) {
        for a in &mut self.data {
            *a = *a * s;
        }
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = self.as_matrix_shape();
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// Operand layout for [`gemm`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Normal,
    Transposed,
}

/// `out = alpha * op(a) * op(b) + beta * out` on matrix views.
pub fn gemm<T: Scalar>(
    alpha: T,
    a: &NdArray<T>,
    la: Layout,
    b: &NdArray<T>,
    lb: Layout,
    beta: T,
    out: &mut NdArray<T>,
) -> Result<(), NumericsError> {
    let (ar, ac) = a.as_matrix_shape();
    let (br, bc) = b.as_matrix_shape();
    let (m, k, rsa, csa) = match la {
        Layout::Normal => (ar, ac, ac as isize, 1isize),
        Layout::Transposed => (ac, ar, 1isize, ac as isize),
    };
    let (k2, n, rsb, csb) = match lb {
        Layout::Normal => (br, bc, bc as isize, 1isize),
        Layout::Transposed => (bc, br, 1isize, bc as isize),
    };
    let (or, oc) = out.as_matrix_shape();
    if k != k2 || or != m || oc != n {
        return Err(NumericsError::Dimension(format!(
            "matrix product of {:?} ({:?}) and {:?} ({:?}) into {:?}",
            a.shape(),
            la,
            b.shape(),
            lb,
            out.shape()
        )));
    }
    if m == 0 || n == 0 {
        return Ok(());
    }
    if k == 0 {
        out.scale_assign(beta);
        return Ok(());
    }
    // SAFETY: dimensions and strides were validated against the buffers above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            beta,
            out.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(())
}
