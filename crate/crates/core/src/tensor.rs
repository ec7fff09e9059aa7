//! Dense multi-dimensional arrays of `f64` with shape metadata.
//!
//! Tensors are the value carrier for every numeric operation in this crate.
//! Data is stored flat in row-major order; supported ranks are 0 (scalar),
//! 1 (vector) and 2 (matrix), which is all the gating math needs.

use std::fmt;

/// Error raised by tensor constructors and accessors.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// `product(shape)` does not match the number of data elements.
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    /// Rank above 2 is not supported.
    UnsupportedRank { rank: usize },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeDataMismatch { shape, len } => write!(
                f,
                "shape {:?} implies {} elements but data has {}",
                shape,
                shape.iter().product::<usize>(),
                len
            ),
            TensorError::UnsupportedRank { rank } => {
                write!(f, "rank {} tensors are not supported (max 2)", rank)
            }
        }
    }
}

impl std::error::Error for TensorError {}

/// Dense row-major tensor of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that the shape is consistent with the data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.len() > 2 {
            return Err(TensorError::UnsupportedRank { rank: shape.len() });
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    /// Rank-1 tensor from a vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Rank-2 tensor from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
    }

    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// Constant-filled tensor of the given shape.
    pub fn filled(shape: &[usize], v: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
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

    /// The single value of a scalar or one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.data[0]
    }

    /// Number of rows when viewed as a matrix (1 for vectors/scalars).
    pub fn rows(&self) -> usize {
        if self.rank() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Number of columns when viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.rank() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    /// Element access for rank-2 tensors.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Row slice for rank-2 tensors.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    /// True when every element is finite (no NaN or infinity).
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the data under a new shape of identical element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self, TensorError> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    /// Largest absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
