//! Dense row-major `f32` tensors.
//!
//! Axis order is a convention of the caller: activations are NHWC and
//! convolution filters are `KH x KW x Cin x Cout`. The last axis is always
//! the fastest-varying one.

mod bundle;

pub use bundle::{read_bundle, write_bundle, ManifestEntry, TensorBundle, MANIFEST_FILE};

use std::fmt;

use crate::error::{Error, Result};

/// An immutable N-dimensional array of `f32` values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..PREVIEW])
        }
    }
}

fn check_extents(shape: &[usize]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be at least 1".into(),
        });
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "element count overflows usize".into(),
        })
}

/// Row-major strides for `shape`, in elements.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for axis in (0..shape.len().saturating_sub(1)).rev() {
        strides[axis] = strides[axis + 1] * shape[axis + 1];
    }
    strides
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let numel = check_extents(&shape)?;
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {numel} elements but {} values were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Result<Self> {
        let shape = shape.into();
        let numel = check_extents(&shape)?;
        Ok(Self {
            shape,
            data: vec![value; numel],
        })
    }

    /// Builds a tensor by evaluating `f` at every flat index in order.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> f32) -> Result<Self> {
        let shape = shape.into();
        let numel = check_extents(&shape)?;
        Ok(Self {
            shape,
            data: (0..numel).map(f).collect(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn strides(&self) -> Vec<usize> {
        strides(&self.shape)
    }

    /// Flat offset of `coord`, or `None` when it is out of bounds.
    pub fn offset(&self, coord: &[usize]) -> Option<usize> {
        if coord.len() != self.shape.len() {
            return None;
        }
        let mut offset = 0;
        for (&c, &extent) in coord.iter().zip(&self.shape) {
            if c >= extent {
                return None;
            }
            offset = offset * extent + c;
        }
        Some(offset)
    }

    /// Element at `coord`. Panics when out of bounds.
    pub fn at(&self, coord: &[usize]) -> f32 {
        match self.offset(coord) {
            Some(i) => self.data[i],
            None => panic!("coordinate {coord:?} out of bounds for shape {:?}", self.shape),
        }
    }

    /// The shape as a fixed array of four extents.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        <[usize; 4]>::try_from(self.shape.as_slice()).map_err(|_| {
            Error::ShapeMismatch(format!("expected a rank-4 tensor, got shape {:?}", self.shape))
        })
    }

    pub fn dims2(&self) -> Result<[usize; 2]> {
        <[usize; 2]>::try_from(self.shape.as_slice()).map_err(|_| {
            Error::ShapeMismatch(format!("expected a rank-2 tensor, got shape {:?}", self.shape))
        })
    }

    /// Reinterprets the data under `new_shape`. The data sequence is unchanged.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        self.clone().into_reshape(new_shape)
    }

    pub fn into_reshape(self, new_shape: &[usize]) -> Result<Tensor> {
        let numel = check_extents(new_shape)?;
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} elements) to {new_shape:?} ({numel} elements)",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Tensor {
            shape: new_shape.to_vec(),
            data: self.data,
        })
    }

    /// Same shape and identical bit patterns, so `-0.0 != 0.0` and equal NaNs compare equal.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }
}

/// Largest elementwise `|a - b|`. Any NaN in either input makes the result NaN.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f32> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch(format!(
            "cannot compare shapes {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let mut max = 0.0f32;
    for (x, y) in a.data.iter().zip(&b.data) {
        let d = (x - y).abs();
        if d.is_nan() {
            return Ok(f32::NAN);
        }
        max = max.max(d);
    }
    Ok(max)
}
