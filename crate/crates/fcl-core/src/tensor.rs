//! Dense n-dimensional f64 arrays.
//!
//! A `Tensor` is plain data; differentiation handles live in
//! [`crate::engine::Tape`]. Rank 0 (empty shape, one element) is the scalar
//! representation used by every reduction.

use crate::engine::EngineError;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` matches the shape volume.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self, EngineError> {
        let volume: usize = dims.iter().product();
        if volume != data.len() {
            return Err(EngineError::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {dims:?} holds {volume} values, got {}", data.len()),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let volume = dims.iter().product();
        Self { dims: dims.to_vec(), data: vec![0.0; volume] }
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let volume = dims.iter().product();
        Self { dims: dims.to_vec(), data: vec![value; volume] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { dims: Vec::new(), data: vec![value] }
    }

    /// 1-D tensor over `data`.
    pub fn vector(data: Vec<f64>) -> Self {
        Self { dims: vec![data.len()], data }
    }

    /// One-hot vector of length `len` with a single 1.0 at `index`.
    pub fn one_hot(len: usize, index: usize) -> Self {
        assert!(index < len, "one_hot index {index} out of range {len}");
        let mut data = vec![0.0; len];
        data[index] = 1.0;
        Self { dims: vec![len], data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// The single value of a scalar (or any one-element) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.dims);
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.dims.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest value, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }
}
