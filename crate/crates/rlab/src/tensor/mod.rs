//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Everything in the repo — agent networks, the seq2seq approximator, the
//! attack gradients — runs on this substrate. Graphs are static op tapes
//! built once per architecture; values live in a per-run buffer so an
//! immutable graph plus an immutable parameter store can be evaluated from
//! many threads at once.

pub mod check;
mod graph;
mod layers;
mod optim;

pub use graph::{Graph, GraphBuilder, NodeId, NodeShape, Op, Run};
pub(crate) use graph::conv2d_out_dims;
pub use layers::{conv2d_layer, dense, lstm, xavier_uniform, Activation};
pub use optim::{
    adam_step, clip_grad_norm, collect_gradients, sgd_step, Gradients, ParameterStore,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {context}: {detail}")]
    Shape { context: String, detail: String },
    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },
    #[error("unknown name: {0}")]
    UnknownName(String),
    #[error("duplicate name: {0}")]
    DuplicateName(String),
    #[error("loss node must be scalar, got shape {0:?}")]
    LossNotScalar(Vec<usize>),
    #[error("forward pass has not populated node {0}")]
    ForwardNotRun(NodeId),
    #[error("input not bound: {0}")]
    InputNotBound(String),
    #[error("inconsistent batch sizes: {0} vs {1}")]
    BatchMismatch(usize, usize),
}

/// Row-major dense tensor of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Shape {
                context: "Tensor::new".into(),
                detail: format!("shape {:?} does not hold {} values", shape, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    /// 1-D tensor from a plain vector.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn linf_norm(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Index of the largest value; ties broken by lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    /// Reinterprets the tensor with a new shape of identical volume.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self, TensorError> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// Argmax over a row slice; ties broken by lowest index.
pub fn argmax_slice(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_volume() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn argmax_ties_break_low() {
        assert_eq!(argmax_slice(&[0.5, 0.5]), 0);
        assert_eq!(argmax_slice(&[0.2, 0.9]), 1);
        assert_eq!(Tensor::from_vec(vec![1.0, 3.0, 3.0]).argmax(), 1);
    }

    #[test]
    fn norms() {
        let t = Tensor::from_vec(vec![3.0, -4.0]);
        assert!((t.l2_norm() - 5.0).abs() < 1e-12);
        assert!((t.linf_norm() - 4.0).abs() < 1e-12);
    }
}
