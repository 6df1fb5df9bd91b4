//! Dense f64 tensors and a reverse-mode autodiff tape.

pub mod gradcheck;
pub mod matops;
pub mod tape;

pub use gradcheck::{finite_diff_check, DEFAULT_FD_STEP};
pub use tape::{Mode, NodeId, Tape};

use crate::error::{Error, Result};

/// An n-dimensional value with optional gradient buffer.
///
/// A tensor may live on a [`Tape`] (in which case `tape_id` names its node)
/// or stand alone as e.g. a persistent model parameter. Only tensors with
/// `requires_grad` ever accumulate gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
    pub tape_id: Option<NodeId>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("zero-sized tensor dimension: {shape:?}")));
        }
        if data.len() != numel {
            return Err(Error::Config(format!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
            tape_id: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            grad: None,
            requires_grad: false,
            tape_id: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            grad: None,
            requires_grad: false,
            tape_id: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Frobenius (flat L2) norm of the values.
    pub fn norm(&self) -> f64 {
        matops::frob_norm(&self.data)
    }

    /// Drop any accumulated gradient.
    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// True when both tensors hold bitwise-identical values.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Reset the gradient buffers of a set of parameters.
pub fn zero_grads<'a, I>(params: I)
where
    I: IntoIterator<Item = &'a mut Tensor>,
{
    for p in params {
        p.clear_grad();
    }
}
