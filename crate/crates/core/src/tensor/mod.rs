//! Dense 4-D tensors and a tape-based reverse-mode autodiff engine with the
//! layers the detector needs.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

mod graph;
mod init;
mod kernels;
mod optim;
mod param;

pub mod gradcheck;

pub use graph::{softmax_rows, Gradients, Graph, Var};
pub use init::{add_xavier, name_seed, xavier_init};
pub use optim::{Optimizer, OptimizerKind};
pub use param::{ParamId, ParamSet, Parameter};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch {
        op: &'static str,
        detail: alloc::string::String,
    },
    #[error("degenerate RoI ({width} x {height} feature px)")]
    DegenerateRoi { width: f64, height: f64 },
    #[error("xavier init needs non-zero fan-in and fan-out, got dims {0:?}")]
    ZeroFan([usize; 4]),
    #[error("invalid stride or kernel")]
    BadGeometry,
}

pub(crate) fn mismatch(op: &'static str, detail: alloc::string::String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

/// A dense `(n, c, h, w)` array of 64-bit floats in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: [usize; 4], v: f64) -> Self {
        Tensor4 {
            dims,
            data: vec![v; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self, TensorError> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(mismatch(
                "from_vec",
                alloc::format!("dims {:?} need {} values, got {}", dims, n, data.len()),
            ));
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor4 {
            dims: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn n(&self) -> usize {
        self.dims[0]
    }

    pub fn c(&self) -> usize {
        self.dims[1]
    }

    pub fn h(&self) -> usize {
        self.dims[2]
    }

    pub fn w(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Elements per batch entry.
    pub fn item_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
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

    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let o = self.offset(n, c, h, w);
        self.data[o] = v;
    }

    /// The single value of a `(1, 1, 1, 1)` tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshaped(&self, dims: [usize; 4]) -> Result<Self, TensorError> {
        Self::from_vec(dims, self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// A single batch entry as a `(1, c, h, w)` tensor.
    pub fn batch_item(&self, n: usize) -> Tensor4 {
        let k = self.item_len();
        Tensor4 {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[n * k..(n + 1) * k].to_vec(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .fold(0.0, |m, v| if v.abs() > m { v.abs() } else { m })
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor4) {
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }
}
