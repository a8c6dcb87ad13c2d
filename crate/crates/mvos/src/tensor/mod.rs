//! Dense (N, C, H, W) tensors and the reverse-mode tape built on them.
//!
//! The layout is fixed: row-major over (batch, channel, row, col). Ops are
//! exactly the ones the segmentation model needs; each has a backward that is
//! checked against central finite differences in the tests.

mod conv;
pub mod checkpoint;
pub mod gradcheck;
mod tape;
#[cfg(test)]
mod tests;

pub use conv::{bilinear_resize, Conv2dSpec};
pub use tape::{EltKind, PointwiseKind, ReduceKind, Tape, VarId};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::sync::atomic::{AtomicU64, Ordering};

/// Shape of a 4-D tensor: (batch N, channels C, height H, width W).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn scalar() -> Shape {
        Shape::new(1, 1, 1, 1)
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{},{},{},{}]", self.n, self.c, self.h, self.w)
    }
}

/// A dense value. Gradients appear on tape slots, not on free-standing values;
/// `requires_grad`/`grad` are populated for tape leaves and parameters.
#[derive(Debug, Clone)]
pub struct Tensor<E> {
    pub shape: Shape,
    pub data: Vec<E>,
    pub requires_grad: bool,
    pub grad: Option<Vec<E>>,
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: Shape, data: Vec<E>) -> Tensor<E> {
        assert_eq!(shape.numel(), data.len(), "data length must match shape");
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Shape) -> Tensor<E> {
        Tensor::new(shape, vec![E::ZERO; shape.numel()])
    }

    pub fn full(shape: Shape, v: E) -> Tensor<E> {
        Tensor::new(shape, vec![v; shape.numel()])
    }

    pub fn scalar(v: E) -> Tensor<E> {
        Tensor::new(Shape::scalar(), vec![v])
    }

    pub fn from_f64(shape: Shape, data: &[f64]) -> Tensor<E> {
        Tensor::new(shape, data.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    /// Single element of a scalar tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> E {
        self.data[self.index(n, c, h, w)]
    }

    pub fn require_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::Data(format!("non-finite values in {what}")))
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }
}

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Identity used to bind a parameter to a tape slot. Fresh per parameter
/// instance; cloning a parameter allocates a new one so that clones never
/// alias the original inside a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

fn fresh_param_id() -> ParamId {
    ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
}

/// Learning-rate group. ConvLSTM kernels/biases are `Recurrent`; everything
/// else is `NonRecurrent`. The trainer applies a different rate to each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Recurrent,
    NonRecurrent,
}

/// A named trainable tensor.
#[derive(Debug)]
pub struct Parameter<E> {
    pub name: String,
    pub value: Tensor<E>,
    pub group: ParamGroup,
    id: ParamId,
}

impl<E: Scalar> Parameter<E> {
    pub fn new(name: impl Into<String>, mut value: Tensor<E>, group: ParamGroup) -> Parameter<E> {
        value.requires_grad = true;
        Parameter {
            name: name.into(),
            value,
            group,
            id: fresh_param_id(),
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

impl<E: Scalar> Clone for Parameter<E> {
    fn clone(&self) -> Self {
        Parameter {
            name: self.name.clone(),
            value: self.value.clone(),
            group: self.group,
            id: fresh_param_id(),
        }
    }
}
