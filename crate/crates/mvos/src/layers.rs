//! Small layer building blocks shared by the segmentation network and the
//! modulators.

use rand::Rng;

use crate::error::Result;
use crate::init;
use crate::scalar::Scalar;
use crate::tensor::{ParamGroup, Parameter, Shape, Tape, Tensor, VarId};

/// Conv + bias with a fixed stride/padding.
#[derive(Debug, Clone)]
pub struct Conv2dLayer<E: Scalar> {
    pub weight: Parameter<E>,
    pub bias: Parameter<E>,
    pub stride: usize,
    pub pad: usize,
}

impl<E: Scalar> Conv2dLayer<E> {
    /// Fan-in-scaled uniform weights, zero bias.
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Conv2dLayer<E> {
        Conv2dLayer {
            weight: Parameter::new(
                format!("{name}.weight"),
                init::fan_in_uniform(Shape::new(c_out, c_in, k, k), rng),
                ParamGroup::NonRecurrent,
            ),
            bias: Parameter::new(
                format!("{name}.bias"),
                Tensor::zeros(Shape::new(1, c_out, 1, 1)),
                ParamGroup::NonRecurrent,
            ),
            stride,
            pad,
        }
    }

    /// All-zero weights and bias (identity-at-init heads).
    pub fn new_zero(name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Conv2dLayer<E> {
        Conv2dLayer {
            weight: Parameter::new(
                format!("{name}.weight"),
                Tensor::zeros(Shape::new(c_out, c_in, k, k)),
                ParamGroup::NonRecurrent,
            ),
            bias: Parameter::new(
                format!("{name}.bias"),
                Tensor::zeros(Shape::new(1, c_out, 1, 1)),
                ParamGroup::NonRecurrent,
            ),
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: VarId) -> Result<VarId> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn params(&self) -> Vec<&Parameter<E>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<E>> {
        vec![&mut self.weight, &mut self.bias]
    }
}
