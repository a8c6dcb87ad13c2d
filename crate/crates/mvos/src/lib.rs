//! Recurrent, feature-modulated video object segmentation at desk scale.
//!
//! The crate builds a complete pipeline around a small from-scratch numeric
//! core: a VGG-style encoder with convolutional LSTM blocks interleaved into
//! its last three stages, a visual modulator that rescales channels per
//! target object, a spatial modulator that shifts activations with a gaussian
//! location prior, the Lovasz hinge surrogate for the IoU loss, DAVIS-style
//! J&F evaluation, and a deterministic synthetic video benchmark to train and
//! measure on.
//!
//! Start with the `examples/` directory: each file is a runnable tour of one
//! capability (autodiff, losses, blob priors, data generation, training,
//! inference, evaluation). The `mvos` binary wraps the same entry points as
//! subcommands for batch runs.

pub mod convlstm;
pub mod error;
pub mod layers;
pub mod losses;
pub mod modulators;
pub mod mask;
pub mod metrics;
pub mod init;
pub mod scalar;
pub mod segnet;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
