//! Minimal differentiable layers for the fixed residual-network graph:
//! 4-D tensors, same-padding 3×3 convolution, activations, batch norm,
//! dense layers, Adam, initialization, gradient checking and checkpoints.

mod activation;
mod adam;
mod batchnorm;
mod checkpoint;
mod conv;
mod dense;
mod gradcheck;
mod init;
mod params;
mod real;
mod tensor;

pub use activation::{relu, relu_backward, tanh_backward, tanh_forward};
pub use adam::{adam_step, AdamConfig, AdamState};
pub use batchnorm::{batchnorm_backward, batchnorm_forward, BatchNormCache, BatchNormLayer, BnMode};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, NamedTensor};
pub use conv::{conv2d_backward, conv2d_same, ConvGrads, ConvLayer, KERNEL};
pub use dense::{dense_backward, dense_forward, DenseGrads, DenseLayer};
pub use gradcheck::{grad_check, GradCheckReport, GroupCheck};
pub use init::{init_params, seeded_rng};
pub(crate) use params::{scoped, scoped_mut};
pub use params::{ParamSet, ParamVisitor, ParamVisitorMut};
pub use real::Real;
pub use tensor::Tensor4;
