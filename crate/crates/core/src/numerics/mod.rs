//! Minimal differentiable numerics.
//!
//! Everything the workbench trains fits a fixed op vocabulary (affine, conv,
//! elementwise activations, concat, reshape, reductions, weighted sum,
//! normalizations, softmax, scaled dot product), so the backward pass is a
//! recorded trace over that vocabulary rather than a general graph compiler.
//! Forward kernels are shared between the plain (inference) path and the
//! taped (training) path, so both produce bit-identical values.

pub mod adam;
pub mod gradcheck;
pub mod init;
pub mod kernels;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::finite_diff_check;
pub use init::orthogonal_init;
pub use kernels::Activation;
pub use layers::{ConvSpec, DenseSpec};
pub use params::{GradSet, Param, ParamSet};
pub use tape::{Gradients, Tape, TapeBinder, ValueId};
pub use tensor::{Dtype, Scalar, Tensor};
