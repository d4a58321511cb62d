//! Blueprint separable convolutions.
//!
//! A convolution filter bank often wastes parameters: the depth slices of a
//! trained kernel tend to be scaled copies of a single 2-d template. This
//! crate implements convolution blocks that bake that structure in — each
//! filter is one K x K blueprint plus a vector of per-input-channel scaling
//! factors — together with everything needed to study and train them:
//!
//! - [`conv`]: direct-loop standard / pointwise / depthwise convolutions,
//!   their adjoints, and the depthwise-separable (DSC) baseline block.
//! - [`blueprint`]: the blueprint parameterizations. The unconstrained
//!   variant factors into pointwise-then-depthwise; the subspace variant adds
//!   a low-rank factorization of the scaling matrix with an orthonormality
//!   penalty on the basis.
//! - [`analysis`]: per-filter PCA along the depth axis (how blueprint-like is
//!   a trained kernel?), a small Jacobi SVD, and truncated low-rank
//!   factorization.
//! - [`complexity`]: closed-form parameter and MAC accounting per layer kind,
//!   plus width matching between architectures.
//! - [`train`]: a toy-scale training harness with manual backprop, SGD with
//!   momentum, the joint classification + orthonormality loss, and a
//!   synthetic dataset generator.
//! - [`format`]: the BSWT binary weight-file format.
//! - [`verify`]: randomized equivalence suites checking the factored paths
//!   against naive kernel materialization.
//!
//! The `bsconv` binary exposes all of this as subcommands; the `examples/`
//! directory has one runnable example per capability.

pub mod analysis;
pub mod blueprint;
pub mod cli;
pub mod complexity;
pub mod conv;
pub mod format;
pub mod rng;
pub mod tensor;
#[cfg(test)]
pub(crate) mod testutil;
pub mod train;
pub mod verify;

pub use conv::{
    conv2d_depthwise, conv2d_pointwise, conv2d_standard, conv2d_standard_backward, dsc_block,
    ConvGeometry,
};
pub use tensor::{allclose, Dtype, Scalar, ShapeError, Tensor};
