//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Conventions: row-major storage, fixed left-to-right reduction order,
//! `f32` by default and `f64` for gradient-check runs. Convolution is
//! cross-correlation; bilinear resampling uses align-corners=false; GELU uses
//! the tanh approximation.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod ops;
pub mod params;
pub mod resample;
pub mod tensor;

pub use gradcheck::{check_leaves, finite_diff_check, relative_error, CoordCheck, GradCheckReport};
pub use ops::SparseMap;
pub use params::{Builder, ParamStore, Parameter};
pub use resample::{avg_pool, upsample_bilinear};
pub use tensor::{grad_enabled, no_grad, Real, Tensor};
