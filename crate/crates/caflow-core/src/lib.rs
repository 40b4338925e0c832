//! CAFlow: adaptive-depth single-step flow matching for x4 image super-resolution.
//!
//! The crate is organized around a small dense-tensor substrate with reverse-mode
//! automatic differentiation ([`tensor`], [`autodiff`]), pixel-space utilities
//! ([`imaging`]), the flow-matching path and samplers ([`flow`], [`sampling`]),
//! the multi-exit FlowResNet backbone and its exit router ([`backbone`],
//! [`routing`]), the training loop ([`training`]) and an analytic FLOPs cost
//! model ([`costmodel`]).

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod costmodel;
pub mod error;
pub mod flow;
pub mod imaging;
pub mod kernels;
pub mod ops;
pub mod optim;
pub mod routing;
pub mod sampling;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{CoreError, Result};
pub use scalar::Scalar;
pub use tensor::{ParamSet, Tensor};
