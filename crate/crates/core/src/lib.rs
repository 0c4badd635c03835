//! CSA-MoE-Net: a three-expert mixture-of-experts classifier for breast
//! ultrasound images.
//!
//! Each expert is a residual backbone whose last stage is recalibrated by a
//! cross-stage attention block. The experts see three views derived from the
//! lesion mask (whole image, eroded tumor core, dilated boundary band) and a
//! small gating network mixes their pooled features before a sigmoid head.
//!
//! Everything runs on the CPU on top of the small reverse-mode autodiff
//! engine in [`autograd`].

pub mod autograd;
pub mod backbone;
pub mod csa;
pub mod data;
mod error;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod moe;
pub mod tensor;
pub mod train;

pub use autograd::{ParamSet, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;

/// Scalar element type used by every tensor.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
/// Scalar element type used by every tensor.
#[cfg(feature = "f32")]
pub type Real = f32;

/// True when the crate was built with 64-bit tensors.
pub const DOUBLE_PRECISION: bool = cfg!(not(feature = "f32"));
