//! Dense numerics: the tensor container and the small kernel library the
//! models are built from.
//!
//! Everything here is generic over a [`Scalar`] so the kernels can be
//! exercised (and unit-tested) at both `f32` and `f64`; the rest of the crate
//! instantiates them at `f64` via the [`crate::Tensor`] alias, because the
//! reference pipeline is specified in 64-bit arithmetic end to end.

mod kernels;
mod tensor;

pub use kernels::{
    add_bias, causal_conv1d, elementwise_add, elementwise_mul, linear, log_softmax, matmul,
    rmsnorm, round_ties_even, selective_scan, silu, softmax, softplus, RMSNORM_EPS,
};
pub(crate) use kernels::softmax_row;
pub use tensor::Tensor;

/// Floating-point element type accepted by the dense kernels.
///
/// This is a thin alias-trait over [`num_traits::Float`] plus the bounds the
/// kernels actually need (construction from literals, printing in error
/// messages, thread-safety for the parallel sweep). It is sealed by intent:
/// `f32` and `f64` are the only implementations that make sense here.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Lossless conversion from `f64` used for fixed constants (e.g. the
    /// RMSNorm epsilon). Saturating semantics of `from_f64` are fine for the
    /// constant range involved; the unwrap documents that the conversion is
    /// expected to exist for any real float type.
    fn from_const(v: f64) -> Self {
        Self::from_f64(v).expect("float constant representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
