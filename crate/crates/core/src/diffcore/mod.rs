//! Differentiable numerical primitives with hand-written backward passes.
//!
//! Everything is generic over [`Real`] so that training can run in `f32`
//! while the finite-difference harness evaluates the exact same code in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

pub mod gradcheck;
pub mod ops;
pub mod tensor;

pub use gradcheck::{grad_check, rel_error, REL_ERR_TOL};
pub use ops::{
    cosine_rows, cosine_rows_backward, dropout, dropout_backward, gelu, gelu_backward, layernorm_backward,
    layernorm_forward, linear_backward, linear_backward_params, linear_forward, masked_softmax, pairwise_distances,
    pairwise_distances_backward, softmax_backward, softmax_rows, LayerNorm, LayerNormCache, Linear, MaskedSoftmax,
};
pub use tensor::{BitMatrix, ParamGroup, ParamTensor, Tensor2};

/// Floating-point scalar usable by every op.
pub trait Real:
    Float
    + FromPrimitive
    + Sum
    + Debug
    + Display
    + Default
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("convertible")
    }
}

impl Real for f32 {}
impl Real for f64 {}
