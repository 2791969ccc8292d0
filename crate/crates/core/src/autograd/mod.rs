//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Values default to `f32`. Every kernel is generic over [`Scalar`] so that
//! gradient checks can run the exact same code in `f64`.

mod checkpoint;
mod conv;
mod init;
mod loss;
mod norm;
mod optim;
mod params;
mod pool;
mod spike;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CKPT_MAGIC};
pub use conv::{conv2d_direct, conv2d_forward, conv_output_size, Conv2dConfig};
pub use init::{kaiming_bound, kaiming_uniform_init, kaiming_uniform_with};
pub use loss::{focal_loss_value, smooth_l1, FocalConfig};
pub use norm::{BN_EPS, BN_MOMENTUM};
pub use optim::{adamw_step, clip_grad_norm, cosine_lr, AdamWConfig, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use spike::{atan_surrogate_grad, heaviside, FireMode, LifRecurrence, ResetMode};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: empty batch")]
    EmptyBatch { op: &'static str },
    #[error("backward called on a tape that was already consumed or does not record")]
    TapeConsumed,
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

/// Floating point element type of the engine.
pub trait Scalar: Float + Default + Debug + Sum + Send + Sync + 'static {
    /// `c = alpha * a * b + beta * c` for row-major strided matrices.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        <f64 as num_traits::NumCast>::from(self).unwrap_or(f64::NAN)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: callers pass slices large enough for the given
                // dimensions and strides; checked in debug builds below.
                debug_assert!(k == 0 || a.len() > (m - 1) * rsa as usize + (k - 1) * csa as usize);
                debug_assert!(k == 0 || b.len() > (k - 1) * rsb as usize + (n - 1) * csb as usize);
                debug_assert!(c.len() > (m - 1) * rsc as usize + (n - 1) * csc as usize);
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
