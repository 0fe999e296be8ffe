//! Gradient-norm-preserving layers.

mod activation;
mod cayley;
mod ortho_linear;
mod pixel;
mod pool;

pub use activation::{Activation, ActivationLayer};
pub use cayley::{cayley_apply, cayley_build, CayleyConv};
pub use ortho_linear::{
    bjorck_project, bjorck_project_tape, freeze_tolerance, random_orthonormal_rows,
    spectral_norm_estimate, OrthoLinear, FREEZE_ITERS, POWER_ITERS, TRAIN_ITERS,
};
pub use pixel::{pixel_shuffle, pixel_unshuffle, shuffle_index, unshuffle_index, PixelUnshuffle};
pub use pool::GnpMaxPool;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// A layer with a frozen, tape-recorded forward map on batched inputs.
pub trait TapeLayer<T: Scalar> {
    fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
}
