//! Orthogonal circular convolution: per-frequency Cayley transforms of the
//! skew-Hermitian part of the kernel spectrum.

use rand::Rng;

use crate::error::{Result, UgnnError};
use crate::scalar::Scalar;
use crate::spectral;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::TapeLayer;

/// Unitary field `[H·W, 2, C, C]` of a `C×C×k×k` kernel on an `H×W` grid.
pub fn cayley_build<T: Scalar>(kernel: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    Ok(spectral::cayley_field(kernel, h, w)?.0)
}

/// Apply a field to an unbatched `C×H×W` input.
pub fn cayley_apply<T: Scalar>(field: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = x.shape().to_vec();
    let xb = x.clone().reshape(&[&[1], &shape[..]].concat())?;
    let (y, _) = spectral::spectral_conv(&xb, field)?;
    y.reshape(&shape)
}

#[derive(Debug, Clone)]
pub struct CayleyConv<T> {
    /// Unconstrained kernel `V`, `C×C×k×k`.
    pub kernel: Tensor<T>,
    /// Per-channel bias added after the convolution.
    pub bias: Tensor<T>,
    pub height: usize,
    pub width: usize,
    field: Option<Tensor<T>>,
}

impl<T: Scalar> CayleyConv<T> {
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        kernel_size: usize,
        height: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = channels * kernel_size * kernel_size;
        let kernel = Tensor::randn(
            &[channels, channels, kernel_size, kernel_size],
            1.0 / (fan_in as f64).sqrt(),
            rng,
        );
        Self::from_parts(kernel, Tensor::zeros(&[channels]), height, width)
    }

    pub fn from_parts(
        kernel: Tensor<T>,
        bias: Tensor<T>,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let (ch, _) = spectral::kernel_dims(&kernel)?;
        if bias.shape() != [ch] {
            return Err(UgnnError::ShapeMismatch {
                op: "CayleyConv bias",
                lhs: kernel.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(Self {
            kernel,
            bias,
            height,
            width,
            field: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn freeze(&mut self) -> Result<()> {
        self.field = Some(cayley_build(&self.kernel, self.height, self.width)?);
        Ok(())
    }

    pub fn field(&self) -> Option<&Tensor<T>> {
        self.field.as_ref()
    }

    pub fn invalidate(&mut self) {
        self.field = None;
    }

    /// Build the field from `kernel` on the tape and convolve `x: [B, C, H, W]`.
    pub fn apply(&self, tape: &mut Tape<T>, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let field = tape.cayley_field(kernel, self.height, self.width)?;
        let y = tape.spectral_conv(x, field)?;
        tape.add_channel_vec(y, bias)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.channels() || s[2] != self.height || s[3] != self.width {
            return Err(UgnnError::InvalidShape {
                shape: s.to_vec(),
                reason: format!(
                    "CayleyConv expects [B, {}, {}, {}]",
                    self.channels(),
                    self.height,
                    self.width
                ),
            });
        }
        Ok(())
    }
}

impl<T: Scalar> TapeLayer<T> for CayleyConv<T> {
    fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let field = self.field.clone().ok_or(UgnnError::NotFrozen)?;
        let field = tape.leaf(field);
        let y = tape.spectral_conv(x, field)?;
        let b = tape.leaf(self.bias.clone());
        tape.add_channel_vec(y, b)
    }
}
