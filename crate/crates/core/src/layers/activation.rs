//! Norm-preserving activations.
//!
//! `Abs` flips signs; `MaxMin` and `Oplu` sort pairs of entries and are
//! therefore permutations of their input. On ties the first operand is taken
//! as the maximum.

use crate::error::{Result, UgnnError};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::TapeLayer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Abs,
    /// Halves `(a | b)` of the channel axis become `(max(a,b) | min(a,b))`.
    MaxMin,
    /// Adjacent pairs `(x₂ᵢ, x₂ᵢ₊₁)` become `(max, min)`.
    Oplu,
    /// Not norm preserving; kept as a negative control for the checkers.
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Abs => "abs",
            Activation::MaxMin => "maxmin",
            Activation::Oplu => "oplu",
            Activation::Relu => "relu",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "abs" => Some(Activation::Abs),
            "maxmin" | "groupsort2" => Some(Activation::MaxMin),
            "oplu" => Some(Activation::Oplu),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }

    pub fn is_pairwise(self) -> bool {
        matches!(self, Activation::MaxMin | Activation::Oplu)
    }

    /// The kind actually used on `channels` channels: pairwise kinds fall
    /// back to `Abs` on odd widths.
    pub fn for_width(self, channels: usize) -> Self {
        if self.is_pairwise() && channels % 2 == 1 {
            Activation::Abs
        } else {
            self
        }
    }

    /// Apply to a batched tensor `[B, C, ...]`; axis 1 is the channel axis.
    pub fn apply<T: Scalar>(self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self {
            Activation::Abs => tape.abs(x),
            Activation::Relu => tape.relu(x),
            Activation::MaxMin | Activation::Oplu => {
                let v = tape.value(x);
                let shape = v.shape().to_vec();
                if shape.len() < 2 {
                    return Err(UgnnError::InvalidShape {
                        shape,
                        reason: "activation expects a batched [B, C, ...] tensor".into(),
                    });
                }
                let inner: usize = shape[2..].iter().product();
                let idx = pair_sort_index(self, v.data(), shape[0], shape[1], inner)?;
                tape.gather(x, idx, &shape)
            }
        }
    }

    /// Unbatched evaluation; axis 0 is the channel (or feature) axis.
    pub fn eval<T: Scalar>(self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Activation::Abs => Ok(x.map(|v| v.abs())),
            Activation::Relu => Ok(x.map(|v| v.max(T::zero()))),
            Activation::MaxMin | Activation::Oplu => {
                let ch = x.shape()[0];
                let inner = x.len() / ch;
                let idx = pair_sort_index(self, x.data(), 1, ch, inner)?;
                Tensor::new(x.shape(), idx.iter().map(|&i| x.data()[i]).collect())
            }
        }
    }
}

/// Source index of every output element for the pairwise kinds.
fn pair_sort_index<T: Scalar>(
    kind: Activation,
    data: &[T],
    batch: usize,
    ch: usize,
    inner: usize,
) -> Result<Vec<usize>> {
    if ch % 2 == 1 {
        return Err(UgnnError::InvalidShape {
            shape: vec![batch, ch, inner],
            reason: format!("{} needs an even channel count, got {ch}", kind.name()),
        });
    }
    let half = ch / 2;
    let mut idx = vec![0usize; batch * ch * inner];
    for b in 0..batch {
        for p in 0..half {
            let (c1, c2) = match kind {
                Activation::MaxMin => (p, p + half),
                _ => (2 * p, 2 * p + 1),
            };
            for s in 0..inner {
                let i1 = (b * ch + c1) * inner + s;
                let i2 = (b * ch + c2) * inner + s;
                let (hi, lo) = if data[i1] >= data[i2] {
                    (i1, i2)
                } else {
                    (i2, i1)
                };
                idx[i1] = hi;
                idx[i2] = lo;
            }
        }
    }
    Ok(idx)
}

/// Activation as a standalone layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActivationLayer(pub Activation);

impl<T: Scalar> TapeLayer<T> for ActivationLayer {
    fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.0.apply(tape, x)
    }
}
