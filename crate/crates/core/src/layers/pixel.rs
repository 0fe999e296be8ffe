//! Space-to-channel rearrangement.
//!
//! `out[c·r² + i·r + j, h, w] = in[c, h·r + i, w·r + j]`.

use crate::error::{Result, UgnnError};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::TapeLayer;

fn dims4(shape: &[usize], op: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(UgnnError::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("{op} expects [B, C, H, W]"),
        }),
    }
}

/// Gather index and output shape of `pixel_unshuffle` on `[B, C, rH, rW]`.
pub fn unshuffle_index(shape: &[usize], r: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let (b, c, hh, ww) = dims4(shape, "pixel_unshuffle")?;
    if r < 1 || hh % r != 0 || ww % r != 0 {
        return Err(UgnnError::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("spatial extents not divisible by {r}"),
        });
    }
    let (h, w) = (hh / r, ww / r);
    let co = c * r * r;
    let mut idx = Vec::with_capacity(b * co * h * w);
    for bi in 0..b {
        for oc in 0..co {
            let (ci, i, j) = (oc / (r * r), (oc / r) % r, oc % r);
            for y in 0..h {
                for x in 0..w {
                    idx.push(((bi * c + ci) * hh + y * r + i) * ww + x * r + j);
                }
            }
        }
    }
    Ok((idx, vec![b, co, h, w]))
}

/// Gather index and output shape of the inverse map on `[B, r²C, H, W]`.
pub fn shuffle_index(shape: &[usize], r: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let (b, co, h, w) = dims4(shape, "pixel_shuffle")?;
    if r < 1 || co % (r * r) != 0 {
        return Err(UgnnError::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("channel count not divisible by {}", r * r),
        });
    }
    let c = co / (r * r);
    let (fwd, _) = unshuffle_index(&[b, c, h * r, w * r], r)?;
    let mut idx = vec![0usize; fwd.len()];
    for (o, &i) in fwd.iter().enumerate() {
        idx[i] = o;
    }
    Ok((idx, vec![b, c, h * r, w * r]))
}

fn gather_plain<T: Scalar>(x: &Tensor<T>, idx: &[usize], shape: &[usize]) -> Result<Tensor<T>> {
    Tensor::new(shape, idx.iter().map(|&i| x.data()[i]).collect())
}

/// Unbatched `C×rH×rW → r²C×H×W`.
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    let b = [&[1], s].concat();
    let (idx, out) = unshuffle_index(&b, r)?;
    gather_plain(x, &idx, &out[1..])
}

/// Unbatched inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let b = [&[1], x.shape()].concat();
    let (idx, out) = shuffle_index(&b, r)?;
    gather_plain(x, &idx, &out[1..])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelUnshuffle {
    pub factor: usize,
}

impl PixelUnshuffle {
    pub fn new(factor: usize) -> Result<Self> {
        if factor < 2 {
            return Err(UgnnError::Config(format!("unshuffle factor {factor} < 2")));
        }
        Ok(Self { factor })
    }
}

impl<T: Scalar> TapeLayer<T> for PixelUnshuffle {
    fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let (idx, shape) = unshuffle_index(tape.value(x).shape(), self.factor)?;
        tape.gather(x, idx, &shape)
    }
}
