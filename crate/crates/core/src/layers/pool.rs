//! Max-pool over disjoint windows (stride equal to the window, no padding).
//! Each output depends on one input entry, so Jacobian rows are distinct
//! one-hot vectors.

use crate::error::{Result, UgnnError};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::TapeLayer;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GnpMaxPool {
    pub window: (usize, usize),
}

impl GnpMaxPool {
    pub fn new(k1: usize, k2: usize) -> Result<Self> {
        if k1 == 0 || k2 == 0 {
            return Err(UgnnError::Config("pool window must be positive".into()));
        }
        Ok(Self { window: (k1, k2) })
    }

    pub fn is_identity(&self) -> bool {
        self.window == (1, 1)
    }

    /// Source index of each window maximum on `[B, C, H, W]`; first index wins ties.
    pub fn argmax_index<T: Scalar>(&self, x: &Tensor<T>) -> Result<(Vec<usize>, Vec<usize>)> {
        let (b, c, h, w) = match *x.shape() {
            [b, c, h, w] => (b, c, h, w),
            _ => {
                return Err(UgnnError::InvalidShape {
                    shape: x.shape().to_vec(),
                    reason: "max-pool expects [B, C, H, W]".into(),
                })
            }
        };
        let (k1, k2) = self.window;
        if h % k1 != 0 || w % k2 != 0 {
            return Err(UgnnError::InvalidShape {
                shape: x.shape().to_vec(),
                reason: format!("spatial extents not divisible by window {k1}×{k2}"),
            });
        }
        let (oh, ow) = (h / k1, w / k2);
        let d = x.data();
        let mut idx = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * k1 * w + j * k2;
                    for p in 0..k1 {
                        for q in 0..k2 {
                            let at = base + (i * k1 + p) * w + j * k2 + q;
                            if d[at] > d[best] {
                                best = at;
                            }
                        }
                    }
                    idx.push(best);
                }
            }
        }
        Ok((idx, vec![b, c, oh, ow]))
    }

    /// Unbatched `C×H×W` evaluation.
    pub fn eval<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let xb = x.clone().reshape(&[&[1], x.shape()].concat())?;
        let (idx, shape) = self.argmax_index(&xb)?;
        Tensor::new(&shape[1..], idx.iter().map(|&i| xb.data()[i]).collect())
    }
}

impl<T: Scalar> TapeLayer<T> for GnpMaxPool {
    fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        if self.is_identity() {
            return Ok(x);
        }
        let (idx, shape) = self.argmax_index(tape.value(x))?;
        tape.gather(x, idx, &shape)
    }
}
