//! Batched classifiers evaluated on a tape, and margin arithmetic.

use crate::error::{Result, UgnnError};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A classifier whose logits can be recorded on a tape.
pub trait Classifier<T: Scalar> {
    /// Shape of one unbatched input.
    fn input_shape(&self) -> &[usize];

    fn num_classes(&self) -> usize;

    /// `x: [B, input_shape...]` to logits `[B, C]`.
    fn logits_tape(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;

    fn input_len(&self) -> usize {
        self.input_shape().iter().product()
    }

    /// Logits of a batch `[B, input_shape...]` (or a single unbatched input).
    fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let xb = self.batched(x)?;
        let mut tape = Tape::new();
        let xv = tape.leaf(xb);
        let y = self.logits_tape(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }

    /// Logit vector of one unbatched input.
    fn logit_vector(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.logits(x)?.into_data())
    }

    /// Add a leading batch axis if `x` is a single input; validate extents.
    fn batched(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let want = self.input_shape();
        if x.shape() == want {
            return x.clone().reshape(&[&[1], want].concat());
        }
        if x.ndim() == want.len() + 1 && &x.shape()[1..] == want {
            return Ok(x.clone());
        }
        Err(UgnnError::InvalidShape {
            shape: x.shape().to_vec(),
            reason: format!("model expects inputs of shape {want:?}"),
        })
    }

    /// Input gradients of every logit at every batch item: `out[c]` has the
    /// shape of `x` and holds `∇f_c` per item.
    fn logit_gradients(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let xb = self.batched(x)?;
        let b = xb.shape()[0];
        let classes = self.num_classes();
        let mut tape = Tape::new();
        let xv = tape.leaf(xb);
        let y = self.logits_tape(&mut tape, xv)?;
        (0..classes)
            .map(|cls| {
                let mut seed = Tensor::zeros(&[b, classes]);
                for i in 0..b {
                    seed.set2(i, cls, T::one());
                }
                tape.backward(y, seed)?.wrt(xv)
            })
            .collect()
    }

    /// Input gradient of `f_i − f_j` for one unbatched input.
    fn pair_gradient(&self, x: &Tensor<T>, i: usize, j: usize) -> Result<Tensor<T>> {
        let xb = self.batched(x)?;
        let classes = self.num_classes();
        let mut tape = Tape::new();
        let xv = tape.leaf(xb);
        let y = self.logits_tape(&mut tape, xv)?;
        let mut seed = Tensor::zeros(&[1, classes]);
        seed.set2(0, i, T::one());
        seed.set2(0, j, -T::one());
        let g = tape.backward(y, seed)?.wrt(xv)?;
        g.reshape(self.input_shape())
    }
}

/// Top-two decomposition of a logit vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Margin<T> {
    pub label: usize,
    pub runner_up: usize,
    /// `f_label − f_runner_up ≥ 0`.
    pub value: T,
}

/// Argmax (lowest index on ties), runner-up, and their gap.
pub fn margin<T: Scalar>(logits: &[T]) -> Result<Margin<T>> {
    if logits.len() < 2 {
        return Err(UgnnError::Config(format!(
            "margin needs ≥ 2 logits, got {}",
            logits.len()
        )));
    }
    let mut l = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[l] {
            l = i;
        }
    }
    let mut s = if l == 0 { 1 } else { 0 };
    for (i, &v) in logits.iter().enumerate() {
        if i != l && v > logits[s] {
            s = i;
        }
    }
    Ok(Margin {
        label: l,
        runner_up: s,
        value: logits[l] - logits[s],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        let m = margin(&[2.0, 0.5, 0.1]).unwrap();
        assert_eq!((m.label, m.runner_up), (0, 1));
        assert!((m.value - 1.5f64).abs() < 1e-15);
        let t = margin(&[1.0, 1.0]).unwrap();
        assert_eq!((t.label, t.runner_up, t.value), (0, 1, 0.0));
        assert!(margin(&[1.0]).is_err());
    }

    #[test]
    fn shift_invariance() {
        let a = [0.3, -1.0, 0.9, 0.2];
        let b: Vec<f64> = a.iter().map(|v| v + 7.25).collect();
        let (ma, mb) = (margin(&a).unwrap(), margin(&b).unwrap());
        assert_eq!((ma.label, ma.runner_up), (mb.label, mb.runner_up));
        assert!((ma.value - mb.value).abs() < 1e-12);
    }

    #[test]
    fn runner_up_when_label_is_not_first() {
        let m = margin(&[0.1, 3.0, 0.1]).unwrap();
        assert_eq!((m.label, m.runner_up), (1, 0));
    }
}
