use crate::error::{Result, UgnnError};
use crate::scalar::{c, Scalar};

/// `(1/C) Σ_{j≠y} max(0, m − (f_y − f_j))` for one row of logits.
pub fn multi_margin_loss<T: Scalar>(logits: &[T], y: usize, margin: T) -> Result<T> {
    let classes = logits.len();
    if y >= classes {
        return Err(UgnnError::Label { label: y, classes });
    }
    let fy = logits[y];
    let mut total = T::zero();
    for (j, &fj) in logits.iter().enumerate() {
        if j != y {
            total += (margin - (fy - fj)).max(T::zero());
        }
    }
    Ok(total / c::<T>(classes as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn worked_examples() {
        assert_eq!(multi_margin_loss(&[5.0, 0.0, 0.0], 0, 0.5).unwrap(), 0.0);
        assert_eq!(multi_margin_loss(&[0.0, 0.0], 0, 0.5).unwrap(), 0.25);
        assert!(multi_margin_loss(&[0.0, 0.0], 2, 0.5).is_err());
    }

    #[test]
    fn kink_takes_inactive_side() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[1, 2], vec![0.5, 0.0]).unwrap());
        let l = tape.multi_margin(x, &[0], 0.5).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        assert_eq!(tape.gradient(l, x).unwrap().data(), &[0.0, 0.0]);
    }
}
