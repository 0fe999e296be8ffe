//! Hand-built reference classifiers and negative controls.

use crate::error::Result;
use crate::model::Classifier;
use crate::scalar::{c, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::{seeded_rng, Tensor};

/// Two logits `((‖x‖ − 1)/2, −(‖x‖ − 1)/2)`: class 0 outside the unit sphere.
/// Their difference `‖x‖ − 1` is the exact signed distance to the sphere.
#[derive(Debug, Clone)]
pub struct RingClassifier {
    shape: Vec<usize>,
}

impl RingClassifier {
    pub fn new(dim: usize) -> Self {
        Self { shape: vec![dim] }
    }
}

impl<T: Scalar> Classifier<T> for RingClassifier {
    fn input_shape(&self) -> &[usize] {
        &self.shape
    }

    fn num_classes(&self) -> usize {
        2
    }

    fn logits_tape(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let sq = tape.square(x)?;
        let r2 = tape.sum_rows(sq)?;
        let r = tape.sqrt(r2)?;
        let d = tape.offset(r, -T::one())?;
        let b = tape.value(d).len();
        let half = tape.leaf(Tensor::new(&[b, 1], vec![c::<T>(0.5); b])?);
        let sel = tape.leaf(Tensor::new(&[1, 2], vec![T::one(), -T::one()])?);
        let col = tape.reshape(d, &[b, 1])?;
        let col = tape.mul(col, half)?;
        tape.matmul(col, sel)
    }
}

/// Unconstrained dense network with ReLU activations (negative control).
#[derive(Debug, Clone)]
pub struct UnconstrainedMlp<T> {
    pub weights: Vec<Tensor<T>>,
    pub biases: Vec<Tensor<T>>,
    shape: Vec<usize>,
}

impl<T: Scalar> UnconstrainedMlp<T> {
    /// Gaussian weights with standard deviation `scale`.
    pub fn random(dims: &[usize], scale: f64, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let weights = dims
            .windows(2)
            .map(|w| Tensor::randn(&[w[1], w[0]], scale, &mut rng))
            .collect();
        let biases = dims[1..]
            .iter()
            .map(|&d| Tensor::randn(&[d], scale, &mut rng))
            .collect();
        Self {
            weights,
            biases,
            shape: vec![dims[0]],
        }
    }
}

impl<T: Scalar> Classifier<T> for UnconstrainedMlp<T> {
    fn input_shape(&self) -> &[usize] {
        &self.shape
    }

    fn num_classes(&self) -> usize {
        self.weights.last().map_or(0, |w| w.rows())
    }

    fn logits_tape(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.weights.len() - 1;
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let wv = tape.leaf(w.clone());
            let bv = tape.leaf(b.clone());
            h = tape.matmul_t(h, wv)?;
            h = tape.add_row_vec(h, bv)?;
            if k < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}
