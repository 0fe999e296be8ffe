use crate::error::{Result, UgnnError};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction. Moments are allocated lazily on the first step
/// and keyed by position, so the parameter list must keep its order.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Adam<T> {
    pub fn new() -> Self {
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.v
    }

    /// One update. Gradients are validated before any parameter moves, so a
    /// non-finite gradient leaves parameters and state untouched.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor<T>)],
        grads: &[Tensor<T>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(UgnnError::Config(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if !self.m.is_empty() && self.m.len() != params.len() {
            return Err(UgnnError::Config(
                "parameter list changed between Adam steps".into(),
            ));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(UgnnError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(UgnnError::NonFinite(format!("gradient of {name}")));
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (c::<T>(self.beta1), c::<T>(self.beta2));
        let (one, eps) = (T::one(), c::<T>(self.eps));
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        let lr = c::<T>(lr);
        for (((_, p), g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((pi, &gi), (mi, vi)) in it {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *pi -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
