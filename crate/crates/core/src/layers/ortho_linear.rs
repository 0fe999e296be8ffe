//! Fully-connected layer with a row-orthonormal weight, parameterized by an
//! unconstrained matrix through Björck orthogonalization.

use rand::Rng;

use crate::error::{Result, UgnnError};
use crate::scalar::{c, DType, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::{seeded_rng, Tensor};

use super::TapeLayer;

pub const TRAIN_ITERS: usize = 20;
pub const FREEZE_ITERS: usize = 100;
pub const POWER_ITERS: usize = 5;

/// Orthogonality tolerance a frozen projection must meet.
pub fn freeze_tolerance<T: Scalar>() -> f64 {
    match T::DTYPE {
        DType::F64 => 1e-6,
        DType::F32 => 1e-4,
    }
}

fn stop_tolerance<T: Scalar>(n: usize) -> T {
    T::epsilon() * c::<T>(4.0 * (n.max(16) as f64).sqrt())
}

fn power_start<T: Scalar>(n: usize) -> Tensor<T> {
    // fixed pseudo-random start so the estimate is a deterministic function of U
    let v = Tensor::<T>::randn(&[n, 1], 1.0, &mut seeded_rng(0x5eed_b70c));
    let nrm = v.norm();
    v.scale(T::one() / nrm)
}

fn rows_cols<T: Scalar>(u: &Tensor<T>) -> Result<(usize, usize)> {
    match u.shape() {
        &[m, n] if m <= n => Ok((m, n)),
        s => Err(UgnnError::InvalidShape {
            shape: s.to_vec(),
            reason: "Björck projection needs an m×n matrix with m ≤ n".into(),
        }),
    }
}

fn gram_deviation<T: Scalar>(g: &Tensor<T>, m: usize) -> T {
    let mut dev = T::zero();
    for i in 0..m {
        for j in 0..m {
            let target = if i == j { T::one() } else { T::zero() };
            dev = dev.max((g.get2(i, j) - target).abs());
        }
    }
    dev
}

/// Decide whether to keep iterating given the current and previous deviation.
fn converged<T: Scalar>(dev: T, prev: T, n: usize) -> bool {
    dev <= stop_tolerance::<T>(n) || (dev < T::epsilon().sqrt() && dev > prev * c::<T>(0.5))
}

/// Spectral-norm estimate of `U` by power iteration on `UᵀU`.
pub fn spectral_norm_estimate<T: Scalar>(u: &Tensor<T>, iters: usize) -> Result<T> {
    let n = u.shape()[1];
    let mut v = power_start::<T>(n);
    for _ in 0..iters {
        let t = u.matmul(&v)?;
        v = u.t_matmul(&t)?;
        let nrm = v.norm();
        if !(nrm > T::zero()) {
            return Ok(T::zero());
        }
        v = v.scale(T::one() / nrm);
    }
    Ok(u.matmul(&v)?.norm())
}

/// Row-orthonormal projection of `U` (m ≤ n): pre-scale by a power-iteration
/// spectral-norm estimate, then iterate `W ← W + ½(I − W Wᵀ)W` until
/// `‖W Wᵀ − I‖_max` stops improving or `iters` is exhausted.
pub fn bjorck_project<T: Scalar>(u: &Tensor<T>, iters: usize) -> Result<Tensor<T>> {
    let (m, n) = rows_cols(u)?;
    let sigma = spectral_norm_estimate(u, POWER_ITERS)?;
    if !(sigma > T::min_positive_value()) || !sigma.is_finite() {
        return Err(UgnnError::RankDeficient(
            "spectral norm estimate is zero".into(),
        ));
    }
    let mut w = u.scale(T::one() / sigma);
    let (a, b) = (c::<T>(1.5), c::<T>(0.5));
    let mut prev = T::infinity();
    for _ in 0..iters {
        let g = w.matmul_t(&w)?;
        let dev = gram_deviation(&g, m);
        if !dev.is_finite() {
            return Err(UgnnError::RankDeficient("iterate diverged".into()));
        }
        if converged(dev, prev, n) {
            break;
        }
        prev = dev;
        let p = g.matmul(&w)?;
        w = w.zip_map(&p, "bjorck", |x, y| a * x - b * y)?;
    }
    check_result(&w)?;
    Ok(w)
}

fn check_result<T: Scalar>(w: &Tensor<T>) -> Result<()> {
    let dev = w.orthonormal_rows_deviation()?;
    if !dev.is_finite() || dev > c::<T>(0.5) {
        return Err(UgnnError::RankDeficient(format!(
            "‖WWᵀ − I‖ = {dev:e} after projection; the matrix is (numerically) rank deficient"
        )));
    }
    Ok(())
}

/// Differentiable version of [`bjorck_project`] recorded on `tape`. Produces
/// the same values as the plain routine.
pub fn bjorck_project_tape<T: Scalar>(tape: &mut Tape<T>, u: Var, iters: usize) -> Result<Var> {
    let (m, n) = rows_cols(tape.value(u))?;
    let ut = tape.transpose(u)?;
    let mut v = tape.leaf(power_start::<T>(n));
    for _ in 0..POWER_ITERS {
        let t = tape.matmul(u, v)?;
        let vv = tape.matmul(ut, t)?;
        let sq = tape.square(vv)?;
        let s = tape.sum(sq)?;
        let nrm = tape.sqrt(s)?;
        if !(tape.scalar_value(nrm) > T::zero()) {
            return Err(UgnnError::RankDeficient(
                "spectral norm estimate is zero".into(),
            ));
        }
        let inv = tape.recip(nrm)?;
        v = tape.scale_by(vv, inv)?;
    }
    let uv = tape.matmul(u, v)?;
    let sq = tape.square(uv)?;
    let s = tape.sum(sq)?;
    let sigma = tape.sqrt(s)?;
    let sv = tape.scalar_value(sigma);
    if !(sv > T::min_positive_value()) || !sv.is_finite() {
        return Err(UgnnError::RankDeficient(
            "spectral norm estimate is zero".into(),
        ));
    }
    let inv = tape.recip(sigma)?;
    let mut w = tape.scale_by(u, inv)?;
    let mut prev = T::infinity();
    for _ in 0..iters {
        let g = tape.matmul_t(w, w)?;
        let dev = gram_deviation(tape.value(g), m);
        if !dev.is_finite() {
            return Err(UgnnError::RankDeficient("iterate diverged".into()));
        }
        if converged(dev, prev, n) {
            break;
        }
        prev = dev;
        let p = tape.matmul(g, w)?;
        let a = tape.scale(w, c::<T>(1.5))?;
        let b = tape.scale(p, c::<T>(0.5))?;
        w = tape.sub(a, b)?;
    }
    check_result(tape.value(w))?;
    Ok(w)
}

/// Gaussian rows orthonormalized by Gram-Schmidt. Starting training at an
/// exactly orthonormal `U` keeps the short training-time projection away from
/// ill-conditioned draws, which it cannot repair in a few iterations.
pub fn random_orthonormal_rows<T: Scalar, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Tensor<T> {
    assert!(
        rows <= cols,
        "cannot place {rows} orthonormal rows in {cols} dimensions"
    );
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while basis.len() < rows {
        let mut v: Vec<f64> = Tensor::<f64>::randn(&[cols], 1.0, rng).into_data();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // a draw this close to the span so far is resampled
        if n > 1e-3 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let data = basis.into_iter().flatten().map(c::<T>).collect();
    Tensor::new(&[rows, cols], data).expect("rows * cols values")
}

/// `y = W x + b` with `W W ᵀ = I`.
#[derive(Debug, Clone)]
pub struct OrthoLinear<T> {
    /// Unconstrained parameter `U`, `out × in`.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub train_iters: usize,
    pub freeze_iters: usize,
    projected: Option<Tensor<T>>,
}

impl<T: Scalar> OrthoLinear<T> {
    pub fn new<R: Rng + ?Sized>(
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if out_features > in_features {
            return Err(UgnnError::Config(format!(
                "orthogonal layer {in_features}→{out_features} would increase the dimension"
            )));
        }
        let weight = random_orthonormal_rows(out_features, in_features, rng);
        Self::from_parts(weight, Tensor::zeros(&[out_features]))
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (m, _) = rows_cols(&weight)?;
        if bias.shape() != [m] {
            return Err(UgnnError::ShapeMismatch {
                op: "OrthoLinear bias",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(Self {
            weight,
            bias,
            train_iters: TRAIN_ITERS,
            freeze_iters: FREEZE_ITERS,
            projected: None,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Recompute and cache the high-iteration projection.
    pub fn freeze(&mut self) -> Result<()> {
        let w = bjorck_project(&self.weight, self.freeze_iters)?;
        let dev = w.orthonormal_rows_deviation()?.to_f64_lossy();
        if dev > freeze_tolerance::<T>() {
            return Err(UgnnError::RankDeficient(format!(
                "frozen projection deviates by {dev:e}"
            )));
        }
        self.projected = Some(w);
        Ok(())
    }

    pub fn projected(&self) -> Option<&Tensor<T>> {
        self.projected.as_ref()
    }

    /// Drop the cache after the raw parameter changed.
    pub fn invalidate(&mut self) {
        self.projected = None;
    }

    pub fn apply(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = tape.matmul_t(x, weight)?;
        tape.add_row_vec(y, bias)
    }
}

impl<T: Scalar> TapeLayer<T> for OrthoLinear<T> {
    fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = self.projected.clone().ok_or(UgnnError::NotFrozen)?;
        let w = tape.leaf(w);
        let b = tape.leaf(self.bias.clone());
        Self::apply(tape, x, w, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_init_is_orthonormal() {
        let mut rng = seeded_rng(3);
        for (r, c) in [(1, 1), (2, 2), (3, 7), (8, 8)] {
            let w = random_orthonormal_rows::<f64, _>(r, c, &mut rng);
            assert_eq!(w.shape(), [r, c]);
            assert!(w.orthonormal_rows_deviation().unwrap() <= 1e-12);
        }
    }

    #[test]
    fn orthonormal_input_is_a_fixed_point() {
        let u = Tensor::<f64>::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]]).unwrap();
        let w = bjorck_project(&u, 20).unwrap();
        assert!(w.max_abs_diff(&u) <= 1e-10);
        // a rotated orthonormal pair as well
        let (s, co) = (0.3f64.sin(), 0.3f64.cos());
        let u = Tensor::<f64>::from_rows(&[&[co, -s, 0.0], &[s, co, 0.0]]).unwrap();
        assert!(bjorck_project(&u, 20).unwrap().max_abs_diff(&u) <= 1e-10);
    }

    #[test]
    fn gaussian_4x8_converges_in_20_iterations() {
        let u = Tensor::<f64>::randn(&[4, 8], 1.0, &mut seeded_rng(21));
        let w = bjorck_project(&u, 20).unwrap();
        let wwt = w.matmul_t(&w).unwrap();
        assert!(wwt.max_abs_diff(&Tensor::eye(4)) <= 1e-8);
    }

    #[test]
    fn zero_and_rank_deficient_rejected() {
        let z = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(
            bjorck_project(&z, 20),
            Err(UgnnError::RankDeficient(_))
        ));
        let dup = Tensor::<f64>::from_rows(&[&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(
            bjorck_project(&dup, 100),
            Err(UgnnError::RankDeficient(_))
        ));
    }

    #[test]
    fn wide_matrix_rejected() {
        let u = Tensor::<f64>::zeros(&[3, 2]);
        assert!(bjorck_project(&u, 5).is_err());
        assert!(OrthoLinear::<f64>::new(2, 4, &mut seeded_rng(0)).is_err());
    }

    #[test]
    fn tape_and_plain_agree() {
        let u = Tensor::<f64>::randn(&[3, 5], 1.0, &mut seeded_rng(8));
        let plain = bjorck_project(&u, 20).unwrap();
        let mut tape = Tape::new();
        let uv = tape.leaf(u);
        let w = bjorck_project_tape(&mut tape, uv, 20).unwrap();
        assert!(tape.value(w).max_abs_diff(&plain) <= 1e-15);
    }

    #[test]
    fn f32_projection_meets_tolerance() {
        let mut layer = OrthoLinear::<f32>::new(64, 32, &mut seeded_rng(3)).unwrap();
        layer.freeze().unwrap();
        let dev = layer
            .projected()
            .unwrap()
            .orthonormal_rows_deviation()
            .unwrap();
        assert!(dev <= 1e-4, "{dev}");
    }
}
