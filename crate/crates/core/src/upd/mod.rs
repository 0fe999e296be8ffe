//! Unitary pair difference (UPD) heads: linear output layers whose weight rows
//! differ pairwise by unit-norm vectors.

mod lbfgs;

pub use lbfgs::{lbfgs_minimize, LbfgsOptions, LbfgsOutcome, Objective};

use rand::Rng;

use crate::error::{Result, UgnnError};
use crate::layers::{
    bjorck_project, bjorck_project_tape, random_orthonormal_rows, TapeLayer, FREEZE_ITERS,
    TRAIN_ITERS,
};
use crate::scalar::{c, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Rows enumerate the pairs `(h, k)`, `h < k`, as `e_h − e_k`, built by the
/// recursion `A⁽²⁾ = (1 −1)`, `A⁽ᶜ⁾ = [1 −I; 0 A⁽ᶜ⁻¹⁾]`.
pub fn difference_matrix<T: Scalar>(classes: usize) -> Result<Tensor<T>> {
    if classes < 2 {
        return Err(UgnnError::Config(format!(
            "difference matrix needs C ≥ 2, got {classes}"
        )));
    }
    fn rows(c: usize) -> Vec<Vec<i8>> {
        if c == 2 {
            return vec![vec![1, -1]];
        }
        let mut out = Vec::new();
        for k in 1..c {
            let mut r = vec![0; c];
            r[0] = 1;
            r[k] = -1;
            out.push(r);
        }
        for sub in rows(c - 1) {
            out.push([vec![0], sub].concat());
        }
        out
    }
    let r = rows(classes);
    let n = r.len();
    let data = r.into_iter().flatten().map(|v| c::<T>(v as f64)).collect();
    Tensor::new(&[n, classes], data)
}

/// `(h, k)` for each row of [`difference_matrix`].
pub fn pair_list(classes: usize) -> Vec<(usize, usize)> {
    (0..classes)
        .flat_map(|h| (h + 1..classes).map(move |k| (h, k)))
        .collect()
}

/// `Ψ(U) = Σ_{h<k} (‖U_h − U_k‖² − 1)²`.
pub fn psi<T: Scalar>(u: &Tensor<T>) -> Result<T> {
    let a = difference_matrix::<T>(u.rows())?;
    let d = a.matmul(u)?;
    Ok((0..d.rows())
        .map(|i| {
            let r: T = d.row(i).iter().map(|&v| v * v).sum::<T>() - T::one();
            r * r
        })
        .sum())
}

/// Ψ and its gradient `Aᵀ(4 r ⊙ D)` (rows of `D = A U` scaled by `4 r`) on a tape.
pub fn psi_tape<T: Scalar>(tape: &mut Tape<T>, a: Var, at: Var, u: Var) -> Result<(Var, Var)> {
    let d = tape.matmul(a, u)?;
    let sq = tape.square(d)?;
    let n2 = tape.sum_rows(sq)?;
    let r = tape.offset(n2, -T::one())?;
    let r2 = tape.square(r)?;
    let value = tape.sum(r2)?;
    let r4 = tape.scale(r, c::<T>(4.0))?;
    let sd = tape.scale_rows(d, r4)?;
    let grad = tape.matmul(at, sd)?;
    Ok((value, grad))
}

/// `max_{h<k} |‖W_h − W_k‖ − 1|`.
pub fn pair_norm_deviation<T: Scalar>(w: &Tensor<T>) -> T {
    pair_norms(w)
        .into_iter()
        .map(|n| (n - T::one()).abs())
        .fold(T::zero(), T::max)
}

/// `‖W_h − W_k‖` in [`pair_list`] order.
pub fn pair_norms<T: Scalar>(w: &Tensor<T>) -> Vec<T> {
    pair_list(w.rows())
        .into_iter()
        .map(|(h, k)| {
            w.row(h)
                .iter()
                .zip(w.row(k))
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<T>()
                .sqrt()
        })
        .collect()
}

/// Result of a value-only projection.
#[derive(Debug, Clone)]
pub struct UpdProjection<T> {
    pub weight: Tensor<T>,
    pub psi: T,
    pub iterations: usize,
    /// Set when a line search exhausted its backtracks; `weight` is the last
    /// accepted iterate.
    pub line_search_failed: bool,
}

/// Minimize Ψ from `U` with `steps` L-BFGS steps.
pub fn upd_project<T: Scalar>(
    u: &Tensor<T>,
    steps: usize,
    opts: &LbfgsOptions,
) -> Result<UpdProjection<T>> {
    let mut tape = Tape::new();
    let uv = tape.leaf(u.clone());
    let out = upd_project_tape(&mut tape, uv, steps, opts)?;
    Ok(UpdProjection {
        weight: tape.value(out.x).clone(),
        psi: out.value,
        iterations: out.iterations,
        line_search_failed: out.line_search_failed,
    })
}

/// Differentiable projection: every L-BFGS iteration is recorded on `tape`.
pub fn upd_project_tape<T: Scalar>(
    tape: &mut Tape<T>,
    u: Var,
    steps: usize,
    opts: &LbfgsOptions,
) -> Result<LbfgsOutcome<T>> {
    if steps == 0 {
        return Err(UgnnError::Config(
            "UPD projection needs at least one step".into(),
        ));
    }
    let a = difference_matrix::<T>(tape.value(u).rows())?;
    let at = a.transpose()?;
    let (a, at) = (tape.leaf(a), tape.leaf(at));
    let mut objective = |tape: &mut Tape<T>, x: Var| psi_tape(tape, a, at, x);
    lbfgs_minimize(tape, &mut objective, u, steps, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdKind {
    /// `W = Q/√2` with `Q` row-orthonormal; needs `C ≤ m`.
    Bounded,
    /// `W` minimizes Ψ from `U`; needs `C ≤ m + 1`.
    Unbounded,
}

impl UpdKind {
    pub fn name(self) -> &'static str {
        match self {
            UpdKind::Bounded => "updB",
            UpdKind::Unbounded => "updU",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "updB" | "updb" | "bounded" => Some(UpdKind::Bounded),
            "updU" | "updu" | "unbounded" => Some(UpdKind::Unbounded),
            _ => None,
        }
    }
}

/// Output head `f(x) = W x + b` with the UPD property.
#[derive(Debug, Clone)]
pub struct UpdHead<T> {
    pub kind: UpdKind,
    /// Unconstrained parameter `U`, `C × m`.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    /// L-BFGS steps per training projection (unbounded head).
    pub steps: usize,
    /// L-BFGS steps at freeze time (unbounded head).
    pub freeze_steps: usize,
    pub lbfgs: LbfgsOptions,
    /// Treat the unbounded projection as the identity in the backward pass.
    pub straight_through: bool,
    pub train_iters: usize,
    pub freeze_iters: usize,
    projected: Option<Tensor<T>>,
}

impl<T: Scalar> UpdHead<T> {
    pub fn new<R: Rng + ?Sized>(
        kind: UpdKind,
        in_features: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = match kind {
            UpdKind::Bounded if classes <= in_features => {
                random_orthonormal_rows(classes, in_features, rng)
            }
            _ => Tensor::randn(
                &[classes, in_features],
                1.0 / (in_features as f64).sqrt(),
                rng,
            ),
        };
        Self::from_parts(kind, w, Tensor::zeros(&[classes]))
    }

    pub fn from_parts(kind: UpdKind, weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.ndim() != 2 || bias.shape() != [weight.rows()] {
            return Err(UgnnError::ShapeMismatch {
                op: "UpdHead",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let (classes, m) = (weight.rows(), weight.cols());
        if classes < 2 {
            return Err(UgnnError::Config(
                "a UPD head needs at least 2 classes".into(),
            ));
        }
        let feasible = match kind {
            UpdKind::Bounded => classes <= m,
            UpdKind::Unbounded => classes <= m + 1,
        };
        if !feasible {
            return Err(UgnnError::Config(format!(
                "{} head cannot place {classes} classes on {m} features",
                kind.name()
            )));
        }
        Ok(Self {
            kind,
            weight,
            bias,
            steps: 3,
            freeze_steps: 6,
            lbfgs: LbfgsOptions::default(),
            straight_through: false,
            train_iters: TRAIN_ITERS,
            freeze_iters: FREEZE_ITERS,
            projected: None,
        })
    }

    pub fn classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_features(&self) -> usize {
        self.weight.cols()
    }

    /// Projected weight as a function of the raw parameter `u` on the tape.
    pub fn effective_weight(&self, tape: &mut Tape<T>, u: Var) -> Result<Var> {
        match self.kind {
            UpdKind::Bounded => {
                let q = bjorck_project_tape(tape, u, self.train_iters)?;
                tape.scale(q, T::FRAC_1_SQRT_2())
            }
            UpdKind::Unbounded if self.straight_through => {
                let p = upd_project(tape.value(u), self.steps, &self.lbfgs)?;
                let delta = p.weight.sub(tape.value(u))?;
                let dv = tape.leaf(delta);
                tape.add(u, dv)
            }
            UpdKind::Unbounded => Ok(upd_project_tape(tape, u, self.steps, &self.lbfgs)?.x),
        }
    }

    pub fn freeze(&mut self) -> Result<()> {
        let w = match self.kind {
            UpdKind::Bounded => {
                bjorck_project(&self.weight, self.freeze_iters)?.scale(T::FRAC_1_SQRT_2())
            }
            UpdKind::Unbounded => upd_project(&self.weight, self.freeze_steps, &self.lbfgs)?.weight,
        };
        self.projected = Some(w);
        Ok(())
    }

    pub fn projected(&self) -> Option<&Tensor<T>> {
        self.projected.as_ref()
    }

    pub fn invalidate(&mut self) {
        self.projected = None;
    }

    pub fn apply(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = tape.matmul_t(x, weight)?;
        tape.add_row_vec(y, bias)
    }
}

impl<T: Scalar> TapeLayer<T> for UpdHead<T> {
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
    use crate::tensor::seeded_rng;

    #[test]
    fn difference_matrix_examples() {
        assert_eq!(difference_matrix::<f64>(2).unwrap().data(), &[1.0, -1.0]);
        let a3 = difference_matrix::<f64>(3).unwrap();
        assert_eq!(a3.data(), &[1.0, -1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 1.0, -1.0]);
        assert_eq!(difference_matrix::<f64>(10).unwrap().rows(), 45);
        assert!(difference_matrix::<f64>(1).is_err());
    }

    #[test]
    fn difference_rows_enumerate_pairs_once() {
        for classes in 2..9 {
            let a = difference_matrix::<f64>(classes).unwrap();
            let pairs = pair_list(classes);
            assert_eq!(a.rows(), pairs.len());
            for (i, &(h, k)) in pairs.iter().enumerate() {
                for j in 0..classes {
                    let want = if j == h {
                        1.0
                    } else if j == k {
                        -1.0
                    } else {
                        0.0
                    };
                    assert_eq!(a.get2(i, j), want);
                }
            }
        }
    }

    #[test]
    fn psi_examples() {
        // √2-scaled standard basis: every pairwise distance is 1... after halving
        let simplex = Tensor::<f64>::eye(4).scale(std::f64::consts::FRAC_1_SQRT_2);
        assert!(psi(&simplex).unwrap().abs() < 1e-15);
        let q =
            bjorck_project(&Tensor::<f64>::randn(&[5, 9], 1.0, &mut seeded_rng(1)), 100).unwrap();
        assert!(psi(&q.scale(std::f64::consts::FRAC_1_SQRT_2)).unwrap() < 1e-20);
        assert_eq!(psi(&Tensor::<f64>::zeros(&[3, 4])).unwrap(), 3.0);
    }

    #[test]
    fn psi_gradient_matches_fd() {
        use crate::tape::tests::fd_grad;
        let u0 = Tensor::<f64>::randn(&[4, 6], 0.7, &mut seeded_rng(2));
        let mut tape = Tape::new();
        let a = tape.leaf(difference_matrix(4).unwrap());
        let at = tape.leaf(difference_matrix::<f64>(4).unwrap().transpose().unwrap());
        let u = tape.leaf(u0.clone());
        let (v, g) = psi_tape(&mut tape, a, at, u).unwrap();
        assert!((tape.scalar_value(v) - psi(&u0).unwrap()).abs() < 1e-12);
        let fd = fd_grad(&u0, |x| psi(x).unwrap());
        assert!(tape.value(g).max_abs_diff(&fd) <= 1e-4 * fd.max_abs());
        // the analytic gradient agrees with reverse accumulation through Ψ
        let rev = tape.gradient(v, u).unwrap();
        assert!(rev.max_abs_diff(tape.value(g)) <= 1e-12 * fd.max_abs());
    }

    #[test]
    fn feasible_point_is_fixed() {
        let q =
            bjorck_project(&Tensor::<f64>::randn(&[4, 8], 1.0, &mut seeded_rng(3)), 100).unwrap();
        let w = q.scale(std::f64::consts::FRAC_1_SQRT_2);
        let p = upd_project(&w, 3, &LbfgsOptions::default()).unwrap();
        assert!(p.weight.max_abs_diff(&w) <= 1e-12);
    }

    #[test]
    fn projection_reaches_tolerance_and_is_idempotent() {
        let u = Tensor::<f64>::randn(&[6, 64], 1.0 / 8.0, &mut seeded_rng(4));
        let p = upd_project(&u, 3, &LbfgsOptions::default()).unwrap();
        assert!(!p.line_search_failed);
        assert!(pair_norm_deviation(&p.weight) <= 1e-4);
        let again = upd_project(&p.weight, 3, &LbfgsOptions::default()).unwrap();
        assert!(again.weight.max_abs_diff(&p.weight) <= 1e-8);
    }

    #[test]
    fn infeasible_heads_rejected() {
        let mut rng = seeded_rng(0);
        assert!(UpdHead::<f64>::new(UpdKind::Bounded, 2, 3, &mut rng).is_err());
        assert!(UpdHead::<f64>::new(UpdKind::Unbounded, 2, 3, &mut rng).is_ok());
        assert!(UpdHead::<f64>::new(UpdKind::Unbounded, 2, 4, &mut rng).is_err());
    }

    #[test]
    fn bounded_head_structure() {
        let mut head = UpdHead::<f64>::new(UpdKind::Bounded, 16, 5, &mut seeded_rng(5)).unwrap();
        head.freeze().unwrap();
        let w = head.projected().unwrap();
        assert!(pair_norm_deviation(w) <= 1e-6);
        for i in 0..5 {
            let n = w.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - std::f64::consts::FRAC_1_SQRT_2).abs() <= 1e-6);
        }
    }

    #[test]
    fn projection_gradients_match_fd() {
        use crate::tape::tests::fd_grad;
        let u0 = Tensor::<f64>::randn(&[3, 5], 0.5, &mut seeded_rng(6));
        let probe = Tensor::<f64>::randn(&[3, 5], 1.0, &mut seeded_rng(7));
        let opts = LbfgsOptions {
            iters_per_step: 2,
            ..Default::default()
        };
        let f = |u: &Tensor<f64>| {
            upd_project(u, 1, &opts)
                .unwrap()
                .weight
                .dot(&probe)
                .unwrap()
        };
        let mut tape = Tape::new();
        let u = tape.leaf(u0.clone());
        let w = upd_project_tape(&mut tape, u, 1, &opts).unwrap().x;
        let pv = tape.leaf(probe.clone());
        let out = tape.dot(w, pv).unwrap();
        let g = tape.gradient(out, u).unwrap();
        let fd = fd_grad(&u0, f);
        assert!(
            g.max_abs_diff(&fd) <= 1e-4 * fd.max_abs(),
            "{} vs {}",
            g.max_abs_diff(&fd),
            fd.max_abs()
        );
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let mut head = UpdHead::<f64>::new(UpdKind::Unbounded, 8, 3, &mut seeded_rng(8)).unwrap();
        head.straight_through = true;
        let mut tape = Tape::new();
        let u = tape.leaf(head.weight.clone());
        let w = head.effective_weight(&mut tape, u).unwrap();
        assert!(pair_norm_deviation(tape.value(w)) <= 1e-4);
        let s = tape.sum(w).unwrap();
        assert_eq!(tape.gradient(s, u).unwrap(), Tensor::full(&[3, 8], 1.0));
    }
}
