//! L-BFGS with a backtracking Armijo line search, recorded on a tape so the
//! returned point is differentiable with respect to the starting point.
//!
//! One "step" is one outer call with an inner budget of `iters_per_step`
//! iterations; the curvature history persists across steps.

use crate::error::{Result, UgnnError};
use crate::scalar::{c, Scalar};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub iters_per_step: usize,
    pub c1: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    /// Stop once `max |g|` falls to this many machine epsilons.
    pub grad_tol_eps: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            iters_per_step: 10,
            c1: 1e-4,
            backtrack: 0.5,
            max_backtracks: 20,
            grad_tol_eps: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LbfgsOutcome<T> {
    pub x: Var,
    pub value: T,
    pub iterations: usize,
    pub line_search_failed: bool,
}

/// Objective returning `(value, gradient)` as tape variables; the gradient has
/// the shape of the argument.
pub trait Objective<T: Scalar> {
    fn eval(&mut self, tape: &mut Tape<T>, x: Var) -> Result<(Var, Var)>;
}

impl<T: Scalar, F> Objective<T> for F
where
    F: FnMut(&mut Tape<T>, Var) -> Result<(Var, Var)>,
{
    fn eval(&mut self, tape: &mut Tape<T>, x: Var) -> Result<(Var, Var)> {
        self(tape, x)
    }
}

struct Pair {
    s: Var,
    y: Var,
    rho: Var,
}

fn finite_or_err<T: Scalar>(tape: &Tape<T>, f: Var, g: Var) -> Result<()> {
    if !tape.scalar_value(f).is_finite() || !tape.value(g).all_finite() {
        return Err(UgnnError::NonFinite("L-BFGS objective or gradient".into()));
    }
    Ok(())
}

/// Minimize `objective` from `x0` for `steps` outer steps.
pub fn lbfgs_minimize<T: Scalar, O: Objective<T>>(
    tape: &mut Tape<T>,
    objective: &mut O,
    x0: Var,
    steps: usize,
    opts: &LbfgsOptions,
) -> Result<LbfgsOutcome<T>> {
    let tol = T::epsilon() * c::<T>(opts.grad_tol_eps);
    let c1 = c::<T>(opts.c1);
    let mut x = x0;
    let (mut f, mut g) = objective.eval(tape, x)?;
    finite_or_err(tape, f, g)?;
    let mut history: Vec<Pair> = Vec::new();
    let mut iterations = 0;

    for _ in 0..steps * opts.iters_per_step {
        if tape.value(g).max_abs() <= tol {
            break;
        }
        let mut d = direction(tape, g, &history)?;
        let mut slope = tape.value(g).dot(tape.value(d))?;
        if !(slope < T::zero()) {
            history.clear();
            d = direction(tape, g, &history)?;
            slope = tape.value(g).dot(tape.value(d))?;
        }
        let f0 = tape.scalar_value(f);
        let mut t = T::one();
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let step = tape.scale(d, t)?;
            let xn = tape.add(x, step)?;
            let (fn_, gn) = objective.eval(tape, xn)?;
            finite_or_err(tape, fn_, gn)?;
            if tape.scalar_value(fn_) <= f0 + c1 * t * slope {
                accepted = Some((xn, fn_, gn));
                break;
            }
            t *= c::<T>(opts.backtrack);
        }
        let Some((xn, fn_, gn)) = accepted else {
            return Ok(LbfgsOutcome {
                x,
                value: f0,
                iterations,
                line_search_failed: true,
            });
        };
        let s = tape.sub(xn, x)?;
        let y = tape.sub(gn, g)?;
        let (sv, yv) = (tape.value(s), tape.value(y));
        let sy = sv.dot(yv)?;
        if sy > c::<T>(1e-12) * sv.norm() * yv.norm() {
            let syv = tape.dot(s, y)?;
            let rho = tape.recip(syv)?;
            history.push(Pair { s, y, rho });
            if history.len() > opts.memory {
                history.remove(0);
            }
        }
        x = xn;
        f = fn_;
        g = gn;
        iterations += 1;
    }
    Ok(LbfgsOutcome {
        x,
        value: tape.scalar_value(f),
        iterations,
        line_search_failed: false,
    })
}

/// Two-loop recursion: `d = −H g`. With an empty history the first step is
/// `−g/‖g‖`.
fn direction<T: Scalar>(tape: &mut Tape<T>, g: Var, history: &[Pair]) -> Result<Var> {
    if history.is_empty() {
        let gg = tape.dot(g, g)?;
        let gn = tape.sqrt(gg)?;
        let inv = tape.recip(gn)?;
        let d = tape.scale_by(g, inv)?;
        return tape.neg(d);
    }
    let mut q = g;
    let mut alphas = Vec::with_capacity(history.len());
    for p in history.iter().rev() {
        let sq = tape.dot(p.s, q)?;
        let a = tape.mul(p.rho, sq)?;
        let ay = tape.scale_by(p.y, a)?;
        q = tape.sub(q, ay)?;
        alphas.push(a);
    }
    let last = history.last().expect("non-empty");
    let sy = tape.dot(last.s, last.y)?;
    let yy = tape.dot(last.y, last.y)?;
    let gamma = tape.div(sy, yy)?;
    let mut r = tape.scale_by(q, gamma)?;
    for (p, a) in history.iter().zip(alphas.into_iter().rev()) {
        let yr = tape.dot(p.y, r)?;
        let b = tape.mul(p.rho, yr)?;
        let coef = tape.sub(a, b)?;
        let sc = tape.scale_by(p.s, coef)?;
        r = tape.add(r, sc)?;
    }
    tape.neg(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn quadratic(center: Tensor<f64>) -> impl FnMut(&mut Tape<f64>, Var) -> Result<(Var, Var)> {
        move |tape: &mut Tape<f64>, x: Var| {
            let cv = tape.leaf(center.clone());
            let d = tape.sub(x, cv)?;
            let sq = tape.dot(d, d)?;
            let f = tape.scale(sq, 0.5)?;
            Ok((f, d))
        }
    }

    #[test]
    fn quadratic_converges_quickly() {
        let center = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
        let mut tape = Tape::new();
        let x0 = tape.leaf(Tensor::from_vec(vec![4.0, 4.0, 4.0]));
        let opts = LbfgsOptions {
            iters_per_step: 1,
            ..Default::default()
        };
        let out = lbfgs_minimize(&mut tape, &mut quadratic(center.clone()), x0, 5, &opts).unwrap();
        assert!(tape.value(out.x).max_abs_diff(&center) <= 1e-8);
        assert!(!out.line_search_failed);
    }

    #[test]
    fn stationary_start_is_returned_unchanged() {
        let center = Tensor::from_vec(vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let x0 = tape.leaf(center.clone());
        let out = lbfgs_minimize(
            &mut tape,
            &mut quadratic(center.clone()),
            x0,
            3,
            &Default::default(),
        )
        .unwrap();
        assert_eq!(out.x, x0);
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn rosenbrock_decreases_monotonically() {
        let rosen = |tape: &mut Tape<f64>, x: Var| -> Result<(Var, Var)> {
            let v = tape.value(x).data().to_vec();
            let (a, b) = (v[0], v[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ];
            Ok((tape.scalar(f), tape.leaf(Tensor::from_vec(g))))
        };
        // the run is deterministic, so k-iteration runs trace the accepted sequence
        let mut accepted = Vec::new();
        for k in 0..40 {
            let mut tape = Tape::new();
            let x0 = tape.leaf(Tensor::from_vec(vec![-1.2, 1.0]));
            let opts = LbfgsOptions {
                iters_per_step: k,
                ..Default::default()
            };
            let out = lbfgs_minimize(&mut tape, &mut rosen.clone(), x0, 1, &opts).unwrap();
            assert_eq!(out.iterations, k);
            accepted.push(out.value);
        }
        for w in accepted.windows(2) {
            assert!(w[1] < w[0], "{} then {}", w[0], w[1]);
        }
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut bad =
            |tape: &mut Tape<f64>, x: Var| -> Result<(Var, Var)> { Ok((tape.scalar(f64::NAN), x)) };
        let mut tape = Tape::new();
        let x0 = tape.leaf(Tensor::from_vec(vec![1.0]));
        assert!(matches!(
            lbfgs_minimize(&mut tape, &mut bad, x0, 1, &Default::default()),
            Err(UgnnError::NonFinite(_))
        ));
    }
}
