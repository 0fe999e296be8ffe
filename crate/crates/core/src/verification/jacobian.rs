//! Explicit Jacobians and gradient-norm-preservation checks.

use rand::Rng;

use crate::error::{Result, UgnnError};
use crate::scalar::Scalar;
use crate::spectral::field_matrices;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default guard on the number of Jacobian rows.
pub const JACOBIAN_ROW_LIMIT: usize = 4096;

/// Rows pushed through one backward pass.
const CHUNK: usize = 256;

/// Forward map on batched inputs, as recorded on a tape.
pub trait TapeFn<T: Scalar> {
    fn call(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
}

impl<T: Scalar, F> TapeFn<T> for F
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    fn call(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self(tape, x)
    }
}

fn replicate<T: Scalar>(x: &Tensor<T>, b: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(b * x.len());
    for _ in 0..b {
        data.extend_from_slice(x.data());
    }
    Tensor::new(&[&[b], x.shape()].concat(), data)
}

/// Vector-Jacobian products `V J` at the unbatched point `x` for the rows of
/// `seeds` (`k × n_out`). Returns `k × n_in`.
pub fn vjp_rows<T: Scalar, F: TapeFn<T> + ?Sized>(
    f: &F,
    x: &Tensor<T>,
    seeds: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (k, n_in) = (seeds.rows(), x.len());
    let mut out = Vec::with_capacity(k * n_in);
    let mut start = 0;
    while start < k {
        let b = CHUNK.min(k - start);
        let mut tape = Tape::new();
        let xv = tape.leaf(replicate(x, b)?);
        let y = f.call(&mut tape, xv)?;
        let ys = tape.value(y).shape().to_vec();
        let n_out = tape.value(y).len() / b;
        if n_out != seeds.cols() {
            return Err(UgnnError::ShapeMismatch {
                op: "vjp_rows",
                lhs: ys,
                rhs: seeds.shape().to_vec(),
            });
        }
        let seed = Tensor::new(
            &ys,
            seeds.data()[start * n_out..(start + b) * n_out].to_vec(),
        )?;
        let g = tape.backward(y, seed)?.wrt(xv)?;
        out.extend_from_slice(g.data());
        start += b;
    }
    Tensor::new(&[k, n_in], out)
}

/// Output length of `f` at the unbatched point `x`.
pub fn output_len<T: Scalar, F: TapeFn<T> + ?Sized>(f: &F, x: &Tensor<T>) -> Result<usize> {
    let mut tape = Tape::new();
    let xv = tape.leaf(replicate(x, 1)?);
    let y = f.call(&mut tape, xv)?;
    Ok(tape.value(y).len())
}

/// Jacobian of `f` at the unbatched point `x`; row `r` is the gradient of
/// output component `r`.
pub fn explicit_jacobian<T: Scalar, F: TapeFn<T> + ?Sized>(
    f: &F,
    x: &Tensor<T>,
    limit: usize,
) -> Result<Tensor<T>> {
    let n_out = output_len(f, x)?;
    if n_out > limit {
        return Err(UgnnError::JacobianTooLarge {
            rows: n_out,
            cols: x.len(),
            limit,
        });
    }
    vjp_rows(f, x, &Tensor::eye(n_out))
}

/// `‖J Jᵀ − I‖_max`.
pub fn gram_deviation<T: Scalar>(j: &Tensor<T>) -> Result<T> {
    j.orthonormal_rows_deviation()
}

/// How a layer's GNP deviation was measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GnpMethod {
    /// Full Jacobian assembled row by row.
    Explicit,
    /// `‖(V J)(V J)ᵀ − V Vᵀ‖_max` for random unit probe rows `V`.
    Probe,
    /// Unitarity of every per-frequency Cayley matrix.
    Spectral,
}

impl GnpMethod {
    pub fn name(self) -> &'static str {
        match self {
            GnpMethod::Explicit => "explicit",
            GnpMethod::Probe => "probe",
            GnpMethod::Spectral => "spectral",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnpReport<T> {
    pub max_deviation: T,
    pub trials: usize,
    pub method: GnpMethod,
}

/// Max over `trials` Gaussian inputs of `‖J Jᵀ − I‖_max`. Above `limit`
/// outputs the check switches to `probes` random unit probe rows.
pub fn check_gnp<T: Scalar, F: TapeFn<T> + ?Sized, R: Rng + ?Sized>(
    f: &F,
    input_shape: &[usize],
    trials: usize,
    limit: usize,
    probes: usize,
    rng: &mut R,
) -> Result<GnpReport<T>> {
    let mut worst = T::zero();
    let mut method = GnpMethod::Explicit;
    for _ in 0..trials {
        let x = Tensor::<T>::randn(input_shape, 1.0, rng);
        let n_out = output_len(f, &x)?;
        let dev = if n_out <= limit {
            gram_deviation(&explicit_jacobian(f, &x, limit)?)?
        } else {
            method = GnpMethod::Probe;
            probe_deviation(f, &x, n_out, probes, rng)?
        };
        worst = worst.max(dev);
    }
    Ok(GnpReport {
        max_deviation: worst,
        trials,
        method,
    })
}

fn probe_deviation<T: Scalar, F: TapeFn<T> + ?Sized, R: Rng + ?Sized>(
    f: &F,
    x: &Tensor<T>,
    n_out: usize,
    probes: usize,
    rng: &mut R,
) -> Result<T> {
    let mut v = Tensor::<T>::randn(&[probes, n_out], 1.0, rng);
    for r in 0..probes {
        let row = &mut v.data_mut()[r * n_out..(r + 1) * n_out];
        let nrm = row.iter().map(|&a| a * a).sum::<T>().sqrt();
        row.iter_mut().for_each(|a| *a /= nrm);
    }
    let vj = vjp_rows(f, x, &v)?;
    let lhs = vj.matmul_t(&vj)?;
    let rhs = v.matmul_t(&v)?;
    Ok(lhs.max_abs_diff(&rhs))
}

/// `max_f ‖Û[f] Û[f]ᴴ − I‖_max` of a field tensor.
pub fn field_unitarity_deviation<T: Scalar>(field: &Tensor<T>) -> T {
    let mut worst = T::zero();
    for m in field_matrices(field) {
        let p = m.matmul(&m.adjoint());
        let n = m.n;
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { T::one() } else { T::zero() };
                worst = worst
                    .max((p.re[i * n + j] - target).abs())
                    .max(p.im[i * n + j].abs());
            }
        }
    }
    worst
}
