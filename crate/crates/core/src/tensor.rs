//! Dense row-major tensors.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, UgnnError};
use crate::scalar::{c, Scalar};

/// Portable seeded generator. ChaCha8 output is specified bit-for-bit, so a
/// seed reproduces the same tensors on every platform.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(UgnnError::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(UgnnError::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("buffer holds {} elements, shape needs {len}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = check_shape(shape).expect("positive extents");
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        let n = data.len();
        Self::new(&[n], data).expect("non-empty vector")
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(UgnnError::InvalidShape {
                shape: vec![rows.len(), cols],
                reason: "ragged rows".into(),
            });
        }
        Self::new(
            &[rows.len(), cols],
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// i.i.d. `N(0, std²)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let len = check_shape(shape).expect("positive extents");
        let data = (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                c::<T>(z * std)
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let len = check_shape(shape).expect("positive extents");
        let data = (0..len).map(|_| c::<T>(rng.random_range(lo..hi))).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(UgnnError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn get2(&self, r: usize, col: usize) -> T {
        self.data[r * self.cols() + col]
    }

    pub fn set2(&mut self, r: usize, col: usize, v: T) {
        let cols = self.cols();
        self.data[r * cols + col] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        let cols = self.cols();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element-wise combination. Shapes must agree, or one side must hold a
    /// single element (the only broadcast allowed).
    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape == other.shape {
            return Ok(Self {
                shape: self.shape.clone(),
                data: self
                    .data
                    .iter()
                    .zip(&other.data)
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            });
        }
        if other.data.len() == 1 {
            let b = other.data[0];
            return Ok(self.map(|a| f(a, b)));
        }
        if self.data.len() == 1 {
            let a = self.data[0];
            return Ok(other.map(|b| f(a, b)));
        }
        Err(UgnnError::ShapeMismatch {
            op,
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// `self += alpha * other`, same shape.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(UgnnError::ShapeMismatch {
                op: "axpy",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.data.len() != other.data.len() {
            return Err(UgnnError::ShapeMismatch {
                op: "dot",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(UgnnError::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("{op} expects a matrix"),
            }),
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.expect_matrix("matmul")?;
        let (k2, n) = other.expect_matrix("matmul")?;
        if k != k2 {
            return Err(UgnnError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data,
            k as isize,
            1,
            &other.data,
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.expect_matrix("matmul_t")?;
        let (n, k2) = other.expect_matrix("matmul_t")?;
        if k != k2 {
            return Err(UgnnError::ShapeMismatch {
                op: "matmul_t",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data,
            k as isize,
            1,
            &other.data,
            1,
            k as isize,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        let (k, m) = self.expect_matrix("t_matmul")?;
        let (k2, n) = other.expect_matrix("t_matmul")?;
        if k != k2 {
            return Err(UgnnError::ShapeMismatch {
                op: "t_matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data,
            1,
            m as isize,
            &other.data,
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, cols) = self.expect_matrix("transpose")?;
        let mut out = vec![T::zero(); r * cols];
        for i in 0..r {
            for j in 0..cols {
                out[j * r + i] = self.data[i * cols + j];
            }
        }
        Ok(Self {
            shape: vec![cols, r],
            data: out,
        })
    }

    /// `‖A Aᵀ − I‖_max` for a matrix `A`.
    pub fn orthonormal_rows_deviation(&self) -> Result<T> {
        let (r, _) = self.expect_matrix("orthonormal_rows_deviation")?;
        let g = self.matmul_t(self)?;
        let mut dev = T::zero();
        for i in 0..r {
            for j in 0..r {
                let target = if i == j { T::one() } else { T::zero() };
                dev = dev.max((g.data[i * r + j] - target).abs());
            }
        }
        Ok(dev)
    }

    /// Exact widening/narrowing element conversion.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a.get2(i, l) * b.get2(l, j);
                }
                out.set2(i, j, s);
            }
        }
        out
    }

    #[test]
    fn identity_times_matrix() {
        let mut rng = seeded_rng(1);
        let m = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        assert_eq!(Tensor::eye(3).matmul(&m).unwrap(), m);
    }

    #[test]
    fn hand_product() {
        let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::<f64>::from_rows(&[&[1.0], &[1.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = seeded_rng(7);
        let a = Tensor::<f64>::randn(&[5, 7], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[7, 3], 1.0, &mut rng);
        let fast = a.matmul(&b).unwrap();
        assert!(fast.max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
        let bt = b.transpose().unwrap();
        assert!(a.matmul_t(&bt).unwrap().max_abs_diff(&fast) <= 1e-12);
        let at = a.transpose().unwrap();
        assert!(at.t_matmul(&b).unwrap().max_abs_diff(&fast) <= 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(UgnnError::ShapeMismatch { .. })));
        assert!(a.add(&Tensor::zeros(&[3, 2])).is_err());
        // scalar broadcast is the single exception
        assert!(a.add(&Tensor::scalar(1.0)).is_ok());
    }

    #[test]
    fn buffer_length_must_match_shape() {
        assert!(Tensor::<f64>::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::new(&[0, 2], vec![]).is_err());
    }

    #[test]
    fn seeded_rng_is_reproducible() {
        let a = Tensor::<f64>::randn(&[16], 1.0, &mut seeded_rng(42));
        let b = Tensor::<f64>::randn(&[16], 1.0, &mut seeded_rng(42));
        assert_eq!(a, b);
        let c = Tensor::<f64>::randn(&[16], 1.0, &mut seeded_rng(43));
        assert_ne!(a, c);
    }
}
