//! Square complex matrices in planar (separate real / imaginary) layout so
//! products can go through the real GEMM kernels.

use num_complex::Complex;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct CMat<T> {
    pub n: usize,
    pub re: Vec<T>,
    pub im: Vec<T>,
}

impl<T: Scalar> CMat<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            re: vec![T::zero(); n * n],
            im: vec![T::zero(); n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.re[i * n + i] = T::one();
        }
        m
    }

    pub fn get(&self, i: usize, j: usize) -> Complex<T> {
        Complex::new(self.re[i * self.n + j], self.im[i * self.n + j])
    }

    pub fn set(&mut self, i: usize, j: usize, z: Complex<T>) {
        self.re[i * self.n + j] = z.re;
        self.im[i * self.n + j] = z.im;
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        let n = self.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out.re[j * n + i] = self.re[i * n + j];
                out.im[j * n + i] = -self.im[i * n + j];
            }
        }
        out
    }

    pub fn is_real(&self) -> bool {
        self.im.iter().all(|v| v.is_zero())
    }

    pub fn matmul(&self, other: &Self) -> Self {
        let n = self.n;
        let mut out = Self::zeros(n);
        let s = n as isize;
        let g = |alpha: T, a: &[T], b: &[T], beta: T, c: &mut [T]| {
            T::gemm(n, n, n, alpha, a, s, 1, b, s, 1, beta, c, s, 1);
        };
        g(T::one(), &self.re, &other.re, T::zero(), &mut out.re);
        g(-T::one(), &self.im, &other.im, T::one(), &mut out.re);
        g(T::one(), &self.re, &other.im, T::zero(), &mut out.im);
        g(T::one(), &self.im, &other.re, T::one(), &mut out.im);
        out
    }

    pub fn matvec(&self, v: &[Complex<T>]) -> Vec<Complex<T>> {
        let n = self.n;
        (0..n)
            .map(|i| {
                let mut acc = Complex::new(T::zero(), T::zero());
                for j in 0..n {
                    acc += self.get(i, j) * v[j];
                }
                acc
            })
            .collect()
    }

    /// Inverse by Gauss-Jordan elimination with partial pivoting. Returns
    /// `None` when a pivot vanishes. Real inputs stay on a real-only path.
    pub fn inverse(&self) -> Option<Self> {
        if self.is_real() {
            let inv = real_inverse(self.n, &self.re)?;
            return Some(Self {
                n: self.n,
                re: inv,
                im: vec![T::zero(); self.n * self.n],
            });
        }
        let n = self.n;
        let mut a: Vec<Complex<T>> = (0..n * n)
            .map(|k| Complex::new(self.re[k], self.im[k]))
            .collect();
        let mut inv: Vec<Complex<T>> = vec![Complex::new(T::zero(), T::zero()); n * n];
        for i in 0..n {
            inv[i * n + i] = Complex::new(T::one(), T::zero());
        }
        for col in 0..n {
            let mut piv = col;
            let mut best = a[col * n + col].norm_sqr();
            for r in col + 1..n {
                let v = a[r * n + col].norm_sqr();
                if v > best {
                    best = v;
                    piv = r;
                }
            }
            if best <= T::min_positive_value() {
                return None;
            }
            if piv != col {
                for j in 0..n {
                    a.swap(col * n + j, piv * n + j);
                    inv.swap(col * n + j, piv * n + j);
                }
            }
            let p = Complex::new(T::one(), T::zero()) / a[col * n + col];
            for j in 0..n {
                a[col * n + j] *= p;
                inv[col * n + j] *= p;
            }
            let (pivot_a, pivot_inv): (Vec<_>, Vec<_>) = (
                a[col * n..(col + 1) * n].to_vec(),
                inv[col * n..(col + 1) * n].to_vec(),
            );
            for r in 0..n {
                if r == col {
                    continue;
                }
                let f = a[r * n + col];
                if f.re.is_zero() && f.im.is_zero() {
                    continue;
                }
                let ra = &mut a[r * n..(r + 1) * n];
                for (x, &pv) in ra.iter_mut().zip(&pivot_a) {
                    *x -= f * pv;
                }
                let ri = &mut inv[r * n..(r + 1) * n];
                for (x, &pv) in ri.iter_mut().zip(&pivot_inv) {
                    *x -= f * pv;
                }
            }
        }
        Some(Self {
            n,
            re: inv.iter().map(|z| z.re).collect(),
            im: inv.iter().map(|z| z.im).collect(),
        })
    }
}

fn real_inverse<T: Scalar>(n: usize, src: &[T]) -> Option<Vec<T>> {
    let mut a = src.to_vec();
    let mut inv = vec![T::zero(); n * n];
    for i in 0..n {
        inv[i * n + i] = T::one();
    }
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].abs();
        for r in col + 1..n {
            let v = a[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best <= T::min_positive_value() {
            return None;
        }
        if piv != col {
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
                inv.swap(col * n + j, piv * n + j);
            }
        }
        let p = T::one() / a[col * n + col];
        for j in 0..n {
            a[col * n + j] *= p;
            inv[col * n + j] *= p;
        }
        let pivot_a = a[col * n..(col + 1) * n].to_vec();
        let pivot_inv = inv[col * n..(col + 1) * n].to_vec();
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r * n + col];
            if f.is_zero() {
                continue;
            }
            for (x, &pv) in a[r * n..(r + 1) * n].iter_mut().zip(&pivot_a) {
                *x -= f * pv;
            }
            for (x, &pv) in inv[r * n..(r + 1) * n].iter_mut().zip(&pivot_inv) {
                *x -= f * pv;
            }
        }
    }
    Some(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{seeded_rng, Tensor};

    fn random(n: usize, seed: u64) -> CMat<f64> {
        let mut rng = seeded_rng(seed);
        let re = Tensor::<f64>::randn(&[n, n], 1.0, &mut rng).into_data();
        let im = Tensor::<f64>::randn(&[n, n], 1.0, &mut rng).into_data();
        CMat { n, re, im }
    }

    fn max_dev_from_identity(m: &CMat<f64>) -> f64 {
        let id = CMat::<f64>::identity(m.n);
        m.re.iter()
            .zip(&id.re)
            .chain(m.im.iter().zip(&id.im))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn complex_inverse() {
        let a = random(6, 1);
        let inv = a.inverse().unwrap();
        assert!(max_dev_from_identity(&a.matmul(&inv)) < 1e-12);
        assert!(max_dev_from_identity(&inv.matmul(&a)) < 1e-12);
    }

    #[test]
    fn real_path_inverse() {
        let mut a = random(5, 2);
        a.im.iter_mut().for_each(|v| *v = 0.0);
        let inv = a.inverse().unwrap();
        assert!(inv.is_real());
        assert!(max_dev_from_identity(&a.matmul(&inv)) < 1e-12);
    }

    #[test]
    fn singular_detected() {
        assert!(CMat::<f64>::zeros(3).inverse().is_none());
    }
}
