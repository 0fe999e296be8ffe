//! Discrete Fourier transforms.
//!
//! Power-of-two lengths use an iterative radix-2 butterfly; every other length
//! goes through Bluestein's chirp-z reduction to a power-of-two convolution.
//! The 2D pair [`fft2`]/[`ifft2`] is unitary (both directions scaled by
//! `1/√(HW)`), so Parseval holds without extra factors.

use num_complex::Complex;

use crate::error::{Result, UgnnError};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
struct Radix2<T> {
    n: usize,
    bitrev: Vec<usize>,
    // twiddles[k] = exp(-2πi k / n), k < n/2
    twiddles: Vec<Complex<T>>,
}

impl<T: Scalar> Radix2<T> {
    fn new(n: usize) -> Self {
        debug_assert!(n.is_power_of_two());
        let bits = n.trailing_zeros();
        let bitrev = (0..n)
            .map(|i| {
                if bits == 0 {
                    0
                } else {
                    i.reverse_bits() >> (usize::BITS - bits)
                }
            })
            .collect();
        let twiddles = (0..n / 2)
            .map(|k| {
                let ang = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
                Complex::new(c(ang.cos()), c(ang.sin()))
            })
            .collect();
        Self {
            n,
            bitrev,
            twiddles,
        }
    }

    fn run(&self, buf: &mut [Complex<T>], inverse: bool) {
        let n = self.n;
        for i in 0..n {
            let j = self.bitrev[i];
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let mut w = self.twiddles[k * step];
                    if inverse {
                        w = w.conj();
                    }
                    let a = buf[start + k];
                    let b = buf[start + k + half] * w;
                    buf[start + k] = a + b;
                    buf[start + k + half] = a - b;
                }
            }
            len <<= 1;
        }
    }
}

#[derive(Debug, Clone)]
struct Bluestein<T> {
    n: usize,
    inner: Radix2<T>,
    // chirp[k] = exp(-iπ k²/n)
    chirp: Vec<Complex<T>>,
    // FFT of the conjugate chirp, wrapped to the padded length
    kernel_hat: Vec<Complex<T>>,
}

impl<T: Scalar> Bluestein<T> {
    fn new(n: usize) -> Self {
        let m = (2 * n - 1).next_power_of_two();
        let inner = Radix2::new(m);
        let chirp: Vec<Complex<T>> = (0..n)
            .map(|k| {
                // k² mod 2n keeps the angle argument small
                let kk = ((k as u128 * k as u128) % (2 * n as u128)) as f64;
                let ang = -std::f64::consts::PI * kk / n as f64;
                Complex::new(c(ang.cos()), c(ang.sin()))
            })
            .collect();
        let mut kernel = vec![Complex::new(T::zero(), T::zero()); m];
        kernel[0] = chirp[0].conj();
        for k in 1..n {
            kernel[k] = chirp[k].conj();
            kernel[m - k] = chirp[k].conj();
        }
        inner.run(&mut kernel, false);
        Self {
            n,
            inner,
            chirp,
            kernel_hat: kernel,
        }
    }

    fn run(&self, buf: &mut [Complex<T>], inverse: bool) {
        let m = self.inner.n;
        let mut a = vec![Complex::new(T::zero(), T::zero()); m];
        for k in 0..self.n {
            let x = if inverse { buf[k].conj() } else { buf[k] };
            a[k] = x * self.chirp[k];
        }
        self.inner.run(&mut a, false);
        for (v, h) in a.iter_mut().zip(&self.kernel_hat) {
            *v *= h;
        }
        self.inner.run(&mut a, true);
        let inv_m = T::one() / c::<T>(m as f64);
        for k in 0..self.n {
            let y = a[k] * self.chirp[k] * inv_m;
            buf[k] = if inverse { y.conj() } else { y };
        }
    }
}

#[derive(Debug, Clone)]
enum Plan<T> {
    Trivial,
    Radix2(Radix2<T>),
    Bluestein(Bluestein<T>),
}

/// Unnormalized 1D transform of a fixed length.
#[derive(Debug, Clone)]
pub struct Fft1d<T> {
    n: usize,
    plan: Plan<T>,
}

impl<T: Scalar> Fft1d<T> {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "FFT length must be positive");
        let plan = if n == 1 {
            Plan::Trivial
        } else if n.is_power_of_two() {
            Plan::Radix2(Radix2::new(n))
        } else {
            Plan::Bluestein(Bluestein::new(n))
        };
        Self { n, plan }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In place; `inverse` uses `exp(+2πi kn/N)`. No scaling in either direction.
    pub fn process(&self, buf: &mut [Complex<T>], inverse: bool) {
        debug_assert_eq!(buf.len(), self.n);
        match &self.plan {
            Plan::Trivial => {}
            Plan::Radix2(p) => p.run(buf, inverse),
            Plan::Bluestein(p) => p.run(buf, inverse),
        }
    }
}

/// Unitary 2D transform over an `H×W` plane stored row-major.
#[derive(Debug, Clone)]
pub struct Fft2Plan<T> {
    h: usize,
    w: usize,
    rows: Fft1d<T>,
    cols: Fft1d<T>,
    scale: T,
}

impl<T: Scalar> Fft2Plan<T> {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            rows: Fft1d::new(w),
            cols: Fft1d::new(h),
            scale: T::one() / c::<T>(((h * w) as f64).sqrt()),
        }
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn process(&self, plane: &mut [Complex<T>], inverse: bool) {
        let (h, w) = (self.h, self.w);
        debug_assert_eq!(plane.len(), h * w);
        for r in 0..h {
            self.rows.process(&mut plane[r * w..(r + 1) * w], inverse);
        }
        let mut col = vec![Complex::new(T::zero(), T::zero()); h];
        for j in 0..w {
            for i in 0..h {
                col[i] = plane[i * w + j];
            }
            self.cols.process(&mut col, inverse);
            for i in 0..h {
                plane[i * w + j] = col[i];
            }
        }
        for v in plane.iter_mut() {
            *v *= self.scale;
        }
    }

    pub fn forward(&self, plane: &mut [Complex<T>]) {
        self.process(plane, false);
    }

    pub fn inverse(&self, plane: &mut [Complex<T>]) {
        self.process(plane, true);
    }
}

/// Spectrum of a real `H×W` signal. All `H·W` frequencies are stored; for a
/// real input they satisfy `X[-k] = conj(X[k])`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum<T> {
    pub h: usize,
    pub w: usize,
    pub data: Vec<Complex<T>>,
}

impl<T: Scalar> ComplexSpectrum<T> {
    pub fn at(&self, k1: usize, k2: usize) -> Complex<T> {
        self.data[k1 * self.w + k2]
    }

    pub fn energy(&self) -> T {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }
}

fn plane_extents<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize)> {
    match x.shape() {
        &[h, w] => Ok((h, w)),
        s => Err(UgnnError::InvalidShape {
            shape: s.to_vec(),
            reason: "fft2 expects a 2D tensor".into(),
        }),
    }
}

pub fn fft2<T: Scalar>(x: &Tensor<T>) -> Result<ComplexSpectrum<T>> {
    let (h, w) = plane_extents(x)?;
    let plan = Fft2Plan::new(h, w);
    let mut data: Vec<Complex<T>> = x
        .data()
        .iter()
        .map(|&v| Complex::new(v, T::zero()))
        .collect();
    plan.forward(&mut data);
    Ok(ComplexSpectrum { h, w, data })
}

/// Inverse transform; returns the real part.
pub fn ifft2<T: Scalar>(s: &ComplexSpectrum<T>) -> Tensor<T> {
    let plan = Fft2Plan::new(s.h, s.w);
    let mut data = s.data.clone();
    plan.inverse(&mut data);
    Tensor::new(&[s.h, s.w], data.into_iter().map(|z| z.re).collect()).expect("positive extents")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    fn naive_dft2(x: &Tensor<f64>) -> Vec<Complex<f64>> {
        let (h, w) = (x.shape()[0], x.shape()[1]);
        let norm = 1.0 / ((h * w) as f64).sqrt();
        let mut out = vec![Complex::new(0.0, 0.0); h * w];
        for k1 in 0..h {
            for k2 in 0..w {
                let mut acc = Complex::new(0.0, 0.0);
                for n1 in 0..h {
                    for n2 in 0..w {
                        let ang = -2.0
                            * std::f64::consts::PI
                            * ((k1 * n1) as f64 / h as f64 + (k2 * n2) as f64 / w as f64);
                        acc += Complex::from_polar(x.get2(n1, n2), ang);
                    }
                }
                out[k1 * w + k2] = acc * norm;
            }
        }
        out
    }

    #[test]
    fn delta_has_constant_spectrum() {
        let mut x = Tensor::<f64>::zeros(&[4, 8]);
        x.set2(0, 0, 1.0);
        let s = fft2(&x).unwrap();
        let expect = 1.0 / (32f64).sqrt();
        for z in &s.data {
            assert!((z.re - expect).abs() < 1e-15 && z.im.abs() < 1e-15);
        }
    }

    #[test]
    fn matches_naive_dft() {
        for &(h, w) in &[(8, 8), (5, 6), (3, 7), (1, 4)] {
            let x = Tensor::<f64>::randn(&[h, w], 1.0, &mut seeded_rng(h as u64 * 31 + w as u64));
            let fast = fft2(&x).unwrap();
            let slow = naive_dft2(&x);
            let err = fast
                .data
                .iter()
                .zip(&slow)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            assert!(err < 1e-9, "{h}x{w}: {err}");
        }
    }

    #[test]
    fn parseval_and_round_trip() {
        for &(h, w) in &[(8, 8), (6, 10), (32, 32)] {
            let x = Tensor::<f64>::randn(&[h, w], 1.0, &mut seeded_rng(3));
            let s = fft2(&x).unwrap();
            let ex = x.norm() * x.norm();
            assert!((s.energy() - ex).abs() <= 1e-10 * ex);
            let back = ifft2(&s);
            assert!(back.max_abs_diff(&x) <= 1e-10 * x.max_abs());
        }
    }

    #[test]
    fn f32_round_trip() {
        let x = Tensor::<f32>::randn(&[12, 16], 1.0, &mut seeded_rng(5));
        let back = ifft2(&fft2(&x).unwrap());
        assert!(back.max_abs_diff(&x) <= 1e-5 * x.max_abs());
    }

    #[test]
    fn real_signal_spectrum_is_conjugate_symmetric() {
        let x = Tensor::<f64>::randn(&[6, 4], 1.0, &mut seeded_rng(9));
        let s = fft2(&x).unwrap();
        for k1 in 0..6 {
            for k2 in 0..4 {
                let a = s.at(k1, k2);
                let b = s.at((6 - k1) % 6, (4 - k2) % 4).conj();
                assert!((a - b).norm() < 1e-12);
            }
        }
    }
}
