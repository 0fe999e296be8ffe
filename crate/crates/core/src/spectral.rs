//! Frequency-domain kernels behind the Cayley convolution.
//!
//! A per-frequency field `Û[f] ∈ ℂ^{C×C}` is stored as a real tensor of shape
//! `[H·W, 2, C, C]` (real plane, then imaginary plane). Batched spectra use
//! the planar layout `[H·W, 2, C, B]` so that every per-frequency product is a
//! pair of real GEMMs.

use num_complex::Complex;

use crate::cmat::CMat;
use crate::error::{Result, UgnnError};
use crate::fft::Fft2Plan;
use crate::scalar::{c, DType, Scalar};
use crate::tensor::Tensor;

/// Gradient convention for complex quantities: `∂L/∂Re + i ∂L/∂Im`.
pub type ComplexGrad<T> = CMat<T>;

fn phase(k1: usize, k2: usize, p: usize, q: usize, h: usize, w: usize) -> (f64, f64) {
    // θ = 2π n / (H·W); quarter turns are returned exactly so self-conjugate
    // frequencies stay purely real
    let hw = h * w;
    let n = (((k1 * p) % h) * w + ((k2 * q) % w) * h) % hw;
    match 4 * n {
        0 => (1.0, 0.0),
        v if v == hw => (0.0, 1.0),
        v if v == 2 * hw => (-1.0, 0.0),
        v if v == 3 * hw => (0.0, -1.0),
        _ => {
            let theta = 2.0 * std::f64::consts::PI * n as f64 / hw as f64;
            (theta.cos(), theta.sin())
        }
    }
}

/// Zero-padded DFT of a `C×C×k×k` kernel at every frequency of an `H×W` grid
/// (unnormalized, `exp(-iθ)` convention). Taps beyond the grid wrap around, as
/// circular padding implies.
pub fn kernel_spectrum<T: Scalar>(kernel: &Tensor<T>, h: usize, w: usize) -> Result<Vec<CMat<T>>> {
    let (ch, k) = kernel_dims(kernel)?;
    let kd = kernel.data();
    let mut out = Vec::with_capacity(h * w);
    for k1 in 0..h {
        for k2 in 0..w {
            let mut m = CMat::zeros(ch);
            for p in 0..k {
                for q in 0..k {
                    let (cs, sn) = phase(k1, k2, p, q, h, w);
                    let (cs, sn) = (c::<T>(cs), c::<T>(sn));
                    for co in 0..ch {
                        for ci in 0..ch {
                            let v = kd[((co * ch + ci) * k + p) * k + q];
                            m.re[co * ch + ci] += v * cs;
                            m.im[co * ch + ci] -= v * sn;
                        }
                    }
                }
            }
            out.push(m);
        }
    }
    Ok(out)
}

pub fn kernel_dims<T: Scalar>(kernel: &Tensor<T>) -> Result<(usize, usize)> {
    match kernel.shape() {
        &[co, ci, k1, k2] if co == ci && k1 == k2 => Ok((co, k1)),
        s => Err(UgnnError::InvalidShape {
            shape: s.to_vec(),
            reason: "Cayley kernel must be C×C×k×k".into(),
        }),
    }
}

fn residual_tolerance<T: Scalar>() -> f64 {
    match T::DTYPE {
        DType::F64 => 1e-8,
        DType::F32 => 1e-3,
    }
}

/// Cayley transform of the skew-Hermitian part of each kernel spectrum:
/// `A = V̂ − V̂ᴴ`, `Û = (I + A)⁻¹(I − A) = 2(I + A)⁻¹ − I`.
///
/// Returns the field tensor and the inverses `(I + A)⁻¹` needed by the
/// backward pass.
pub fn cayley_field<T: Scalar>(
    kernel: &Tensor<T>,
    h: usize,
    w: usize,
) -> Result<(Tensor<T>, Vec<CMat<T>>)> {
    let (ch, _) = kernel_dims(kernel)?;
    let spectra = kernel_spectrum(kernel, h, w)?;
    let nf = h * w;
    let mut field = vec![T::zero(); nf * 2 * ch * ch];
    let mut inverses = Vec::with_capacity(nf);
    let two = c::<T>(2.0);
    for (f, vhat) in spectra.iter().enumerate() {
        let mut m = CMat::identity(ch);
        for i in 0..ch {
            for j in 0..ch {
                let a = vhat.get(i, j) - vhat.get(j, i).conj();
                let cur = m.get(i, j);
                m.set(i, j, cur + a);
            }
        }
        let x = m.inverse().ok_or(UgnnError::CayleyResidual {
            residual: f64::INFINITY,
        })?;
        let residual = probe_residual(&m, &x);
        if !(residual <= residual_tolerance::<T>()) {
            return Err(UgnnError::CayleyResidual { residual });
        }
        let base = f * 2 * ch * ch;
        for i in 0..ch {
            for j in 0..ch {
                let delta = if i == j { T::one() } else { T::zero() };
                field[base + i * ch + j] = two * x.re[i * ch + j] - delta;
                field[base + ch * ch + i * ch + j] = two * x.im[i * ch + j];
            }
        }
        inverses.push(x);
    }
    Ok((Tensor::new(&[nf, 2, ch, ch], field)?, inverses))
}

/// `‖M X v − v‖_∞ / ‖v‖_∞` for a fixed probe vector.
fn probe_residual<T: Scalar>(m: &CMat<T>, x: &CMat<T>) -> f64 {
    let n = m.n;
    let v: Vec<Complex<T>> = (0..n)
        .map(|i| {
            let t = (i as f64 + 1.0) / n as f64;
            Complex::new(c(1.0 - 0.5 * t), c(if i % 2 == 0 { t } else { -t }))
        })
        .collect();
    let mxv = m.matvec(&x.matvec(&v));
    let mut err = 0.0f64;
    let mut scale = 0.0f64;
    for (a, b) in mxv.iter().zip(&v) {
        err = err.max((a - b).norm().to_f64_lossy());
        scale = scale.max(b.norm().to_f64_lossy());
    }
    if err.is_finite() {
        err / scale
    } else {
        f64::INFINITY
    }
}

/// Backward of [`cayley_field`]: maps the field gradient (same layout as the
/// field) to the kernel gradient.
pub fn cayley_field_backward<T: Scalar>(
    kernel_shape: &[usize],
    h: usize,
    w: usize,
    inverses: &[CMat<T>],
    gfield: &Tensor<T>,
) -> Tensor<T> {
    let ch = kernel_shape[0];
    let k = kernel_shape[2];
    let gd = gfield.data();
    let mut gk = vec![T::zero(); ch * ch * k * k];
    let two = c::<T>(2.0);
    for (f, x) in inverses.iter().enumerate() {
        let base = f * 2 * ch * ch;
        let gx = CMat {
            n: ch,
            re: gd[base..base + ch * ch].iter().map(|&v| two * v).collect(),
            im: gd[base + ch * ch..base + 2 * ch * ch]
                .iter()
                .map(|&v| two * v)
                .collect(),
        };
        // X = M⁻¹  ⇒  gM = −Xᴴ gX Xᴴ ; A = M − I ⇒ gA = gM
        let xh = x.adjoint();
        let ga = xh.matmul(&gx).matmul(&xh);
        let (k1, k2) = (f / w, f % w);
        for p in 0..k {
            for q in 0..k {
                let (cs, sn) = phase(k1, k2, p, q, h, w);
                let (cs, sn) = (c::<T>(cs), c::<T>(sn));
                for i in 0..ch {
                    for j in 0..ch {
                        // gV̂ = −(gA − gAᴴ) ; Re(conj(gV̂)·exp(−iθ))
                        let gr = -(ga.re[i * ch + j] - ga.re[j * ch + i]);
                        let gi = -(ga.im[i * ch + j] + ga.im[j * ch + i]);
                        gk[((i * ch + j) * k + p) * k + q] += gr * cs - gi * sn;
                    }
                }
            }
        }
    }
    Tensor::new(kernel_shape, gk).expect("kernel shape")
}

/// Planar batched spectra `[F, 2, C, B]` of a `[B, C, H, W]` tensor.
pub fn batch_fft<T: Scalar>(x: &Tensor<T>, plan: &Fft2Plan<T>) -> Vec<T> {
    let s = x.shape();
    let (b, ch, h, w) = (s[0], s[1], s[2], s[3]);
    let nf = h * w;
    let mut out = vec![T::zero(); nf * 2 * ch * b];
    let mut plane = vec![Complex::new(T::zero(), T::zero()); nf];
    let xd = x.data();
    for bi in 0..b {
        for ci in 0..ch {
            let src = &xd[(bi * ch + ci) * nf..(bi * ch + ci + 1) * nf];
            for (z, &v) in plane.iter_mut().zip(src) {
                *z = Complex::new(v, T::zero());
            }
            plan.forward(&mut plane);
            for (f, z) in plane.iter().enumerate() {
                out[((f * 2) * ch + ci) * b + bi] = z.re;
                out[((f * 2 + 1) * ch + ci) * b + bi] = z.im;
            }
        }
    }
    out
}

/// Inverse of [`batch_fft`], keeping real parts.
pub fn batch_ifft<T: Scalar>(spec: &[T], shape: &[usize], plan: &Fft2Plan<T>) -> Tensor<T> {
    let (b, ch, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let nf = h * w;
    let mut out = vec![T::zero(); b * ch * nf];
    let mut plane = vec![Complex::new(T::zero(), T::zero()); nf];
    for bi in 0..b {
        for ci in 0..ch {
            for (f, z) in plane.iter_mut().enumerate() {
                *z = Complex::new(
                    spec[((f * 2) * ch + ci) * b + bi],
                    spec[((f * 2 + 1) * ch + ci) * b + bi],
                );
            }
            plan.inverse(&mut plane);
            for (dst, z) in out[(bi * ch + ci) * nf..(bi * ch + ci + 1) * nf]
                .iter_mut()
                .zip(&plane)
            {
                *dst = z.re;
            }
        }
    }
    Tensor::new(shape, out).expect("shape")
}

/// Per-frequency `Y[f] = op(Û[f]) · X[f]` on planar spectra. With `adjoint`
/// the conjugate transpose `Û[f]ᴴ` is applied instead.
fn apply_field<T: Scalar>(
    field: &Tensor<T>,
    spec: &[T],
    ch: usize,
    b: usize,
    adjoint: bool,
) -> Vec<T> {
    let fd = field.data();
    let nf = field.shape()[0];
    let mut out = vec![T::zero(); spec.len()];
    let cs = ch as isize;
    let bs = b as isize;
    let (rs, csu) = if adjoint { (1, cs) } else { (cs, 1) };
    let sign = if adjoint { -T::one() } else { T::one() };
    for f in 0..nf {
        let ur = &fd[f * 2 * ch * ch..(f * 2 + 1) * ch * ch];
        let ui = &fd[(f * 2 + 1) * ch * ch..(f * 2 + 2) * ch * ch];
        let xr = &spec[(f * 2) * ch * b..(f * 2 + 1) * ch * b];
        let xi = &spec[(f * 2 + 1) * ch * b..(f * 2 + 2) * ch * b];
        let (yr, yi) = out[(f * 2) * ch * b..(f * 2 + 2) * ch * b].split_at_mut(ch * b);
        // (Ur + i·s·Ui)(Xr + i Xi)
        T::gemm(
            ch,
            ch,
            b,
            T::one(),
            ur,
            rs,
            csu,
            xr,
            bs,
            1,
            T::zero(),
            yr,
            bs,
            1,
        );
        T::gemm(
            ch,
            ch,
            b,
            -sign,
            ui,
            rs,
            csu,
            xi,
            bs,
            1,
            T::one(),
            yr,
            bs,
            1,
        );
        T::gemm(
            ch,
            ch,
            b,
            T::one(),
            ur,
            rs,
            csu,
            xi,
            bs,
            1,
            T::zero(),
            yi,
            bs,
            1,
        );
        T::gemm(ch, ch, b, sign, ui, rs, csu, xr, bs, 1, T::one(), yi, bs, 1);
    }
    out
}

/// `y = ifft2(Û · fft2(x))` channel-mixing per frequency. Returns `y` and the
/// input spectra (kept for the field gradient).
pub fn spectral_conv<T: Scalar>(x: &Tensor<T>, field: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    let (b, ch, h, w) = conv_dims(x, field)?;
    let plan = Fft2Plan::new(h, w);
    let xhat = batch_fft(x, &plan);
    let yhat = apply_field(field, &xhat, ch, b, false);
    Ok((batch_ifft(&yhat, &[b, ch, h, w], &plan), xhat))
}

fn conv_dims<T: Scalar>(x: &Tensor<T>, field: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let (b, ch, h, w) = match x.shape() {
        &[b, ch, h, w] => (b, ch, h, w),
        s => {
            return Err(UgnnError::InvalidShape {
                shape: s.to_vec(),
                reason: "spectral convolution expects [B, C, H, W]".into(),
            })
        }
    };
    if field.shape() != [h * w, 2, ch, ch] {
        return Err(UgnnError::ShapeMismatch {
            op: "spectral_conv",
            lhs: x.shape().to_vec(),
            rhs: field.shape().to_vec(),
        });
    }
    Ok((b, ch, h, w))
}

/// Backward of [`spectral_conv`]: returns `(∂L/∂x, ∂L/∂field)`.
pub fn spectral_conv_backward<T: Scalar>(
    field: &Tensor<T>,
    xhat: &[T],
    gy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let s = gy.shape();
    let (b, ch, h, w) = (s[0], s[1], s[2], s[3]);
    let plan = Fft2Plan::new(h, w);
    let ghat = batch_fft(gy, &plan);
    let gxhat = apply_field(field, &ghat, ch, b, true);
    let gx = batch_ifft(&gxhat, s, &plan);

    // gÛ[f] = ĝ[f] · x̂[f]ᴴ summed over the batch
    let nf = h * w;
    let mut gf = vec![T::zero(); nf * 2 * ch * ch];
    let bs = b as isize;
    let cs = ch as isize;
    for f in 0..nf {
        let gr = &ghat[(f * 2) * ch * b..(f * 2 + 1) * ch * b];
        let gi = &ghat[(f * 2 + 1) * ch * b..(f * 2 + 2) * ch * b];
        let xr = &xhat[(f * 2) * ch * b..(f * 2 + 1) * ch * b];
        let xi = &xhat[(f * 2 + 1) * ch * b..(f * 2 + 2) * ch * b];
        let (ore, oim) = gf[f * 2 * ch * ch..(f * 2 + 2) * ch * ch].split_at_mut(ch * ch);
        // re: gr xrᵀ + gi xiᵀ ; im: gi xrᵀ − gr xiᵀ
        T::gemm(
            ch,
            b,
            ch,
            T::one(),
            gr,
            bs,
            1,
            xr,
            1,
            bs,
            T::zero(),
            ore,
            cs,
            1,
        );
        T::gemm(
            ch,
            b,
            ch,
            T::one(),
            gi,
            bs,
            1,
            xi,
            1,
            bs,
            T::one(),
            ore,
            cs,
            1,
        );
        T::gemm(
            ch,
            b,
            ch,
            T::one(),
            gi,
            bs,
            1,
            xr,
            1,
            bs,
            T::zero(),
            oim,
            cs,
            1,
        );
        T::gemm(
            ch,
            b,
            ch,
            -T::one(),
            gr,
            bs,
            1,
            xi,
            1,
            bs,
            T::one(),
            oim,
            cs,
            1,
        );
    }
    (gx, Tensor::new(field.shape(), gf).expect("field shape"))
}

/// Per-frequency matrices of a field tensor.
pub fn field_matrices<T: Scalar>(field: &Tensor<T>) -> Vec<CMat<T>> {
    let s = field.shape();
    let (nf, ch) = (s[0], s[2]);
    let d = field.data();
    (0..nf)
        .map(|f| CMat {
            n: ch,
            re: d[f * 2 * ch * ch..(f * 2 + 1) * ch * ch].to_vec(),
            im: d[(f * 2 + 1) * ch * ch..(f * 2 + 2) * ch * ch].to_vec(),
        })
        .collect()
}
