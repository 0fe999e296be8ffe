//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its value and enough saved state to
//! apply its transpose Jacobian. [`Tape::backward`] walks the nodes in reverse
//! and can be replayed any number of times with different seeds; each replay
//! is independent and deterministic.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::cmat::CMat;
use crate::error::{Result, UgnnError};
use crate::scalar::{c, Scalar};
use crate::spectral;
use crate::tensor::Tensor;

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
    tape: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.id
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    ScaleBy(usize, usize),
    Scale(usize, T),
    Offset(usize),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Sum(usize),
    SumRows(usize),
    ScaleRows(usize, usize),
    AddRowVec(usize, usize),
    AddChannelVec(usize, usize),
    Sqrt(usize),
    Square(usize),
    Recip(usize),
    Abs(usize),
    Relu(usize),
    Gather(usize, Vec<usize>),
    Reshape(usize),
    CayleyField {
        kernel: usize,
        h: usize,
        w: usize,
        inverses: Vec<CMat<T>>,
    },
    SpectralConv {
        x: usize,
        field: usize,
        xhat: Vec<T>,
    },
    MultiMargin {
        logits: usize,
        labels: Vec<usize>,
        margin: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug)]
pub struct Tape<T> {
    id: u32,
    nodes: Vec<Node<T>>,
}

/// Result of one reverse sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u32,
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; zeros when `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Result<Tensor<T>> {
        if v.tape != self.tape || v.id >= self.shapes.len() {
            return Err(UgnnError::DetachedVariable);
        }
        Ok(self.grads[v.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id])))
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(UgnnError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(UgnnError::DetachedVariable);
        }
        Ok(v.id)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.id].value
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.value(v).item()
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        same_shape("add", va, vb)?;
        let v = va.add(vb)?;
        Ok(self.push(v, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        same_shape("sub", va, vb)?;
        let v = va.sub(vb)?;
        Ok(self.push(v, Op::Sub(ia, ib)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        same_shape("mul", va, vb)?;
        let v = va.mul(vb)?;
        Ok(self.push(v, Op::Mul(ia, ib)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        same_shape("div", va, vb)?;
        let v = va.zip_map(vb, "div", |x, y| x / y)?;
        Ok(self.push(v, Op::Div(ia, ib)))
    }

    /// Tensor times a one-element variable.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ia, is) = (self.check(a)?, self.check(s)?);
        let sv = &self.nodes[is].value;
        if sv.len() != 1 {
            return Err(UgnnError::ShapeMismatch {
                op: "scale_by",
                lhs: self.nodes[ia].value.shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        let v = self.nodes[ia].value.scale(sv.item());
        Ok(self.push(v, Op::ScaleBy(ia, is)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.scale(s);
        Ok(self.push(v, Op::Scale(ia, s)))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    pub fn offset(&mut self, a: Var, s: T) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(|x| x + s);
        Ok(self.push(v, Op::Offset(ia)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let v = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        Ok(self.push(v, Op::MatMul(ia, ib)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let v = self.nodes[ia].value.matmul_t(&self.nodes[ib].value)?;
        Ok(self.push(v, Op::MatMulT(ia, ib)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.transpose()?;
        Ok(self.push(v, Op::Transpose(ia)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = Tensor::scalar(self.nodes[ia].value.sum());
        Ok(self.push(v, Op::Sum(ia)))
    }

    /// Inner product of two same-shape tensors as a one-element variable.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// `[r, c] -> [r]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let r = t.rows();
        let v = Tensor::from_vec((0..r).map(|i| t.row(i).iter().copied().sum()).collect());
        Ok(self.push(v, Op::SumRows(ia)))
    }

    /// Multiply row `i` of `a: [r, ...]` by `s[i]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ia, is) = (self.check(a)?, self.check(s)?);
        let (t, sv) = (&self.nodes[ia].value, &self.nodes[is].value);
        if sv.len() != t.rows() {
            return Err(UgnnError::ShapeMismatch {
                op: "scale_rows",
                lhs: t.shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        let cols = t.cols();
        let mut out = t.clone();
        for (i, chunk) in out.data_mut().chunks_mut(cols).enumerate() {
            let f = sv.data()[i];
            chunk.iter_mut().for_each(|x| *x *= f);
        }
        Ok(self.push(out, Op::ScaleRows(ia, is)))
    }

    /// `a: [B, n] + bias: [n]` on every row.
    pub fn add_row_vec(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(bias)?);
        let (t, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if t.ndim() != 2 || bv.len() != t.cols() {
            return Err(UgnnError::ShapeMismatch {
                op: "add_row_vec",
                lhs: t.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let cols = t.cols();
        let mut out = t.clone();
        for chunk in out.data_mut().chunks_mut(cols) {
            for (x, &b) in chunk.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        Ok(self.push(out, Op::AddRowVec(ia, ib)))
    }

    /// `a: [B, C, H, W] + bias: [C]` broadcast over batch and space.
    pub fn add_channel_vec(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(bias)?);
        let (t, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if t.ndim() != 4 || bv.len() != t.shape()[1] {
            return Err(UgnnError::ShapeMismatch {
                op: "add_channel_vec",
                lhs: t.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let ch = t.shape()[1];
        let plane = t.shape()[2] * t.shape()[3];
        let mut out = t.clone();
        for (k, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let b = bv.data()[k % ch];
            chunk.iter_mut().for_each(|x| *x += b);
        }
        Ok(self.push(out, Op::AddChannelVec(ia, ib)))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(|x| x.sqrt());
        Ok(self.push(v, Op::Sqrt(ia)))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(|x| x * x);
        Ok(self.push(v, Op::Square(ia)))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(|x| T::one() / x);
        Ok(self.push(v, Op::Recip(ia)))
    }

    /// `|x|`; subgradient `+1` at zero.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(|x| x.abs());
        Ok(self.push(v, Op::Abs(ia)))
    }

    /// `max(0, x)`; subgradient `0` at zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.map(|x| x.max(T::zero()));
        Ok(self.push(v, Op::Relu(ia)))
    }

    /// `out[i] = a[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let src = &self.nodes[ia].value;
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(UgnnError::InvalidShape {
                shape: src.shape().to_vec(),
                reason: format!("gather index {bad} out of range"),
            });
        }
        let data = index.iter().map(|&i| src.data()[i]).collect();
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Gather(ia, index)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(ia)))
    }

    /// Element `i` of `a` as a one-element variable.
    pub fn element(&mut self, a: Var, i: usize) -> Result<Var> {
        self.gather(a, vec![i], &[1])
    }

    /// Per-frequency unitary field of a Cayley convolution kernel on an `H×W` grid.
    pub fn cayley_field(&mut self, kernel: Var, h: usize, w: usize) -> Result<Var> {
        let ik = self.check(kernel)?;
        let (field, inverses) = spectral::cayley_field(&self.nodes[ik].value, h, w)?;
        Ok(self.push(
            field,
            Op::CayleyField {
                kernel: ik,
                h,
                w,
                inverses,
            },
        ))
    }

    /// Circular channel-mixing convolution `ifft2(Û · fft2(x))` on `[B, C, H, W]`.
    pub fn spectral_conv(&mut self, x: Var, field: Var) -> Result<Var> {
        let (ix, ifl) = (self.check(x)?, self.check(field)?);
        let (y, xhat) = spectral::spectral_conv(&self.nodes[ix].value, &self.nodes[ifl].value)?;
        Ok(self.push(
            y,
            Op::SpectralConv {
                x: ix,
                field: ifl,
                xhat,
            },
        ))
    }

    /// Batch mean of `(1/C) Σ_{j≠y} max(0, m − (f_y − f_j))`.
    pub fn multi_margin(&mut self, logits: Var, labels: &[usize], margin: T) -> Result<Var> {
        let il = self.check(logits)?;
        let t = &self.nodes[il].value;
        if t.ndim() != 2 || t.rows() != labels.len() {
            return Err(UgnnError::InvalidShape {
                shape: t.shape().to_vec(),
                reason: format!("expected [{}, C] logits", labels.len()),
            });
        }
        let classes = t.cols();
        let mut total = T::zero();
        for (b, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(UgnnError::Label { label: y, classes });
            }
            total += crate::training::multi_margin_loss(t.row(b), y, margin)?;
        }
        let v = Tensor::scalar(total / c::<T>(labels.len() as f64));
        Ok(self.push(
            v,
            Op::MultiMargin {
                logits: il,
                labels: labels.to_vec(),
                margin,
            },
        ))
    }

    /// Gradient of a one-element `output` with respect to `wrt`.
    pub fn gradient(&self, output: Var, wrt: Var) -> Result<Tensor<T>> {
        let io = self.check(output)?;
        self.check(wrt)?;
        if self.nodes[io].value.len() != 1 {
            return Err(UgnnError::InvalidShape {
                shape: self.nodes[io].value.shape().to_vec(),
                reason: "gradient() needs a scalar output; use backward() with a seed".into(),
            });
        }
        self.backward(output, Tensor::scalar(T::one()))?.wrt(wrt)
    }

    /// Vector-Jacobian product: propagate `seed` (shaped like `output`) back
    /// through every node that precedes it.
    pub fn backward(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        let io = self.check(output)?;
        same_shape("backward seed", &self.nodes[io].value, &seed)?;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; io + 1];
        grads[io] = Some(seed);
        for id in (0..=io).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: self.nodes[..=io]
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn backprop_node(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |i: usize| &self.nodes[i].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.mul(val(*b)).expect("shape"));
                accumulate(grads, *b, g.mul(val(*a)).expect("shape"));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                accumulate(
                    grads,
                    *a,
                    g.zip_map(vb, "div", |g, y| g / y).expect("shape"),
                );
                let gb: Vec<T> = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .zip(vb.data())
                    .map(|((&g, &x), &y)| -g * x / (y * y))
                    .collect();
                accumulate(grads, *b, Tensor::new(vb.shape(), gb).expect("shape"));
            }
            Op::ScaleBy(a, s) => {
                let sv = val(*s).item();
                accumulate(grads, *a, g.scale(sv));
                let gs = g.dot(val(*a)).expect("shape");
                accumulate(
                    grads,
                    *s,
                    Tensor::new(val(*s).shape(), vec![gs]).expect("shape"),
                );
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::Offset(a) => accumulate(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.matmul_t(val(*b)).expect("shape"));
                accumulate(grads, *b, val(*a).t_matmul(g).expect("shape"));
            }
            Op::MatMulT(a, b) => {
                accumulate(grads, *a, g.matmul(val(*b)).expect("shape"));
                accumulate(grads, *b, g.t_matmul(val(*a)).expect("shape"));
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose().expect("matrix")),
            Op::Sum(a) => accumulate(grads, *a, Tensor::full(val(*a).shape(), g.item())),
            Op::SumRows(a) => {
                let src = val(*a);
                let cols = src.cols();
                let data = (0..src.len()).map(|k| g.data()[k / cols]).collect();
                accumulate(grads, *a, Tensor::new(src.shape(), data).expect("shape"));
            }
            Op::ScaleRows(a, s) => {
                let (va, vs) = (val(*a), val(*s));
                let cols = va.cols();
                let mut ga = g.clone();
                let mut gs = vec![T::zero(); vs.len()];
                for (i, chunk) in ga.data_mut().chunks_mut(cols).enumerate() {
                    let f = vs.data()[i];
                    let arow = va.row(i);
                    let mut acc = T::zero();
                    for (x, &av) in chunk.iter_mut().zip(arow) {
                        acc += *x * av;
                        *x *= f;
                    }
                    gs[i] = acc;
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *s, Tensor::new(vs.shape(), gs).expect("shape"));
            }
            Op::AddRowVec(a, b) => {
                accumulate(grads, *a, g.clone());
                let n = val(*b).len();
                let mut gb = vec![T::zero(); n];
                for chunk in g.data().chunks(n) {
                    for (acc, &x) in gb.iter_mut().zip(chunk) {
                        *acc += x;
                    }
                }
                accumulate(grads, *b, Tensor::new(val(*b).shape(), gb).expect("shape"));
            }
            Op::AddChannelVec(a, b) => {
                accumulate(grads, *a, g.clone());
                let s = g.shape();
                let (ch, plane) = (s[1], s[2] * s[3]);
                let mut gb = vec![T::zero(); ch];
                for (k, chunk) in g.data().chunks(plane).enumerate() {
                    gb[k % ch] += chunk.iter().copied().sum::<T>();
                }
                accumulate(grads, *b, Tensor::new(val(*b).shape(), gb).expect("shape"));
            }
            Op::Sqrt(a) => {
                let half = c::<T>(0.5);
                let ga = g
                    .zip_map(&self.nodes[id].value, "sqrt", |g, y| half * g / y)
                    .expect("shape");
                accumulate(grads, *a, ga);
            }
            Op::Square(a) => {
                let two = c::<T>(2.0);
                accumulate(
                    grads,
                    *a,
                    g.zip_map(val(*a), "square", |g, x| two * g * x)
                        .expect("shape"),
                );
            }
            Op::Recip(a) => {
                accumulate(
                    grads,
                    *a,
                    g.zip_map(val(*a), "recip", |g, x| -g / (x * x))
                        .expect("shape"),
                );
            }
            Op::Abs(a) => {
                let ga = g
                    .zip_map(val(*a), "abs", |g, x| if x >= T::zero() { g } else { -g })
                    .expect("shape");
                accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ga = g
                    .zip_map(
                        val(*a),
                        "relu",
                        |g, x| if x > T::zero() { g } else { T::zero() },
                    )
                    .expect("shape");
                accumulate(grads, *a, ga);
            }
            Op::Gather(a, index) => {
                let src = val(*a);
                let mut ga = vec![T::zero(); src.len()];
                for (&i, &x) in index.iter().zip(g.data()) {
                    ga[i] += x;
                }
                accumulate(grads, *a, Tensor::new(src.shape(), ga).expect("shape"));
            }
            Op::Reshape(a) => {
                accumulate(
                    grads,
                    *a,
                    g.clone().reshape(val(*a).shape()).expect("shape"),
                );
            }
            Op::CayleyField {
                kernel,
                h,
                w,
                inverses,
            } => {
                let gk = spectral::cayley_field_backward(val(*kernel).shape(), *h, *w, inverses, g);
                accumulate(grads, *kernel, gk);
            }
            Op::SpectralConv { x, field, xhat } => {
                let (gx, gf) = spectral::spectral_conv_backward(val(*field), xhat, g);
                accumulate(grads, *x, gx);
                accumulate(grads, *field, gf);
            }
            Op::MultiMargin {
                logits,
                labels,
                margin,
            } => {
                let lv = val(*logits);
                let classes = lv.cols();
                let w = g.item() / c::<T>((labels.len() * classes) as f64);
                let mut gl = vec![T::zero(); lv.len()];
                for (b, &y) in labels.iter().enumerate() {
                    let row = lv.row(b);
                    for j in 0..classes {
                        // strictly positive hinge only; the kink takes the inactive side
                        if j != y && *margin - (row[y] - row[j]) > T::zero() {
                            gl[b * classes + y] -= w;
                            gl[b * classes + j] += w;
                        }
                    }
                }
                accumulate(grads, *logits, Tensor::new(lv.shape(), gl).expect("shape"));
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    match &mut grads[id] {
        Some(acc) => acc.axpy(T::one(), &g).expect("gradient shape"),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    /// Central finite differences of a scalar function of one tensor.
    pub(crate) fn fd_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
        let h = 1e-5;
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.max_abs_diff(b) / b.max_abs().max(1e-3)
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let k = tape.scalar(3.0);
        let g = tape.gradient(k, x).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn linear_form_gradient_is_weight() {
        let mut tape = Tape::new();
        let w = Tensor::from_vec(vec![0.5, -2.0, 3.0]);
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 1.0, 1.0]));
        let wv = tape.leaf(w.clone());
        let y = tape.dot(wv, x).unwrap();
        assert_eq!(tape.gradient(y, x).unwrap(), w);
    }

    #[test]
    fn foreign_variable_rejected() {
        let mut t1 = Tape::<f64>::new();
        let mut t2 = Tape::<f64>::new();
        let a = t1.scalar(1.0);
        let b = t2.scalar(1.0);
        assert!(matches!(
            t1.gradient(a, b),
            Err(UgnnError::DetachedVariable)
        ));
    }

    #[test]
    fn replayed_backward_is_bit_identical() {
        let mut tape = Tape::new();
        let mut rng = seeded_rng(4);
        let a = tape.leaf(Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng));
        let b = tape.leaf(Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng));
        let p = tape.matmul(a, b).unwrap();
        let q = tape.square(p).unwrap();
        let s = tape.sum(q).unwrap();
        let g1 = tape.gradient(s, a).unwrap();
        let g2 = tape.gradient(s, a).unwrap();
        assert_eq!(g1.data(), g2.data());
    }

    /// A composite exercising most primitives; compared against finite
    /// differences of an independent plain-f64 evaluation.
    #[test]
    fn composite_matches_finite_differences() {
        let mut rng = seeded_rng(11);
        let x0 = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[2, 4], 1.0, &mut rng);
        let bias = Tensor::<f64>::randn(&[2], 1.0, &mut rng);

        let eval = |x: &Tensor<f64>| -> f64 {
            // y = x wᵀ + b ; z = |y| * sqrt(1 + y²) / (2 + rowsum(y²))
            let mut total = 0.0;
            for r in 0..3 {
                let y: Vec<f64> = (0..2)
                    .map(|o| {
                        (0..4).map(|k| x.get2(r, k) * w.get2(o, k)).sum::<f64>() + bias.data()[o]
                    })
                    .collect();
                let rs: f64 = y.iter().map(|v| v * v).sum();
                for v in &y {
                    total += v.abs() * (1.0 + v * v).sqrt() / (2.0 + rs);
                }
            }
            total
        };

        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let wv = tape.leaf(w.clone());
        let bv = tape.leaf(bias.clone());
        let y = tape.matmul_t(x, wv).unwrap();
        let y = tape.add_row_vec(y, bv).unwrap();
        let y2 = tape.square(y).unwrap();
        let one = tape.leaf(Tensor::full(&[3, 2], 1.0));
        let s = tape.add(one, y2).unwrap();
        let s = tape.sqrt(s).unwrap();
        let a = tape.abs(y).unwrap();
        let num = tape.mul(a, s).unwrap();
        let rs = tape.sum_rows(y2).unwrap();
        let den = tape.offset(rs, 2.0).unwrap();
        let inv = tape.recip(den).unwrap();
        let z = tape.scale_rows(num, inv).unwrap();
        let out = tape.sum(z).unwrap();
        assert!((tape.scalar_value(out) - eval(&x0)).abs() < 1e-12);

        let g = tape.gradient(out, x).unwrap();
        let fd = fd_grad(&x0, eval);
        assert!(rel_err(&g, &fd) <= 1e-4, "{}", rel_err(&g, &fd));
    }

    #[test]
    fn div_scale_by_transpose_gather_match_fd() {
        let mut rng = seeded_rng(12);
        let x0 = Tensor::<f64>::rand_uniform(&[2, 3], 0.5, 2.0, &mut rng);
        let perm = vec![5, 0, 3, 1, 4, 2];
        let eval = |x: &Tensor<f64>| -> f64 {
            let d = x.data();
            let s: f64 = d.iter().sum();
            // xᵀ gathered, divided elementwise by x, times sum
            let t: Vec<f64> = (0..3)
                .flat_map(|j| (0..2).map(move |i| d[i * 3 + j]))
                .collect();
            let p: Vec<f64> = perm.iter().map(|&i| t[i]).collect();
            p.iter().zip(d).map(|(a, b)| a / b).sum::<f64>() * s
        };
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let t = tape.transpose(x).unwrap();
        let p = tape.gather(t, perm.clone(), &[2, 3]).unwrap();
        let q = tape.div(p, x).unwrap();
        let s = tape.sum(x).unwrap();
        let q = tape.scale_by(q, s).unwrap();
        let out = tape.sum(q).unwrap();
        assert!((tape.scalar_value(out) - eval(&x0)).abs() < 1e-12);
        let g = tape.gradient(out, x).unwrap();
        assert!(rel_err(&g, &fd_grad(&x0, eval)) <= 1e-4);
    }

    #[test]
    fn channel_bias_gradient() {
        let mut tape = Tape::new();
        let mut rng = seeded_rng(2);
        let x = tape.leaf(Tensor::<f64>::randn(&[2, 3, 2, 2], 1.0, &mut rng));
        let b = tape.leaf(Tensor::from_vec(vec![0.1, 0.2, 0.3]));
        let y = tape.add_channel_vec(x, b).unwrap();
        let out = tape.sum(y).unwrap();
        // each channel bias touches 2 batch items × 4 pixels
        assert_eq!(tape.gradient(out, b).unwrap().data(), &[8.0, 8.0, 8.0]);
    }
}
