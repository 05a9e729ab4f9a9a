//! Minimal reverse-mode differentiation over dense real and complex tensors.
//!
//! A [`Graph`] is an append-only arena: every operation pushes a node whose
//! parents already exist, so node order is a topological order and
//! [`Graph::backward`] simply walks it in reverse. Complex tensors are
//! interleaved `(re, im)` and their gradients are the pair
//! `(dL/d re, dL/d im)`, i.e. real and imaginary parts are treated as
//! independent real inputs.
//!
//! The op set is what the encoder and the contrastive loss need: `linear`,
//! causal `conv1d`, `rfft` / `irfft`, `complex_linear`, plus reductions,
//! `concat`, `l2_normalize`, `matmul`, `logsumexp` and elementwise
//! arithmetic. Broadcasting only exists for the bias of `linear`.

use rustfft::num_complex::Complex64;

use crate::spectral;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Guard used by [`Graph::l2_normalize`] and [`Graph::modulus`].
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Value(usize);

impl Value {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Linear { x: Value, w: Value, b: Option<Value> },
    MatMul { a: Value, b: Value },
    Conv1dCausal { x: Value, kernel: Value },
    Rfft { x: Value },
    Irfft { z: Value },
    ComplexLinear { z: Value, w: Value },
    Modulus { z: Value },
    TakeTimestep { x: Value, t: usize },
    MeanOver { x: Value, axis: usize },
    SumOver { x: Value, axis: usize },
    Concat { xs: Vec<Value>, axis: usize },
    L2Normalize { x: Value, axis: usize },
    LogSumExp { x: Value, axis: usize },
    Add { a: Value, b: Value },
    Sub { a: Value, b: Value },
    Mul { a: Value, b: Value },
    Scale { x: Value, c: f64 },
    SumAll { x: Value },
    Reshape { x: Value },
    AsReal { z: Value },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation graph for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visited: usize,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, in the layout of `v`'s data.
    /// `None` if `v` does not influence the loss or does not require grad.
    pub fn get(&self, v: Value) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Value) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Number of nodes whose adjoint was propagated.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// `C = alpha * A B + beta * C` on strided views, via `matrixmultiply`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    (m, k, n): (usize, usize, usize),
    alpha: f64,
    a: &[f64],
    (a_off, rsa, csa): (usize, usize, usize),
    b: &[f64],
    (b_off, rsb, csb): (usize, usize, usize),
    beta: f64,
    c: &mut [f64],
    (c_off, rsc, csc): (usize, usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |off: usize, r: usize, rs: usize, cc: usize, cs: usize| {
        off + r.saturating_sub(1) * rs + cc.saturating_sub(1) * cs
    };
    assert!(k == 0 || last(a_off, m, rsa, k, csa) < a.len());
    assert!(k == 0 || last(b_off, k, rsb, n, csb) < b.len());
    assert!(last(c_off, m, rsc, n, csc) < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(a_off),
            rsa as isize,
            csa as isize,
            b.as_ptr().add(b_off),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            rsc as isize,
            csc as isize,
        );
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Value]) -> Value {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Value(self.nodes.len() - 1)
    }

    /// Differentiable leaf (a parameter or an input we want gradients for).
    pub fn param(&mut self, t: Tensor) -> Value {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Value(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Value {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Value(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn real(&self, v: Value, what: &str) -> Result<&Tensor> {
        let t = &self.nodes[v.0].value;
        if t.complex {
            return Err(Error::Shape(format!("{what} expects a real tensor")));
        }
        Ok(t)
    }

    fn cplx(&self, v: Value, what: &str) -> Result<&Tensor> {
        let t = &self.nodes[v.0].value;
        if !t.complex {
            return Err(Error::Shape(format!("{what} expects a complex tensor")));
        }
        Ok(t)
    }

    /// Per-position affine map over the last axis: `x W + b`.
    pub fn linear(&mut self, x: Value, w: Value, b: Option<Value>) -> Result<Value> {
        let xt = self.real(x, "linear")?;
        let wt = self.real(w, "linear")?;
        if wt.rank() != 2 || xt.rank() == 0 || *xt.shape.last().unwrap() != wt.shape[0] {
            return Err(Error::Shape(format!(
                "linear: x {:?} incompatible with W {:?}",
                xt.shape, wt.shape
            )));
        }
        let (din, dout) = (wt.shape[0], wt.shape[1]);
        let m = xt.numel() / din.max(1);
        let mut shape = xt.shape.clone();
        *shape.last_mut().unwrap() = dout;
        let mut out = vec![0.0; m * dout];
        if let Some(b) = b {
            let bt = self.real(b, "linear")?;
            if bt.shape != [dout] {
                return Err(Error::Shape(format!(
                    "linear: bias {:?} must be [{dout}]",
                    bt.shape
                )));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(&bt.data);
            }
        }
        gemm(
            (m, din, dout),
            1.0,
            &xt.data,
            (0, din, 1),
            &wt.data,
            (0, dout, 1),
            1.0,
            &mut out,
            (0, dout, 1),
        );
        let parents: Vec<Value> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b }, &parents))
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let at = self.real(a, "matmul")?;
        let bt = self.real(b, "matmul")?;
        if at.rank() != 2 || bt.rank() != 2 || at.shape[1] != bt.shape[0] {
            return Err(Error::Shape(format!(
                "matmul: {:?} x {:?}",
                at.shape, bt.shape
            )));
        }
        let (m, k, n) = (at.shape[0], at.shape[1], bt.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            (m, k, n),
            1.0,
            &at.data,
            (0, k, 1),
            &bt.data,
            (0, n, 1),
            0.0,
            &mut out,
            (0, n, 1),
        );
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b }, &[a, b]))
    }

    /// Causal convolution over the time axis of `x: [B, L, D]` with
    /// `kernel: [k, D, D_out]`, zero left-padding of `k - 1`:
    /// `y[t] = sum_j x[t - (k-1) + j] K[j]`.
    pub fn conv1d_causal(&mut self, x: Value, kernel: Value) -> Result<Value> {
        let len = self
            .shape(x)
            .get(1)
            .copied()
            .ok_or_else(|| Error::Shape("conv1d_causal: x must be [B, L, D]".into()))?;
        self.conv1d_causal_tail(x, kernel, len)
    }

    /// [`Graph::conv1d_causal`] restricted to the last `n_out` time steps.
    pub fn conv1d_causal_tail(&mut self, x: Value, kernel: Value, n_out: usize) -> Result<Value> {
        let xt = self.real(x, "conv1d_causal")?;
        let kt = self.real(kernel, "conv1d_causal")?;
        if xt.rank() != 3 || kt.rank() != 3 || kt.shape[1] != xt.shape[2] || kt.shape[0] == 0 {
            return Err(Error::Shape(format!(
                "conv1d_causal: x {:?} incompatible with kernel {:?}",
                xt.shape, kt.shape
            )));
        }
        let (bsz, len, d) = (xt.shape[0], xt.shape[1], xt.shape[2]);
        let (k, dout) = (kt.shape[0], kt.shape[2]);
        if n_out == 0 || n_out > len {
            return Err(Error::Shape(format!(
                "conv1d_causal: n_out {n_out} not in 1..={len}"
            )));
        }
        let mut out = vec![0.0; bsz * n_out * dout];
        let first = len - n_out;
        for (ti, t) in (first..len).enumerate() {
            for j in 0..k {
                let Some(s) = (t + j).checked_sub(k - 1) else {
                    continue;
                };
                gemm(
                    (bsz, d, dout),
                    1.0,
                    &xt.data,
                    (s * d, len * d, 1),
                    &kt.data,
                    (j * d * dout, dout, 1),
                    1.0,
                    &mut out,
                    (ti * dout, n_out * dout, 1),
                );
            }
        }
        let t = Tensor::new(&[bsz, n_out, dout], out)?;
        Ok(self.push(t, Op::Conv1dCausal { x, kernel }, &[x, kernel]))
    }

    /// Real FFT along axis 1 of `x: [B, L, D]`, giving complex `[B, L/2+1, D]`.
    pub fn rfft(&mut self, x: Value) -> Result<Value> {
        let xt = self.real(x, "rfft")?;
        if xt.rank() != 3 {
            return Err(Error::Shape(format!("rfft: x {:?} must be [B, L, D]", xt.shape)));
        }
        let (bsz, len, d) = (xt.shape[0], xt.shape[1], xt.shape[2]);
        let bins = spectral::rfft_bins(len);
        let mut buf = vec![Complex64::new(0.0, 0.0); bsz * d * len];
        for b in 0..bsz {
            for t in 0..len {
                let row = &xt.data[(b * len + t) * d..][..d];
                for (c, &v) in row.iter().enumerate() {
                    buf[(b * d + c) * len + t].re = v;
                }
            }
        }
        spectral::fft_chunks(&mut buf, len);
        let mut out = vec![0.0; 2 * bsz * bins * d];
        for b in 0..bsz {
            for c in 0..d {
                let col = &buf[(b * d + c) * len..][..bins];
                for (f, z) in col.iter().enumerate() {
                    let i = 2 * ((b * bins + f) * d + c);
                    out[i] = z.re;
                    out[i + 1] = z.im;
                }
            }
        }
        let t = Tensor::new_complex(&[bsz, bins, d], out)?;
        Ok(self.push(t, Op::Rfft { x }, &[x]))
    }

    /// Inverse of [`Graph::rfft`] producing `[B, n, D]`.
    pub fn irfft(&mut self, z: Value, n: usize) -> Result<Value> {
        let zt = self.cplx(z, "irfft")?;
        if zt.rank() != 3 || n == 0 || zt.shape[1] != spectral::rfft_bins(n) {
            return Err(Error::Shape(format!(
                "irfft: spectrum {:?} does not match length {n}",
                zt.shape
            )));
        }
        let (bsz, bins, d) = (zt.shape[0], zt.shape[1], zt.shape[2]);
        let mut buf = vec![Complex64::new(0.0, 0.0); bsz * d * n];
        let mut col = vec![Complex64::new(0.0, 0.0); bins];
        for b in 0..bsz {
            for c in 0..d {
                for (f, z) in col.iter_mut().enumerate() {
                    let i = 2 * ((b * bins + f) * d + c);
                    *z = Complex64::new(zt.data[i], zt.data[i + 1]);
                }
                spectral::hermitian_fill(&col, &mut buf[(b * d + c) * n..][..n]);
            }
        }
        spectral::ifft_chunks(&mut buf, n);
        let scale = 1.0 / n as f64;
        let mut out = vec![0.0; bsz * n * d];
        for b in 0..bsz {
            for c in 0..d {
                for t in 0..n {
                    out[(b * n + t) * d + c] = buf[(b * d + c) * n + t].re * scale;
                }
            }
        }
        let t = Tensor::new(&[bsz, n, d], out)?;
        Ok(self.push(t, Op::Irfft { z }, &[z]))
    }

    /// Independent complex matrix multiply per frequency bin:
    /// `y[b, f] = z[b, f] W[f]` with `z: [B, F, D_in]`, `W: [F, D_in, D_out]`.
    pub fn complex_linear(&mut self, z: Value, w: Value) -> Result<Value> {
        let zt = self.cplx(z, "complex_linear")?;
        let wt = self.cplx(w, "complex_linear")?;
        if zt.rank() != 3 || wt.rank() != 3 || zt.shape[1] != wt.shape[0] || zt.shape[2] != wt.shape[1]
        {
            return Err(Error::Shape(format!(
                "complex_linear: z {:?} incompatible with W {:?}",
                zt.shape, wt.shape
            )));
        }
        let (bsz, bins, din) = (zt.shape[0], zt.shape[1], zt.shape[2]);
        let dout = wt.shape[2];
        let mut out = vec![0.0; 2 * bsz * bins * dout];
        for f in 0..bins {
            let zs = |part: usize| (2 * f * din + part, 2 * bins * din, 2);
            let ws = |part: usize| (2 * f * din * dout + part, 2 * dout, 2);
            let ys = |part: usize| (2 * f * dout + part, 2 * bins * dout, 2);
            let dims = (bsz, din, dout);
            // re: zr wr - zi wi
            gemm(dims, 1.0, &zt.data, zs(0), &wt.data, ws(0), 1.0, &mut out, ys(0));
            gemm(dims, -1.0, &zt.data, zs(1), &wt.data, ws(1), 1.0, &mut out, ys(0));
            // im: zr wi + zi wr
            gemm(dims, 1.0, &zt.data, zs(0), &wt.data, ws(1), 1.0, &mut out, ys(1));
            gemm(dims, 1.0, &zt.data, zs(1), &wt.data, ws(0), 1.0, &mut out, ys(1));
        }
        let t = Tensor::new_complex(&[bsz, bins, dout], out)?;
        Ok(self.push(t, Op::ComplexLinear { z, w }, &[z, w]))
    }

    /// Elementwise modulus of a complex tensor.
    pub fn modulus(&mut self, z: Value) -> Result<Value> {
        let zt = self.cplx(z, "modulus")?;
        let out: Vec<f64> = zt.data.chunks(2).map(|p| p[0].hypot(p[1])).collect();
        let t = Tensor::new(&zt.shape.clone(), out)?;
        Ok(self.push(t, Op::Modulus { z }, &[z]))
    }

    /// Selects time step `t` of `x: [B, L, D]`, giving `[B, D]`.
    pub fn take_timestep(&mut self, x: Value, t: usize) -> Result<Value> {
        let xt = self.real(x, "take_timestep")?;
        if xt.rank() != 3 || t >= xt.shape[1] {
            return Err(Error::Shape(format!(
                "take_timestep: step {t} of {:?}",
                xt.shape
            )));
        }
        let (bsz, len, d) = (xt.shape[0], xt.shape[1], xt.shape[2]);
        let mut out = Vec::with_capacity(bsz * d);
        for b in 0..bsz {
            out.extend_from_slice(&xt.data[(b * len + t) * d..][..d]);
        }
        let out = Tensor::new(&[bsz, d], out)?;
        Ok(self.push(out, Op::TakeTimestep { x, t }, &[x]))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_over(&mut self, x: Value, axis: usize) -> Result<Value> {
        let (shape, out) = self.reduce_axis(x, axis, "mean_over")?;
        let len = self.shape(x)[axis].max(1) as f64;
        let out = out.into_iter().map(|v| v / len).collect();
        Ok(self.push(Tensor::new(&shape, out)?, Op::MeanOver { x, axis }, &[x]))
    }

    /// Sum over `axis`, which is removed from the shape.
    pub fn sum_over(&mut self, x: Value, axis: usize) -> Result<Value> {
        let (shape, out) = self.reduce_axis(x, axis, "sum_over")?;
        Ok(self.push(Tensor::new(&shape, out)?, Op::SumOver { x, axis }, &[x]))
    }

    fn reduce_axis(&self, x: Value, axis: usize, what: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let xt = self.real(x, what)?;
        let (outer, len, inner) = split_axis(&xt.shape, axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xt.data[(o * len + l) * inner..][..inner];
                out[o * inner..][..inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, b)| *a += b);
            }
        }
        let mut shape = xt.shape.clone();
        shape.remove(axis);
        Ok((shape, out))
    }

    /// Concatenates real tensors along `axis`; all other dims must agree.
    pub fn concat(&mut self, xs: &[Value], axis: usize) -> Result<Value> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let base = self.real(*first, "concat")?.shape.clone();
        let (outer, _, inner) = split_axis(&base, axis)?;
        let mut total = 0;
        for &v in xs {
            let s = &self.real(v, "concat")?.shape;
            let same_rank = s.len() == base.len();
            if !same_rank || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::Shape(format!("concat: {s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = &self.nodes[v.0].value;
                let chunk = t.shape[axis] * inner;
                out.extend_from_slice(&t.data[o * chunk..][..chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        ))
    }

    /// `x / max(||x||, eps)` along `axis`.
    pub fn l2_normalize(&mut self, x: Value, axis: usize) -> Result<Value> {
        let xt = self.real(x, "l2_normalize")?;
        let (outer, len, inner) = split_axis(&xt.shape, axis)?;
        let mut out = xt.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let norm = (0..len).map(|l| out[idx(l)].powi(2)).sum::<f64>().sqrt();
                let denom = norm.max(NORM_EPS);
                (0..len).for_each(|l| out[idx(l)] /= denom);
            }
        }
        let t = Tensor::new(&xt.shape.clone(), out)?;
        Ok(self.push(t, Op::L2Normalize { x, axis }, &[x]))
    }

    /// Numerically stable `log(sum(exp(x)))` over `axis` (removed).
    pub fn logsumexp(&mut self, x: Value, axis: usize) -> Result<Value> {
        let xt = self.real(x, "logsumexp")?;
        let (outer, len, inner) = split_axis(&xt.shape, axis)?;
        if len == 0 {
            return Err(Error::Shape("logsumexp over an empty axis".into()));
        }
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| xt.data[(o * len + l) * inner + i];
                let mx = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..len).map(|l| (at(l) - mx).exp()).sum();
                out[o * inner + i] = mx + s.ln();
            }
        }
        let mut shape = xt.shape.clone();
        shape.remove(axis);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LogSumExp { x, axis }, &[x]))
    }

    fn same_shape(&self, a: Value, b: Value, what: &str) -> Result<()> {
        let (at, bt) = (self.real(a, what)?, self.real(b, what)?);
        if at.shape != bt.shape {
            return Err(Error::Shape(format!("{what}: {:?} vs {:?}", at.shape, bt.shape)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Value, b: Value, op: Op, f: impl Fn(f64, f64) -> f64) -> Value {
        let at = &self.nodes[a.0].value;
        let bt = &self.nodes[b.0].value;
        let data = at.data.iter().zip(&bt.data).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor {
            shape: at.shape.clone(),
            data,
            complex: false,
        };
        self.push(t, op, &[a, b])
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add { a, b }, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub { a, b }, |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul { a, b }, |x, y| x * y))
    }

    /// Multiplies by a constant. Works on complex tensors too.
    pub fn scale(&mut self, x: Value, c: f64) -> Value {
        let xt = &self.nodes[x.0].value;
        let t = Tensor {
            shape: xt.shape.clone(),
            data: xt.data.iter().map(|v| v * c).collect(),
            complex: xt.complex,
        };
        self.push(t, Op::Scale { x, c }, &[x])
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Value) -> Result<Value> {
        let s = self.real(x, "sum_all")?.data.iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::SumAll { x }, &[x]))
    }

    pub fn reshape(&mut self, x: Value, shape: &[usize]) -> Result<Value> {
        let xt = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != xt.numel() {
            return Err(Error::Shape(format!("reshape {:?} -> {shape:?}", xt.shape)));
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data: xt.data.clone(),
            complex: xt.complex,
        };
        Ok(self.push(t, Op::Reshape { x }, &[x]))
    }

    /// Views a complex `[..]` tensor as a real `[.., 2]` tensor of `(re, im)`.
    pub fn as_real(&mut self, z: Value) -> Result<Value> {
        let zt = self.cplx(z, "as_real")?;
        let mut shape = zt.shape.clone();
        shape.push(2);
        let t = Tensor::new(&shape, zt.data.clone())?;
        Ok(self.push(t, Op::AsReal { z }, &[z]))
    }

    /// Reverse pass from a scalar `root`. Consumes the graph.
    pub fn backward(self, root: Value) -> Result<Gradients> {
        let root_t = &self.nodes[root.0].value;
        if root_t.complex || root_t.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a real scalar root, got {:?}",
                root_t.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        let mut visited = 0;
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            visited += 1;
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads, visited })
    }

    fn needs(&self, v: Value) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            &Op::Linear { x, w, b } => {
                let (xt, wt) = (self.val(x), self.val(w));
                let (din, dout) = (wt.shape[0], wt.shape[1]);
                let m = xt.numel() / din.max(1);
                if self.needs(x) {
                    let mut dx = vec![0.0; m * din];
                    gemm((m, dout, din), 1.0, g, (0, dout, 1), &wt.data, (0, 1, dout), 0.0, &mut dx, (0, din, 1));
                    add_into(&mut grads[x.0], &dx);
                }
                if self.needs(w) {
                    let mut dw = vec![0.0; din * dout];
                    gemm((din, m, dout), 1.0, &xt.data, (0, 1, din), g, (0, dout, 1), 0.0, &mut dw, (0, dout, 1));
                    add_into(&mut grads[w.0], &dw);
                }
                if let Some(b) = b.filter(|&b| self.needs(b)) {
                    let mut db = vec![0.0; dout];
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    add_into(&mut grads[b.0], &db);
                }
            }
            &Op::MatMul { a, b } => {
                let (at, bt) = (self.val(a), self.val(b));
                let (m, k, n) = (at.shape[0], at.shape[1], bt.shape[1]);
                if self.needs(a) {
                    let mut da = vec![0.0; m * k];
                    gemm((m, n, k), 1.0, g, (0, n, 1), &bt.data, (0, 1, n), 0.0, &mut da, (0, k, 1));
                    add_into(&mut grads[a.0], &da);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; k * n];
                    gemm((k, m, n), 1.0, &at.data, (0, 1, k), g, (0, n, 1), 0.0, &mut db, (0, n, 1));
                    add_into(&mut grads[b.0], &db);
                }
            }
            &Op::Conv1dCausal { x, kernel } => {
                let (xt, kt) = (self.val(x), self.val(kernel));
                let (bsz, len, d) = (xt.shape[0], xt.shape[1], xt.shape[2]);
                let (k, dout) = (kt.shape[0], kt.shape[2]);
                let n_out = node.value.shape[1];
                let first = len - n_out;
                let mut dx = self.needs(x).then(|| vec![0.0; xt.data.len()]);
                let mut dk = self.needs(kernel).then(|| vec![0.0; kt.data.len()]);
                for (ti, t) in (first..len).enumerate() {
                    for j in 0..k {
                        let Some(s) = (t + j).checked_sub(k - 1) else {
                            continue;
                        };
                        if let Some(dx) = dx.as_mut() {
                            // dx[b, s] += g[b, t] K[j]^T
                            gemm(
                                (bsz, dout, d),
                                1.0,
                                g,
                                (ti * dout, n_out * dout, 1),
                                &kt.data,
                                (j * d * dout, 1, dout),
                                1.0,
                                dx,
                                (s * d, len * d, 1),
                            );
                        }
                        if let Some(dk) = dk.as_mut() {
                            // dK[j] += x[:, s]^T g[:, t]
                            gemm(
                                (d, bsz, dout),
                                1.0,
                                &xt.data,
                                (s * d, 1, len * d),
                                g,
                                (ti * dout, n_out * dout, 1),
                                1.0,
                                dk,
                                (j * d * dout, dout, 1),
                            );
                        }
                    }
                }
                if let Some(dx) = dx {
                    add_into(&mut grads[x.0], &dx);
                }
                if let Some(dk) = dk {
                    add_into(&mut grads[kernel.0], &dk);
                }
            }
            &Op::Rfft { x } => {
                if !self.needs(x) {
                    return;
                }
                // dL/dx_t = Re( sum_f G_f e^{+2 pi i f t / L} ), G = (g_re + i g_im).
                let (bsz, len, d) = {
                    let s = &self.val(x).shape;
                    (s[0], s[1], s[2])
                };
                let bins = node.value.shape[1];
                let mut buf = vec![Complex64::new(0.0, 0.0); bsz * d * len];
                for b in 0..bsz {
                    for c in 0..d {
                        for f in 0..bins {
                            let i = 2 * ((b * bins + f) * d + c);
                            buf[(b * d + c) * len + f] = Complex64::new(g[i], g[i + 1]);
                        }
                    }
                }
                spectral::ifft_chunks(&mut buf, len);
                let mut dx = vec![0.0; bsz * len * d];
                for b in 0..bsz {
                    for c in 0..d {
                        for t in 0..len {
                            dx[(b * len + t) * d + c] = buf[(b * d + c) * len + t].re;
                        }
                    }
                }
                add_into(&mut grads[x.0], &dx);
            }
            &Op::Irfft { z } => {
                if !self.needs(z) {
                    return;
                }
                // dL/dZ_f = (c_f / n) rfft(g)_f with c_f = 1 at DC / Nyquist, else 2.
                let (bsz, n, d) = (node.value.shape[0], node.value.shape[1], node.value.shape[2]);
                let bins = spectral::rfft_bins(n);
                let mut buf = vec![Complex64::new(0.0, 0.0); bsz * d * n];
                for b in 0..bsz {
                    for t in 0..n {
                        for c in 0..d {
                            buf[(b * d + c) * n + t].re = g[(b * n + t) * d + c];
                        }
                    }
                }
                spectral::fft_chunks(&mut buf, n);
                let mut dz = vec![0.0; 2 * bsz * bins * d];
                for b in 0..bsz {
                    for c in 0..d {
                        for f in 0..bins {
                            let edge = f == 0 || (n % 2 == 0 && f == n / 2);
                            let w = if edge { 1.0 } else { 2.0 } / n as f64;
                            let v = buf[(b * d + c) * n + f];
                            let i = 2 * ((b * bins + f) * d + c);
                            dz[i] = w * v.re;
                            // The imaginary part of DC / Nyquist never reaches the output.
                            dz[i + 1] = if edge { 0.0 } else { w * v.im };
                        }
                    }
                }
                add_into(&mut grads[z.0], &dz);
            }
            &Op::ComplexLinear { z, w } => {
                let (zt, wt) = (self.val(z), self.val(w));
                let (bsz, bins, din) = (zt.shape[0], zt.shape[1], zt.shape[2]);
                let dout = wt.shape[2];
                let zs = |f: usize, part: usize| (2 * f * din + part, 2 * bins * din, 2);
                let zs_t = |f: usize, part: usize| (2 * f * din + part, 2, 2 * bins * din);
                let ws_t = |f: usize, part: usize| (2 * f * din * dout + part, 2, 2 * dout);
                let ws = |f: usize, part: usize| (2 * f * din * dout + part, 2 * dout, 2);
                let gs = |f: usize, part: usize| (2 * f * dout + part, 2 * bins * dout, 2);
                if self.needs(z) {
                    // dZ = G conj(W)^T
                    let mut dz = vec![0.0; zt.data.len()];
                    for f in 0..bins {
                        let dims = (bsz, dout, din);
                        gemm(dims, 1.0, g, gs(f, 0), &wt.data, ws_t(f, 0), 1.0, &mut dz, zs(f, 0));
                        gemm(dims, 1.0, g, gs(f, 1), &wt.data, ws_t(f, 1), 1.0, &mut dz, zs(f, 0));
                        gemm(dims, -1.0, g, gs(f, 0), &wt.data, ws_t(f, 1), 1.0, &mut dz, zs(f, 1));
                        gemm(dims, 1.0, g, gs(f, 1), &wt.data, ws_t(f, 0), 1.0, &mut dz, zs(f, 1));
                    }
                    add_into(&mut grads[z.0], &dz);
                }
                if self.needs(w) {
                    // dW = conj(Z)^T G
                    let mut dw = vec![0.0; wt.data.len()];
                    for f in 0..bins {
                        let dims = (din, bsz, dout);
                        gemm(dims, 1.0, &zt.data, zs_t(f, 0), g, gs(f, 0), 1.0, &mut dw, ws(f, 0));
                        gemm(dims, 1.0, &zt.data, zs_t(f, 1), g, gs(f, 1), 1.0, &mut dw, ws(f, 0));
                        gemm(dims, 1.0, &zt.data, zs_t(f, 0), g, gs(f, 1), 1.0, &mut dw, ws(f, 1));
                        gemm(dims, -1.0, &zt.data, zs_t(f, 1), g, gs(f, 0), 1.0, &mut dw, ws(f, 1));
                    }
                    add_into(&mut grads[w.0], &dw);
                }
            }
            &Op::Modulus { z } => {
                if !self.needs(z) {
                    return;
                }
                let zt = self.val(z);
                let mut dz = vec![0.0; zt.data.len()];
                for (i, p) in zt.data.chunks(2).enumerate() {
                    let r = p[0].hypot(p[1]).max(NORM_EPS);
                    dz[2 * i] = g[i] * p[0] / r;
                    dz[2 * i + 1] = g[i] * p[1] / r;
                }
                add_into(&mut grads[z.0], &dz);
            }
            &Op::TakeTimestep { x, t } => {
                if !self.needs(x) {
                    return;
                }
                let s = &self.val(x).shape;
                let (bsz, len, d) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; bsz * len * d];
                for b in 0..bsz {
                    dx[(b * len + t) * d..][..d].copy_from_slice(&g[b * d..][..d]);
                }
                add_into(&mut grads[x.0], &dx);
            }
            &Op::MeanOver { x, axis } | &Op::SumOver { x, axis } => {
                if !self.needs(x) {
                    return;
                }
                let (outer, len, inner) = split_axis(&self.val(x).shape, axis).expect("checked");
                let scale = match node.op {
                    Op::MeanOver { .. } => 1.0 / len.max(1) as f64,
                    _ => 1.0,
                };
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let dst = &mut dx[(o * len + l) * inner..][..inner];
                        dst.iter_mut()
                            .zip(&g[o * inner..][..inner])
                            .for_each(|(a, v)| *a = v * scale);
                    }
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::Concat { xs, axis } => {
                let (outer, _, inner) = split_axis(&node.value.shape, *axis).expect("checked");
                let total = node.value.shape[*axis];
                let mut offset = 0;
                for &v in xs {
                    let width = self.val(v).shape[*axis] * inner;
                    if self.needs(v) {
                        let mut dv = Vec::with_capacity(outer * width);
                        for o in 0..outer {
                            dv.extend_from_slice(&g[o * total * inner + offset..][..width]);
                        }
                        add_into(&mut grads[v.0], &dv);
                    }
                    offset += width;
                }
            }
            &Op::L2Normalize { x, axis } => {
                if !self.needs(x) {
                    return;
                }
                let xt = self.val(x);
                let y = &node.value.data;
                let (outer, len, inner) = split_axis(&xt.shape, axis).expect("checked");
                let mut dx = vec![0.0; xt.data.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let norm = (0..len).map(|l| xt.data[idx(l)].powi(2)).sum::<f64>().sqrt();
                        if norm > NORM_EPS {
                            let dot: f64 = (0..len).map(|l| y[idx(l)] * g[idx(l)]).sum();
                            (0..len).for_each(|l| dx[idx(l)] = (g[idx(l)] - y[idx(l)] * dot) / norm);
                        } else {
                            (0..len).for_each(|l| dx[idx(l)] = g[idx(l)] / NORM_EPS);
                        }
                    }
                }
                add_into(&mut grads[x.0], &dx);
            }
            &Op::LogSumExp { x, axis } => {
                if !self.needs(x) {
                    return;
                }
                let xt = self.val(x);
                let (outer, len, inner) = split_axis(&xt.shape, axis).expect("checked");
                let mut dx = vec![0.0; xt.data.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let lse = node.value.data[o * inner + i];
                        let gi = g[o * inner + i];
                        for l in 0..len {
                            let j = (o * len + l) * inner + i;
                            dx[j] = gi * (xt.data[j] - lse).exp();
                        }
                    }
                }
                add_into(&mut grads[x.0], &dx);
            }
            &Op::Add { a, b } => {
                if self.needs(a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.needs(b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            &Op::Sub { a, b } => {
                if self.needs(a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.needs(b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    add_into(&mut grads[b.0], &neg);
                }
            }
            &Op::Mul { a, b } => {
                let (at, bt) = (self.val(a), self.val(b));
                if self.needs(a) {
                    let da: Vec<f64> = g.iter().zip(&bt.data).map(|(g, y)| g * y).collect();
                    add_into(&mut grads[a.0], &da);
                }
                if self.needs(b) {
                    let db: Vec<f64> = g.iter().zip(&at.data).map(|(g, x)| g * x).collect();
                    add_into(&mut grads[b.0], &db);
                }
            }
            &Op::Scale { x, c } => {
                if self.needs(x) {
                    let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                    add_into(&mut grads[x.0], &dx);
                }
            }
            &Op::SumAll { x } => {
                if self.needs(x) {
                    let dx = vec![g[0]; self.val(x).data.len()];
                    add_into(&mut grads[x.0], &dx);
                }
            }
            &Op::Reshape { x: v } | &Op::AsReal { z: v } => {
                if self.needs(v) {
                    add_into(&mut grads[v.0], g);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_and_hand_product() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zero = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.linear(x, eye, Some(zero)).unwrap();
        assert_eq!(g.value(y).data, vec![1.0, 2.0, 3.0, 4.0]);

        let x = g.constant(t(&[1, 1, 2], &[1.0, 2.0]));
        let w = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2], &[0.5, -1.0]));
        let y = g.linear(x, w, Some(b)).unwrap();
        // [1 2] [[1 2] [3 4]] = [7 10]
        assert_eq!(g.value(y).data, vec![7.5, 9.0]);
        assert_eq!(g.value(y).shape, vec![1, 1, 2]);
    }

    #[test]
    fn linear_rejects_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 2]));
        let w = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.linear(x, w, None), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3, 1], &[1.0, 2.0, 3.0]));
        let k = g.constant(t(&[2, 1, 1], &[1.0, 1.0]));
        let y = g.conv1d_causal(x, k).unwrap();
        assert_eq!(g.value(y).data, vec![1.0, 3.0, 5.0]);
        let tail = g.conv1d_causal_tail(x, k, 1).unwrap();
        assert_eq!(g.value(tail).data, vec![5.0]);

        let x = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye = g.constant(t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = g.conv1d_causal(x, eye).unwrap();
        assert_eq!(g.value(y).data, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv_is_causal_with_asymmetric_kernel() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 4, 1], &[1.0, 10.0, 100.0, 1000.0]));
        let k = g.constant(t(&[2, 1, 1], &[2.0, 1.0]));
        // y[t] = 2 x[t-1] + x[t]
        let y = g.conv1d_causal(x, k).unwrap();
        assert_eq!(g.value(y).data, vec![1.0, 12.0, 120.0, 1200.0]);
    }

    #[test]
    fn fft_roundtrip_and_dc() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..2 * 7 * 3).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let x = g.constant(t(&[2, 7, 3], &data));
        let z = g.rfft(x).unwrap();
        assert_eq!(g.shape(z), &[2, 4, 3]);
        let back = g.irfft(z, 7).unwrap();
        for (a, b) in g.value(back).data.iter().zip(&data) {
            assert!((a - b).abs() < 1e-9);
        }

        let c = g.constant(t(&[1, 8, 1], &[3.0; 8]));
        let z = g.rfft(c).unwrap();
        let zd = &g.value(z).data;
        assert!((zd[0] - 24.0).abs() < 1e-12);
        assert!(zd[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn complex_linear_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::new_complex(&[1, 1, 1], vec![1.0, 1.0]).unwrap());
        let w = g.constant(Tensor::new_complex(&[1, 1, 1], vec![0.0, 1.0]).unwrap());
        let y = g.complex_linear(z, w).unwrap();
        // (1 + i) i = i - 1
        assert_eq!(g.value(y).data, vec![-1.0, 1.0]);

        let zdata = vec![1.0, 2.0, -3.0, 0.5, 4.0, -1.0, 0.0, 2.0];
        let z = g.constant(Tensor::new_complex(&[1, 2, 2], zdata.clone()).unwrap());
        let eye = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let w = g.constant(Tensor::new_complex(&[2, 2, 2], [eye.clone(), eye].concat()).unwrap());
        let y = g.complex_linear(z, w).unwrap();
        assert_eq!(g.value(y).data, zdata);
    }

    #[test]
    fn reductions_and_normalize() {
        let mut g = Graph::new();
        let c = g.constant(t(&[2, 3], &[4.0; 6]));
        let m = g.mean_over(c, 1).unwrap();
        assert_eq!(g.value(m).data, vec![4.0, 4.0]);
        let u = g.constant(t(&[1, 3], &[0.6, 0.0, 0.8]));
        let n = g.l2_normalize(u, 1).unwrap();
        assert_eq!(g.value(n).data, vec![0.6, 0.0, 0.8]);
        let z = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let n = g.l2_normalize(z, 1).unwrap();
        assert!(g.value(n).is_finite());
        assert!(matches!(g.mean_over(c, 2), Err(Error::Axis { axis: 2, rank: 2 })));
    }

    #[test]
    fn concat_and_logsumexp() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data, vec![1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let l = g.logsumexp(c, 1).unwrap();
        let want = (1f64.exp() + 3f64.exp() + 4f64.exp()).ln();
        assert!((g.value(l).data[0] - want).abs() < 1e-12);
        assert!(g.concat(&[a, b], 0).is_err());
    }

    #[test]
    fn backward_visits_each_node_once() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let s = g.sum_all(z).unwrap();
        let n = g.len();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.visited(), n);
        assert_eq!(grads.get(x).unwrap(), &[3.0, 5.0, 7.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[5.0, 6.0]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum_all(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[5.0, 6.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }
}
