//! Differentiable operations on [`Tensor`].

use std::rc::Rc;

use super::kernels::{col2im, gemm, im2col};
use super::tensor::{numel, Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Sparse linear operator `y = A x` stored row-wise.
///
/// Used for resampling (bilinear upsampling, average pooling, pyramid
/// filters) where the backward pass is the transpose `Aᵀ g`.
#[derive(Clone, Debug)]
pub struct SparseMap {
    pub in_len: usize,
    pub offsets: Vec<usize>,
    pub cols: Vec<usize>,
    pub weights: Vec<f64>,
}

impl SparseMap {
    pub fn from_rows(in_len: usize, rows: impl IntoIterator<Item = Vec<(usize, f64)>>) -> Self {
        let mut offsets = vec![0];
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        for row in rows {
            for (c, w) in row {
                debug_assert!(c < in_len);
                cols.push(c);
                weights.push(w);
            }
            offsets.push(cols.len());
        }
        SparseMap { in_len, offsets, cols, weights }
    }

    pub fn out_len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn apply<T: Real>(&self, x: &[T]) -> Vec<T> {
        (0..self.out_len())
            .map(|r| {
                let mut acc = T::zero();
                for e in self.offsets[r]..self.offsets[r + 1] {
                    acc += T::lit(self.weights[e]) * x[self.cols[e]];
                }
                acc
            })
            .collect()
    }

    pub fn apply_transpose<T: Real>(&self, g: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.in_len];
        for (r, &gv) in g.iter().enumerate() {
            for e in self.offsets[r]..self.offsets[r + 1] {
                out[self.cols[e]] += T::lit(self.weights[e]) * gv;
            }
        }
        out
    }
}

fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

fn want<T: Real>(args: &super::tensor::BackwardArgs<'_, T>, i: usize) -> bool {
    args.inputs[i].requires_grad()
}

impl<T: Real> Tensor<T> {
    // ---- shape ---------------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape())));
        }
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), vec![self.clone()], |a| vec![Some(a.grad.to_vec())]))
    }

    /// `out[i] = self[index[i]]` (flat indices), shaped as `shape`.
    pub fn gather(&self, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != index.len() {
            return Err(shape_err(format!("gather: {} indices cannot fill {shape:?}", index.len())));
        }
        let n = self.numel();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(shape_err(format!("gather index {bad} out of range {n}")));
        }
        let data = {
            let x = self.data();
            index.iter().map(|&i| x[i]).collect()
        };
        Ok(Tensor::from_op(shape.to_vec(), data, vec![self.clone()], move |a| {
            let mut g = vec![T::zero(); a.inputs[0].numel()];
            for (&i, &gv) in index.iter().zip(a.grad) {
                g[i] += gv;
            }
            vec![Some(g)]
        }))
    }

    /// Permutes axes; `perm[k]` names the source axis of output axis `k`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let src = self.shape();
        if perm.len() != src.len() {
            return Err(shape_err(format!("permute {perm:?} on {src:?}")));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= src.len() || std::mem::replace(&mut seen[p], true) {
                return Err(shape_err(format!("invalid permutation {perm:?}")));
            }
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
        let mut src_strides = vec![1usize; src.len()];
        for k in (0..src.len().saturating_sub(1)).rev() {
            src_strides[k] = src_strides[k + 1] * src[k + 1];
        }
        let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let total = self.numel();
        let mut index = Vec::with_capacity(total);
        let mut coord = vec![0usize; out_shape.len()];
        for _ in 0..total {
            index.push(coord.iter().zip(&strides).map(|(c, s)| c * s).sum());
            for k in (0..coord.len()).rev() {
                coord[k] += 1;
                if coord[k] < out_shape[k] {
                    break;
                }
                coord[k] = 0;
            }
        }
        self.gather(Rc::new(index), &out_shape)
    }

    /// 2-D transpose.
    pub fn t(&self) -> Result<Tensor<T>> {
        if self.ndim() != 2 {
            return Err(shape_err(format!("t() on {:?}", self.shape())));
        }
        self.permute(&[1, 0])
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(shape_err(format!("narrow({axis}, {start}, {len}) on {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for r in start..start + len {
                let base = (o * shape[axis] + r) * inner;
                index.extend(base..base + inner);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        self.gather(Rc::new(index), &out_shape)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| shape_err("concat of nothing"))?;
        let nd = first.ndim();
        if axis >= nd {
            return Err(shape_err(format!("concat axis {axis} on {:?}", first.shape())));
        }
        for p in parts {
            let ok = p.ndim() == nd && (0..nd).all(|k| k == axis || p.shape()[k] == first.shape()[k]);
            if !ok {
                return Err(shape_err(format!("concat: {:?} incompatible with {:?} on axis {axis}", p.shape(), first.shape())));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        {
            let views: Vec<_> = parts.iter().map(|p| p.data()).collect();
            for o in 0..outer {
                for (v, &s) in views.iter().zip(&sizes) {
                    data.extend_from_slice(&v[o * s * inner..(o + 1) * s * inner]);
                }
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let inputs: Vec<Tensor<T>> = parts.iter().map(|&p| p.clone()).collect();
        Ok(Tensor::from_op(shape, data, inputs, move |a| {
            let mut grads: Vec<Vec<T>> = sizes.iter().map(|s| Vec::with_capacity(outer * s * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (g, &s) in grads.iter_mut().zip(&sizes) {
                    g.extend_from_slice(&a.grad[off..off + s * inner]);
                    off += s * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    // ---- elementwise ---------------------------------------------------------

    fn unary(&self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&v| f(v)).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |a| {
            let x = a.inputs[0].data();
            vec![Some(a.grad.iter().zip(x.iter().zip(a.out)).map(|(&g, (&xv, &yv))| g * df(xv, yv)).collect())]
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data().iter()).map(|(&a, &b)| a + b).collect();
        Ok(Tensor::from_op(self.shape().to_vec(), data, vec![self.clone(), other.clone()], |a| {
            vec![want(a, 0).then(|| a.grad.to_vec()), want(a, 1).then(|| a.grad.to_vec())]
        }))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data().iter()).map(|(&a, &b)| a - b).collect();
        Ok(Tensor::from_op(self.shape().to_vec(), data, vec![self.clone(), other.clone()], |a| {
            vec![want(a, 0).then(|| a.grad.to_vec()), want(a, 1).then(|| a.grad.iter().map(|&g| -g).collect())]
        }))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data().iter()).map(|(&a, &b)| a * b).collect();
        Ok(Tensor::from_op(self.shape().to_vec(), data, vec![self.clone(), other.clone()], |a| {
            let x = a.inputs[0].data();
            let y = a.inputs[1].data();
            vec![
                want(a, 0).then(|| a.grad.iter().zip(y.iter()).map(|(&g, &v)| g * v).collect()),
                want(a, 1).then(|| a.grad.iter().zip(x.iter()).map(|(&g, &v)| g * v).collect()),
            ]
        }))
    }

    /// `self + b` with `b` repeated over the leading elements: `b.numel()` must
    /// divide `self.numel()` and `b` aligns with the trailing block.
    pub fn broadcast_add(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let n = b.numel();
        if self.numel() % n != 0 {
            return Err(shape_err(format!("broadcast_add: {:?} is not a whole number of {:?} blocks", self.shape(), b.shape())));
        }
        let data = {
            let x = self.data();
            let bv = b.data();
            x.iter().enumerate().map(|(i, &v)| v + bv[i % n]).collect()
        };
        Ok(Tensor::from_op(self.shape().to_vec(), data, vec![self.clone(), b.clone()], move |a| {
            let gb = want(a, 1).then(|| {
                let mut gb = vec![T::zero(); n];
                for (i, &g) in a.grad.iter().enumerate() {
                    gb[i % n] += g;
                }
                gb
            });
            vec![want(a, 0).then(|| a.grad.to_vec()), gb]
        }))
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        self.unary(move |v| v + s, |_, _| T::one())
    }

    pub fn mul_scalar(&self, s: T) -> Tensor<T> {
        self.unary(move |v| v * s, move |_, _| s)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.mul_scalar(-T::one())
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(|v| if v > T::zero() { v } else { T::zero() }, |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(
            |v| {
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            },
            |_, y| y * (T::one() - y),
        )
    }

    /// Gaussian-error linear unit, tanh approximation:
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    /// Deviates from the erf form by less than 1e-3 everywhere.
    pub fn gelu(&self) -> Tensor<T> {
        let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
        let k = T::lit(0.044715);
        let half = T::lit(0.5);
        self.unary(
            move |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()),
            move |x, _| {
                let t = (c * (x + k * x * x * x)).tanh();
                half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
            },
        )
    }

    pub fn abs(&self) -> Tensor<T> {
        self.unary(
            |v| v.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary(|v| v * v, |x, _| T::lit(2.0) * x)
    }

    // ---- reductions ----------------------------------------------------------

    pub fn sum(&self) -> Tensor<T> {
        let s = self.data().iter().fold(T::zero(), |acc, &v| acc + v);
        Tensor::from_op(Vec::new(), vec![s], vec![self.clone()], |a| vec![Some(vec![a.grad[0]; a.inputs[0].numel()])])
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = T::lit(self.numel() as f64);
        self.sum().mul_scalar(T::one() / n)
    }

    // ---- linear algebra ------------------------------------------------------

    /// `[m×k] · [k×n]`.
    pub fn matmul(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        if self.ndim() != 2 || b.ndim() != 2 || self.shape()[1] != b.shape()[0] {
            return Err(shape_err(format!("matmul: {:?} × {:?}", self.shape(), b.shape())));
        }
        let (m, k, n) = (self.shape()[0], self.shape()[1], b.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, n, k, &self.data(), false, &b.data(), false, &mut out, false);
        Ok(Tensor::from_op(vec![m, n], out, vec![self.clone(), b.clone()], move |a| {
            let x = a.inputs[0].data();
            let y = a.inputs[1].data();
            let ga = want(a, 0).then(|| {
                let mut g = vec![T::zero(); m * k];
                gemm(m, k, n, a.grad, false, &y, true, &mut g, false);
                g
            });
            let gb = want(a, 1).then(|| {
                let mut g = vec![T::zero(); k * n];
                gemm(k, n, m, &x, true, a.grad, false, &mut g, false);
                g
            });
            vec![ga, gb]
        }))
    }

    /// Batched product: `[B×m×k] · [B×k×n]`, or `[B×m×k] · [B×n×k]ᵀ` when
    /// `transpose_b`.
    pub fn bmm(&self, b: &Tensor<T>, transpose_b: bool) -> Result<Tensor<T>> {
        let bad = || shape_err(format!("bmm: {:?} × {:?} (transpose_b={transpose_b})", self.shape(), b.shape()));
        if self.ndim() != 3 || b.ndim() != 3 || self.shape()[0] != b.shape()[0] {
            return Err(bad());
        }
        let (batch, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (bk, n) = if transpose_b { (b.shape()[2], b.shape()[1]) } else { (b.shape()[1], b.shape()[2]) };
        if bk != k {
            return Err(bad());
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let x = self.data();
            let y = b.data();
            for i in 0..batch {
                gemm(
                    m,
                    n,
                    k,
                    &x[i * m * k..(i + 1) * m * k],
                    false,
                    &y[i * k * n..(i + 1) * k * n],
                    transpose_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        Ok(Tensor::from_op(vec![batch, m, n], out, vec![self.clone(), b.clone()], move |a| {
            let x = a.inputs[0].data();
            let y = a.inputs[1].data();
            let ga = want(a, 0).then(|| {
                let mut g = vec![T::zero(); batch * m * k];
                for i in 0..batch {
                    let gy = &a.grad[i * m * n..(i + 1) * m * n];
                    let yb = &y[i * k * n..(i + 1) * k * n];
                    // dA = G · op(B)ᵀ
                    gemm(m, k, n, gy, false, yb, !transpose_b, &mut g[i * m * k..(i + 1) * m * k], false);
                }
                g
            });
            let gb = want(a, 1).then(|| {
                let mut g = vec![T::zero(); batch * k * n];
                for i in 0..batch {
                    let gy = &a.grad[i * m * n..(i + 1) * m * n];
                    let xa = &x[i * m * k..(i + 1) * m * k];
                    let dst = &mut g[i * k * n..(i + 1) * k * n];
                    if transpose_b {
                        // B is n×k: dB = Gᵀ · A
                        gemm(n, k, m, gy, true, xa, false, dst, false);
                    } else {
                        gemm(k, n, m, xa, true, gy, false, dst, false);
                    }
                }
                g
            });
            vec![ga, gb]
        }))
    }

    /// Affine map on the last axis: `x[..., in] · w[in×out] + b[out]`.
    pub fn linear(&self, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let inp = *self.shape().last().ok_or_else(|| shape_err("linear on scalar"))?;
        if w.ndim() != 2 || w.shape()[0] != inp {
            return Err(shape_err(format!("linear: input {:?} with weight {:?}", self.shape(), w.shape())));
        }
        let rows = self.numel() / inp;
        let y = self.reshape(&[rows, inp])?.matmul(w)?;
        let y = match b {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = w.shape()[1];
        y.reshape(&shape)
    }

    // ---- normalization -------------------------------------------------------

    pub fn softmax_last_dim(&self) -> Result<Tensor<T>> {
        let n = *self.shape().last().ok_or_else(|| shape_err("softmax on scalar"))?;
        let mut out = self.to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        Ok(Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |a| {
            let mut g = vec![T::zero(); a.grad.len()];
            for ((gr, yr), dst) in a.grad.chunks(n).zip(a.out.chunks(n)).zip(g.chunks_mut(n)) {
                let dot = gr.iter().zip(yr).fold(T::zero(), |acc, (&u, &v)| acc + u * v);
                for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = yv * (gv - dot);
                }
            }
            vec![Some(g)]
        }))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let d = *self.shape().last().ok_or_else(|| shape_err("layer_norm on scalar"))?;
        self.normalize_axis(self.numel() / d, d, 1, gamma, beta, eps)
    }

    /// Per-pixel normalization across channels of a `C×H×W` map.
    pub fn channel_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        if self.ndim() != 3 {
            return Err(shape_err(format!("channel_norm expects C×H×W, got {:?}", self.shape())));
        }
        let c = self.shape()[0];
        self.normalize_axis(1, c, self.numel() / c, gamma, beta, eps)
    }

    /// Per-channel normalization over the spatial extent of a `C×H×W` map,
    /// with per-channel affine parameters.
    pub fn spatial_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        if self.ndim() != 3 {
            return Err(shape_err(format!("spatial_norm expects C×H×W, got {:?}", self.shape())));
        }
        let c = self.shape()[0];
        let n = self.numel() / c;
        if gamma.numel() != c || beta.numel() != c {
            return Err(shape_err(format!("spatial_norm: affine params {:?}/{:?} for {c} channels", gamma.shape(), beta.shape())));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("norm eps must be positive, got {eps}")));
        }
        let (eps, nn) = (T::lit(eps), T::lit(n as f64));
        let x = self.data();
        let (gm, bt) = (gamma.data(), beta.data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); c];
        let mut out = vec![T::zero(); x.len()];
        for ch in 0..c {
            let xs = &x[ch * n..(ch + 1) * n];
            let mean = xs.iter().copied().sum::<T>() / nn;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nn;
            let r = T::one() / (var + eps).sqrt();
            rstd[ch] = r;
            for i in 0..n {
                let xh = (xs[i] - mean) * r;
                xhat[ch * n + i] = xh;
                out[ch * n + i] = gm[ch] * xh + bt[ch];
            }
        }
        drop((x, gm, bt));
        Ok(Tensor::from_op(self.shape().to_vec(), out, vec![self.clone(), gamma.clone(), beta.clone()], move |a| {
            let gm = a.inputs[1].data();
            let mut gx = want(a, 0).then(|| vec![T::zero(); a.grad.len()]);
            let mut gg = vec![T::zero(); c];
            let mut gb = vec![T::zero(); c];
            for ch in 0..c {
                let g = &a.grad[ch * n..(ch + 1) * n];
                let xh = &xhat[ch * n..(ch + 1) * n];
                let (mut sg, mut sgx) = (T::zero(), T::zero());
                for i in 0..n {
                    sg += g[i];
                    sgx += g[i] * xh[i];
                }
                gg[ch] = sgx;
                gb[ch] = sg;
                if let Some(gx) = gx.as_mut() {
                    let k = gm[ch] * rstd[ch];
                    let (m1, m2) = (sg / nn, sgx / nn);
                    for i in 0..n {
                        gx[ch * n + i] = k * (g[i] - m1 - xh[i] * m2);
                    }
                }
            }
            vec![gx, want(a, 1).then_some(gg), want(a, 2).then_some(gb)]
        }))
    }

    /// Normalizes over the middle axis of an `outer × d × inner` view.
    fn normalize_axis(&self, outer: usize, d: usize, inner: usize, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        if gamma.numel() != d || beta.numel() != d {
            return Err(shape_err(format!("norm: affine params {:?}/{:?} for width {d}", gamma.shape(), beta.shape())));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("norm eps must be positive, got {eps}")));
        }
        let eps = T::lit(eps);
        let dn = T::lit(d as f64);
        let x = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); outer * inner];
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |c: usize| (o * d + c) * inner + i;
                let mut mean = T::zero();
                for c in 0..d {
                    mean += x[at(c)];
                }
                mean = mean / dn;
                let mut var = T::zero();
                for c in 0..d {
                    let z = x[at(c)] - mean;
                    var += z * z;
                }
                var = var / dn;
                let r = T::one() / (var + eps).sqrt();
                rstd[o * inner + i] = r;
                for c in 0..d {
                    let xh = (x[at(c)] - mean) * r;
                    xhat[at(c)] = xh;
                    out[at(c)] = gm[c] * xh + bt[c];
                }
            }
        }
        drop((x, gm, bt));
        Ok(Tensor::from_op(self.shape().to_vec(), out, vec![self.clone(), gamma.clone(), beta.clone()], move |a| {
            let gm = a.inputs[1].data();
            let mut gx = want(a, 0).then(|| vec![T::zero(); a.grad.len()]);
            let mut gg = vec![T::zero(); d];
            let mut gb = vec![T::zero(); d];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |c: usize| (o * d + c) * inner + i;
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for c in 0..d {
                        let g = a.grad[at(c)];
                        let xh = xhat[at(c)];
                        gg[c] += g * xh;
                        gb[c] += g;
                        let dxh = g * gm[c];
                        m1 += dxh;
                        m2 += dxh * xh;
                    }
                    if let Some(gx) = gx.as_mut() {
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        let r = rstd[o * inner + i];
                        for c in 0..d {
                            let dxh = a.grad[at(c)] * gm[c];
                            gx[at(c)] = r * (dxh - m1 - xhat[at(c)] * m2);
                        }
                    }
                }
            }
            vec![gx, want(a, 1).then_some(gg), want(a, 2).then_some(gb)]
        }))
    }

    // ---- images --------------------------------------------------------------

    /// 3×3 cross-correlation (kernel not flipped) of a `C_in×H×W` map with
    /// `w[C_out×C_in×3×3]`, optional bias `[C_out]`.
    /// Output is `C_out × ((H+2·pad−3)/stride+1) × ((W+2·pad−3)/stride+1)`.
    pub fn conv2d(&self, w: &Tensor<T>, b: Option<&Tensor<T>>, stride: usize, pad: usize) -> Result<Tensor<T>> {
        if self.ndim() != 3 || w.ndim() != 4 || w.shape()[2] != 3 || w.shape()[3] != 3 {
            return Err(shape_err(format!("conv2d: input {:?} weight {:?}", self.shape(), w.shape())));
        }
        let (cin, h, wd) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let cout = w.shape()[0];
        if w.shape()[1] != cin {
            return Err(shape_err(format!("conv2d: weight {:?} for {cin} input channels", w.shape())));
        }
        if stride == 0 {
            return Err(shape_err("conv2d: stride 0"));
        }
        let span = |n: usize| -> Result<usize> {
            let padded = n + 2 * pad;
            if padded < 3 || (padded - 3) % stride != 0 {
                return Err(shape_err(format!("conv2d: extent {n} with pad {pad}, stride {stride} gives a non-integral output")));
            }
            Ok((padded - 3) / stride + 1)
        };
        let (ho, wo) = (span(h)?, span(wd)?);
        if let Some(b) = b {
            if b.numel() != cout {
                return Err(shape_err(format!("conv2d: bias {:?} for {cout} channels", b.shape())));
            }
        }
        let col = im2col(&self.data(), cin, h, wd, 3, stride, pad, ho, wo);
        let kk = cin * 9;
        let hw = ho * wo;
        let mut out = vec![T::zero(); cout * hw];
        gemm(cout, hw, kk, &w.data(), false, &col, false, &mut out, false);
        if let Some(b) = b {
            let bv = b.data();
            for (co, chunk) in out.chunks_mut(hw).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bv[co]);
            }
        }
        let mut inputs = vec![self.clone(), w.clone()];
        if let Some(b) = b {
            inputs.push(b.clone());
        }
        let has_bias = b.is_some();
        Ok(Tensor::from_op(vec![cout, ho, wo], out, inputs, move |a| {
            let wv = a.inputs[1].data();
            let gx = want(a, 0).then(|| {
                let mut dcol = vec![T::zero(); kk * hw];
                gemm(kk, hw, cout, &wv, true, a.grad, false, &mut dcol, false);
                col2im(&dcol, cin, h, wd, 3, stride, pad, ho, wo)
            });
            let gw = want(a, 1).then(|| {
                let mut g = vec![T::zero(); cout * kk];
                gemm(cout, kk, hw, a.grad, false, &col, true, &mut g, false);
                g
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(want(a, 2).then(|| a.grad.chunks(hw).map(|c| c.iter().copied().sum()).collect()));
            }
            grads
        }))
    }

    /// Applies a fixed sparse linear map to the flattened tensor.
    pub fn sparse_map(&self, map: Rc<SparseMap>, shape: &[usize]) -> Result<Tensor<T>> {
        if map.in_len != self.numel() || map.out_len() != numel(shape) {
            return Err(shape_err(format!("sparse map {}→{} applied to {:?} → {shape:?}", map.in_len, map.out_len(), self.shape())));
        }
        let out = map.apply(&self.data());
        Ok(Tensor::from_op(shape.to_vec(), out, vec![self.clone()], move |a| vec![Some(map.apply_transpose(a.grad))]))
    }
}
