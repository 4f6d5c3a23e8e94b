//! Differentiable operations on [`Var`].

use super::kernels::{
    col2im, gemm, im2col, resize_bilinear_plane, resize_bilinear_plane_backward, softmax_axis,
    ConvGeom, ResizeTable,
};
use super::{nchw, split_axis, Real, Tensor, Var};
use crate::error::{arg_err, dim_err, Result};

/// Pointwise operation selector for [`Var::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Relu,
}

fn some<T>(v: Vec<T>) -> Option<Vec<T>> {
    Some(v)
}

impl<T: Real> Var<T> {
    /// Zero-padded cross-correlation plus per-channel bias.
    pub fn conv2d(&self, weight: &Var<T>, bias: &Var<T>, stride: usize, pad: usize) -> Result<Var<T>> {
        let (n, cin, h, w) = nchw(self.shape(), "conv2d input")?;
        let (cout, wcin, kh, kw) = nchw(weight.shape(), "conv2d weight")?;
        if wcin != cin {
            return Err(dim_err!(
                "conv2d channel axis: input has {cin} channels, weight expects {wcin}"
            ));
        }
        if bias.shape() != [cout] {
            return Err(dim_err!(
                "conv2d bias shape {:?} does not match {cout} output channels",
                bias.shape()
            ));
        }
        if stride == 0 {
            return Err(arg_err!("conv2d stride must be >= 1"));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if kh > ph || kw > pw || (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(dim_err!(
                "conv2d spatial axes: kernel {kh}x{kw} with stride {stride}, pad {pad} does not tile input {h}x{w}"
            ));
        }
        let g = ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (ph - kh) / stride + 1,
            wo: (pw - kw) / stride + 1,
        };
        let (rows, npix) = (g.rows(), g.cols());
        let xd = self.value().data();
        let wd = weight.value().data();
        let bd = bias.value().data();
        let mut out = vec![T::zero(); n * cout * npix];
        let mut all_cols = vec![T::zero(); n * rows * npix];
        for i in 0..n {
            let cols = &mut all_cols[i * rows * npix..(i + 1) * rows * npix];
            im2col(&xd[i * cin * h * w..(i + 1) * cin * h * w], &g, cols);
            let o = &mut out[i * cout * npix..(i + 1) * cout * npix];
            for (co, chunk) in o.chunks_exact_mut(npix).enumerate() {
                chunk.fill(bd[co]);
            }
            gemm(cout, rows, npix, wd, false, cols, false, T::one(), o);
        }
        let value = Tensor::from_parts(vec![n, cout, g.ho, g.wo], out);
        let wv = weight.value().clone();
        let need = [self.requires_grad(), weight.requires_grad(), bias.requires_grad()];
        Ok(Var::from_op(
            value,
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |go| {
                let wd = wv.data();
                let mut dx = need[0].then(|| vec![T::zero(); n * cin * h * w]);
                let mut dw = need[1].then(|| vec![T::zero(); cout * rows]);
                let mut db = need[2].then(|| vec![T::zero(); cout]);
                let mut dcols = vec![T::zero(); rows * npix];
                for i in 0..n {
                    let go_i = &go[i * cout * npix..(i + 1) * cout * npix];
                    let cols = &all_cols[i * rows * npix..(i + 1) * rows * npix];
                    if let Some(dw) = dw.as_mut() {
                        gemm(cout, npix, rows, go_i, false, cols, true, T::one(), dw);
                    }
                    if let Some(db) = db.as_mut() {
                        for (co, chunk) in go_i.chunks_exact(npix).enumerate() {
                            db[co] += chunk.iter().copied().sum::<T>();
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(rows, cout, npix, wd, true, go_i, false, T::zero(), &mut dcols);
                        col2im(&dcols, &g, &mut dx[i * cin * h * w..(i + 1) * cin * h * w]);
                    }
                }
                vec![dx, dw, db]
            }),
        ))
    }

    /// Window maximum; the gradient goes to the first maximal element of each window.
    pub fn max_pool2d(&self, k: usize, stride: usize) -> Result<Var<T>> {
        let (n, c, h, w) = nchw(self.shape(), "max_pool2d")?;
        if k == 0 || stride == 0 {
            return Err(arg_err!("max_pool2d needs k >= 1 and stride >= 1"));
        }
        if k > h || k > w {
            return Err(dim_err!("max_pool2d window {k} exceeds input {h}x{w}"));
        }
        if (h - k) % stride != 0 || (w - k) % stride != 0 {
            return Err(dim_err!(
                "max_pool2d window {k}, stride {stride} does not tile input {h}x{w}"
            ));
        }
        let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let xd = self.value().data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut arg = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    arg.push(best);
                }
            }
        }
        let len = self.value().len();
        Ok(Var::from_op(
            Tensor::from_parts(vec![n, c, ho, wo], out),
            vec![self.clone()],
            Box::new(move |go| {
                let mut dx = vec![T::zero(); len];
                for (&g, &i) in go.iter().zip(&arg) {
                    dx[i] += g;
                }
                vec![some(dx)]
            }),
        ))
    }

    /// Bilinear upsampling by an integer factor with half-pixel sample centers.
    pub fn upsample_bilinear(&self, factor: usize) -> Result<Var<T>> {
        if factor < 1 {
            return Err(arg_err!("upsample factor must be >= 1, got {factor}"));
        }
        let (_, _, h, w) = nchw(self.shape(), "upsample_bilinear")?;
        self.resize_bilinear(h * factor, w * factor)
    }

    /// Half-pixel bilinear resize of the two trailing axes of an `[N,C,H,W]` tensor.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Var<T>> {
        let (n, c, h, w) = nchw(self.shape(), "resize_bilinear")?;
        if out_h == 0 || out_w == 0 {
            return Err(arg_err!("resize target must be non-empty"));
        }
        if (out_h, out_w) == (h, w) {
            return Ok(self.identity());
        }
        let ty = ResizeTable::new(h, out_h);
        let tx = ResizeTable::new(w, out_w);
        let xd = self.value().data();
        let mut out = vec![T::zero(); n * c * out_h * out_w];
        for (src, dst) in xd.chunks_exact(h * w).zip(out.chunks_exact_mut(out_h * out_w)) {
            resize_bilinear_plane(src, w, &ty, &tx, dst);
        }
        Ok(Var::from_op(
            Tensor::from_parts(vec![n, c, out_h, out_w], out),
            vec![self.clone()],
            Box::new(move |go| {
                let mut dx = vec![T::zero(); n * c * h * w];
                for (g, d) in go.chunks_exact(out_h * out_w).zip(dx.chunks_exact_mut(h * w)) {
                    resize_bilinear_plane_backward(g, w, &ty, &tx, d);
                }
                vec![some(dx)]
            }),
        ))
    }

    fn identity(&self) -> Var<T> {
        Var::from_op(
            self.value().clone(),
            vec![self.clone()],
            Box::new(|go| vec![some(go.to_vec())]),
        )
    }

    /// Max-shifted exponential normalization along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(arg_err!("softmax axis {axis} invalid for shape {shape:?}"));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let y = softmax_axis(self.value().data(), outer, dim, inner);
        let value = Tensor::from_parts(shape, y);
        let yv = value.clone();
        Ok(Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |go| {
                let y = yv.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * dim * inner + i;
                        let mut dot = T::zero();
                        for d in 0..dim {
                            let j = base + d * inner;
                            dot += go[j] * y[j];
                        }
                        for d in 0..dim {
                            let j = base + d * inner;
                            dx[j] = y[j] * (go[j] - dot);
                        }
                    }
                }
                vec![some(dx)]
            }),
        ))
    }

    /// `[M,K]·[K,P] → [M,P]`.
    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        let (m, k) = match *self.shape() {
            [m, k] => (m, k),
            ref s => return Err(dim_err!("matmul lhs must be [M,K], got {s:?}")),
        };
        let p = match *other.shape() {
            [k2, p] if k2 == k => p,
            ref s => {
                return Err(dim_err!(
                    "matmul inner axes disagree: lhs {:?}, rhs {s:?}",
                    self.shape()
                ))
            }
        };
        let mut out = vec![T::zero(); m * p];
        gemm(m, k, p, self.value().data(), false, other.value().data(), false, T::zero(), &mut out);
        let (av, bv) = (self.value().clone(), other.value().clone());
        let need = [self.requires_grad(), other.requires_grad()];
        Ok(Var::from_op(
            Tensor::from_parts(vec![m, p], out),
            vec![self.clone(), other.clone()],
            Box::new(move |go| {
                let da = need[0].then(|| {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, p, k, go, false, bv.data(), true, T::zero(), &mut da);
                    da
                });
                let db = need[1].then(|| {
                    let mut db = vec![T::zero(); k * p];
                    gemm(k, m, p, av.data(), true, go, false, T::zero(), &mut db);
                    db
                });
                vec![da, db]
            }),
        ))
    }

    /// Transpose of a `[M,K]` matrix.
    pub fn transpose(&self) -> Result<Var<T>> {
        let (m, k) = match *self.shape() {
            [m, k] => (m, k),
            ref s => return Err(dim_err!("transpose expects a matrix, got {s:?}")),
        };
        let out = transpose_buf(self.value().data(), m, k);
        Ok(Var::from_op(
            Tensor::from_parts(vec![k, m], out),
            vec![self.clone()],
            Box::new(move |go| vec![some(transpose_buf(go, k, m))]),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let value = self.value().reshape(shape)?;
        Ok(Var::from_op(
            value,
            vec![self.clone()],
            Box::new(|go| vec![some(go.to_vec())]),
        ))
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(xs: &[Var<T>], axis: usize) -> Result<Var<T>> {
        let first = xs.first().ok_or_else(|| arg_err!("concat of zero tensors"))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(dim_err!("concat axis {axis} invalid for rank {rank}"));
        }
        for x in xs {
            let s = x.shape();
            let compatible = s.len() == rank
                && s.iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(a, (p, q))| a == axis || p == q);
            if !compatible {
                return Err(dim_err!(
                    "concat along axis {axis}: shape {s:?} incompatible with {:?}",
                    first.shape()
                ));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let dims: Vec<usize> = xs.iter().map(|x| x.shape()[axis]).collect();
        let total: usize = dims.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (x, &d) in xs.iter().zip(&dims) {
                out.extend_from_slice(&x.value().data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Var::from_op(
            Tensor::from_parts(shape, out),
            xs.to_vec(),
            Box::new(move |go| {
                let mut grads: Vec<Vec<T>> =
                    dims.iter().map(|&d| Vec::with_capacity(outer * d * inner)).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (g, &d) in grads.iter_mut().zip(&dims) {
                        g.extend_from_slice(&go[pos..pos + d * inner]);
                        pos += d * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let value = self.value().narrow(axis, start, len)?;
        let (outer, dim, inner) = split_axis(self.shape(), axis);
        Ok(Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |go| {
                let mut dx = vec![T::zero(); outer * dim * inner];
                for o in 0..outer {
                    let dst = o * dim * inner + start * inner;
                    dx[dst..dst + len * inner]
                        .copy_from_slice(&go[o * len * inner..(o + 1) * len * inner]);
                }
                vec![some(dx)]
            }),
        ))
    }

    /// Pointwise op. Binary kinds take equal shapes, or for `Add`/`Mul` a
    /// `[C]` right operand broadcast over an `[N,C,H,W]` left operand.
    pub fn elementwise(&self, kind: Elementwise, other: Option<&Var<T>>) -> Result<Var<T>> {
        match (kind, other) {
            (Elementwise::Relu, None) => Ok(self.relu()),
            (Elementwise::Relu, Some(_)) => Err(arg_err!("relu is unary")),
            (Elementwise::Add, Some(b)) => self.add(b),
            (Elementwise::Mul, Some(b)) => self.mul(b),
            (_, None) => Err(arg_err!("{kind:?} needs two operands")),
        }
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        if self.shape() == other.shape() {
            let out = zip_map(self.value().data(), other.value().data(), |a, b| a + b);
            return Ok(Var::from_op(
                Tensor::from_parts(self.shape().to_vec(), out),
                vec![self.clone(), other.clone()],
                Box::new(|go| vec![some(go.to_vec()), some(go.to_vec())]),
            ));
        }
        let (n, c, hw) = self.bias_pattern(other)?;
        let bd = other.value().data();
        let mut out = self.value().to_vec();
        for (i, chunk) in out.chunks_exact_mut(hw).enumerate() {
            let b = bd[i % c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        Ok(Var::from_op(
            Tensor::from_parts(self.shape().to_vec(), out),
            vec![self.clone(), other.clone()],
            Box::new(move |go| {
                let mut db = vec![T::zero(); c];
                for (i, chunk) in go.chunks_exact(hw).enumerate().take(n * c) {
                    db[i % c] += chunk.iter().copied().sum::<T>();
                }
                vec![some(go.to_vec()), some(db)]
            }),
        ))
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        let (av, bv) = (self.value().clone(), other.value().clone());
        if self.shape() == other.shape() {
            let out = zip_map(av.data(), bv.data(), |a, b| a * b);
            return Ok(Var::from_op(
                Tensor::from_parts(self.shape().to_vec(), out),
                vec![self.clone(), other.clone()],
                Box::new(move |go| {
                    vec![
                        some(zip_map(go, bv.data(), |g, b| g * b)),
                        some(zip_map(go, av.data(), |g, a| g * a)),
                    ]
                }),
            ));
        }
        let (_, c, hw) = self.bias_pattern(other)?;
        let mut out = av.to_vec();
        for (i, chunk) in out.chunks_exact_mut(hw).enumerate() {
            let b = bv.data()[i % c];
            chunk.iter_mut().for_each(|v| *v *= b);
        }
        Ok(Var::from_op(
            Tensor::from_parts(self.shape().to_vec(), out),
            vec![self.clone(), other.clone()],
            Box::new(move |go| {
                let mut da = go.to_vec();
                let mut db = vec![T::zero(); c];
                for (i, (g, a)) in da.chunks_exact_mut(hw).zip(av.data().chunks_exact(hw)).enumerate() {
                    let b = bv.data()[i % c];
                    db[i % c] += g.iter().zip(a).map(|(&g, &a)| g * a).sum::<T>();
                    g.iter_mut().for_each(|v| *v *= b);
                }
                vec![some(da), some(db)]
            }),
        ))
    }

    fn bias_pattern(&self, other: &Var<T>) -> Result<(usize, usize, usize)> {
        match (self.shape(), other.shape()) {
            (&[n, c, h, w], &[cb]) if cb == c => Ok((n, c, h * w)),
            (a, b) => Err(dim_err!("elementwise operands {a:?} and {b:?} are not compatible")),
        }
    }

    pub fn relu(&self) -> Var<T> {
        let xv = self.value().clone();
        let out = xv.data().iter().map(|&v| v.max(T::zero())).collect();
        Var::from_op(
            Tensor::from_parts(self.shape().to_vec(), out),
            vec![self.clone()],
            Box::new(move |go| {
                vec![some(zip_map(go, xv.data(), |g, x| {
                    if x > T::zero() {
                        g
                    } else {
                        T::zero()
                    }
                }))]
            }),
        )
    }

    pub fn scale(&self, s: T) -> Var<T> {
        let out = self.value().data().iter().map(|&v| v * s).collect();
        Var::from_op(
            Tensor::from_parts(self.shape().to_vec(), out),
            vec![self.clone()],
            Box::new(move |go| vec![some(go.iter().map(|&g| g * s).collect())]),
        )
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&self) -> Var<T> {
        let len = self.value().len();
        let total = self.value().data().iter().copied().sum();
        Var::from_op(
            Tensor::scalar(total),
            vec![self.clone()],
            Box::new(move |go| vec![some(vec![go[0]; len])]),
        )
    }

    pub fn mean(&self) -> Var<T> {
        let n = T::of_f64(self.value().len() as f64);
        self.sum().scale(T::one() / n)
    }
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn transpose_buf<T: Real>(x: &[T], m: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        for j in 0..k {
            out[j * m + i] = x[i * k + j];
        }
    }
    out
}
