//! Slice-level numeric kernels shared by the differentiable ops and by the
//! raster code in `tiling`.

use super::Real;

/// `c = op(a)·op(b) + beta·c` for row-major contiguous operands.
///
/// `a` is stored `[m,k]` (or `[k,m]` when `ta`), `b` is stored `[k,n]` (or
/// `[n,k]` when `tb`) and `c` is `[m,n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths were checked above and `c` is a unique borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one `[Cin,H,W]` image into `[Cin·kh·kw, Ho·Wo]` patch columns.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let npix = g.cols();
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into a `[Cin,H,W]` image.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let npix = g.cols();
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Per-axis sampling table for half-pixel bilinear resizing.
#[derive(Debug, Clone)]
pub struct ResizeTable {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl ResizeTable {
    /// Maps `out` output samples onto `input` source samples; the source
    /// coordinate of output `d` is `(d + 0.5)·input/out − 0.5`, clamped at 0.
    pub fn new(input: usize, out: usize) -> Self {
        let scale = input as f64 / out as f64;
        let mut lo = Vec::with_capacity(out);
        let mut hi = Vec::with_capacity(out);
        let mut frac = Vec::with_capacity(out);
        for d in 0..out {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = if i0 + 1 < input { i0 + 1 } else { i0 };
            lo.push(i0);
            hi.push(i1);
            frac.push(if i1 == i0 { 0.0 } else { src - i0 as f64 });
        }
        Self { lo, hi, frac }
    }

    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }
}

/// Bilinear resize of one `h×w` plane to `out_h×out_w`.
pub fn resize_bilinear_plane<T: Real>(
    src: &[T],
    w: usize,
    ty: &ResizeTable,
    tx: &ResizeTable,
    dst: &mut [T],
) {
    let out_w = tx.len();
    for (oy, row) in dst.chunks_exact_mut(out_w).enumerate() {
        let fy = T::of_f64(ty.frac[oy]);
        let r0 = &src[ty.lo[oy] * w..][..w];
        let r1 = &src[ty.hi[oy] * w..][..w];
        for (ox, v) in row.iter_mut().enumerate() {
            let fx = T::of_f64(tx.frac[ox]);
            let (x0, x1) = (tx.lo[ox], tx.hi[ox]);
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
            *v = top + (bot - top) * fy;
        }
    }
}

/// Adjoint of [`resize_bilinear_plane`].
pub(crate) fn resize_bilinear_plane_backward<T: Real>(
    grad_out: &[T],
    w: usize,
    ty: &ResizeTable,
    tx: &ResizeTable,
    grad_src: &mut [T],
) {
    let out_w = tx.len();
    for (oy, row) in grad_out.chunks_exact(out_w).enumerate() {
        let fy = T::of_f64(ty.frac[oy]);
        let (y0, y1) = (ty.lo[oy], ty.hi[oy]);
        for (ox, &g) in row.iter().enumerate() {
            let fx = T::of_f64(tx.frac[ox]);
            let (x0, x1) = (tx.lo[ox], tx.hi[ox]);
            let gt = g * (T::one() - fy);
            let gb = g * fy;
            grad_src[y0 * w + x0] += gt * (T::one() - fx);
            grad_src[y0 * w + x1] += gt * fx;
            grad_src[y1 * w + x0] += gb * (T::one() - fx);
            grad_src[y1 * w + x1] += gb * fx;
        }
    }
}

/// Softmax over the middle axis of an `[outer, dim, inner]` buffer.
pub(crate) fn softmax_axis<T: Real>(x: &[T], outer: usize, dim: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * dim * inner + i;
            let mut max = x[base];
            for d in 1..dim {
                max = max.max(x[base + d * inner]);
            }
            let mut sum = T::zero();
            for d in 0..dim {
                let e = (x[base + d * inner] - max).exp();
                out[base + d * inner] = e;
                sum += e;
            }
            let inv = T::one() / sum;
            for d in 0..dim {
                out[base + d * inner] *= inv;
            }
        }
    }
    out
}
