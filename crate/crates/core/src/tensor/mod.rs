//! Dense row-major tensors and reverse-mode automatic differentiation.
//!
//! [`Tensor`] is an immutable value (shape plus shared data). [`Var`] wraps a
//! tensor as a node of the compute graph; operations on `Var`s record a
//! backward closure whenever any input requires a gradient, and
//! [`Var::backward`] walks the recorded graph in reverse topological order.

mod autograd;
mod file;
mod gradcheck;
mod kernels;
mod ops;

use std::fmt;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use crate::error::{dim_err, Result};

pub use autograd::Var;
pub use ops::Elementwise;
pub use file::{read_ten, write_ten, TenData};
pub use gradcheck::{grad_check, GradCheckReport};
pub use kernels::{resize_bilinear_plane, ResizeTable};

/// Element type tag, shared with the `.ten` file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U8 = 2,
}

/// Floating-point element type usable by tensors: `f32` for training and
/// inference, `f64` for verification runs.
pub trait Real:
    num_traits::Float
    + Copy
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + std::iter::Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const DTYPE: DType;

    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a·b + beta * c` with arbitrary strides.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-aliasing (for `c`)
    /// memory regions of the given dimensions.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    fn of_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    fn of_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Dense row-major tensor. Cloning is cheap: the data buffer is shared.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<[T]>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, "{:?}", &self.data[..])
        } else {
            write!(f, "{:?}..", &self.data[..SHOWN])
        }
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        validate_shape(shape)?;
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(dim_err!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                len,
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: data.into(),
        })
    }

    /// Constructor for buffers whose length is known to be correct.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced for shape {shape:?}"
        );
        Self {
            shape,
            data: data.into(),
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; len])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::of_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Converts element type (used to move between verification and training precision).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        if shape.iter().product::<usize>() != self.len() {
            return Err(dim_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Copies `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(dim_err!("axis {axis} out of range for shape {:?}", self.shape));
        }
        if len == 0 || start + len > self.shape[axis] {
            return Err(dim_err!(
                "slice [{start}, {}) exceeds axis {axis} of length {}",
                start + len,
                self.shape[axis]
            ));
        }
        let (outer, dim, inner) = split_axis(&self.shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self::from_parts(shape, out))
    }

    /// Index of the largest element along `axis` (first on ties), with that axis removed.
    pub fn argmax_axis(&self, axis: usize) -> Result<Vec<usize>> {
        if axis >= self.rank() {
            return Err(dim_err!("axis {axis} out of range for shape {:?}", self.shape));
        }
        let (outer, dim, inner) = split_axis(&self.shape, axis);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * dim * inner + i;
                let mut best = 0;
                let mut best_v = self.data[base];
                for d in 1..dim {
                    let v = self.data[base + d * inner];
                    if v > best_v {
                        best_v = v;
                        best = d;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(dim_err!("shape {shape:?} must have positive dimensions"));
    }
    Ok(())
}

/// Splits a shape into (product before axis, axis length, product after axis).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Shape check for `[N, C, H, W]` tensors.
pub(crate) fn nchw(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(dim_err!("{what} expects a [N,C,H,W] tensor, got {shape:?}")),
    }
}
