//! Dense 4-D tensors and the forward/backward numeric kernels.
//!
//! Every kernel is a pure function of its inputs. Where a kernel fans out
//! over batch elements or channels, each output element is still produced by
//! one fixed sequence of operations, so serial and parallel execution agree
//! bit for bit.

mod conv;
mod elementwise;
mod norm;
mod pool;

pub use conv::{conv2d, conv2d_backward, conv2d_forward, ConvGeom, ConvGrads, ConvParams};
pub use elementwise::{
    activation, activation_backward, binary, binary_backward, concat_channels, gate,
    gate_backward, narrow_channels, softmax, split_channels, Activation, BinaryOp,
};
pub use norm::{
    batch_norm, batch_norm_infer, batch_norm_infer_backward, batch_norm_train,
    batch_norm_train_backward, layer_norm_channels, layer_norm_channels_backward,
    BatchNormParams, BnMode, BnTrainSaved, LayerNormSaved,
};
pub use pool::{
    adaptive_avg_pool_1x1, channel_shuffle, channel_shuffle_backward, global_avg_pool,
    global_avg_pool_backward, shuffle_source_index,
};

use std::fmt;
use std::iter::Sum;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{invalid, Result};

/// Element type tag, also used as the on-disk dtype code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

/// Floating-point element type of a [`Tensor`].
///
/// `f32` is the working precision. `f64` exists for gradient and
/// re-parameterization verification.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + Sum
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    const DTYPE: DType;

    /// Lossy conversion from `f64`.
    fn c(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn erf(self) -> Self;

    /// `C = alpha * A * B + beta * C` on strided row/column-major views.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-overlapping
    /// `m x k`, `k x n` and `m x n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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

    fn write_le(self, out: &mut Vec<u8>);
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn c(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn erf(self) -> Self {
        libm::erff(self)
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn c(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn erf(self) -> Self {
        libm::erf(self)
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

/// Row-major `C = A * B` (or `C += A * B` when `accumulate`), all contiguous.
///
/// `a_t`/`b_t` read `A`/`B` as transposed views of contiguous storage.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the length assertions above cover every index the strides reach.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
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
        )
    }
}

/// `(batch, channels, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    /// Shape of a batch of flat feature vectors, stored as `(n, len, 1, 1)`.
    pub const fn vector(n: usize, len: usize) -> Self {
        Self::new(n, len, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn with_c(&self, c: usize) -> Self {
        Self { c, ..*self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense row-major `(B, C, H, W)` array.
///
/// Storage is shared copy-on-write: cloning is O(1) and the first mutable
/// access of a shared tensor copies it. Tapes hold parameters by clone, so
/// this keeps building a tape independent of the model size.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<_> = self.data.iter().take(8).collect();
        write!(f, "Tensor({}, {:?}", self.shape, head)?;
        if self.data.len() > 8 {
            write!(f, " ..")?;
        }
        write!(f, ")")
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: Arc::new(vec![T::zero(); shape.numel()]),
        }
    }

    pub fn full(shape: Shape, v: T) -> Self {
        Self {
            shape,
            data: Arc::new(vec![v; shape.numel()]),
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(invalid(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: Shape::new(1, 1, 1, 1),
            data: Arc::new(vec![v]),
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let s = self.shape;
        self.data[((n * s.c + c) * s.h + y) * s.w + x]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let s = self.shape;
        Arc::make_mut(&mut self.data)[((n * s.c + c) * s.h + y) * s.w + x] = v;
    }

    /// The `H x W` plane of sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let off = (n * self.shape.c + c) * p;
        &self.data[off..off + p]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(invalid(format!("cannot reshape {} into {shape}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|v| U::c(v.as_f64())).collect()),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Samples `[start, start + len)` of the batch.
    pub fn batch_slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.shape.n {
            return Err(invalid(format!(
                "batch slice {start}..{} out of range for {}",
                start + len,
                self.shape
            )));
        }
        let per = self.shape.c * self.shape.plane();
        Ok(Self {
            shape: Shape { n: len, ..self.shape },
            data: Arc::new(self.data[start * per..(start + len) * per].to_vec()),
        })
    }

    /// Stacks equal-shaped tensors along the batch axis.
    pub fn stack_batch(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("stack_batch needs at least one tensor"))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.numel() * parts.len());
        let mut n = 0;
        for p in parts {
            if (p.shape.c, p.shape.h, p.shape.w) != (s.c, s.h, s.w) {
                return Err(invalid(format!("stack_batch: {} vs {}", p.shape, s)));
            }
            n += p.shape.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: Shape { n, ..s },
            data: Arc::new(data),
        })
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in Arc::make_mut(&mut self.data).iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    #[inline]
    pub(crate) fn debug_check_finite(&self, what: &str) {
        debug_assert!(self.all_finite(), "non-finite values produced by {what}");
    }
}

pub(crate) fn same_shape(a: Shape, b: Shape, what: &str) -> Result<()> {
    if a != b {
        return Err(invalid(format!("{what}: shape {a} does not match {b}")));
    }
    Ok(())
}
