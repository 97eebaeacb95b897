//! Dense rank-4 tensors in `(N, C, H, W)` row-major layout.
//!
//! Every value in the crate is a [`Tensor4`]: matrices are stored as
//! `(rows, cols, 1, 1)` and scalars as `(1, 1, 1, 1)`. Broadcasting is
//! one-directional: the right operand may have extent 1 on any axis where the
//! left operand is larger.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating point element type. Implemented for `f32` and `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + Sum
    + 'static
{
    const NAME: &'static str;

    /// Raw strided GEMM, `c <- alpha * a * b + beta * c`.
    ///
    /// # Safety
    /// The pointers and strides must describe valid `m x k`, `k x n` and
    /// `m x n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion to f64")
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major GEMM on contiguous slices: `c <- alpha * op(a) * op(b) + beta * c`
/// where `op(a)` is `m x k`, `op(b)` is `k x n` and `c` is `m x n`.
///
/// With `trans_a` the slice `a` holds a `k x m` matrix, likewise for `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths were checked above and the strides address exactly the
    // declared matrix extents.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
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

/// Extents of a rank-4 tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const SCALAR: Shape4 = Shape4::new(1, 1, 1, 1);

    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    pub const fn matrix(rows: usize, cols: usize) -> Self {
        Shape4::new(rows, cols, 1, 1)
    }

    pub fn from_dims(d: [usize; 4]) -> Self {
        Shape4::new(d[0], d[1], d[2], d[3])
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements per batch instance.
    pub fn instance_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Whether `other` can be broadcast onto `self`.
    pub fn accepts_broadcast(&self, other: &Shape4) -> bool {
        self.dims()
            .iter()
            .zip(other.dims())
            .all(|(&s, o)| o == s || o == 1)
    }

    /// Shape left after reducing `axes` with keepdim semantics.
    pub fn reduced(&self, axes: Axes) -> Shape4 {
        let mut d = self.dims();
        for (i, r) in axes.0.iter().enumerate() {
            if *r {
                d[i] = 1;
            }
        }
        Shape4::from_dims(d)
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Set of reduction axes over `(N, C, H, W)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Axes(pub [bool; 4]);

impl Axes {
    pub const C: Axes = Axes([false, true, false, false]);
    pub const HW: Axes = Axes([false, false, true, true]);
    pub const CHW: Axes = Axes([false, true, true, true]);
    pub const NHW: Axes = Axes([true, false, true, true]);

    pub fn count(&self, shape: Shape4) -> usize {
        shape
            .dims()
            .iter()
            .zip(self.0)
            .filter(|(_, r)| *r)
            .map(|(d, _)| *d)
            .product()
    }
}

/// Dense rank-4 tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn new(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::invalid(
                "Tensor4::new",
                format!("{} elements for shape {shape}", data.len()),
            ));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn zeros(shape: Shape4) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape4) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: Shape4, v: T) -> Self {
        Tensor4 {
            shape,
            data: vec![v; shape.numel()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self::full(Shape4::SCALAR, v)
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor4 { shape, data }
    }

    pub fn from_f64(shape: Shape4, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let s = self.shape;
        ((n * s.c + c) * s.h + h) * s.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> T {
        debug_assert!(self.shape.is_scalar());
        self.data[0]
    }

    /// Contiguous slice for batch instance `n`.
    pub fn instance(&self, n: usize) -> &[T] {
        let len = self.shape.instance_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn instance_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.shape.instance_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn reshape(&self, shape: Shape4) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::shape("reshape", self.shape, shape));
        }
        Ok(Tensor4 {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn into_shape(self, shape: Shape4) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::shape("reshape", self.shape, shape));
        }
        Ok(Tensor4 {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(T) -> T) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    /// Elementwise combination of two equally shaped tensors.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", self.shape, other.shape));
        }
        Ok(Tensor4 {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("axpy", self.shape, other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.len()).unwrap()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Elementwise `f(self, other)` where `other` broadcasts onto `self`.
    pub fn broadcast_zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        let s = self.shape;
        let o = other.shape;
        if !s.accepts_broadcast(&o) {
            return Err(Error::shape("broadcast", s, o));
        }
        if s == o {
            return self.zip_map(other, f);
        }
        let strides = broadcast_strides(o);
        let mut data = Vec::with_capacity(s.numel());
        for n in 0..s.n {
            for c in 0..s.c {
                for h in 0..s.h {
                    let base = n * strides[0] + c * strides[1] + h * strides[2];
                    let row = &self.data[((n * s.c + c) * s.h + h) * s.w..][..s.w];
                    for (w, &a) in row.iter().enumerate() {
                        data.push(f(a, other.data[base + w * strides[3]]));
                    }
                }
            }
        }
        Ok(Tensor4 { shape: s, data })
    }

    /// Sum over the axes where `target` has extent 1, the adjoint of broadcasting.
    pub fn sum_to_shape(&self, target: Shape4) -> Result<Self> {
        let s = self.shape;
        if !s.accepts_broadcast(&target) {
            return Err(Error::shape("sum_to_shape", s, target));
        }
        if s == target {
            return Ok(self.clone());
        }
        let strides = broadcast_strides(target);
        let mut out = Tensor4::zeros(target);
        for n in 0..s.n {
            for c in 0..s.c {
                for h in 0..s.h {
                    let base = n * strides[0] + c * strides[1] + h * strides[2];
                    let row = &self.data[((n * s.c + c) * s.h + h) * s.w..][..s.w];
                    for (w, &a) in row.iter().enumerate() {
                        let t = &mut out.data[base + w * strides[3]];
                        *t = *t + a;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Mean over `axes`, keeping reduced axes with extent 1.
    pub fn reduce_mean(&self, axes: Axes) -> Self {
        let target = self.shape.reduced(axes);
        let count = T::from_usize(axes.count(self.shape)).unwrap();
        let mut out = self
            .sum_to_shape(target)
            .expect("reduced shape always broadcasts");
        out.map_inplace(|v| v / count);
        out
    }

    /// Reorder batch instances: output instance `i` is input instance `perm[i]`.
    pub fn gather_batch(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.shape.n || perm.iter().any(|&p| p >= self.shape.n) {
            return Err(Error::invalid(
                "gather_batch",
                format!("index list of length {} for batch {}", perm.len(), self.shape.n),
            ));
        }
        let mut data = Vec::with_capacity(self.len());
        for &p in perm {
            data.extend_from_slice(self.instance(p));
        }
        Ok(Tensor4 {
            shape: self.shape,
            data,
        })
    }

    /// Adjoint of [`gather_batch`](Self::gather_batch).
    pub fn scatter_add_batch(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.shape.n {
            return Err(Error::invalid(
                "scatter_add_batch",
                format!("index list of length {} for batch {}", perm.len(), self.shape.n),
            ));
        }
        let mut out = Tensor4::zeros(self.shape);
        for (i, &p) in perm.iter().enumerate() {
            for (o, &g) in out.instance_mut(p).iter_mut().zip(self.instance(i)) {
                *o = *o + g;
            }
        }
        Ok(out)
    }
}

fn broadcast_strides(shape: Shape4) -> [usize; 4] {
    let d = shape.dims();
    let full = [d[1] * d[2] * d[3], d[2] * d[3], d[3], 1];
    let mut s = [0; 4];
    for i in 0..4 {
        s[i] = if d[i] == 1 { 0 } else { full[i] };
    }
    s
}
