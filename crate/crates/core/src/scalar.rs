//! Floating-point scalar abstraction shared by the model, optimizer and diagnostics.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// A real scalar the transformer can be instantiated over.
///
/// Implemented for `f32` and `f64`. Besides the usual float arithmetic the
/// trait carries a strided general matrix multiply so the generic model code
/// still reaches a blocked GEMM kernel for both widths.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Short dtype tag written into checkpoint headers.
    const DTYPE: &'static str;

    /// `C <- alpha * A B + beta * C` on strided row/column layouts.
    ///
    /// # Safety
    /// Pointers and strides must describe in-bounds `m x k`, `k x n` and
    /// `m x n` matrices; `c` must not alias `a` or `b`.
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

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn from_usize_lossy(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize conversion")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

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

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

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

/// Borrowed strided view of a matrix stored inside a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, F> {
    pub data: &'a [F],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, F: Scalar> MatRef<'a, F> {
    /// Dense row-major `rows x cols` matrix starting at `offset`.
    pub fn dense(data: &'a [F], offset: usize, rows: usize, cols: usize) -> Self {
        Self { data, offset, rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    fn check(&self) {
        if self.rows == 0 || self.cols == 0 {
            return;
        }
        let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
        assert!(last < self.data.len(), "matrix view out of bounds");
    }
}

/// Mutable counterpart of [`MatRef`].
pub(crate) struct MatMut<'a, F> {
    pub data: &'a mut [F],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, F: Scalar> MatMut<'a, F> {
    pub fn dense(data: &'a mut [F], offset: usize, rows: usize, cols: usize) -> Self {
        Self { data, offset, rows, cols, rs: cols, cs: 1 }
    }
}

/// `out <- a b + beta * out`, with `beta` either zero (overwrite) or one (accumulate).
pub(crate) fn gemm<F: Scalar>(a: MatRef<'_, F>, b: MatRef<'_, F>, out: MatMut<'_, F>, accumulate: bool) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!(a.rows, out.rows, "row count differs");
    assert_eq!(b.cols, out.cols, "column count differs");
    a.check();
    b.check();
    if out.rows == 0 || out.cols == 0 {
        return;
    }
    let last = out.offset + (out.rows - 1) * out.rs + (out.cols - 1) * out.cs;
    assert!(last < out.data.len(), "output view out of bounds");
    let beta = if accumulate { F::one() } else { F::zero() };
    if a.cols == 0 {
        if !accumulate {
            for r in 0..out.rows {
                for c in 0..out.cols {
                    out.data[out.offset + r * out.rs + c * out.cs] = F::zero();
                }
            }
        }
        return;
    }
    // SAFETY: all three views were bounds-checked above and `out` is a unique borrow.
    unsafe {
        F::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            F::one(),
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            out.data.as_mut_ptr().add(out.offset),
            out.rs as isize,
            out.cs as isize,
        );
    }
}
