//! Dense row-major matrices and the scalar abstraction the tagger is written
//! against. Training runs in `f32`; gradient checks run the same code in `f64`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

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
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a·b + beta * c` with arbitrary strides (see `matrixmultiply`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: callers pass slices whose extents cover the strided
                // index ranges; `Mat` helpers below check this in debug builds.
                unsafe {
                    $f(
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
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }
}

/// `x (n×k) · w (k×m) + bias` → n×m.
pub fn linear<T: Scalar>(x: &Mat<T>, w: &[T], bias: &[T], out_cols: usize) -> Mat<T> {
    let (n, k) = (x.rows, x.cols);
    debug_assert_eq!(w.len(), k * out_cols);
    debug_assert_eq!(bias.len(), out_cols);
    let mut out = Mat::zeros(n, out_cols);
    for r in 0..n {
        out.row_mut(r).copy_from_slice(bias);
    }
    T::gemm(
        n,
        k,
        out_cols,
        T::one(),
        &x.data,
        k as isize,
        1,
        w,
        out_cols as isize,
        1,
        T::one(),
        &mut out.data,
        out_cols as isize,
        1,
    );
    out
}

/// Backward of [`linear`]: accumulates `dw += xᵀ·dy`, `db += Σ dy` and returns `dx = dy·wᵀ`.
pub fn linear_backward<T: Scalar>(
    x: &Mat<T>,
    w: &[T],
    dy: &Mat<T>,
    dw: &mut [T],
    db: &mut [T],
) -> Mat<T> {
    let (n, k, m) = (x.rows, x.cols, dy.cols);
    debug_assert_eq!(dy.rows, n);
    // dw (k×m) += xᵀ (k×n) · dy (n×m)
    T::gemm(
        k,
        n,
        m,
        T::one(),
        &x.data,
        1,
        k as isize,
        &dy.data,
        m as isize,
        1,
        T::one(),
        dw,
        m as isize,
        1,
    );
    for r in 0..n {
        for (acc, &g) in db.iter_mut().zip(dy.row(r)) {
            *acc += g;
        }
    }
    let mut dx = Mat::zeros(n, k);
    // dx (n×k) = dy (n×m) · wᵀ (m×k)
    T::gemm(
        n,
        m,
        k,
        T::one(),
        &dy.data,
        m as isize,
        1,
        w,
        1,
        m as isize,
        T::zero(),
        &mut dx.data,
        k as isize,
        1,
    );
    dx
}
