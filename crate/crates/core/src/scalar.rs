//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Real scalar the tensor core and model are generic over.
///
/// Implemented for `f32` and `f64`. Gradient checking and the acceptance
/// targets run in `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn of_usize(n: usize) -> Self {
        Self::lit(n as f64)
    }

    /// Spacing between `self` and the next representable value of larger magnitude.
    fn ulp(self) -> Self;

    /// `c += a · b` for an `m×k` by `k×n` product; each matrix is given by
    /// its slice and (row, column) strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        c: &mut [Self],
        c_strides: (isize, isize),
    );
}

macro_rules! check_gemm_bounds {
    ($m:expr, $k:expr, $n:expr, $a:expr, $sa:expr, $b:expr, $sb:expr, $c:expr, $sc:expr) => {{
        let extent = |rows: usize, cols: usize, (rs, cs): (isize, isize)| {
            (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
        };
        assert!($sa.0 >= 0 && $sa.1 >= 0 && $sb.0 >= 0 && $sb.1 >= 0 && $sc.0 >= 0 && $sc.1 >= 0);
        assert!($a.len() >= extent($m, $k, $sa), "gemm: lhs too short");
        assert!($b.len() >= extent($k, $n, $sb), "gemm: rhs too short");
        assert!($c.len() >= extent($m, $n, $sc), "gemm: output too short");
    }};
}

impl Scalar for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn ulp(self) -> Self {
        let a = self.abs();
        if !a.is_finite() {
            return f64::NAN;
        }
        f64::from_bits(a.to_bits() + 1) - a
    }

    fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (isize, isize), b: &[f64], sb: (isize, isize), c: &mut [f64], sc: (isize, isize)) {
        if m == 0 || n == 0 || k == 0 {
            return;
        }
        check_gemm_bounds!(m, k, n, a, sa, b, sb, c, sc);
        // SAFETY: the bounds check above covers every element the kernel reads or writes.
        unsafe {
            matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, 1.0, c.as_mut_ptr(), sc.0, sc.1);
        }
    }
}

impl Scalar for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn ulp(self) -> Self {
        let a = self.abs();
        if !a.is_finite() {
            return f32::NAN;
        }
        f32::from_bits(a.to_bits() + 1) - a
    }

    fn gemm(m: usize, k: usize, n: usize, a: &[f32], sa: (isize, isize), b: &[f32], sb: (isize, isize), c: &mut [f32], sc: (isize, isize)) {
        if m == 0 || n == 0 || k == 0 {
            return;
        }
        check_gemm_bounds!(m, k, n, a, sa, b, sb, c, sc);
        // SAFETY: the bounds check above covers every element the kernel reads or writes.
        unsafe {
            matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, 1.0, c.as_mut_ptr(), sc.0, sc.1);
        }
    }
}
