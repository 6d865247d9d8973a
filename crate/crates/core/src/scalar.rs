use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type for every tensor, model and loss in the crate.
///
/// Implemented for `f32` and `f64`. The dense matrix kernel dispatches to the
/// matching `matrixmultiply` routine.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Number of bytes in the little-endian encoding.
    const BYTES: usize;

    /// Lossy conversion from `f64`. Never fails for finite inputs.
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = alpha * a @ b + beta * c` over strided row/column layouts.
    ///
    /// Strides are in elements. The caller guarantees every addressed element
    /// lies inside the given slices.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );
}

fn extent(rows: usize, cols: usize, strides: (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows as isize - 1) as usize * strides.0.unsigned_abs()
        + (cols as isize - 1) as usize * strides.1.unsigned_abs()
        + 1
}

macro_rules! impl_scalar {
    ($t:ty, $bytes:expr, $kernel:ident) => {
        impl Scalar for $t {
            const BYTES: usize = $bytes;

            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                assert!(a.len() >= extent(m, k, a_strides), "gemm: lhs out of bounds");
                assert!(b.len() >= extent(k, n, b_strides), "gemm: rhs out of bounds");
                assert!(c.len() >= extent(m, n, c_strides), "gemm: output out of bounds");
                assert!(c_strides.0 >= 0 && c_strides.1 >= 0);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: extents checked above, strides are non-negative for
                // all layouts produced inside this crate.
                unsafe {
                    matrixmultiply::$kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, 4, sgemm);
impl_scalar!(f64, 8, dgemm);
