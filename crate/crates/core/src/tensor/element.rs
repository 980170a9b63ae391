use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the engine can run on.
///
/// Training uses `f32`; gradient checks switch the whole model to `f64`.
pub trait Element:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    /// General strided matrix multiply `C = alpha * A * B + beta * C`.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must be
    /// in bounds for the corresponding pointer.
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

    /// Hyperbolic tangent used by every kernel. `f64` calls the libm routine;
    /// `f32` uses a clamped rational approximation that stays strictly inside
    /// (-1, 1).
    #[inline]
    fn tanh_k(self) -> Self {
        self.tanh()
    }

    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every float element")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("float element converts to f64")
    }
}

impl Element for f32 {
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
        unsafe {
            matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
        }
    }

    #[inline]
    fn tanh_k(self) -> f32 {
        tanh_f32(self)
    }
}

/// Rational minimax approximation of tanh on [-7.9053, 7.9053], clamped
/// outside. Absolute error is a few ulp and |result| < 1 for finite input.
#[inline]
pub fn tanh_f32(x: f32) -> f32 {
    const CLAMP: f32 = 7.905_311;
    if x.abs() < 4e-4 {
        return x;
    }
    let x = x.clamp(-CLAMP, CLAMP);
    let x2 = x * x;
    let mut p = -2.760_768_5e-16f32;
    p = p * x2 + 2.000_187_9e-13;
    p = p * x2 - 8.604_672e-11;
    p = p * x2 + 5.122_297e-8;
    p = p * x2 + 1.485_722_4e-5;
    p = p * x2 + 6.372_619_3e-4;
    p = p * x2 + 4.893_524_6e-3;
    let p = p * x;
    let mut q = 1.198_258_4e-6f32;
    q = q * x2 + 1.185_347_1e-4;
    q = q * x2 + 2.268_434_6e-3;
    q = q * x2 + 4.893_525e-3;
    // Largest f32 below one.
    const ONE_MINUS: f32 = 1.0 - f32::EPSILON / 2.0;
    (p / q).clamp(-ONE_MINUS, ONE_MINUS)
}

impl Element for f64 {
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
        unsafe {
            matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
        }
    }
}
