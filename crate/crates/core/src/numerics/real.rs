//! Scalar abstraction over `f32`/`f64`.
//!
//! All tensor and model code is generic over [`Real`] so the same graph can
//! run in 32-bit for training and 64-bit for gradient verification. Under
//! `no_std` the transcendental functions come from `libm`.

use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Real:
    Copy
    + PartialOrd
    + PartialEq
    + Debug
    + Display
    + Default
    + Sum
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(n: usize) -> Self {
        Self::from_f64(n as f64)
    }

    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn tanh(self) -> Self;
    fn is_finite(self) -> bool;

    fn max(self, other: Self) -> Self {
        if self > other {
            self
        } else {
            other
        }
    }
    fn min(self, other: Self) -> Self {
        if self < other {
            self
        } else {
            other
        }
    }

    /// `c = alpha * op(a) * op(b) + beta * c` over row-major matrices.
    ///
    /// `a` is m x k and `b` is k x n after the optional transposes.
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        ta: bool,
        b: &[Self],
        tb: bool,
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path, $exp:path, $ln:path, $sqrt:path, $tanh:path, $fabs:path) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }

            #[cfg(feature = "std")]
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[cfg(not(feature = "std"))]
            #[inline]
            fn abs(self) -> Self {
                $fabs(self)
            }

            #[cfg(feature = "std")]
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[cfg(not(feature = "std"))]
            #[inline]
            fn sqrt(self) -> Self {
                $sqrt(self)
            }

            #[cfg(feature = "std")]
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[cfg(not(feature = "std"))]
            #[inline]
            fn exp(self) -> Self {
                $exp(self)
            }

            #[cfg(feature = "std")]
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[cfg(not(feature = "std"))]
            #[inline]
            fn ln(self) -> Self {
                $ln(self)
            }

            #[inline]
            fn powi(self, n: i32) -> Self {
                let mut out: $t = 1.0;
                let mut base = if n < 0 { 1.0 / self } else { self };
                let mut e = n.unsigned_abs();
                while e > 0 {
                    if e & 1 == 1 {
                        out *= base;
                    }
                    base *= base;
                    e >>= 1;
                }
                out
            }

            #[cfg(feature = "std")]
            #[inline]
            fn tanh(self) -> Self {
                self.tanh()
            }
            #[cfg(not(feature = "std"))]
            #[inline]
            fn tanh(self) -> Self {
                $tanh(self)
            }

            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                ta: bool,
                b: &[Self],
                tb: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert_eq!(a.len(), m * k, "gemm: lhs size");
                assert_eq!(b.len(), k * n, "gemm: rhs size");
                assert_eq!(c.len(), m * n, "gemm: out size");
                if m == 0 || n == 0 || k == 0 {
                    if beta == 0.0 {
                        c.fill(0.0);
                    } else if beta != 1.0 {
                        c.iter_mut().for_each(|v| *v *= beta);
                    }
                    return;
                }
                // Transposition is expressed through the stride pair handed
                // to the kernel: a transposed operand keeps its storage and
                // swaps row/column strides.
                let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
                unsafe {
                    $gemm(
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
        }
    };
}

impl_real!(
    f32,
    matrixmultiply::sgemm,
    libm::expf,
    libm::logf,
    libm::sqrtf,
    libm::tanhf,
    libm::fabsf
);
impl_real!(
    f64,
    matrixmultiply::dgemm,
    libm::exp,
    libm::log,
    libm::sqrt,
    libm::tanh,
    libm::fabs
);

/// Reference matrix multiply used to cross-check the gemm kernel.
pub fn naive_gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
) {
    let at = |i: usize, j: usize| if ta { a[j * m + i] } else { a[i * k + j] };
    let bt = |i: usize, j: usize| if tb { b[j * k + i] } else { b[i * n + j] };
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::ZERO;
            for p in 0..k {
                acc += at(i, p) * bt(p, j);
            }
            c[i * n + j] = acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use alloc::vec;

    #[test]
    fn gemm_matches_naive_reference() {
        let mut rng = RngStream::new(11);
        for &(m, k, n, ta, tb) in &[
            (3usize, 4usize, 5usize, false, false),
            (4, 3, 2, true, false),
            (2, 5, 3, false, true),
            (6, 2, 6, true, true),
            (1, 1, 1, false, false),
        ] {
            let a: vec::Vec<f64> = (0..m * k).map(|_| rng.uniform_f64() - 0.5).collect();
            let b: vec::Vec<f64> = (0..k * n).map(|_| rng.uniform_f64() - 0.5).collect();
            let mut c = vec![0.0f64; m * n];
            let mut c_ref = vec![0.0f64; m * n];
            f64::gemm(m, k, n, 1.0, &a, ta, &b, tb, 0.0, &mut c);
            naive_gemm(m, k, n, &a, ta, &b, tb, &mut c_ref);
            for (x, y) in c.iter().zip(&c_ref) {
                assert!((x - y).abs() < 1e-12, "gemm mismatch: {x} vs {y}");
            }
        }
    }

    #[test]
    fn powi_matches_repeated_multiplication() {
        let x = 0.9f64;
        let mut acc = 1.0;
        for n in 0..12 {
            assert!((Real::powi(x, n) - acc).abs() < 1e-12);
            acc *= x;
        }
        assert!((Real::powi(2.0f64, -2) - 0.25).abs() < 1e-15);
    }
}
