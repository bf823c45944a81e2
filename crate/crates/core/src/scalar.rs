//! Floating-point element trait so the engine monomorphizes over f32/f64.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Element type of tensors. Everything the engine needs from a float:
/// arithmetic (via `num_traits::Float`), f64 round-trips for oracles and
/// reporting, little-endian byte round-trips for artifact files, a standard
/// normal sampler, and a GEMM kernel.
pub trait Scalar:
    num_traits::Float + core::fmt::Debug + core::fmt::Display + 'static
{
    /// Element size in bytes inside artifact files.
    const BYTE_WIDTH: usize;
    /// Tag stored in artifact manifests ("f32" or "f64").
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;

    fn write_le(self, out: &mut [u8]);
    fn read_le(raw: &[u8]) -> Self;

    /// One draw from the standard normal distribution.
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// `c = alpha * a @ b + beta * c` for row-major-strided matrices;
    /// dimensions are `a: m x k`, `b: k x n`, `c: m x n`. Strides are in
    /// elements, (row stride, column stride) per matrix, so transposed
    /// operands are expressed by swapping strides instead of copying.
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

impl Scalar for f32 {
    const BYTE_WIDTH: usize = 4;
    const DTYPE: &'static str = "f32";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn into_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn write_le(self, out: &mut [u8]) {
        out.copy_from_slice(&self.to_le_bytes());
    }

    #[inline]
    fn read_le(raw: &[u8]) -> Self {
        f32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]])
    }

    #[inline]
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
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
        unsafe {
            matrixmultiply::sgemm(
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

impl Scalar for f64 {
    const BYTE_WIDTH: usize = 8;
    const DTYPE: &'static str = "f64";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn into_f64(self) -> f64 {
        self
    }

    #[inline]
    fn write_le(self, out: &mut [u8]) {
        out.copy_from_slice(&self.to_le_bytes());
    }

    #[inline]
    fn read_le(raw: &[u8]) -> Self {
        f64::from_le_bytes([
            raw[0], raw[1], raw[2], raw[3], raw[4], raw[5], raw[6], raw[7],
        ])
    }

    #[inline]
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
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
        unsafe {
            matrixmultiply::dgemm(
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
