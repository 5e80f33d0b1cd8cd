//! Scalar abstraction over `f32`/`f64`.
//!
//! Training runs at `f32`; finite-difference gradient checks need `f64`.
//! All engine math is written once against this trait.

use num_traits::Float;

pub trait Scalar:
    Float
    + num_traits::NumAssignOps
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Dtype tag used in `.meta.json` sidecars.
    const DTYPE: &'static str;
    /// Serialized width in bytes (little-endian IEEE-754).
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// c(m,n) = alpha * a(m,k) . b(k,n) + beta * c. `c` is row-major;
    /// `a`/`b` use explicit (row, col) element strides so transposed views
    /// need no copies.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize, k: usize, n: usize,
        alpha: Self,
        a: &[Self], rsa: isize, csa: isize,
        b: &[Self], rsb: isize, csb: isize,
        beta: Self,
        c: &mut [Self],
    );

    /// Row-major c = alpha * a . b + beta * c.
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        Self::gemm_strided(m, k, n, alpha, a, k as isize, 1, b, n as isize, 1, beta, c);
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
    fn gemm_strided(
        m: usize, k: usize, n: usize,
        alpha: Self,
        a: &[Self], rsa: isize, csa: isize,
        b: &[Self], rsb: isize, csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        debug_assert!(c.len() >= m * n);
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha,
                a.as_ptr(), rsa, csa,
                b.as_ptr(), rsb, csb,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
    fn gemm_strided(
        m: usize, k: usize, n: usize,
        alpha: Self,
        a: &[Self], rsa: isize, csa: isize,
        b: &[Self], rsb: isize, csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        debug_assert!(c.len() >= m * n);
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha,
                a.as_ptr(), rsa, csa,
                b.as_ptr(), rsb, csb,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}
