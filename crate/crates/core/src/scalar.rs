//! Scalar abstraction shared by every numeric module.
//!
//! All core math is generic over [`Scalar`], implemented for `f32` and `f64`.
//! The training harness instantiates everything at `f64` (see the aliases at
//! the crate root); `f32` exists for callers that trade precision for speed.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Element-type tag recorded in checkpoints so files are self-describing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Floating-point element type for tensors, poses, and losses.
///
/// Extends nalgebra's [`RealField`] with conversions, a dtype tag, byte-level
/// serialization (checkpoints are bit-exact), and a GEMM kernel used by the
/// convolution and matmul operators.
pub trait Scalar:
    RealField + Copy + Default + FromPrimitive + ToPrimitive + std::iter::Sum + Send + Sync + 'static
{
    const DTYPE: Dtype;

    /// Convert an `f64` constant. Panics only on NaN-free conversion failure,
    /// which cannot happen for f32/f64.
    #[inline]
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 constant converts to Scalar")
    }

    #[inline]
    fn to_f64c(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("Scalar converts to f64")
    }

    fn write_le_bytes(self, out: &mut Vec<u8>);

    fn read_le_bytes(bytes: &[u8]) -> Self;

    /// `c = alpha * op(a) * op(b) + beta * c` on row-major slices, where
    /// `op(a)` is `m x k` and `op(b)` is `k x n`. `ta`/`tb` select whether the
    /// underlying storage is the transpose of the operand.
    fn gemm(
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_scalar {
    ($ty:ty, $dtype:expr, $kernel:path) => {
        impl Scalar for $ty {
            const DTYPE: Dtype = $dtype;

            #[inline]
            fn write_le_bytes(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            #[inline]
            fn read_le_bytes(bytes: &[u8]) -> Self {
                <$ty>::from_le_bytes(bytes.try_into().expect("scalar byte width"))
            }

            fn gemm(
                ta: bool,
                tb: bool,
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                b: &[Self],
                beta: Self,
                c: &mut [Self],
            ) {
                assert_eq!(a.len(), m * k, "gemm: lhs length");
                assert_eq!(b.len(), k * n, "gemm: rhs length");
                assert_eq!(c.len(), m * n, "gemm: out length");
                // Row-major strides; a transposed operand swaps its strides.
                let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
                unsafe {
                    $kernel(
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

impl_scalar!(f32, Dtype::F32, matrixmultiply::sgemm);
impl_scalar!(f64, Dtype::F64, matrixmultiply::dgemm);
