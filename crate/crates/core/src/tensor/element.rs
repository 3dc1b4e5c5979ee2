use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating point scalar usable in tensors: `f32` for training, `f64` for
/// finite-difference verification.
pub trait Element:
    Float + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Row-major `C = op(A) · op(B) + beta · C` with `C` of size `m × n`.
    ///
    /// `A` is stored `m × k` (or `k × m` when `trans_a`), `B` is stored
    /// `k × n` (or `n × k` when `trans_b`), all densely packed.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    ) {
        let lda = if trans_a { m } else { k };
        let ldb = if trans_b { k } else { n };
        Self::gemm_ld(trans_a, trans_b, m, k, n, a, lda, b, ldb, beta, c, n);
    }

    /// [`Element::gemm`] with explicit row strides (leading dimensions) for
    /// the stored matrices.
    #[allow(clippy::too_many_arguments)]
    fn gemm_ld(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        lda: usize,
        b: &[Self],
        ldb: usize,
        beta: Self,
        c: &mut [Self],
        ldc: usize,
    );
}

/// Pairwise (cascade) sum: round-off grows with `log n` rather than `n`.
pub fn pairwise_sum<T: Element>(xs: &[T]) -> T {
    const LEAF: usize = 32;
    if xs.len() <= LEAF {
        return xs.iter().copied().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// `(row stride, col stride)` of the logical matrix, and the minimum slice
/// length, for a stored matrix with leading dimension `ld`.
fn layout(trans: bool, rows: usize, cols: usize, ld: usize) -> (isize, isize, usize) {
    if trans {
        assert!(ld >= rows, "gemm: leading dimension too small");
        (1, ld as isize, (cols - 1) * ld + rows)
    } else {
        assert!(ld >= cols, "gemm: leading dimension too small");
        (ld as isize, 1, (rows - 1) * ld + cols)
    }
}

macro_rules! impl_element {
    ($t:ty, $gemm:path) => {
        impl Element for $t {
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }

            fn gemm_ld(
                trans_a: bool,
                trans_b: bool,
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                lda: usize,
                b: &[Self],
                ldb: usize,
                beta: Self,
                c: &mut [Self],
                ldc: usize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(k > 0, "gemm: empty inner dimension");
                let (rsa, csa, need_a) = layout(trans_a, m, k, lda);
                let (rsb, csb, need_b) = layout(trans_b, k, n, ldb);
                let (_, _, need_c) = layout(false, m, n, ldc);
                assert!(a.len() >= need_a, "gemm: A too small");
                assert!(b.len() >= need_b, "gemm: B too small");
                assert!(c.len() >= need_c, "gemm: C too small");
                // SAFETY: the asserts above guarantee every index touched by
                // the given dimensions and strides lies inside the slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        ldc as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_element!(f32, matrixmultiply::sgemm);
impl_element!(f64, matrixmultiply::dgemm);
