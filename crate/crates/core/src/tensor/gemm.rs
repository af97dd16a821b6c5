//! Packed, register-tiled matrix multiply.
//!
//! Every output element is reduced in ascending `k` order from its initial
//! value through [`Element::madd`]. Tiling, packing and the k-blocking
//! (which round-trips partial sums through `c` in the element type) do not
//! change that order, so for `f64` results are bit-identical to a naive
//! triple loop.

use super::{DType, Element};

/// Depth of one packed k-block.
const KC: usize = 256;

/// Strided view of a row-major or transposed left operand.
#[derive(Clone, Copy)]
pub(crate) struct Lhs<'a, T> {
    pub data: &'a [T],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T: Element> Lhs<'a, T> {
    /// `a` stored row-major as `m × k`.
    pub fn normal(data: &'a [T], k: usize) -> Self {
        Lhs { data, row_stride: k, col_stride: 1 }
    }

    /// `a` stored row-major as `k × m`, read as its transpose.
    pub fn transposed(data: &'a [T], m: usize) -> Self {
        Lhs { data, row_stride: 1, col_stride: m }
    }

    #[inline(always)]
    fn at(&self, i: usize, p: usize) -> T {
        self.data[i * self.row_stride + p * self.col_stride]
    }
}

/// `c (m×n) = op(a) (m×k) · b (k×n)`, or `c += ...` when `accumulate` is set.
pub(crate) fn gemm<T: Element>(
    m: usize,
    n: usize,
    k: usize,
    a: Lhs<'_, T>,
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if k == 0 {
        if !accumulate {
            c.fill(T::zero());
        }
        return;
    }
    // Tile shapes sized to the 16 vector registers of AVX2.
    match T::DTYPE {
        DType::F32 => gemm_tiled::<T, 6, 16>(m, n, k, a, b, c, accumulate),
        DType::F64 => gemm_tiled::<T, 4, 8>(m, n, k, a, b, c, accumulate),
    }
}

fn gemm_tiled<T: Element, const MR: usize, const NR: usize>(
    m: usize,
    n: usize,
    k: usize,
    a: Lhs<'_, T>,
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    let jpanels = n.div_ceil(NR);
    let mut pa = vec![T::zero(); MR * KC.min(k)];
    let mut pb = vec![T::zero(); jpanels * NR * KC.min(k)];
    let mut kb = 0;
    while kb < k {
        let kc = KC.min(k - kb);
        let load = accumulate || kb > 0;
        // B as NR-column panels, each stored k-major: pb[panel][p][j].
        for jp in 0..jpanels {
            let j0 = jp * NR;
            let nr = NR.min(n - j0);
            let panel = &mut pb[jp * NR * kc..(jp + 1) * NR * kc];
            for p in 0..kc {
                let src = &b[(kb + p) * n + j0..(kb + p) * n + j0 + nr];
                let dst = &mut panel[p * NR..(p + 1) * NR];
                dst[..nr].copy_from_slice(src);
                dst[nr..].fill(T::zero());
            }
        }
        let mut i0 = 0;
        while i0 < m {
            let mr = MR.min(m - i0);
            // Full panels used against a single column panel are read in place:
            // packing would cost as much as the multiply.
            let direct = mr == MR && jpanels == 1;
            let (src, rs, cs) = if direct {
                (&a.data[i0 * a.row_stride + kb * a.col_stride..], a.row_stride, a.col_stride)
            } else {
                // One MR-row panel of A, small enough to stay in L1.
                let panel = &mut pa[..MR * kc];
                if mr < MR {
                    panel.fill(T::zero());
                }
                for r in 0..mr {
                    for p in 0..kc {
                        panel[p * MR + r] = a.at(i0 + r, kb + p);
                    }
                }
                (&pa[..MR * kc], 1, MR)
            };
            for jp in 0..jpanels {
                let j0 = jp * NR;
                let nr = NR.min(n - j0);
                let mut acc = [[T::zero(); NR]; MR];
                if load {
                    for r in 0..mr {
                        acc[r][..nr].copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + nr]);
                    }
                }
                kernel::<T, MR, NR>(src, rs, cs, &pb[jp * NR * kc..(jp + 1) * NR * kc], kc, &mut acc);
                for r in 0..mr {
                    c[(i0 + r) * n + j0..(i0 + r) * n + j0 + nr].copy_from_slice(&acc[r][..nr]);
                }
            }
            i0 += MR;
        }
        kb += kc;
    }
}

/// `acc += A·B` over `kc` steps, with `A[r][p] = a[r·rs + p·cs]` and `B`
/// packed k-major in rows of `NR`.
#[inline(always)]
fn kernel<T: Element, const MR: usize, const NR: usize>(
    a: &[T],
    rs: usize,
    cs: usize,
    pb: &[T],
    kc: usize,
    acc: &mut [[T; NR]; MR],
) {
    for p in 0..kc {
        let bv: &[T; NR] = pb[p * NR..(p + 1) * NR].try_into().unwrap();
        for r in 0..MR {
            let av = a[r * rs + p * cs];
            for j in 0..NR {
                acc[r][j] = acc[r][j].madd(av, bv[j]);
            }
        }
    }
}
