//! Row-major matrix product used by every convolution and linear layer.
//!
//! Each output element is accumulated as `fma(a[k-1], b[k-1], ... fma(a0, b0, 0))`
//! in ascending inner index, whatever its position in the output and however
//! the output is tiled. A product over any subset of the columns of `b`
//! therefore reproduces the corresponding columns of the full product bit
//! for bit. Strided convolution relies on this to match its dense
//! evaluation followed by downsampling.

use crate::nn::Real;

const MR: usize = 4;
const NR: usize = 32;

/// Storage order of a matrix operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Stored as given: `rows x cols`, row-major.
    Normal,
    /// Stored transposed: the `rows x cols` operand is kept as its
    /// `cols x rows` transpose, row-major.
    Transposed,
}

/// `c[m x n] = a[m x k] * b[k x n]`, overwriting `c`.
pub fn gemm<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm_with(m, n, k, a, Layout::Normal, b, Layout::Normal, c);
}

/// [`gemm`] with either operand optionally stored transposed. The result
/// is bit-identical to transposing first and calling [`gemm`].
#[allow(clippy::too_many_arguments)]
pub fn gemm_with<T: Real>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    a_layout: Layout,
    b: &[T],
    b_layout: Layout,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "lhs is not {m}x{k}");
    assert_eq!(b.len(), k * n, "rhs is not {k}x{n}");
    assert_eq!(c.len(), m * n, "output is not {m}x{n}");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(T::zero());
        return;
    }

    let a_packed = pack_lhs(m, k, a, a_layout);
    let mut b_panel = vec![T::zero(); k * NR];
    for j0 in (0..n).step_by(NR) {
        let nr = NR.min(n - j0);
        // Full panels of a row-major rhs are read in place.
        let (panel, offset, stride) = match b_layout {
            Layout::Normal if nr == NR => (b, j0, n),
            Layout::Normal => {
                for kk in 0..k {
                    let dst = &mut b_panel[kk * NR..(kk + 1) * NR];
                    dst[..nr].copy_from_slice(&b[kk * n + j0..kk * n + j0 + nr]);
                    dst[nr..].fill(T::zero());
                }
                (&b_panel[..], 0, NR)
            }
            Layout::Transposed => {
                if nr < NR {
                    b_panel.fill(T::zero());
                }
                for j in 0..nr {
                    let col = &b[(j0 + j) * k..(j0 + j + 1) * k];
                    for (kk, &v) in col.iter().enumerate() {
                        b_panel[kk * NR + j] = v;
                    }
                }
                (&b_panel[..], 0, NR)
            }
        };
        panel_product(m, n, k, &a_packed, panel, offset, stride, j0, nr, c);
    }
}

/// [`gemm`] whose rhs is never materialized: `pack(j0, nr, panel)` writes
/// columns `j0..j0 + nr` of `b` into `panel`, row `t` at `t * PANEL`.
/// Columns past `nr` are ignored. Accumulation order is that of [`gemm`].
pub fn gemm_packed<T: Real>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    mut pack: impl FnMut(usize, usize, &mut [T]),
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "lhs is not {m}x{k}");
    assert_eq!(c.len(), m * n, "output is not {m}x{n}");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(T::zero());
        return;
    }
    let a_packed = pack_lhs(m, k, a, Layout::Normal);
    let mut b_panel = vec![T::zero(); k * NR];
    for j0 in (0..n).step_by(NR) {
        let nr = NR.min(n - j0);
        pack(j0, nr, &mut b_panel);
        panel_product(m, n, k, &a_packed, &b_panel, 0, NR, j0, nr, c);
    }
}

/// Column count of the panels handed to [`gemm_packed`].
pub const PANEL: usize = NR;

fn pack_lhs<T: Real>(m: usize, k: usize, a: &[T], layout: Layout) -> Vec<T> {
    let row_panels = m.div_ceil(MR);
    let mut packed = vec![T::zero(); row_panels * k * MR];
    for (panel, dst) in packed.chunks_exact_mut(k * MR).enumerate() {
        let i0 = panel * MR;
        let rows = MR.min(m - i0);
        match layout {
            Layout::Normal => {
                for r in 0..rows {
                    let row = &a[(i0 + r) * k..(i0 + r + 1) * k];
                    for (kk, &v) in row.iter().enumerate() {
                        dst[kk * MR + r] = v;
                    }
                }
            }
            Layout::Transposed => {
                for kk in 0..k {
                    dst[kk * MR..kk * MR + rows].copy_from_slice(&a[kk * m + i0..kk * m + i0 + rows]);
                }
            }
        }
    }
    packed
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn panel_product<T: Real>(
    m: usize,
    n: usize,
    k: usize,
    a_packed: &[T],
    b: &[T],
    offset: usize,
    stride: usize,
    j0: usize,
    nr: usize,
    c: &mut [T],
) {
    for (p, a_panel) in a_packed.chunks_exact(k * MR).enumerate() {
        let i0 = p * MR;
        let acc = micro_kernel(a_panel, b, offset, stride);
        for (r, lane) in acc.iter().enumerate().take(m - i0) {
            let row = (i0 + r) * n + j0;
            c[row..row + nr].copy_from_slice(&lane[..nr]);
        }
    }
}

#[inline(always)]
fn micro_kernel<T: Real>(a_panel: &[T], b: &[T], offset: usize, stride: usize) -> [[T; NR]; MR] {
    let mut acc = [[T::zero(); NR]; MR];
    for (kk, a_col) in a_panel.chunks_exact(MR).enumerate() {
        let b_row: &[T; NR] = b[kk * stride + offset..][..NR].try_into().unwrap();
        for r in 0..MR {
            let av = a_col[r];
            for (dst, &bv) in acc[r].iter_mut().zip(b_row) {
                *dst = av.mul_add(bv, *dst);
            }
        }
    }
    acc
}

const LANES: usize = 8;

/// `c[m x n] = a[m x k] * b[n x k]^T` as dot products of contiguous rows.
///
/// Each element accumulates term `t` into lane `t % 8` with FMA and sums
/// the lanes pairwise at the end. The order is fixed, so results are
/// deterministic, but they differ from [`gemm`] in the last bits. Used
/// where the inner dimension is long and no bit-level match with [`gemm`]
/// is needed (weight gradients).
pub fn gemm_nt<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert_eq!(a.len(), m * k, "lhs is not {m}x{k}");
    assert_eq!(b.len(), n * k, "rhs is not {n}x{k} (transposed)");
    assert_eq!(c.len(), m * n, "output is not {m}x{n}");
    const RI: usize = 4;
    const RJ: usize = 4;
    let full = k / LANES * LANES;
    for i0 in (0..m).step_by(RI) {
        let ri = RI.min(m - i0);
        for j0 in (0..n).step_by(RJ) {
            let rj = RJ.min(n - j0);
            let mut acc = [[[T::zero(); LANES]; RJ]; RI];
            // Rows past the edge repeat the last one; their sums are discarded.
            let a_rows: [usize; RI] = std::array::from_fn(|r| (i0 + r).min(m - 1) * k);
            let b_rows: [usize; RJ] = std::array::from_fn(|q| (j0 + q).min(n - 1) * k);
            for t0 in (0..full).step_by(LANES) {
                let bv: [&[T; LANES]; RJ] = std::array::from_fn(|q| b[b_rows[q] + t0..][..LANES].try_into().unwrap());
                for (p, acc_p) in acc.iter_mut().enumerate() {
                    let av: &[T; LANES] = a[a_rows[p] + t0..][..LANES].try_into().unwrap();
                    for (q, acc_pq) in acc_p.iter_mut().enumerate() {
                        for l in 0..LANES {
                            acc_pq[l] = av[l].mul_add(bv[q][l], acc_pq[l]);
                        }
                    }
                }
            }
            for p in 0..ri {
                for q in 0..rj {
                    let lanes = &mut acc[p][q];
                    for t in full..k {
                        let l = t - full;
                        lanes[l] = a[a_rows[p] + t].mul_add(b[b_rows[q] + t], lanes[l]);
                    }
                    c[(i0 + p) * n + j0 + q] = pairwise(lanes);
                }
            }
        }
    }
}

fn pairwise<T: Real>(lanes: &mut [T; LANES]) -> T {
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for l in 0..width {
            lanes[l] = lanes[l] + lanes[l + width];
        }
    }
    lanes[0]
}

/// Row-major transpose of an `rows x cols` matrix.
pub fn transpose<T: Copy>(rows: usize, cols: usize, src: &[T], dst: &mut [T]) {
    assert_eq!(src.len(), rows * cols);
    assert_eq!(dst.len(), rows * cols);
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, n: usize, k: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..k {
                    acc = a[i * k + t].mul_add(b[t * n + j], acc);
                }
                c[i * n + j] = acc;
            }
        }
        c
    }

    #[test]
    fn matches_sequential_fma_loop_exactly() {
        for &(m, n, k) in &[(1, 1, 1), (3, 5, 7), (4, 16, 9), (9, 33, 17), (17, 3, 40)] {
            let a: Vec<f64> = (0..m * k).map(|v| ((v * 37 % 11) as f64 - 5.0) * 0.3).collect();
            let b: Vec<f64> = (0..k * n).map(|v| ((v * 53 % 13) as f64 - 6.0) * 0.7).collect();
            let mut c = vec![f64::NAN; m * n];
            gemm(m, n, k, &a, &b, &mut c);
            assert_eq!(c, naive(m, n, k, &a, &b), "{m}x{n}x{k}");
        }
    }

    #[test]
    fn column_subset_is_bit_identical() {
        let (m, n, k) = (5, 40, 23);
        let a: Vec<f32> = (0..m * k).map(|v| (v as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|v| (v as f32 * 0.91).cos()).collect();
        let mut full = vec![0.0; m * n];
        gemm(m, n, k, &a, &b, &mut full);
        let cols: Vec<usize> = (0..n).step_by(3).collect();
        let sub_b: Vec<f32> = (0..k)
            .flat_map(|t| cols.iter().map(move |&j| (t, j)))
            .map(|(t, j)| b[t * n + j])
            .collect();
        let mut sub = vec![0.0; m * cols.len()];
        gemm(m, cols.len(), k, &a, &sub_b, &mut sub);
        for i in 0..m {
            for (s, &j) in cols.iter().enumerate() {
                assert_eq!(sub[i * cols.len() + s].to_bits(), full[i * n + j].to_bits());
            }
        }
    }

    #[test]
    fn transposed_operands_match() {
        let (m, n, k) = (7, 37, 11);
        let a: Vec<f64> = (0..m * k).map(|v| (v as f64 * 0.77).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v as f64 * 0.13).cos()).collect();
        let mut at = vec![0.0; m * k];
        let mut bt = vec![0.0; k * n];
        transpose(m, k, &a, &mut at);
        transpose(k, n, &b, &mut bt);
        let mut want = vec![0.0; m * n];
        gemm(m, n, k, &a, &b, &mut want);
        for (al, bl) in [
            (Layout::Transposed, Layout::Normal),
            (Layout::Normal, Layout::Transposed),
            (Layout::Transposed, Layout::Transposed),
        ] {
            let lhs = if al == Layout::Normal { &a } else { &at };
            let rhs = if bl == Layout::Normal { &b } else { &bt };
            let mut got = vec![f64::NAN; m * n];
            gemm_with(m, n, k, lhs, al, rhs, bl, &mut got);
            assert_eq!(got, want, "{al:?} {bl:?}");
        }
    }

    #[test]
    fn nt_product_matches_reference() {
        for &(m, n, k) in &[(1, 1, 1), (3, 5, 40), (2, 4, 16), (5, 9, 33), (4, 3, 100)] {
            let a: Vec<f64> = (0..m * k).map(|v| (v as f64 * 0.31).sin()).collect();
            let b: Vec<f64> = (0..n * k).map(|v| (v as f64 * 0.17).cos()).collect();
            let mut bt = vec![0.0; n * k];
            transpose(n, k, &b, &mut bt);
            let want = naive(m, n, k, &a, &bt);
            let mut got = vec![f64::NAN; m * n];
            gemm_nt(m, n, k, &a, &b, &mut got);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-12 * (1.0 + w.abs()), "{m}x{n}x{k}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn transpose_round_trip() {
        let src: Vec<i32> = (0..6).collect();
        let mut t = vec![0; 6];
        transpose(2, 3, &src, &mut t);
        assert_eq!(t, vec![0, 3, 1, 4, 2, 5]);
    }
}
