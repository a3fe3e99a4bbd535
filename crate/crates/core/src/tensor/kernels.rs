//! Dense f64 kernels.
//!
//! Every output element is accumulated in a fixed order that depends only on
//! the reduction length, never on how many rows are processed together. A row
//! computed inside a stacked batch is therefore bit-identical to the same row
//! computed alone, which the batched decoder relies on.

const LANES: usize = 8;

/// Rows of `b` kept hot while sweeping every row of `a`.
const NT_COL_BLOCK: usize = 64;

/// Lane-split dot product. Element `p` always lands in lane `p % LANES`, so
/// appending zeros to both inputs leaves the result unchanged.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    dot_body(a, b)
}

#[inline(always)]
fn reduce(acc: &[f64; LANES]) -> f64 {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

#[inline(always)]
fn dot_body(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    for (l, (x, y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        acc[l] += x * y;
    }
    reduce(&acc)
}

/// Four dot products against one shared `b`, each summed exactly as
/// [`dot`] would. The independent accumulators and the shared loads of `b`
/// are what make stacked rows cheaper than single ones.
#[inline(always)]
fn dot4(a: [&[f64]; 4], b: &[f64]) -> [f64; 4] {
    let mut acc = [[0.0f64; LANES]; 4];
    let full = b.len() / LANES * LANES;
    for p in (0..full).step_by(LANES) {
        let y = &b[p..p + LANES];
        for r in 0..4 {
            let x = &a[r][p..p + LANES];
            for l in 0..LANES {
                acc[r][l] += x[l] * y[l];
            }
        }
    }
    for p in full..b.len() {
        for r in 0..4 {
            acc[r][p - full] += a[r][p] * b[p];
        }
    }
    [reduce(&acc[0]), reduce(&acc[1]), reduce(&acc[2]), reduce(&acc[3])]
}

/// `out[i][j] = dot(a[i], b[j])` for `a: m×k`, `b: n×k`.
pub fn gemm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    if k == 0 {
        out.fill(0.0);
        return;
    }
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        unsafe { gemm_nt_avx2(a, b, m, n, k, out) };
        return;
    }
    gemm_nt_body(a, b, m, n, k, out);
}

/// The same code compiled with wider vectors. No fused multiply-add is
/// enabled, so results are identical to the baseline build.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_nt_avx2(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    gemm_nt_body(a, b, m, n, k, out);
}

#[inline(always)]
fn gemm_nt_body(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for j0 in (0..n).step_by(NT_COL_BLOCK) {
        let j1 = (j0 + NT_COL_BLOCK).min(n);
        let mut i = 0;
        while i + 4 <= m {
            let rows = [
                &a[i * k..(i + 1) * k],
                &a[(i + 1) * k..(i + 2) * k],
                &a[(i + 2) * k..(i + 3) * k],
                &a[(i + 3) * k..(i + 4) * k],
            ];
            for j in j0..j1 {
                let v = dot4(rows, &b[j * k..(j + 1) * k]);
                for (r, v) in v.into_iter().enumerate() {
                    out[(i + r) * n + j] = v;
                }
            }
            i += 4;
        }
        while i < m {
            let a_row = &a[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for j in j0..j1 {
                out_row[j] = dot_body(a_row, &b[j * k..(j + 1) * k]);
            }
            i += 1;
        }
    }
}

/// `out = a · b` for `a: m×k`, `b: k×n`; each output element sums over `p`
/// in ascending order starting from zero.
pub fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    if n == 0 {
        return;
    }
    let mut i = 0;
    while i + 4 <= m {
        let (r0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
        let (r1, rest) = rest.split_at_mut(n);
        let (r2, r3) = rest.split_at_mut(n);
        for p in 0..k {
            let s0 = a[i * k + p];
            let s1 = a[(i + 1) * k + p];
            let s2 = a[(i + 2) * k + p];
            let s3 = a[(i + 3) * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (j, &bv) in b_row.iter().enumerate() {
                r0[j] += s0 * bv;
                r1[j] += s1 * bv;
                r2[j] += s2 * bv;
                r3[j] += s3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += s * bv;
            }
        }
        i += 1;
    }
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}
