//! Dense row-major matrix products with a small register-blocked kernel.

const MR: usize = 4;
const NR: usize = 8;
const KC: usize = 256;

/// `a [m, k] · b [k, n]` → `[m, n]`
pub fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    let full_n = n - n % NR;
    let full_m = m - m % MR;
    // k blocks outermost, then column strips, so a KC × NR strip of `b`
    // stays in L1 while every row block passes over it
    for k0 in (0..k).step_by(KC) {
        let k1 = (k0 + KC).min(k);
        let mut j = 0;
        while j < full_n {
            let mut i = 0;
            while i < full_m {
                let mut acc = [[0.0f64; NR]; MR];
                for (r, row) in acc.iter_mut().enumerate() {
                    row.copy_from_slice(&out[(i + r) * n + j..(i + r) * n + j + NR]);
                }
                for p in k0..k1 {
                    let bv: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().expect("tile");
                    for (r, row) in acc.iter_mut().enumerate() {
                        let av = a[(i + r) * k + p];
                        for (x, y) in row.iter_mut().zip(bv) {
                            *x += av * y;
                        }
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    out[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
                }
                i += MR;
            }
            j += NR;
        }
    }
    for r in 0..full_m {
        edge_row(a, b, &mut out, r, k, n, full_n);
    }
    for r in full_m..m {
        edge_row(a, b, &mut out, r, k, n, 0);
    }
    out
}

/// Columns `from..n` of output row `r`.
fn edge_row(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, n: usize, from: usize) {
    if from == n {
        return;
    }
    let dst = &mut out[r * n + from..(r + 1) * n];
    for p in 0..k {
        let av = a[r * k + p];
        for (x, y) in dst.iter_mut().zip(&b[p * n + from..(p + 1) * n]) {
            *x += av * y;
        }
    }
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `a [m, k] · b [n, k]ᵀ` → `[m, n]`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    gemm_nn(a, &transpose(b, n, k), m, k, n)
}

/// `a [k, m]ᵀ · b [k, n]` → `[m, n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    gemm_nn(&transpose(a, k, m), b, m, k, n)
}
