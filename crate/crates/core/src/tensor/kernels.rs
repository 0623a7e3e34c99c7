// Row-major matrix kernels.
//
// The forward product accumulates every output element strictly in ascending
// `k` order, so a row of the result never depends on how many other rows or
// columns are computed alongside it. Autoregressive decoding relies on this to
// reproduce teacher-forced outputs bit for bit.

/// `c = a · b` with `a: m×k`, `b: k×p`, `c: m×p` (overwritten).
pub(crate) fn gemm_nn(m: usize, k: usize, p: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(c.len(), m * p);
    c.fill(0.0);
    gemm_nn_acc(m, k, p, a, b, c);
}

/// `c += a · b`.
pub(crate) fn gemm_nn_acc(m: usize, k: usize, p: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * p..(i + 1) * p];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * p..(kk + 1) * p];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aik * bj;
            }
        }
    }
}

/// `out += aᵀ · g` with `a: m×k`, `g: m×p`, `out: k×p`.
pub(crate) fn gemm_tn_acc(m: usize, k: usize, p: usize, a: &[f64], g: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * p..(i + 1) * p];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let o_row = &mut out[kk * p..(kk + 1) * p];
            for (o, &gj) in o_row.iter_mut().zip(g_row) {
                *o += aik * gj;
            }
        }
    }
}

/// `out += g · bᵀ` with `g: m×p`, `b: k×p`, `out: m×k`.
pub(crate) fn gemm_nt_acc(m: usize, k: usize, p: usize, g: &[f64], b: &[f64], out: &mut [f64]) {
    let bt = transpose(k, p, b);
    gemm_nn_acc(m, p, k, g, &bt, out);
}

/// Transpose of a `rows×cols` matrix.
pub(crate) fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, p: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * p];
        for i in 0..m {
            for j in 0..p {
                c[i * p + j] = (0..k).map(|t| a[i * k + t] * b[t * p + j]).sum();
            }
        }
        c
    }

    #[test]
    fn kernels_agree_with_naive_product() {
        let (m, k, p) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * p).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * p];
        gemm_nn(m, k, p, &a, &b, &mut c);
        let want = naive(m, k, p, &a, &b);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-14);
        }

        // aᵀ·c should equal naive(transpose(a), c)
        let mut out = vec![0.0; k * p];
        gemm_tn_acc(m, k, p, &a, &c, &mut out);
        let want = naive(k, m, p, &transpose(m, k, &a), &c);
        for (x, y) in out.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let mut out = vec![0.0; m * k];
        gemm_nt_acc(m, k, p, &c, &b, &mut out);
        let want = naive(m, p, k, &c, &transpose(k, p, &b));
        for (x, y) in out.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_are_independent_of_row_count() {
        let (k, p) = (7, 3);
        let a: Vec<f64> = (0..4 * k).map(|i| (i as f64).sqrt() * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * p).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let mut full = vec![0.0; 4 * p];
        gemm_nn(4, k, p, &a, &b, &mut full);
        let mut first = vec![0.0; p];
        gemm_nn(1, k, p, &a[..k], &b, &mut first);
        assert_eq!(&full[..p], first.as_slice());
    }
}
