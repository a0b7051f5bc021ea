//! Flat f64 matrix kernels shared by the autodiff ops and the raw decode path.
//!
//! All matrices are row-major. The `_acc` variants add into `out` instead of
//! overwriting, which is what gradient accumulation wants.

/// out[m,n] = a[m,k] @ b[k,n]
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.fill(0.0);
    matmul_nn_acc(a, b, m, k, n, out);
}

/// out[m,n] += a[m,k] @ b[k,n]
pub fn matmul_nn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// out[m,n] += a[m,k] @ b[n,k]^T  (`b` given row-major as n x k)
pub fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                s += av * bv;
            }
            orow[j] += s;
        }
    }
}

/// out[m,n] += a[k,m]^T @ b[k,n]  (`a` given row-major as k x m)
pub fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// y[n] = W[d,n]^T x[d] written as x @ W for a single row vector.
pub fn vecmat(x: &[f64], w: &[f64], d: usize, n: usize, out: &mut [f64]) {
    out.fill(0.0);
    for (p, &xv) in x.iter().enumerate().take(d) {
        if xv != 0.0 {
            let wrow = &w[p * n..(p + 1) * n];
            for (o, &wv) in out.iter_mut().zip(wrow.iter()) {
                *o += xv * wv;
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        s += x * y;
    }
    s
}

/// In-place stable softmax of one row; returns an error indicator for NaN input.
pub fn softmax_row_inplace(row: &mut [f64]) -> bool {
    let mut mx = f64::NEG_INFINITY;
    for &v in row.iter() {
        if v.is_nan() {
            return false;
        }
        if v > mx {
            mx = v;
        }
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    true
}

/// RMS-normalize one row against `weight` in place.
pub fn rmsnorm_row(row: &mut [f64], weight: &[f64], eps: f64) {
    let n = row.len();
    let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    for (v, &w) in row.iter_mut().zip(weight.iter()) {
        *v = *v * inv * w;
    }
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn softplus(x: f64) -> f64 {
    // log(1 + e^x) without overflow for large x.
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        // a: 2x3, b: 3x2
        let a = [1., 2., 3., 4., 5., 6.];
        let b = [7., 8., 9., 10., 11., 12.];
        let mut nn = [0.0; 4];
        matmul_nn(&a, &b, 2, 3, 2, &mut nn);
        assert_eq!(nn, [58., 64., 139., 154.]);

        // b^T laid out as 2x3
        let bt = [7., 9., 11., 8., 10., 12.];
        let mut nt = [0.0; 4];
        matmul_nt_acc(&a, &bt, 2, 3, 2, &mut nt);
        assert_eq!(nt, nn);

        // a^T laid out as 3x2
        let at = [1., 4., 2., 5., 3., 6.];
        let mut tn = [0.0; 4];
        matmul_tn_acc(&at, &b, 2, 3, 2, &mut tn);
        assert_eq!(tn, nn);
    }

    #[test]
    fn softmax_row_is_stable() {
        let mut row = [1000.0, 1000.0];
        assert!(softmax_row_inplace(&mut row));
        assert!((row[0] - 0.5).abs() < 1e-15);
        assert!((row[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softplus_handles_extremes() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(100.0), 100.0);
        assert!(softplus(-40.0) > 0.0);
    }
}
