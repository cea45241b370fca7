//! Dense loops shared by forward and backward passes. All matrices are row-major
//! and the `*_acc` routines add into `out` rather than overwrite it.

/// `dst += alpha * src`.
pub(crate) fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// `out[m, n] += a[m, k] * b[k, n]`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            axpy(orow, &b[p * n..(p + 1) * n], aip);
        }
    }
}

/// `out[m, k] += g[m, n] * b[k, n]^T`.
pub(crate) fn matmul_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for (p, o) in out[i * k..(i + 1) * k].iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            *o += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k, n] += a[m, k]^T * g[m, n]`.
pub(crate) fn matmul_at_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            axpy(&mut out[p * n..(p + 1) * n], grow, aip);
        }
    }
}

/// In-place (log-)softmax of one finite row.
pub(crate) fn softmax_row(row: &mut [f64], log: bool) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x -= max;
        total += x.exp();
    }
    if log {
        let lt = total.ln();
        row.iter_mut().for_each(|x| *x -= lt);
    } else {
        row.iter_mut().for_each(|x| *x = x.exp() / total);
    }
}
