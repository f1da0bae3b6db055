//! Plain-loop dense kernels shared by the forward and backward passes.
//!
//! Loop orders keep the innermost loop contiguous so the compiler can
//! vectorize the axpy forms. Reductions use a fixed four-way split, so results
//! are deterministic but not identical to a naive left-to-right sum.

use super::tensor::Mask;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (s0 + s1) + (s2 + s3) + tail
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out += a · b` with `a: m×k`, `b: k×n`. Zero entries of `a` are skipped,
/// which makes sparse attention weights cheap to apply.
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                axpy(av, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
}

/// `out += a · bᵀ` with `a: m×k`, `b: n×k`.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out += aᵀ · b` with `a: m×k`, `b: m×n`, `out: k×n`.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(av, brow, &mut out[p * n..(p + 1) * n]);
            }
        }
    }
}

/// Scaled query-key scores computed only at visible positions; hidden
/// positions are left at zero.
pub fn masked_scores(q: &[f64], k: &[f64], d: usize, mask: &Mask, scale: f64) -> Vec<f64> {
    let (n, m) = (mask.rows(), mask.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let qrow = &q[i * d..(i + 1) * d];
        for &j in mask.row_keys(i) {
            out[i * m + j] = scale * dot(qrow, &k[j * d..(j + 1) * d]);
        }
    }
    out
}

/// Row softmax over visible entries, stabilized by the visible-row maximum.
/// Hidden entries are exactly zero. Rows without a visible key return `Err(row)`.
pub fn masked_softmax(scores: &[f64], mask: &Mask) -> Result<Vec<f64>, usize> {
    let m = mask.cols();
    let mut out = vec![0.0; scores.len()];
    for i in 0..mask.rows() {
        let keys = mask.row_keys(i);
        if keys.is_empty() {
            return Err(i);
        }
        let row = &scores[i * m..(i + 1) * m];
        let max = keys
            .iter()
            .map(|&j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &j in keys {
            let e = (row[j] - max).exp();
            out[i * m + j] = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for &j in keys {
            out[i * m + j] *= inv;
        }
    }
    Ok(out)
}
