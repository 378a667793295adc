//! Dense row-major kernels shared by the tape and the inference path.

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

/// `da[m×k] += dc[m×n] · bᵀ` where `b` is `k×n`.
pub fn matmul_grad_lhs(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            da[i * k + p] += dot(drow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `db[k×n] += aᵀ · dc` where `a` is `m×k` and `dc` is `m×n`.
pub fn matmul_grad_rhs(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (o, &dv) in dbrow.iter_mut().zip(drow) {
                *o += av * dv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Row-wise log-softmax over rows of width `n`.
pub fn log_softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

pub const LN_EPS: f64 = 1e-5;

/// Layer normalisation over rows of width `n`; returns output and per-row
/// `(mean, rstd)`.
pub fn layer_norm_rows(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    n: usize,
) -> (Vec<f64>, Vec<(f64, f64)>) {
    let rows = x.len() / n;
    let mut out = vec![0.0; x.len()];
    let mut stats = Vec::with_capacity(rows);
    for (row, orow) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..n {
            orow[j] = (row[j] - mean) * rstd * gamma[j] + beta[j];
        }
        stats.push((mean, rstd));
    }
    (out, stats)
}

/// One attention head for a single query against `keys`/`values` given as
/// row slices of stride `stride` starting at `offset`. Writes the weighted
/// value sum into `out` and the normalised weights into `probs`.
#[allow(clippy::too_many_arguments)]
pub fn attend_one(
    q: &[f64],
    keys: &[&[f64]],
    values: &[&[f64]],
    offset: usize,
    dh: usize,
    scale: f64,
    out: &mut [f64],
    probs: &mut [f64],
) {
    let mut max = f64::NEG_INFINITY;
    for (j, k) in keys.iter().enumerate() {
        let s = dot(q, &k[offset..offset + dh]) * scale;
        probs[j] = s;
        if s > max {
            max = s;
        }
    }
    let mut z = 0.0;
    for p in probs.iter_mut() {
        *p = (*p - max).exp();
        z += *p;
    }
    for p in probs.iter_mut() {
        *p /= z;
    }
    out.iter_mut().for_each(|o| *o = 0.0);
    for (p, v) in probs.iter().zip(values) {
        for (o, &vv) in out.iter_mut().zip(&v[offset..offset + dh]) {
            *o += p * vv;
        }
    }
}
