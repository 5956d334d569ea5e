//! Plain f32 kernels shared by the autodiff ops and the frozen encoders.
//!
//! Everything here uses fixed sequential reduction order; two calls with the
//! same inputs are bit-identical. The modality encoders stay frozen in every
//! training stage, so they run on these raw loops with no gradient tape.

pub(crate) fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

/// a[m x k] . b[n x k]^T -> [m x n]
pub(crate) fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// a[m x k]^T . b[m x n] -> [k x n]
pub(crate) fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = arow[kk];
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

pub(crate) const SQRT_2_OVER_PI: f32 = 0.797_884_6;
pub(crate) const GELU_COEF: f32 = 0.044_715;

pub(crate) fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f32) -> f32 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

pub(crate) fn gelu_inplace(x: &mut [f32]) {
    for v in x.iter_mut() {
        *v = gelu_scalar(*v);
    }
}

pub(crate) fn add_bias_rows(x: &mut [f32], bias: &[f32], rows: usize) {
    let d = bias.len();
    for i in 0..rows {
        for j in 0..d {
            x[i * d + j] += bias[j];
        }
    }
}

pub(crate) fn add_inplace(x: &mut [f32], y: &[f32]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

pub(crate) fn layer_norm_rows(x: &[f32], rows: usize, d: usize, g: &[f32], b: &[f32], eps: f32) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * d];
    for i in 0..rows {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let istd = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            out[i * d + j] = g[j] * (row[j] - mean) * istd + b[j];
        }
    }
    out
}

pub(crate) fn softmax_rows(x: &mut [f32], rows: usize, cols: usize) {
    for i in 0..rows {
        let row = &mut x[i * cols..(i + 1) * cols];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            denom += *v;
        }
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
}

/// Bidirectional multi-head self-attention over [t x d], plain f32.
/// Weight layout matches the Tensor path: w* are [d x d], row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_full(
    x: &[f32],
    t: usize,
    d: usize,
    n_heads: usize,
    wq: &[f32],
    bq: &[f32],
    wk: &[f32],
    bk: &[f32],
    wv: &[f32],
    bv: &[f32],
    wo: &[f32],
    bo: &[f32],
) -> Vec<f32> {
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut q = matmul(x, wq, t, d, d);
    let mut k = matmul(x, wk, t, d, d);
    let mut v = matmul(x, wv, t, d, d);
    add_bias_rows(&mut q, bq, t);
    add_bias_rows(&mut k, bk, t);
    add_bias_rows(&mut v, bv, t);
    let mut ctx = vec![0.0f32; t * d];
    for h in 0..n_heads {
        let off = h * dh;
        // scores[i][j] = q_i . k_j * scale over this head's slice
        let mut scores = vec![0.0f32; t * t];
        for i in 0..t {
            for j in 0..t {
                let mut acc = 0.0f32;
                for c in 0..dh {
                    acc += q[i * d + off + c] * k[j * d + off + c];
                }
                scores[i * t + j] = acc * scale;
            }
        }
        softmax_rows(&mut scores, t, t);
        for i in 0..t {
            for j in 0..t {
                let w = scores[i * t + j];
                if w == 0.0 {
                    continue;
                }
                for c in 0..dh {
                    ctx[i * d + off + c] += w * v[j * d + off + c];
                }
            }
        }
    }
    let mut out = matmul(&ctx, wo, t, d, d);
    add_bias_rows(&mut out, bo, t);
    out
}

/// Interleaved sin/cos absolute positions, [t x d].
pub(crate) fn sinusoidal_positions(t: usize, d: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; t * d];
    for pos in 0..t {
        for i in 0..d / 2 {
            let freq = 1.0f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = pos as f64 * freq;
            out[pos * d + 2 * i] = angle.sin() as f32;
            out[pos * d + 2 * i + 1] = angle.cos() as f32;
        }
    }
    out
}
