//! Raw dense `f64` kernels shared by the tape and the inference path.
//!
//! Everything is row-major. Kernels above `PAR_FLOP_THRESHOLD` multiply-adds
//! split their output rows across threads; each output element keeps a fixed
//! reduction order, so results are bit-identical regardless of thread count.

use rayon::prelude::*;

/// Below this many multiply-adds a matmul stays single-threaded.
const PAR_FLOP_THRESHOLD: usize = 1 << 18;

/// out (+)= a[m x k] * b[k x n]
pub fn mm_nn(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize, acc: bool) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let row = |i: usize, or: &mut [f64]| {
        if !acc {
            or.fill(0.0);
        }
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av != 0.0 {
                let br = &b[p * n..(p + 1) * n];
                for (o, &bv) in or.iter_mut().zip(br.iter()) {
                    *o += av * bv;
                }
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, or)| row(i, or));
    } else {
        for (i, or) in out.chunks_mut(n).enumerate() {
            row(i, or);
        }
    }
}

/// out (+)= a[m x k] * b[n x k]^T  (b stored row-major with n rows)
pub fn mm_nt(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize, acc: bool) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let row = |i: usize, or: &mut [f64]| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, o) in or.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            let dot: f64 = ar.iter().zip(br.iter()).map(|(x, y)| x * y).sum();
            if acc {
                *o += dot;
            } else {
                *o = dot;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, or)| row(i, or));
    } else {
        for (i, or) in out.chunks_mut(n).enumerate() {
            row(i, or);
        }
    }
}

/// out (+)= a[k x m]^T * b[k x n]
pub fn mm_tn(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize, acc: bool) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, or)| {
            if !acc {
                or.fill(0.0);
            }
            for p in 0..k {
                let av = a[p * m + i];
                if av != 0.0 {
                    let br = &b[p * n..(p + 1) * n];
                    for (o, &bv) in or.iter_mut().zip(br.iter()) {
                        *o += av * bv;
                    }
                }
            }
        });
    } else {
        if !acc {
            out.fill(0.0);
        }
        for p in 0..k {
            let ar = &a[p * m..(p + 1) * m];
            let br = &b[p * n..(p + 1) * n];
            for (i, &av) in ar.iter().enumerate() {
                if av != 0.0 {
                    let or = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in or.iter_mut().zip(br.iter()) {
                        *o += av * bv;
                    }
                }
            }
        }
    }
}

/// In-place row softmax with max subtraction.
pub fn softmax_rows(x: &mut [f64], rows: usize, cols: usize) {
    debug_assert_eq!(x.len(), rows * cols);
    for r in x.chunks_mut(cols).take(rows) {
        let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in r.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in r.iter_mut() {
            *v /= sum;
        }
    }
}

/// log(sum(exp(row))) with max subtraction.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row layer norm: y = (x - mean)/sqrt(var + eps) * gain + bias.
/// Returns (mean, rstd) per row for the backward pass.
pub fn layer_norm_rows(
    out: &mut [f64],
    x: &[f64],
    rows: usize,
    cols: usize,
    gain: &[f64],
    bias: &[f64],
) -> Vec<(f64, f64)> {
    debug_assert_eq!(x.len(), rows * cols);
    let mut stats = Vec::with_capacity(rows);
    for i in 0..rows {
        let xr = &x[i * cols..(i + 1) * cols];
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let or = &mut out[i * cols..(i + 1) * cols];
        for j in 0..cols {
            or[j] = (xr[j] - mean) * rstd * gain[j] + bias[j];
        }
        stats.push((mean, rstd));
    }
    stats
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximation GELU; smooth, so finite differences behave.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Euclidean norm.
pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}
