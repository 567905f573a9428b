//! Double-precision reference implementations used as test oracles.
#![allow(dead_code)]

pub mod gradcheck;

use attnprof_core::numkernel::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0f32..1.0) as f64).collect()
}

pub fn tensor(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::from_vec(shape, v.iter().map(|&x| x as f32).collect()).unwrap()
}

pub fn to64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&x| x as f64).collect()
}

/// `max |a − b|`.
pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Norm-wise relative error `‖a − b‖ / max(‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-6)
}

/// Central finite differences of a scalar function.
pub fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + eps;
            let up = f(&p);
            p[i] = x[i] - eps;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

pub fn softmax_rows(x: &[f64], cols: usize, scale: f64) -> Vec<f64> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) * scale).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Row normalization; `channels == 0` means per-column affine.
pub fn norm_rows(x: &[f64], cols: usize, g: &[f64], b: &[f64], channels: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (r, (xr, o)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let m = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..cols {
            let (gg, bb) = if channels == 0 {
                (g[j], b[j])
            } else {
                (g[r % channels], b[r % channels])
            };
            o[j] = (xr[j] - m) * inv * gg + bb;
        }
    }
    out
}

pub fn gelu(x: &[f64]) -> Vec<f64> {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    x.iter()
        .map(|&v| 0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh()))
        .collect()
}

/// Direct 1-D convolution over `[batch·cin × t]` with weights `[cout × cin/g × k]`.
#[allow(clippy::too_many_arguments)]
pub fn conv1d(
    x: &[f64],
    batch: usize,
    cin: usize,
    t: usize,
    w: &[f64],
    cout: usize,
    k: usize,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f64>, usize) {
    let t_out = (t + 2 * pad - k) / stride + 1;
    let (cig, cog) = (cin / groups, cout / groups);
    let mut out = vec![0.0; batch * cout * t_out];
    for b in 0..batch {
        for co in 0..cout {
            let g = co / cog;
            for o in 0..t_out {
                let mut s = bias.map(|b| b[co]).unwrap_or(0.0);
                for ci in 0..cig {
                    for kk in 0..k {
                        let pos = (o * stride + kk) as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < t {
                            s += w[(co * cig + ci) * k + kk]
                                * x[(b * cin + g * cig + ci) * t + pos as usize];
                        }
                    }
                }
                out[(b * cout + co) * t_out + o] = s;
            }
        }
    }
    (out, t_out)
}

/// Multi-head attention on row-stacked sequences with an optional additive
/// bias per head (`[heads·nq × nk]`) and mask per batch entry (`[batch·nq × nk]`).
#[allow(clippy::too_many_arguments)]
pub fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    batch: usize,
    nq: usize,
    nk: usize,
    heads: usize,
    scale: f64,
    bias: Option<&[f64]>,
    mask: Option<&[f64]>,
) -> Vec<f64> {
    let d = q.len() / (batch * nq);
    let dh = d / heads;
    let mut out = vec![0.0; batch * nq * d];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..nq {
                let mut s = vec![0.0; nk];
                for j in 0..nk {
                    let mut acc = 0.0;
                    for c in 0..dh {
                        acc += q[(b * nq + i) * d + h * dh + c] * k[(b * nk + j) * d + h * dh + c];
                    }
                    s[j] = scale * acc
                        + bias.map(|x| x[(h * nq + i) * nk + j]).unwrap_or(0.0)
                        + mask.map(|x| x[(b * nq + i) * nk + j]).unwrap_or(0.0);
                }
                let p = softmax_rows(&s, nk, 1.0);
                for j in 0..nk {
                    for c in 0..dh {
                        out[(b * nq + i) * d + h * dh + c] += p[j] * v[(b * nk + j) * d + h * dh + c];
                    }
                }
            }
        }
    }
    out
}

/// Additive mask for banded attention with an optional global first token.
pub fn band_mask(n: usize, half: usize, global_first: bool) -> Vec<f64> {
    let mut m = vec![f64::NEG_INFINITY; n * n];
    for i in 0..n {
        for j in 0..n {
            if i.abs_diff(j) <= half || (global_first && j == 0) {
                m[i * n + j] = 0.0;
            }
        }
    }
    m
}

pub fn cross_entropy(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let p = softmax_rows(logits, classes, 1.0);
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -p[i * classes + l].ln())
        .sum::<f64>()
        / labels.len() as f64
}
