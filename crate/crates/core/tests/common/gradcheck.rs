//! Backward kernels against central finite differences of the double-precision
//! references. Each case returns `(gradient, relative error)` pairs for the
//! scalar `L = Σ R ⊙ y` with a random upstream gradient `R`.

use attnprof_core::numkernel::attention::{
    attention_backward, attention_forward, band_backward, band_forward,
};
use attnprof_core::numkernel::{grad, kernels, Affine, AttnShape, BandShape, Conv1dSpec};

use super::*;

pub const EPS: f64 = 1e-3;
pub const TOL: f64 = 1e-4;

pub type Errors = Vec<(&'static str, f64)>;

fn err(out: &mut Errors, name: &'static str, analytic: &[f64], f: impl Fn(&[f64]) -> f64, x: &[f64]) {
    out.push((name, rel_err(analytic, &fd_grad(f, x, EPS))));
}

pub fn matmul_t(seed: u64, m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Errors {
    let mut r = rng(seed);
    let a = rand_vec(&mut r, m * k);
    let b = rand_vec(&mut r, k * n);
    let rr = rand_vec(&mut r, m * n);
    let ash = if ta { [k, m] } else { [m, k] };
    let bsh = if tb { [n, k] } else { [k, n] };
    let fwd = |a: &[f64], b: &[f64]| {
        let a = if ta { transpose(a, k, m) } else { a.to_vec() };
        let b = if tb { transpose(b, n, k) } else { b.to_vec() };
        dot(&matmul(&a, &b, m, k, n), &rr)
    };
    let (da, db) = grad::matmul_t_backward(&tensor(&ash, &a), ta, &tensor(&bsh, &b), tb, &tensor(&[m, n], &rr)).unwrap();
    let mut out = Errors::new();
    err(&mut out, "matmul da", &to64(&da), |x| fwd(x, &b), &a);
    err(&mut out, "matmul db", &to64(&db), |x| fwd(&a, x), &b);
    out
}

pub fn softmax(seed: u64, rows: usize, cols: usize, scale: f32) -> Errors {
    let mut r = rng(seed);
    let x = rand_vec(&mut r, rows * cols);
    let rr = rand_vec(&mut r, rows * cols);
    let y = kernels::softmax_rows_scaled(&tensor(&[rows, cols], &x), scale).unwrap();
    let dx = grad::softmax_rows_backward_scaled(&y, &tensor(&[rows, cols], &rr), scale).unwrap();
    let mut out = Errors::new();
    err(&mut out, "softmax", &to64(&dx), |v| dot(&softmax_rows(v, cols, scale as f64), &rr), &x);
    out
}

/// Needs `cols >= 3`: with two columns the output is `±γ + β` and the input
/// gradient vanishes.
pub fn norm(seed: u64, rows: usize, cols: usize, per_row: bool) -> Errors {
    let mut r = rng(seed);
    let channels = if per_row { rows } else { 0 };
    let np = if per_row { rows } else { cols };
    let affine = if per_row { Affine::PerRow { channels: rows } } else { Affine::PerColumn };
    let x = rand_vec(&mut r, rows * cols);
    let g = rand_vec(&mut r, np);
    let b = rand_vec(&mut r, np);
    let rr = rand_vec(&mut r, rows * cols);
    let eps = 1e-5;
    let xt = tensor(&[rows, cols], &x);
    let gt = tensor(&[np], &g);
    let (_, stats) = kernels::norm_rows(&xt, &gt, &tensor(&[np], &b), affine, eps as f32).unwrap();
    let (dx, dg, db) = grad::norm_rows_backward(&xt, &gt, &stats, &tensor(&[rows, cols], &rr), affine).unwrap();
    let f = |x: &[f64], g: &[f64], b: &[f64]| dot(&norm_rows(x, cols, g, b, channels, eps), &rr);
    let mut out = Errors::new();
    err(&mut out, "norm dx", &to64(&dx), |v| f(v, &g, &b), &x);
    err(&mut out, "norm dgamma", &to64(&dg), |v| f(&x, v, &b), &g);
    err(&mut out, "norm dbeta", &to64(&db), |v| f(&x, &g, v), &b);
    out
}

pub fn gelu_and_tanh(seed: u64, n: usize) -> Errors {
    let mut r = rng(seed);
    let x: Vec<f64> = rand_vec(&mut r, n).iter().map(|v| (3.0 * v) as f32 as f64).collect();
    let rr = rand_vec(&mut r, n);
    let xt = tensor(&[n], &x);
    let dg = grad::gelu_backward(&xt, &tensor(&[n], &rr)).unwrap();
    let y = kernels::tanh(&xt);
    let dt = grad::tanh_backward(&y, &tensor(&[n], &rr)).unwrap();
    let mut out = Errors::new();
    err(&mut out, "gelu", &to64(&dg), |v| dot(&gelu(v), &rr), &x);
    err(&mut out, "tanh", &to64(&dt), |v| v.iter().zip(&rr).map(|(a, b)| a.tanh() * b).sum(), &x);
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv1d(seed: u64, batch: usize, groups: usize, cig: usize, cog: usize, k: usize, stride: usize, pad: usize, extra: usize) -> Errors {
    let mut r = rng(seed);
    let (cin, cout) = (cig * groups, cog * groups);
    let t = k + extra;
    let x = rand_vec(&mut r, batch * cin * t);
    let w = rand_vec(&mut r, cout * cig * k);
    let b = rand_vec(&mut r, cout);
    let spec = Conv1dSpec { stride, padding: pad, groups };
    let t_out = spec.output_len(t, k).unwrap();
    let rr = rand_vec(&mut r, batch * cout * t_out);
    let f = |x: &[f64], w: &[f64], b: &[f64]| {
        dot(&super::conv1d(x, batch, cin, t, w, cout, k, Some(b), stride, pad, groups).0, &rr)
    };
    let (dx, dw, db) = grad::conv1d_backward(
        &tensor(&[batch * cin, t], &x),
        &tensor(&[cout, cig, k], &w),
        &tensor(&[batch * cout, t_out], &rr),
        spec,
        batch,
    )
    .unwrap();
    let mut out = Errors::new();
    err(&mut out, "conv1d dx", &to64(&dx), |v| f(v, &w, &b), &x);
    err(&mut out, "conv1d dw", &to64(&dw), |v| f(&x, v, &b), &w);
    err(&mut out, "conv1d db", &to64(&db), |v| f(&x, &w, v), &b);
    out
}

pub fn embedding_and_gather(seed: u64, vocab: usize, d: usize, n: usize) -> Errors {
    let mut r = rng(seed);
    let table = rand_vec(&mut r, vocab * d);
    let ids: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize % 5) % vocab).collect();
    let rr = rand_vec(&mut r, n * d);
    let dt = grad::embedding_backward(&ids, &tensor(&[n, d], &rr), vocab).unwrap();
    let f = |t: &[f64]| {
        ids.iter()
            .enumerate()
            .map(|(i, &id)| dot(&t[id * d..(id + 1) * d], &rr[i * d..(i + 1) * d]))
            .sum()
    };
    let mut out = Errors::new();
    err(&mut out, "embedding", &to64(&dt), f, &table);

    let idx: Vec<Option<usize>> = (0..2 * n).map(|i| (i % 3 != 0).then_some((i * 5) % vocab)).collect();
    let rr2 = rand_vec(&mut r, 2 * n * d);
    let dg = grad::gather_rows_backward(&tensor(&[n, 2 * d], &rr2), &idx, vocab).unwrap();
    let f = |t: &[f64]| {
        idx.iter()
            .enumerate()
            .map(|(i, j)| j.map_or(0.0, |j| dot(&t[j * d..(j + 1) * d], &rr2[i * d..(i + 1) * d])))
            .sum()
    };
    err(&mut out, "gather", &to64(&dg), f, &table);
    out
}

pub fn patchify(seed: u64, b: usize, gh: usize, gw: usize, p: usize, c: usize) -> Errors {
    let mut r = rng(seed);
    let (h, w) = (gh * p, gw * p);
    let img = rand_vec(&mut r, b * h * w * c);
    let rr = rand_vec(&mut r, img.len());
    let dp = grad::patchify_backward(&tensor(&[b * gh * gw, p * p * c], &rr), &[b, h, w, c], p).unwrap();
    // patchify is a permutation; evaluate it in double precision by index
    let f = |x: &[f64]| {
        let mut s = 0.0;
        for (i, rv) in rr.iter().enumerate() {
            let (row, col) = (i / (p * p * c), i % (p * p * c));
            let bi = row / (gh * gw);
            let (py, px) = ((row % (gh * gw)) / gw, row % gw);
            let (yy, rest) = (col / (p * c), col % (p * c));
            let src = ((bi * h + py * p + yy) * w + px * p) * c + rest;
            s += x[src] * rv;
        }
        s
    };
    let mut out = Errors::new();
    err(&mut out, "patchify", &to64(&dp), f, &img);
    out
}

/// Needs `o·i >= 2` for the same reason as [`norm`].
pub fn weight_norm(seed: u64, o: usize, i: usize, k: usize) -> Errors {
    let mut r = rng(seed);
    let v = rand_vec(&mut r, o * i * k);
    let g = rand_vec(&mut r, k);
    let rr = rand_vec(&mut r, o * i * k);
    let (_, norms) = kernels::weight_norm(&tensor(&[o, i, k], &v), &tensor(&[k], &g)).unwrap();
    let (dv, dg) = grad::weight_norm_backward(&tensor(&[o, i, k], &v), &tensor(&[k], &g), &norms, &tensor(&[o, i, k], &rr)).unwrap();
    let f = |v: &[f64], g: &[f64]| {
        let mut n = vec![0.0; k];
        for (j, x) in v.iter().enumerate() {
            n[j % k] += x * x;
        }
        v.iter().enumerate().map(|(j, x)| g[j % k] * x / n[j % k].sqrt() * rr[j]).sum()
    };
    let mut out = Errors::new();
    err(&mut out, "weight_norm dv", &to64(&dv), |x| f(x, &g), &v);
    err(&mut out, "weight_norm dg", &to64(&dg), |x| f(&v, x), &g);
    out
}

pub fn pooling(seed: u64, n: usize, c: usize, m: usize, batch: usize) -> Errors {
    let m = m.min(n);
    let mut r = rng(seed);
    let x = rand_vec(&mut r, n * c);
    let rr = rand_vec(&mut r, m * c);
    let dx = grad::segment_mean_backward(&tensor(&[m, c], &rr), n).unwrap();
    let f = |x: &[f64]| {
        let mut s = 0.0;
        for j in 0..m {
            let (a, b) = (j * n / m, (j + 1) * n / m);
            for row in a..b {
                for col in 0..c {
                    s += x[row * c + col] * rr[j * c + col] / (b - a) as f64;
                }
            }
        }
        s
    };
    let mut out = Errors::new();
    err(&mut out, "segment_mean", &to64(&dx), f, &x);

    let xb = rand_vec(&mut r, batch * n * c);
    let rb = rand_vec(&mut r, batch * c);
    let dx = grad::mean_rows_backward(&tensor(&[batch, c], &rb), n).unwrap();
    let f = |x: &[f64]| (0..batch * n * c).map(|i| x[i] * rb[(i / (n * c)) * c + i % c] / n as f64).sum();
    err(&mut out, "mean_rows", &to64(&dx), f, &xb);
    out
}

pub fn cross_entropy(seed: u64, b: usize, k: usize) -> Errors {
    let mut r = rng(seed);
    let logits = rand_vec(&mut r, b * k);
    let labels: Vec<usize> = (0..b).map(|i| (i + seed as usize) % k).collect();
    let (_, probs) = kernels::cross_entropy(&tensor(&[b, k], &logits), &labels).unwrap();
    let d = grad::cross_entropy_backward(&probs, &labels).unwrap();
    let mut out = Errors::new();
    err(&mut out, "cross_entropy", &to64(&d), |x| super::cross_entropy(x, k, &labels), &logits);
    out
}

#[allow(clippy::too_many_arguments)]
pub fn attention(seed: u64, batch: usize, nq: usize, nk: usize, heads: usize, dh: usize, masked: bool) -> Errors {
    let mut r = rng(seed);
    let d = heads * dh;
    let q = rand_vec(&mut r, batch * nq * d);
    let k = rand_vec(&mut r, batch * nk * d);
    let v = rand_vec(&mut r, batch * nk * d);
    let bias = rand_vec(&mut r, heads * nq * nk);
    let rr = rand_vec(&mut r, batch * nq * d);
    // mask out the last key for every query of odd batch entries
    let mask: Vec<f64> = (0..batch * nq * nk)
        .map(|i| {
            if masked && nk > 1 && (i / (nq * nk)) % 2 == 1 && i % nk == nk - 1 {
                f64::NEG_INFINITY
            } else {
                0.0
            }
        })
        .collect();
    let scale = 0.7f32;
    let shape = AttnShape { batch, nq, nk, heads, scale };
    let (qt, kt, vt) = (tensor(&[batch * nq, d], &q), tensor(&[batch * nk, d], &k), tensor(&[batch * nk, d], &v));
    let (_, probs) = attention_forward(&qt, &kt, &vt, &shape, Some(&tensor(&[heads * nq, nk], &bias)), Some(&tensor(&[batch * nq, nk], &mask))).unwrap();
    let (dq, dk, dv, db) = attention_backward(&qt, &kt, &vt, &probs, &tensor(&[batch * nq, d], &rr), &shape, true).unwrap();
    let f = |q: &[f64], k: &[f64], v: &[f64], b: &[f64]| {
        dot(&super::attention(q, k, v, batch, nq, nk, heads, scale as f64, Some(b), Some(&mask)), &rr)
    };
    let mut out = Errors::new();
    err(&mut out, "attention dq", &to64(&dq), |x| f(x, &k, &v, &bias), &q);
    err(&mut out, "attention dk", &to64(&dk), |x| f(&q, x, &v, &bias), &k);
    err(&mut out, "attention dv", &to64(&dv), |x| f(&q, &k, x, &bias), &v);
    err(&mut out, "attention dbias", &to64(&db.unwrap()), |x| f(&q, &k, &v, x), &bias);
    out
}

pub fn band_attention(seed: u64, batch: usize, n: usize, heads: usize, dh: usize, half: usize, global_first: bool) -> Errors {
    let mut r = rng(seed);
    let d = heads * dh;
    let q = rand_vec(&mut r, batch * n * d);
    let k = rand_vec(&mut r, batch * n * d);
    let v = rand_vec(&mut r, batch * n * d);
    let rr = rand_vec(&mut r, batch * n * d);
    let scale = 0.5f32;
    let shape = BandShape { batch, n, heads, half, global_first, scale };
    let (qt, kt, vt) = (tensor(&[batch * n, d], &q), tensor(&[batch * n, d], &k), tensor(&[batch * n, d], &v));
    let (_, probs) = band_forward(&qt, &kt, &vt, &shape).unwrap();
    let (dq, dk, dv) = band_backward(&qt, &kt, &vt, &probs, &tensor(&[batch * n, d], &rr), &shape).unwrap();
    let m1 = band_mask(n, half, global_first);
    let mask: Vec<f64> = (0..batch).flat_map(|_| m1.iter().copied()).collect();
    let f = |q: &[f64], k: &[f64], v: &[f64]| {
        dot(&super::attention(q, k, v, batch, n, n, heads, scale as f64, None, Some(&mask)), &rr)
    };
    let mut out = Errors::new();
    err(&mut out, "band dq", &to64(&dq), |x| f(x, &k, &v), &q);
    err(&mut out, "band dk", &to64(&dk), |x| f(&q, x, &v), &k);
    err(&mut out, "band dv", &to64(&dv), |x| f(&q, &k, x), &v);
    out
}
