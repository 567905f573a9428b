//! Gradient kernels paired with the forward kernels in [`super::kernels`].
//! Backward kernels do not report to the op tally.

use super::gemm::{gemm, View};
use super::kernels::{conv_dims, im2col, Affine, Conv1dSpec, NormStats, CONV_TILE, GELU_C};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn same_shape(op: &'static str, expected: &[usize], got: &Tensor) -> Result<()> {
    if expected != got.shape() {
        return Err(Error::dim(
            op,
            format!("upstream gradient {:?} vs forward output {expected:?}", got.shape()),
        ));
    }
    Ok(())
}

fn mm(
    a: &Tensor,
    ta: bool,
    b: &Tensor,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    out: &mut Tensor,
    beta: f32,
) {
    let (ac, bc) = (a.cols(), b.cols());
    let av = if ta {
        View::transposed(a.data(), ac)
    } else {
        View::row_major(a.data(), ac)
    };
    let bv = if tb {
        View::transposed(b.data(), bc)
    } else {
        View::row_major(b.data(), bc)
    };
    gemm(m, k, n, 1.0, av, bv, beta, out.data_mut(), 0, n, 1);
}

/// Gradients of `y = op(a)·op(b)` with respect to `a` and `b`.
pub fn matmul_t_backward(
    a: &Tensor,
    ta: bool,
    b: &Tensor,
    tb: bool,
    dy: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (ar, ac) = a.expect_2d("matmul_backward")?;
    let (br, bc) = b.expect_2d("matmul_backward")?;
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    same_shape("matmul_backward", &[m, n], dy)?;
    // d op(a) = dy · op(b)^T  (m×k);  d op(b) = op(a)^T · dy  (k×n)
    let mut da = Tensor::zeros(&[ar, ac]);
    let mut db = Tensor::zeros(&[br, bc]);
    if !ta {
        mm(dy, false, b, !tb, m, n, k, &mut da, 0.0);
    } else {
        // a^T = dy·op(b)^T  =>  a = op(b)·dy^T  (k×m)
        mm(b, tb, dy, true, k, n, m, &mut da, 0.0);
    }
    if !tb {
        mm(a, !ta, dy, false, k, m, n, &mut db, 0.0);
    } else {
        // b^T = op(a)^T·dy  =>  b = dy^T·op(a)  (n×k)
        mm(dy, true, a, ta, n, m, k, &mut db, 0.0);
    }
    Ok((da, db))
}

pub fn matmul_backward(a: &Tensor, b: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor)> {
    matmul_t_backward(a, false, b, false, dy)
}

/// Gradients of `y = x·w + bias`.
pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    has_bias: bool,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let (dx, dw) = matmul_backward(x, w, dy)?;
    let db = has_bias.then(|| column_sums(dy));
    Ok((dx, dw, db))
}

pub fn column_sums(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = Tensor::zeros(&[c]);
    for row in x.data().chunks_exact(c.max(1)) {
        for (o, v) in out.data_mut().iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// In-place softmax backward on one row: `ds = scale·p ⊙ (dp − Σ dp⊙p)`.
pub(crate) fn softmax_row_backward(p: &[f32], dp: &mut [f32], scale: f32) {
    let s: f32 = p.iter().zip(dp.iter()).map(|(a, b)| a * b).sum();
    for (d, &pv) in dp.iter_mut().zip(p) {
        *d = scale * pv * (*d - s);
    }
}

/// Gradient of `y = softmax_rows(scale · x)` given `y` and `dy`.
pub fn softmax_rows_backward_scaled(y: &Tensor, dy: &Tensor, scale: f32) -> Result<Tensor> {
    same_shape("softmax_backward", y.shape(), dy)?;
    let cols = y.cols();
    let mut dx = dy.clone();
    if cols > 0 {
        for (p, d) in y.data().chunks_exact(cols).zip(dx.data_mut().chunks_exact_mut(cols)) {
            softmax_row_backward(p, d, scale);
        }
    }
    Ok(dx)
}

pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    softmax_rows_backward_scaled(y, dy, 1.0)
}

/// Gradients of a row norm: returns `(dx, dgamma, dbeta)`.
pub fn norm_rows_backward(
    x: &Tensor,
    gamma: &Tensor,
    stats: &NormStats,
    dy: &Tensor,
    affine: Affine,
) -> Result<(Tensor, Tensor, Tensor)> {
    same_shape("norm_backward", x.shape(), dy)?;
    let (rows, cols) = x.expect_2d("norm_backward")?;
    let mut dx = Tensor::zeros(&[rows, cols]);
    let mut dgamma = Tensor::zeros(gamma.shape());
    let mut dbeta = Tensor::zeros(gamma.shape());
    let g = gamma.data();
    let mut dxhat = vec![0.0f64; cols];
    let mut xhat = vec![0.0f64; cols];
    for r in 0..rows {
        let xr = x.row(r);
        let dyr = dy.row(r);
        let (mu, rs) = (stats.mean[r], stats.rstd[r]);
        for j in 0..cols {
            xhat[j] = (xr[j] as f64 - mu) * rs;
            let gi = match affine {
                Affine::PerColumn => j,
                Affine::PerRow { channels } => r % channels,
            };
            dgamma.data_mut()[gi] += dyr[j] * xhat[j] as f32;
            dbeta.data_mut()[gi] += dyr[j];
            dxhat[j] = dyr[j] as f64 * g[gi] as f64;
        }
        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
        let mean_dx = dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / cols as f64;
        let out = &mut dx.data_mut()[r * cols..(r + 1) * cols];
        for j in 0..cols {
            out[j] = (rs * (dxhat[j] - mean_d - xhat[j] * mean_dx)) as f32;
        }
    }
    Ok((dx, dgamma, dbeta))
}

pub fn layernorm_backward(
    x: &Tensor,
    gamma: &Tensor,
    stats: &NormStats,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    norm_rows_backward(x, gamma, stats, dy, Affine::PerColumn)
}

pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    same_shape("gelu_backward", x.shape(), dy)?;
    let mut dx = Tensor::zeros(x.shape());
    for ((o, &v), &d) in dx.data_mut().iter_mut().zip(x.data()).zip(dy.data()) {
        let u = GELU_C * (v + 0.044715 * v * v * v);
        let t = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
        *o = d * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
    }
    Ok(dx)
}

/// Gradient of `y = tanh(x)` from the forward output `y`.
pub fn tanh_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    same_shape("tanh_backward", y.shape(), dy)?;
    let mut dx = Tensor::zeros(y.shape());
    for ((o, &t), &d) in dx.data_mut().iter_mut().zip(y.data()).zip(dy.data()) {
        *o = d * (1.0 - t * t);
    }
    Ok(dx)
}

/// Gradients of [`conv1d`](super::kernels::conv1d): `(dx, dw, dbias)`.
pub fn conv1d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    spec: Conv1dSpec,
    batch: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = conv_dims(x, w, spec, batch)?;
    same_shape("conv1d_backward", &[batch * d.c_out, d.t_out], dy)?;
    let kk = d.cin_g * d.kernel;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[d.c_out]);
    let mut cols = vec![0.0f32; kk * CONV_TILE];
    let mut dcols = vec![0.0f32; kk * CONV_TILE];
    for bi in 0..batch {
        let xs = &x.data()[bi * d.c_in * d.t_in..(bi + 1) * d.c_in * d.t_in];
        for co in 0..d.c_out {
            let row = &dy.data()[(bi * d.c_out + co) * d.t_out..(bi * d.c_out + co + 1) * d.t_out];
            db.data_mut()[co] += row.iter().sum::<f32>();
        }
        for g in 0..spec.groups {
            for t0 in (0..d.t_out).step_by(CONV_TILE) {
                let tb = CONV_TILE.min(d.t_out - t0);
                im2col(xs, &d, spec, g * d.cin_g, t0, tb, &mut cols[..kk * tb]);
                let dy_view = View::row_major(dy.data(), d.t_out)
                    .at((bi * d.c_out + g * d.cout_g) * d.t_out + t0);
                // dW_g += dY_g · cols^T
                gemm(
                    d.cout_g,
                    tb,
                    kk,
                    1.0,
                    dy_view,
                    View::transposed(&cols[..kk * tb], tb),
                    1.0,
                    dw.data_mut(),
                    g * d.cout_g * kk,
                    kk,
                    1,
                );
                // dcols = W_g^T · dY_g
                gemm(
                    kk,
                    d.cout_g,
                    tb,
                    1.0,
                    View::transposed(w.data(), kk).at(g * d.cout_g * kk),
                    dy_view,
                    0.0,
                    &mut dcols[..kk * tb],
                    0,
                    tb,
                    1,
                );
                let dxs = &mut dx.data_mut()[bi * d.c_in * d.t_in..(bi + 1) * d.c_in * d.t_in];
                for ci in 0..d.cin_g {
                    let xrow = &mut dxs[(g * d.cin_g + ci) * d.t_in..(g * d.cin_g + ci + 1) * d.t_in];
                    for k in 0..d.kernel {
                        let src = &dcols[(ci * d.kernel + k) * tb..(ci * d.kernel + k + 1) * tb];
                        for (j, v) in src.iter().enumerate() {
                            let pos = (t0 + j) * spec.stride + k;
                            if pos >= spec.padding && pos - spec.padding < d.t_in {
                                xrow[pos - spec.padding] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dw, db))
}

/// Scatter-adds row gradients back into a `[vocab × d]` table gradient.
pub fn embedding_backward(ids: &[usize], dy: &Tensor, vocab: usize) -> Result<Tensor> {
    let (r, d) = dy.expect_2d("embedding_backward")?;
    if r != ids.len() {
        return Err(Error::dim("embedding_backward", "row count vs ids"));
    }
    let mut dt = Tensor::zeros(&[vocab, d]);
    for (row, &id) in dy.data().chunks_exact(d.max(1)).zip(ids) {
        if id >= vocab {
            return Err(Error::dim("embedding_backward", "id out of range"));
        }
        for (o, v) in dt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(row) {
            *o += v;
        }
    }
    Ok(dt)
}

/// Inverse of [`patchify`](super::kernels::patchify): scatters patch gradients
/// back to `image_shape = [batch, H, W, C]`.
pub fn patchify_backward(dp: &Tensor, image_shape: &[usize], patch: usize) -> Result<Tensor> {
    let (b, h, w, c) = match image_shape {
        [b, h, w, c] => (*b, *h, *w, *c),
        _ => return Err(Error::dim("patchify_backward", "image shape must be 4-D")),
    };
    let (gh, gw) = (h / patch, w / patch);
    let feat = patch * patch * c;
    same_shape("patchify_backward", &[b * gh * gw, feat], dp)?;
    let mut out = Tensor::zeros(image_shape);
    let od = out.data_mut();
    for (r, row) in dp.data().chunks_exact(feat.max(1)).enumerate() {
        let bi = r / (gh * gw);
        let (gy, gx) = ((r % (gh * gw)) / gw, r % gw);
        for py in 0..patch {
            let y = gy * patch + py;
            let base = ((bi * h + y) * w + gx * patch) * c;
            od[base..base + patch * c].copy_from_slice(&row[py * patch * c..(py + 1) * patch * c]);
        }
    }
    Ok(out)
}

pub fn segment_mean_backward(dy: &Tensor, n: usize) -> Result<Tensor> {
    let (m, c) = dy.expect_2d("segment_mean_backward")?;
    let mut dx = Tensor::zeros(&[n, c]);
    for j in 0..m {
        let (s, e) = super::kernels::segment_bounds(n, m, j);
        let inv = 1.0 / (e - s) as f32;
        for r in s..e {
            for (o, v) in dx.data_mut()[r * c..(r + 1) * c].iter_mut().zip(dy.row(j)) {
                *o = v * inv;
            }
        }
    }
    Ok(dx)
}

pub fn mean_rows_backward(dy: &Tensor, n: usize) -> Result<Tensor> {
    let (b, c) = dy.expect_2d("mean_rows_backward")?;
    let mut dx = Tensor::zeros(&[b * n, c]);
    for bi in 0..b {
        for r in 0..n {
            for (o, v) in dx.data_mut()[(bi * n + r) * c..(bi * n + r + 1) * c]
                .iter_mut()
                .zip(dy.row(bi))
            {
                *o = v / n as f32;
            }
        }
    }
    Ok(dx)
}

/// Scatter-add inverse of [`gather_rows`](super::kernels::gather_rows).
pub fn gather_rows_backward(dy: &Tensor, idx: &[Option<usize>], rows: usize) -> Result<Tensor> {
    let c = if idx.is_empty() { 0 } else { dy.numel() / idx.len() };
    let mut dx = Tensor::zeros(&[rows, c]);
    for (row, i) in dy.data().chunks_exact(c.max(1)).zip(idx) {
        if let Some(i) = *i {
            for (o, v) in dx.data_mut()[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    Ok(dx)
}

/// Gradients of [`weight_norm`](super::kernels::weight_norm): `(dv, dg)`.
pub fn weight_norm_backward(
    v: &Tensor,
    g: &Tensor,
    norms: &[f32],
    dw: &Tensor,
) -> Result<(Tensor, Tensor)> {
    same_shape("weight_norm_backward", v.shape(), dw)?;
    let k = norms.len();
    let mut proj = vec![0.0f32; k];
    for (i, (d, x)) in dw.data().iter().zip(v.data()).enumerate() {
        proj[i % k] += d * x;
    }
    let mut dg = Tensor::zeros(&[k]);
    for kk in 0..k {
        dg.data_mut()[kk] = proj[kk] / norms[kk];
    }
    let mut dv = Tensor::zeros(v.shape());
    for (i, (o, (d, x))) in dv
        .data_mut()
        .iter_mut()
        .zip(dw.data().iter().zip(v.data()))
        .enumerate()
    {
        let kk = i % k;
        let n = norms[kk];
        *o = g.data()[kk] / n * (d - x * proj[kk] / (n * n));
    }
    Ok((dv, dg))
}

/// Gradient of mean cross-entropy with respect to the logits.
pub fn cross_entropy_backward(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, k) = probs.expect_2d("cross_entropy_backward")?;
    let mut d = probs.clone();
    for (i, &l) in labels.iter().enumerate() {
        d.data_mut()[i * k + l] -= 1.0;
    }
    d.data_mut().iter_mut().for_each(|v| *v /= b as f32);
    Ok(d)
}
