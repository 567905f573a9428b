//! Forward kernels. Every kernel allocates its output through [`Tensor`] and
//! reports its work to the op tally.

use rayon::prelude::*;

use super::gemm::{gemm, View};
use super::tally::{count_elementwise, count_macs};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// `op(a) · op(b)` for 2-D tensors, where `op` optionally transposes.
pub fn matmul_t(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Result<Tensor> {
    let (ar, ac) = a.expect_2d("matmul")?;
    let (br, bc) = b.expect_2d("matmul")?;
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("inner dimensions differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
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
    let mut out = Tensor::zeros(&[m, n]);
    gemm(m, k, n, 1.0, av, bv, 0.0, out.data_mut(), 0, n, 1);
    count_macs((m * k * n) as u64);
    Ok(out)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_t(a, false, b, false)
}

/// `x · w + bias` with `w` stored `[in × out]`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (r, i) = x.expect_2d("linear")?;
    let (wi, o) = w.expect_2d("linear")?;
    if i != wi {
        return Err(Error::dim(
            "linear",
            format!("input width {i} vs weight {:?}", w.shape()),
        ));
    }
    let mut out = Tensor::zeros(&[r, o]);
    let beta = if let Some(b) = bias {
        if b.numel() != o {
            return Err(Error::dim("linear", format!("bias length {} vs {o}", b.numel())));
        }
        for row in out.data_mut().chunks_exact_mut(o.max(1)) {
            row.copy_from_slice(b.data());
        }
        1.0
    } else {
        0.0
    };
    gemm(
        r,
        i,
        o,
        1.0,
        View::row_major(x.data(), i),
        View::row_major(w.data(), o),
        beta,
        out.data_mut(),
        0,
        o,
        1,
    );
    count_macs((r * i * o) as u64);
    Ok(out)
}

/// In-place `softmax(scale · row)`. Rows that are entirely `-inf` become zeros.
pub(crate) fn softmax_inplace(data: &mut [f32], cols: usize, scale: f32) {
    if cols == 0 {
        return;
    }
    let body = |row: &mut [f32]| {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        if max == f32::NEG_INFINITY {
            row.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = ((*v - max) * scale).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    };
    if data.len() > 1 << 16 {
        data.par_chunks_mut(cols).for_each(body);
    } else {
        data.chunks_mut(cols).for_each(body);
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    softmax_rows_scaled(x, 1.0)
}

/// Row-wise `softmax(scale · x)`.
pub fn softmax_rows_scaled(x: &Tensor, scale: f32) -> Result<Tensor> {
    let cols = x.cols();
    let mut out = x.clone();
    softmax_inplace(out.data_mut(), cols, scale);
    count_elementwise(x.numel() as u64);
    Ok(out)
}

/// Which axis the norm's learned scale and shift run along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Affine {
    /// One gamma/beta per column (layer norm).
    PerColumn,
    /// One gamma/beta per row, indexed `row % channels` (per-channel group norm).
    PerRow { channels: usize },
}

/// Per-row statistics retained for the backward pass.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Normalizes each row to zero mean and unit variance, then applies the affine.
pub fn norm_rows(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    affine: Affine,
    eps: f32,
) -> Result<(Tensor, NormStats)> {
    let (rows, cols) = x.expect_2d("norm")?;
    let expected = match affine {
        Affine::PerColumn => cols,
        Affine::PerRow { channels } => channels,
    };
    if gamma.numel() != expected || beta.numel() != expected {
        return Err(Error::dim(
            "norm",
            format!("affine length {} vs {expected}", gamma.numel()),
        ));
    }
    let mut out = Tensor::zeros(&[rows, cols]);
    let mut mean = vec![0.0; rows];
    let mut rstd = vec![0.0; rows];
    let (g, b) = (gamma.data(), beta.data());
    out.data_mut()
        .par_chunks_mut(cols.max(1))
        .zip(mean.par_iter_mut().zip(rstd.par_iter_mut()))
        .enumerate()
        .for_each(|(r, (o, (mu, rs)))| {
            let xr = &x.data()[r * cols..(r + 1) * cols];
            let m64 = xr.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
            let var = xr.iter().map(|&v| (v as f64 - m64).powi(2)).sum::<f64>() / cols as f64;
            let inv64 = 1.0 / (var + eps as f64).sqrt();
            *mu = m64;
            *rs = inv64;
            let (m, inv) = (m64 as f32, inv64 as f32);
            match affine {
                Affine::PerColumn => {
                    for j in 0..cols {
                        o[j] = (xr[j] - m) * inv * g[j] + b[j];
                    }
                }
                Affine::PerRow { channels } => {
                    let c = r % channels;
                    for j in 0..cols {
                        o[j] = (xr[j] - m) * inv * g[c] + b[c];
                    }
                }
            }
        });
    count_elementwise(x.numel() as u64);
    Ok((out, NormStats { mean, rstd }))
}

pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, NormStats)> {
    norm_rows(x, gamma, beta, Affine::PerColumn, LAYER_NORM_EPS)
}

pub(crate) const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

#[inline]
pub(crate) fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

/// Tanh-approximated GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    map(x, gelu_scalar)
}

pub fn tanh(x: &Tensor) -> Tensor {
    map(x, f32::tanh)
}

pub fn scale(x: &Tensor, s: f32) -> Tensor {
    map(x, |v| v * s)
}

fn map(x: &Tensor, f: impl Fn(f32) -> f32 + Sync) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    out.data_mut()
        .par_iter_mut()
        .zip(x.data().par_iter())
        .for_each(|(o, &v)| *o = f(v));
    count_elementwise(x.numel() as u64);
    out
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            "add",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = Tensor::zeros(a.shape());
    out.data_mut()
        .par_iter_mut()
        .zip(a.data().par_iter().zip(b.data().par_iter()))
        .for_each(|(o, (x, y))| *o = x + y);
    count_elementwise(a.numel() as u64);
    Ok(out)
}

/// `c·I − x` for square `x`.
pub fn identity_minus(x: &Tensor, c: f32) -> Result<Tensor> {
    let (r, cols) = x.expect_2d("identity_minus")?;
    if r != cols {
        return Err(Error::dim("identity_minus", format!("{r}x{cols} is not square")));
    }
    let mut out = Tensor::zeros(&[r, r]);
    for (i, (o, v)) in out.data_mut().iter_mut().zip(x.data()).enumerate() {
        *o = if i / r == i % r { c - v } else { -v };
    }
    count_elementwise(x.numel() as u64);
    Ok(out)
}

/// Convolution geometry. Weights are stored `[C_out × C_in/groups × kernel]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv1dSpec {
    fn default() -> Self {
        Conv1dSpec {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl Conv1dSpec {
    pub fn output_len(&self, t: usize, kernel: usize) -> Option<usize> {
        let padded = t + 2 * self.padding;
        if padded < kernel || self.stride == 0 {
            None
        } else {
            Some((padded - kernel) / self.stride + 1)
        }
    }
}

pub(crate) struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub cin_g: usize,
    pub cout_g: usize,
}

pub(crate) fn conv_dims(
    x: &Tensor,
    w: &Tensor,
    spec: Conv1dSpec,
    batch: usize,
) -> Result<ConvDims> {
    let (rows, t_in) = x.expect_2d("conv1d")?;
    let (c_out, cin_g, kernel) = match w.shape() {
        [a, b, c] => (*a, *b, *c),
        s => return Err(Error::dim("conv1d", format!("weight must be 3-D, got {s:?}"))),
    };
    if batch == 0 || rows % batch != 0 {
        return Err(Error::dim("conv1d", format!("{rows} rows for batch {batch}")));
    }
    let c_in = rows / batch;
    let g = spec.groups;
    if g == 0 || c_in % g != 0 || c_out % g != 0 || cin_g != c_in / g {
        return Err(Error::dim(
            "conv1d",
            format!("channels {c_in}->{c_out} with groups {g} and weight {:?}", w.shape()),
        ));
    }
    let t_out = spec.output_len(t_in, kernel).ok_or_else(|| Error::EmptyOutput {
        op: "conv1d",
        detail: format!("length {t_in} (+2x{} padding) < kernel {kernel}", spec.padding),
    })?;
    Ok(ConvDims {
        c_in,
        c_out,
        kernel,
        t_in,
        t_out,
        cin_g,
        cout_g: c_out / g,
    })
}

pub(crate) const CONV_TILE: usize = 512;

/// Fills `cols[(ci·K + k) × tb]` with the input patch for output frames `t0..t0+tb`.
pub(crate) fn im2col(
    xs: &[f32],
    d: &ConvDims,
    spec: Conv1dSpec,
    ci0: usize,
    t0: usize,
    tb: usize,
    cols: &mut [f32],
) {
    for ci in 0..d.cin_g {
        let xrow = &xs[(ci0 + ci) * d.t_in..(ci0 + ci + 1) * d.t_in];
        for k in 0..d.kernel {
            let dst = &mut cols[(ci * d.kernel + k) * tb..(ci * d.kernel + k + 1) * tb];
            for (j, v) in dst.iter_mut().enumerate() {
                let pos = (t0 + j) * spec.stride + k;
                *v = if pos >= spec.padding && pos - spec.padding < d.t_in {
                    xrow[pos - spec.padding]
                } else {
                    0.0
                };
            }
        }
    }
}

/// 1-D convolution over `[batch·C_in × T]`, producing `[batch·C_out × T']`
/// with `T' = floor((T + 2·pad − kernel)/stride) + 1`.
pub fn conv1d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    spec: Conv1dSpec,
    batch: usize,
) -> Result<Tensor> {
    let d = conv_dims(x, w, spec, batch)?;
    if let Some(b) = bias {
        if b.numel() != d.c_out {
            return Err(Error::dim("conv1d", "bias length"));
        }
    }
    let mut out = Tensor::zeros(&[batch * d.c_out, d.t_out]);
    let kk = d.cin_g * d.kernel;
    let mut cols = vec![0.0f32; kk * CONV_TILE];
    let od = out.data_mut();
    for bi in 0..batch {
        let xs = &x.data()[bi * d.c_in * d.t_in..(bi + 1) * d.c_in * d.t_in];
        for g in 0..spec.groups {
            for t0 in (0..d.t_out).step_by(CONV_TILE) {
                let tb = CONV_TILE.min(d.t_out - t0);
                im2col(xs, &d, spec, g * d.cin_g, t0, tb, &mut cols[..kk * tb]);
                let row0 = bi * d.c_out + g * d.cout_g;
                gemm(
                    d.cout_g,
                    kk,
                    tb,
                    1.0,
                    View::row_major(w.data(), kk).at(g * d.cout_g * kk),
                    View::row_major(&cols[..kk * tb], tb),
                    0.0,
                    od,
                    row0 * d.t_out + t0,
                    d.t_out,
                    1,
                );
            }
        }
        if let Some(b) = bias {
            for co in 0..d.c_out {
                let row = &mut od[(bi * d.c_out + co) * d.t_out..(bi * d.c_out + co + 1) * d.t_out];
                row.iter_mut().for_each(|v| *v += b.data()[co]);
            }
        }
    }
    count_macs((batch * d.c_out * kk * d.t_out) as u64);
    Ok(out)
}

/// Gathers table rows: `[ids.len() × d]`.
pub fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (vocab, d) = table.expect_2d("embedding")?;
    let mut out = Tensor::zeros(&[ids.len(), d]);
    for (o, &id) in out.data_mut().chunks_exact_mut(d.max(1)).zip(ids) {
        if id >= vocab {
            return Err(Error::dim("embedding", format!("id {id} >= vocab {vocab}")));
        }
        o.copy_from_slice(table.row(id));
    }
    Ok(out)
}

/// Splits `[batch, H, W, C]` images into non-overlapping `patch×patch` tiles:
/// `[batch·(H/p)·(W/p) × p·p·C]`, patch-row-major, features ordered (py, px, c).
pub fn patchify(img: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, h, w, c) = image_dims(img)?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::dim(
            "patchify",
            format!("{h}x{w} is not divisible by patch {patch}"),
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let feat = patch * patch * c;
    let mut out = Tensor::zeros(&[b * gh * gw, feat]);
    let src = img.data();
    for (r, o) in out.data_mut().chunks_exact_mut(feat.max(1)).enumerate() {
        let bi = r / (gh * gw);
        let (gy, gx) = ((r % (gh * gw)) / gw, r % gw);
        for py in 0..patch {
            let y = gy * patch + py;
            let base = ((bi * h + y) * w + gx * patch) * c;
            o[py * patch * c..(py + 1) * patch * c].copy_from_slice(&src[base..base + patch * c]);
        }
    }
    Ok(out)
}

pub(crate) fn image_dims(img: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match img.shape() {
        [b, h, w, c] => Ok((*b, *h, *w, *c)),
        s => Err(Error::dim("image", format!("expected [batch, H, W, C], got {s:?}"))),
    }
}

/// Zero-pads `[batch, H, W, C]` images on the bottom/right to `hp × wp`.
pub fn pad_image(img: &Tensor, hp: usize, wp: usize) -> Result<Tensor> {
    let (b, h, w, c) = image_dims(img)?;
    if hp < h || wp < w {
        return Err(Error::dim("pad_image", "target smaller than input"));
    }
    if hp == h && wp == w {
        return Ok(img.clone());
    }
    let mut out = Tensor::zeros(&[b, hp, wp, c]);
    let od = out.data_mut();
    for bi in 0..b {
        for y in 0..h {
            let s = ((bi * h + y) * w) * c;
            let d = ((bi * hp + y) * wp) * c;
            od[d..d + w * c].copy_from_slice(&img.data()[s..s + w * c]);
        }
    }
    Ok(out)
}

/// Mean over `m` contiguous, near-equal row segments: `[n × c] -> [m × c]`.
pub fn segment_mean(x: &Tensor, m: usize) -> Result<Tensor> {
    let (n, c) = x.expect_2d("segment_mean")?;
    if m == 0 || m > n {
        return Err(Error::Config(format!("{m} segments over {n} rows")));
    }
    let mut out = Tensor::zeros(&[m, c]);
    for (j, o) in out.data_mut().chunks_exact_mut(c.max(1)).enumerate() {
        let (s, e) = segment_bounds(n, m, j);
        for r in s..e {
            for (ov, xv) in o.iter_mut().zip(x.row(r)) {
                *ov += xv;
            }
        }
        let inv = 1.0 / (e - s) as f32;
        o.iter_mut().for_each(|v| *v *= inv);
    }
    count_elementwise((m * c) as u64);
    Ok(out)
}

pub(crate) fn segment_bounds(n: usize, m: usize, j: usize) -> (usize, usize) {
    (j * n / m, (j + 1) * n / m)
}

pub fn transpose(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.expect_2d("transpose")?;
    let mut out = Tensor::zeros(&[c, r]);
    let od = out.data_mut();
    for i in 0..r {
        for j in 0..c {
            od[j * r + i] = x.data()[i * c + j];
        }
    }
    Ok(out)
}

/// Transposes each of `batch` stacked `[R × C]` blocks: `[batch·R × C] -> [batch·C × R]`.
pub fn transpose_blocks(x: &Tensor, batch: usize) -> Result<Tensor> {
    let (rows, c) = x.expect_2d("transpose_blocks")?;
    if batch == 0 || rows % batch != 0 {
        return Err(Error::dim("transpose_blocks", "rows not divisible by batch"));
    }
    let r = rows / batch;
    let mut out = Tensor::zeros(&[batch * c, r]);
    let od = out.data_mut();
    for b in 0..batch {
        let (xs, os) = (b * r * c, b * c * r);
        for i in 0..r {
            for j in 0..c {
                od[os + j * r + i] = x.data()[xs + i * c + j];
            }
        }
    }
    Ok(out)
}

/// Gathers rows by index (`None` yields a zero row) and concatenates every
/// `group` consecutive gathered rows into one output row.
pub fn gather_rows(x: &Tensor, idx: &[Option<usize>], group: usize) -> Result<Tensor> {
    let (rows, c) = x.expect_2d("gather_rows")?;
    if group == 0 || idx.len() % group != 0 {
        return Err(Error::dim("gather_rows", "index length not divisible by group"));
    }
    let mut out = Tensor::zeros(&[idx.len() / group, group * c]);
    for (o, i) in out.data_mut().chunks_exact_mut(c.max(1)).zip(idx) {
        if let Some(i) = *i {
            if i >= rows {
                return Err(Error::dim("gather_rows", format!("row {i} >= {rows}")));
            }
            o.copy_from_slice(x.row(i));
        }
    }
    Ok(out)
}

pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let c = parts.first().map(|p| p.cols()).unwrap_or(0);
    if parts.iter().any(|p| p.cols() != c || p.shape().len() != 2) {
        return Err(Error::dim("concat_rows", "column counts differ"));
    }
    let rows = parts.iter().map(|p| p.rows()).sum::<usize>();
    let mut data = Vec::with_capacity(rows * c);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(&[rows, c], data)
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let r = parts.first().map(|p| p.rows()).unwrap_or(0);
    if parts.iter().any(|p| p.rows() != r || p.shape().len() != 2) {
        return Err(Error::dim("concat_cols", "row counts differ"));
    }
    let c: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Tensor::zeros(&[r, c]);
    let od = out.data_mut();
    for i in 0..r {
        let mut off = 0;
        for p in parts {
            let pc = p.cols();
            od[i * c + off..i * c + off + pc].copy_from_slice(p.row(i));
            off += pc;
        }
    }
    Ok(out)
}

pub fn slice(x: &Tensor, r0: usize, nr: usize, c0: usize, nc: usize) -> Result<Tensor> {
    let (r, c) = x.expect_2d("slice")?;
    if r0 + nr > r || c0 + nc > c {
        return Err(Error::dim("slice", format!("[{r0}+{nr}, {c0}+{nc}] of {r}x{c}")));
    }
    let mut out = Tensor::zeros(&[nr, nc]);
    for (i, o) in out.data_mut().chunks_exact_mut(nc.max(1)).enumerate() {
        let s = (r0 + i) * c + c0;
        o.copy_from_slice(&x.data()[s..s + nc]);
    }
    Ok(out)
}

/// Per-sequence mean pooling: `[batch·n × c] -> [batch × c]`.
pub fn mean_rows(x: &Tensor, batch: usize) -> Result<Tensor> {
    let (rows, c) = x.expect_2d("mean_rows")?;
    if batch == 0 || rows % batch != 0 || rows == 0 {
        return Err(Error::dim("mean_rows", "rows not divisible by batch"));
    }
    let n = rows / batch;
    let mut out = Tensor::zeros(&[batch, c]);
    for (b, o) in out.data_mut().chunks_exact_mut(c.max(1)).enumerate() {
        for r in 0..n {
            for (ov, xv) in o.iter_mut().zip(x.row(b * n + r)) {
                *ov += xv;
            }
        }
        o.iter_mut().for_each(|v| *v /= n as f32);
    }
    count_elementwise((batch * c) as u64);
    Ok(out)
}

/// Weight normalization along the kernel axis: `w[:,:,k] = g[k]·v[:,:,k]/‖v[:,:,k]‖`.
pub fn weight_norm(v: &Tensor, g: &Tensor) -> Result<(Tensor, Vec<f32>)> {
    let k = match v.shape() {
        [_, _, k] => *k,
        s => return Err(Error::dim("weight_norm", format!("{s:?}"))),
    };
    if g.numel() != k {
        return Err(Error::dim("weight_norm", "g length"));
    }
    let norms = kernel_norms(v, k);
    let mut out = Tensor::zeros(v.shape());
    for (i, (o, x)) in out.data_mut().iter_mut().zip(v.data()).enumerate() {
        let kk = i % k;
        *o = g.data()[kk] * x / norms[kk];
    }
    count_elementwise(v.numel() as u64);
    Ok((out, norms))
}

pub(crate) fn kernel_norms(v: &Tensor, k: usize) -> Vec<f32> {
    let mut sq = vec![0.0f64; k];
    for (i, x) in v.data().iter().enumerate() {
        sq[i % k] += (*x as f64) * (*x as f64);
    }
    sq.into_iter().map(|s| (s.sqrt() as f32).max(1e-12)).collect()
}

/// Mean cross-entropy of `[batch × classes]` logits against integer labels.
/// Returns the loss and the softmax probabilities.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let (b, k) = logits.expect_2d("cross_entropy")?;
    if labels.len() != b || labels.iter().any(|&l| l >= k) {
        return Err(Error::dim("cross_entropy", "labels do not match logits"));
    }
    let mut probs = logits.clone();
    softmax_inplace(probs.data_mut(), k, 1.0);
    let loss = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -(probs.data()[i * k + l].max(1e-30)).ln())
        .sum::<f32>()
        / b as f32;
    Ok((loss, probs))
}
