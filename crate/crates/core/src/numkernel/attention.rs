//! Multi-head attention kernels on row-stacked sequences.
//!
//! Queries are `[batch·nq × d]`, keys and values `[batch·nk × d]`; head `h`
//! owns columns `h·dh..(h+1)·dh`. Probabilities are retained in
//! `[batch·heads·nq × nk]` for the backward pass.

use rayon::prelude::*;

use super::gemm::{axpy, dot, gemm, View};
use super::grad::softmax_row_backward;
use super::kernels::softmax_inplace;
use super::tally::{count_elementwise, count_macs};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttnShape {
    pub batch: usize,
    pub nq: usize,
    pub nk: usize,
    pub heads: usize,
    pub scale: f32,
}

fn check_qkv(
    op: &'static str,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    batch: usize,
    nq: usize,
    nk: usize,
    heads: usize,
) -> Result<usize> {
    let (qr, d) = q.expect_2d(op)?;
    let (kr, kd) = k.expect_2d(op)?;
    let (vr, vd) = v.expect_2d(op)?;
    if qr != batch * nq || kr != batch * nk || vr != batch * nk || kd != d || vd != d {
        return Err(Error::dim(
            op,
            format!(
                "q {:?}, k {:?}, v {:?} for batch {batch}, nq {nq}, nk {nk}",
                q.shape(),
                k.shape(),
                v.shape()
            ),
        ));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::dim(op, format!("width {d} not divisible by {heads} heads")));
    }
    Ok(d)
}

/// Dense softmax attention. `bias` is `[heads·nq × nk]`, shared across the
/// batch; `mask` is `[groups·nq × nk]` and applies to batch entry `b` as group
/// `b % groups`. Both are added to the scaled scores before the softmax.
pub fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    s: &AttnShape,
    bias: Option<&Tensor>,
    mask: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let AttnShape {
        batch,
        nq,
        nk,
        heads,
        scale,
    } = *s;
    let d = check_qkv("attention", q, k, v, batch, nq, nk, heads)?;
    let dh = d / heads;
    if let Some(b) = bias {
        if b.numel() != heads * nq * nk {
            return Err(Error::dim("attention", "bias must be [heads·nq × nk]"));
        }
    }
    let groups = match mask {
        Some(m) if m.numel() == 0 || m.numel() % (nq * nk) != 0 => {
            return Err(Error::dim("attention", "mask must be [groups·nq × nk]"))
        }
        Some(m) => m.numel() / (nq * nk),
        None => 1,
    };
    let mut probs = Tensor::zeros(&[batch * heads * nq, nk]);
    let mut out = Tensor::zeros(&[batch * nq, d]);
    let block = nq * nk;
    for b in 0..batch {
        for h in 0..heads {
            let p_off = (b * heads + h) * block;
            gemm(
                nq,
                dh,
                nk,
                scale,
                View::row_major(q.data(), d).at(b * nq * d + h * dh),
                View::transposed(k.data(), d).at(b * nk * d + h * dh),
                0.0,
                probs.data_mut(),
                p_off,
                nk,
                1,
            );
            let pb = &mut probs.data_mut()[p_off..p_off + block];
            if let Some(bias) = bias {
                for (x, y) in pb.iter_mut().zip(&bias.data()[h * block..(h + 1) * block]) {
                    *x += y;
                }
            }
            if let Some(mask) = mask {
                let g = b % groups;
                for (x, y) in pb.iter_mut().zip(&mask.data()[g * block..(g + 1) * block]) {
                    *x += y;
                }
            }
            softmax_inplace(pb, nk, 1.0);
            gemm(
                nq,
                nk,
                dh,
                1.0,
                View::row_major(probs.data(), nk).at(p_off),
                View::row_major(v.data(), d).at(b * nk * d + h * dh),
                0.0,
                out.data_mut(),
                b * nq * d + h * dh,
                d,
                1,
            );
        }
    }
    count_macs((2 * batch * nq * nk * d) as u64);
    count_elementwise((batch * heads * nq * nk) as u64);
    Ok((out, probs))
}

/// Gradients `(dq, dk, dv, dbias)` of [`attention_forward`].
pub fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &Tensor,
    dout: &Tensor,
    s: &AttnShape,
    want_bias: bool,
) -> Result<(Tensor, Tensor, Tensor, Option<Tensor>)> {
    let AttnShape {
        batch,
        nq,
        nk,
        heads,
        scale,
    } = *s;
    let d = check_qkv("attention_backward", q, k, v, batch, nq, nk, heads)?;
    if dout.shape() != [batch * nq, d] {
        return Err(Error::dim("attention_backward", "upstream gradient shape"));
    }
    let dh = d / heads;
    let block = nq * nk;
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut dbias = want_bias.then(|| Tensor::zeros(&[heads * nq, nk]));
    let mut ds = Tensor::zeros(&[nq, nk]);
    for b in 0..batch {
        for h in 0..heads {
            let p_off = (b * heads + h) * block;
            let o_off = b * nq * d + h * dh;
            let kv_off = b * nk * d + h * dh;
            gemm(
                nq,
                dh,
                nk,
                1.0,
                View::row_major(dout.data(), d).at(o_off),
                View::transposed(v.data(), d).at(kv_off),
                0.0,
                ds.data_mut(),
                0,
                nk,
                1,
            );
            gemm(
                nk,
                nq,
                dh,
                1.0,
                View::transposed(probs.data(), nk).at(p_off),
                View::row_major(dout.data(), d).at(o_off),
                1.0,
                dv.data_mut(),
                kv_off,
                d,
                1,
            );
            let pb = &probs.data()[p_off..p_off + block];
            for (p, g) in pb.chunks_exact(nk).zip(ds.data_mut().chunks_exact_mut(nk)) {
                softmax_row_backward(p, g, 1.0);
            }
            if let Some(db) = dbias.as_mut() {
                for (x, y) in db.data_mut()[h * block..(h + 1) * block].iter_mut().zip(ds.data()) {
                    *x += y;
                }
            }
            gemm(
                nq,
                nk,
                dh,
                scale,
                View::row_major(ds.data(), nk),
                View::row_major(k.data(), d).at(kv_off),
                0.0,
                dq.data_mut(),
                o_off,
                d,
                1,
            );
            gemm(
                nk,
                nq,
                dh,
                scale,
                View::transposed(ds.data(), nk),
                View::row_major(q.data(), d).at(o_off),
                0.0,
                dk.data_mut(),
                kv_off,
                d,
                1,
            );
        }
    }
    Ok((dq, dk, dv, dbias))
}

/// Banded (sliding-window) attention geometry. Token `i` attends to keys
/// `[i − half, i + half]` clipped to the sequence; with `global_first`, every
/// token whose band excludes token 0 also attends to it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandShape {
    pub batch: usize,
    pub n: usize,
    pub heads: usize,
    pub half: usize,
    pub global_first: bool,
    pub scale: f32,
}

impl BandShape {
    /// Probability slots per row.
    pub fn capacity(&self) -> usize {
        (2 * self.half + 1).min(self.n) + usize::from(self.global_first)
    }

    fn row(&self, i: usize) -> (usize, usize, bool) {
        let lo = i.saturating_sub(self.half);
        let hi = (i + self.half).min(self.n - 1);
        (lo, hi - lo + 1, self.global_first && lo > 0)
    }

    #[inline]
    fn key(&self, i: usize, slot: usize) -> Option<usize> {
        let (lo, len, extra) = self.row(i);
        if slot < len {
            Some(lo + slot)
        } else if extra && slot == len {
            Some(0)
        } else {
            None
        }
    }
}

pub fn band_forward(q: &Tensor, k: &Tensor, v: &Tensor, s: &BandShape) -> Result<(Tensor, Tensor)> {
    let d = check_qkv("band_attention", q, k, v, s.batch, s.n, s.n, s.heads)?;
    let dh = d / s.heads;
    let (n, heads) = (s.n, s.heads);
    if n == 0 {
        return Ok((Tensor::zeros(&[0, d]), Tensor::zeros(&[0, 0])));
    }
    let cap = s.capacity();
    let mut probs = Tensor::full(&[s.batch * heads * n, cap], f32::NEG_INFINITY);
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    probs
        .data_mut()
        .par_chunks_mut(cap)
        .enumerate()
        .for_each(|(r, row)| {
            let i = r % n;
            let h = (r / n) % heads;
            let b = r / (n * heads);
            let qi = &qd[(b * n + i) * d + h * dh..(b * n + i) * d + (h + 1) * dh];
            for (slot, val) in row.iter_mut().enumerate() {
                if let Some(j) = s.key(i, slot) {
                    let kj = &kd[(b * n + j) * d + h * dh..(b * n + j) * d + (h + 1) * dh];
                    *val = s.scale * dot(qi, kj);
                }
            }
            softmax_inplace(row, cap, 1.0);
        });
    let mut out = Tensor::zeros(&[s.batch * n, d]);
    let pd = probs.data();
    out.data_mut()
        .par_chunks_mut(d)
        .enumerate()
        .for_each(|(r, orow)| {
            let (b, i) = (r / n, r % n);
            for h in 0..heads {
                let prow = &pd[((b * heads + h) * n + i) * cap..((b * heads + h) * n + i + 1) * cap];
                let o = &mut orow[h * dh..(h + 1) * dh];
                for (slot, &p) in prow.iter().enumerate() {
                    if let Some(j) = s.key(i, slot) {
                        axpy(p, &vd[(b * n + j) * d + h * dh..(b * n + j) * d + (h + 1) * dh], o);
                    }
                }
            }
        });
    let pairs: usize = (0..n)
        .map(|i| {
            let (_, len, extra) = s.row(i);
            len + usize::from(extra)
        })
        .sum();
    count_macs((2 * s.batch * pairs * d) as u64);
    count_elementwise((s.batch * heads * n * cap) as u64);
    Ok((out, probs))
}

/// Gradients `(dq, dk, dv)` of [`band_forward`].
pub fn band_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &Tensor,
    dout: &Tensor,
    s: &BandShape,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = check_qkv("band_backward", q, k, v, s.batch, s.n, s.n, s.heads)?;
    if dout.shape() != q.shape() {
        return Err(Error::dim("band_backward", "upstream gradient shape"));
    }
    let dh = d / s.heads;
    let n = s.n;
    let cap = s.capacity();
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut g = vec![0.0f32; cap];
    for b in 0..s.batch {
        for h in 0..s.heads {
            for i in 0..n {
                let r = (b * s.heads + h) * n + i;
                let p = &probs.data()[r * cap..(r + 1) * cap];
                let col = |row: usize| (b * n + row) * d + h * dh;
                let doi = &dout.data()[col(i)..col(i) + dh];
                for slot in 0..cap {
                    g[slot] = match s.key(i, slot) {
                        Some(j) => {
                            axpy(p[slot], doi, &mut dv.data_mut()[col(j)..col(j) + dh]);
                            dot(doi, &v.data()[col(j)..col(j) + dh])
                        }
                        None => 0.0,
                    };
                }
                softmax_row_backward(p, &mut g, 1.0);
                for slot in 0..cap {
                    if let Some(j) = s.key(i, slot) {
                        let gs = s.scale * g[slot];
                        axpy(gs, &k.data()[col(j)..col(j) + dh], &mut dq.data_mut()[col(i)..col(i) + dh]);
                        axpy(gs, &q.data()[col(i)..col(i) + dh], &mut dk.data_mut()[col(j)..col(j) + dh]);
                    }
                }
            }
        }
    }
    Ok((dq, dk, dv))
}
