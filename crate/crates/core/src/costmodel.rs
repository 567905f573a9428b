//! Closed-form cost of one forward step, per layer tag.
//!
//! The walk below mirrors the encoder's op sequence and each kernel's counting
//! rule, so on any config the MAC and elementwise totals equal what the
//! instrumented kernels tally. Per-tag bytes are the activation volume
//! allocated under each tag; the inference peak replays the live set with
//! tensors released as soon as the encoder drops them. Training peaks keep
//! every activation and add one gradient per parameter.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::sustained_crossover;
use crate::breakdown::CostBreakdown;
use crate::error::{Error, Result};
use crate::modelzoo::{count_params, pad_input, Family, ModelConfig};
use crate::taxonomy::{LayerTag, Modality, Mode, TagKind};

const F32: u64 = 4;

/// Training multiplies forward work by this factor (forward plus a backward
/// pass costing twice the forward).
pub const TRAINING_FLOP_FACTOR: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMetric {
    Flops,
    Bytes,
}

impl fmt::Display for CostMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CostMetric::Flops => "flops",
            CostMetric::Bytes => "bytes",
        })
    }
}

impl FromStr for CostMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "flops" => Ok(CostMetric::Flops),
            "bytes" | "memory" => Ok(CostMetric::Bytes),
            _ => Err(Error::unknown("cost metric", s, &["flops", "bytes"])),
        }
    }
}

/// Replays the forward pass: counts work per tag and tracks the live
/// activation set, releasing each tensor when the encoder drops it.
struct Walk {
    out: CostBreakdown,
    live: u64,
    peak: u64,
}

impl Walk {
    fn mac(&mut self, tag: LayerTag, n: u64) {
        if n > 0 {
            self.out.add_macs(tag, n);
        }
    }

    fn elem(&mut self, tag: LayerTag, n: u64) {
        if n > 0 {
            self.out.add_elementwise(tag, n);
        }
    }

    /// A new tensor of `floats` values; returns its size for a later `free`.
    fn alloc(&mut self, tag: LayerTag, floats: u64) -> u64 {
        if floats > 0 {
            self.out.add_bytes(tag, floats * F32);
        }
        self.live += floats;
        self.peak = self.peak.max(self.live);
        floats
    }

    fn free(&mut self, floats: u64) {
        self.live -= floats;
    }

    /// `rows × i` times `i × o`.
    fn linear(&mut self, tag: LayerTag, rows: u64, i: u64, o: u64) -> u64 {
        self.mac(tag, rows * i * o);
        self.alloc(tag, rows * o)
    }

    /// Elementwise op producing a new `n`-float tensor.
    fn map(&mut self, tag: LayerTag, n: u64) -> u64 {
        self.elem(tag, n);
        self.alloc(tag, n)
    }

    /// Elementwise op whose input is dropped right after.
    fn map_consume(&mut self, tag: LayerTag, n: u64) -> u64 {
        self.map(tag, n);
        self.free(n);
        n
    }
}

/// Encoder tokens for a raw input of `size` (tokens, samples, or image side).
/// Returns 0 when the input yields no tokens.
pub fn tokens_for(config: &ModelConfig, size: usize) -> usize {
    if size == 0 {
        return 0;
    }
    match config.modality() {
        Modality::Text => config.padded(size),
        Modality::Speech => config
            .featurizer
            .as_ref()
            .and_then(|f| f.frames(size).ok())
            .unwrap_or(0),
        Modality::Vision => {
            let p = config.patch_size.unwrap_or(1).max(1);
            if config.family == Family::VisionFull {
                let g = pad_input(size, p) / p;
                g * g + 1
            } else {
                let g = pad_input(config.padded(size), p) / p;
                g * g
            }
        }
    }
}

/// Cost of one step on a single input of raw `size`.
pub fn flops_of(config: &ModelConfig, size: usize, mode: Mode) -> CostBreakdown {
    cost_of(config, size, mode, 1)
}

/// Cost of one step on `batch` copies of a raw input of `size`.
pub fn cost_of(config: &ModelConfig, size: usize, mode: Mode, batch: usize) -> CostBreakdown {
    let mut w = Walk {
        out: CostBreakdown::new(mode),
        live: 0,
        peak: 0,
    };
    let b = batch as u64;
    if size == 0 || b == 0 || tokens_for(config, size) == 0 {
        return w.out;
    }
    let hidden = match config.modality() {
        Modality::Text => text(&mut w, config, size, b),
        Modality::Speech => speech(&mut w, config, size, b),
        Modality::Vision if config.family == Family::VisionFull => vit(&mut w, config, size, b),
        Modality::Vision => swin(&mut w, config, size, b),
    };
    w.free(hidden);
    let params = count_params(config);
    for (tag, e) in &params.entries {
        w.out.add_params(*tag, e.params);
    }
    let param_bytes = params.total_params() * F32;
    match mode {
        Mode::Inference => {
            w.out.resident_bytes = param_bytes;
            w.out.peak_bytes = param_bytes + w.peak * F32;
        }
        Mode::Training => {
            // activations are retained for the backward pass, gradients
            // mirror the parameters
            let retained: u64 = w.out.entries.values().map(|e| e.bytes).sum();
            w.out.resident_bytes = 2 * param_bytes;
            w.out.peak_bytes = 2 * param_bytes + retained;
            for e in w.out.entries.values_mut() {
                e.macs *= TRAINING_FLOP_FACTOR;
                e.elementwise *= TRAINING_FLOP_FACTOR;
                e.flops *= TRAINING_FLOP_FACTOR;
            }
        }
    }
    w.out
}

/// Post-norm residual: add, norm, and release of the sum and the old
/// hidden state.
fn residual_norm(w: &mut Walk, tag: LayerTag, x: u64) -> u64 {
    let sum = w.map(tag, x);
    w.map(tag, x);
    w.free(sum);
    w.free(x);
    x
}

/// Everything after attention in a block; `x` and the attention output `a`
/// are live on entry, the new hidden state and FFN output on exit.
fn block_tail(w: &mut Walk, i: usize, x: u64, a: u64, d: u64, ff: u64) -> (u64, u64) {
    let rows = x / d;
    let x = residual_norm(w, LayerTag::other(i), x);
    w.free(a);
    let pre = w.linear(LayerTag::intermediate(i), rows, d, ff);
    let h = w.map_consume(LayerTag::intermediate(i), pre);
    let o = w.linear(LayerTag::output(i), rows, ff, d);
    w.free(h);
    let x = residual_norm(w, LayerTag::other(i), x);
    (x, o)
}

fn dense_attention(w: &mut Walk, tag: LayerTag, b: u64, nq: u64, nk: u64, d: u64, h: u64) -> u64 {
    w.mac(tag, 2 * b * nq * nk * d);
    w.elem(tag, b * h * nq * nk);
    let probs = w.alloc(tag, b * h * nq * nk);
    let out = w.alloc(tag, b * nq * d);
    w.free(probs);
    out
}

/// Number of attended query/key pairs in banded attention.
pub fn band_pairs(n: u64, half: u64, global_first: bool) -> u64 {
    let t = n.min(half);
    let clipped = t * half - t * t.saturating_sub(1) / 2;
    let extra = if global_first { n.saturating_sub(half + 1) } else { 0 };
    n * (2 * half + 1) - 2 * clipped + extra
}

#[allow(clippy::too_many_arguments)]
fn band_attention(w: &mut Walk, tag: LayerTag, b: u64, n: u64, d: u64, h: u64, window: u64, global: bool) -> u64 {
    let half = window / 2;
    let cap = (2 * half + 1).min(n) + u64::from(global);
    w.mac(tag, 2 * b * band_pairs(n, half, global) * d);
    w.elem(tag, b * h * n * cap);
    let probs = w.alloc(tag, b * h * n * cap);
    let out = w.alloc(tag, b * n * d);
    w.free(probs);
    out
}

fn pinv(w: &mut Walk, tag: LayerTag, m: u64, iters: u64) -> u64 {
    let sq = m * m;
    let t = w.alloc(tag, sq);
    let mut z = w.map(tag, sq);
    w.free(t);
    for _ in 0..iters {
        // each intermediate stays alive until the end of the iteration
        let mut temps = w.linear(tag, m, m, m);
        temps += w.map(tag, sq);
        temps += w.linear(tag, m, m, m);
        temps += w.map(tag, sq);
        temps += w.linear(tag, m, m, m);
        temps += w.map(tag, sq);
        let scaled = w.map(tag, sq);
        let next = w.linear(tag, m, m, m);
        w.free(scaled + z);
        z = next;
        w.free(temps);
    }
    z
}

#[allow(clippy::too_many_arguments)]
fn nystrom(w: &mut Walk, tag: LayerTag, b: u64, n: u64, d: u64, h: u64, m: u64, iters: u64) -> u64 {
    let dh = d / h;
    let mut rows = 0;
    for _ in 0..b {
        let mut cols = 0;
        for _ in 0..h {
            let mut temps = w.alloc(tag, 3 * n * dh);
            temps += w.map(tag, m * dh) + w.map(tag, m * dh);
            for (r, c) in [(n, m), (m, m), (m, n)] {
                let s = w.linear(tag, r, dh, c);
                temps += w.map(tag, r * c);
                w.free(s);
            }
            temps += pinv(w, tag, m, iters);
            temps += w.linear(tag, n, m, m);
            temps += w.linear(tag, m, n, dh);
            cols += w.linear(tag, n, m, dh);
            w.free(temps);
        }
        rows += w.alloc(tag, n * d);
        w.free(cols);
    }
    let out = w.alloc(tag, b * n * d);
    w.free(rows);
    out
}

/// Replaces the local output's first rows with the global token's output.
fn global_rows(w: &mut Walk, tag: LayerTag, local: u64, b: u64, n: u64, d: u64, h: u64) -> u64 {
    let mut temps = w.alloc(tag, b * d);
    let qg = w.linear(tag, b, d, d);
    let kg = w.linear(tag, b * n, d, d);
    let vg = w.linear(tag, b * n, d, d);
    temps += dense_attention(w, tag, b, 1, n, d, h);
    w.free(qg + kg + vg);
    temps += w.alloc(tag, b * n * d + b * d);
    let out = w.alloc(tag, b * n * d);
    w.free(temps + local);
    out
}

/// Non-windowed encoder blocks; `x` is the live hidden state.
fn encoder_blocks(w: &mut Walk, c: &ModelConfig, b: u64, n: u64, mut x: u64) -> u64 {
    let (d, ff, h) = (c.d_model as u64, c.d_ff as u64, c.n_heads as u64);
    for i in 0..c.n_layers {
        let sa = LayerTag::attention(i);
        let qkv = w.linear(sa, b * n, d, d) + w.linear(sa, b * n, d, d) + w.linear(sa, b * n, d, d);
        let mut a = match c.family {
            Family::TextSlidingWindow | Family::SpeechSlidingWindow => {
                let window = c.attention_window.unwrap_or(2) as u64;
                band_attention(w, sa, b, n, d, h, window, c.global_first_token)
            }
            Family::TextNystrom => {
                let m = (c.n_landmarks.unwrap_or(1) as u64).min(n);
                nystrom(w, sa, b, n, d, h, m, c.pinv_iterations.unwrap_or(0) as u64)
            }
            _ => dense_attention(w, sa, b, n, n, d, h),
        };
        w.free(qkv);
        if c.global_first_token {
            a = global_rows(w, sa, a, b, n, d, h);
        }
        let o = w.linear(sa, b * n, d, d);
        w.free(a);
        let (nx, fo) = block_tail(w, i, x, o, d, ff);
        w.free(fo);
        x = nx;
    }
    x
}

/// First-token pooler; frees the input hidden state.
fn pooler(w: &mut Walk, top: LayerTag, x: u64, b: u64, d: u64, norm: bool) -> u64 {
    let normed = if norm { w.map(top, x) } else { 0 };
    let first = w.alloc(top, b * d);
    let pre = w.linear(top, b, d, d);
    let out = w.map_consume(top, pre);
    w.free(first + normed + x);
    out
}

fn text(w: &mut Walk, c: &ModelConfig, size: usize, b: u64) -> u64 {
    let n = c.padded(size) as u64;
    let d = c.d_model as u64;
    let emb = LayerTag::input_embedding();
    let tables = w.alloc(emb, 3 * b * n * d);
    let tp = w.map(emb, b * n * d);
    let sum = w.map(emb, b * n * d);
    w.free(tp);
    let x = w.map(emb, b * n * d);
    w.free(tables + sum);
    let x = encoder_blocks(w, c, b, n, x);
    pooler(w, LayerTag::other(c.n_layers), x, b, d, false)
}

fn speech(w: &mut Walk, c: &ModelConfig, size: usize, b: u64) -> u64 {
    let f = c.featurizer.as_ref().expect("speech config has a featurizer");
    let Ok(lens) = f.frame_lengths(size) else {
        return 0;
    };
    let ch = f.channels as u64;
    let d = c.d_model as u64;
    let emb = LayerTag::input_embedding();
    let pos = LayerTag::positional();
    let mut x = w.alloc(emb, b * size as u64);
    let mut cin = 1;
    for (i, (&(k, _), &t)) in f.layers.iter().zip(&lens).enumerate() {
        let t = t as u64;
        w.mac(emb, b * ch * cin * k as u64 * t);
        let y = w.alloc(emb, b * ch * t);
        w.free(x);
        x = y;
        if i == 0 {
            x = w.map_consume(emb, x);
        }
        x = w.map_consume(emb, x);
        cin = ch;
    }
    let n = *lens.last().expect("nonempty conv stack") as u64;
    let feats = w.alloc(emb, b * ch * n);
    w.free(x);
    let normed = w.map(LayerTag::other(0), b * n * ch);
    let proj = w.linear(pos, b * n, ch, d);
    let xt = w.alloc(pos, b * n * d);
    let k = f.pos_conv_kernel as u64;
    let cin_g = d / f.pos_conv_groups as u64;
    let wn = w.map(pos, d * cin_g * k);
    let t_out = n + 2 * (k / 2) + 1 - k;
    w.mac(pos, b * d * cin_g * k * t_out);
    let mut p = w.alloc(pos, b * d * t_out);
    if t_out > n {
        let s = w.alloc(pos, b * d * n);
        w.free(p);
        p = s;
    }
    let act = w.map(pos, b * d * n);
    let pt = w.alloc(pos, b * n * d);
    w.free(act);
    let with_pos = w.map(pos, b * n * d);
    w.free(proj + xt + wn + p + pt);
    let x = w.map(LayerTag::other(0), b * n * d);
    w.free(feats + normed + with_pos);
    let x = encoder_blocks(w, c, b, n, x);
    let out = w.map(LayerTag::other(c.n_layers), b * d);
    w.free(x);
    out
}

fn vit(w: &mut Walk, c: &ModelConfig, size: usize, b: u64) -> u64 {
    let p = c.patch_size.unwrap_or(1) as u64;
    let sp = pad_input(size, p as usize) as u64;
    let np = (sp / p) * (sp / p);
    let n = np + 1;
    let d = c.d_model as u64;
    let emb = LayerTag::input_embedding();
    let pos = LayerTag::positional();
    let img = w.alloc(emb, b * sp * sp * 3);
    let patches = w.alloc(emb, b * np * p * p * 3);
    let x0 = w.linear(emb, b * np, p * p * 3, d);
    w.free(patches + img);
    let cat = w.alloc(pos, (b * np + 1) * d);
    let rows = w.alloc(pos, b * n * d);
    let pe = w.alloc(pos, b * n * d);
    let x = w.map(pos, b * n * d);
    w.free(cat + rows + pe + x0);
    let x = encoder_blocks(w, c, b, n, x);
    pooler(w, LayerTag::other(c.n_layers), x, b, d, true)
}

fn swin(w: &mut Walk, c: &ModelConfig, size: usize, b: u64) -> u64 {
    let sw = c.swin.as_ref().expect("shifted-window config has stages");
    let p = c.patch_size.unwrap_or(1) as u64;
    let sp = pad_input(c.padded(size), p as usize) as u64;
    let mut r = sp / p;
    let emb = LayerTag::input_embedding();
    let c0 = c.d_model as u64;
    let img = w.alloc(emb, b * sp * sp * 3);
    let patches = w.alloc(emb, b * r * r * p * p * 3);
    let lin = w.linear(emb, b * r * r, p * p * 3, c0);
    w.free(patches);
    let mut x = w.map(emb, b * r * r * c0);
    w.free(img + lin);
    let window = sw.window as u64;
    let mut i = 0;
    for (stage, (&depth, &heads)) in sw.depths.iter().zip(&sw.heads).enumerate() {
        let dim = c0 << stage;
        let ff = (c.d_ff as u64) << stage;
        let h = heads as u64;
        for j in 0..depth {
            let sa = LayerTag::attention(i);
            let we = window.min(r).max(1);
            let shifted = j % 2 == 1 && r > window;
            let rp = r.div_ceil(we) * we;
            let nw = (rp / we) * (rp / we);
            let t = we * we;
            let xw = w.alloc(sa, b * rp * rp * dim);
            let qkv: u64 = (0..3).map(|_| w.linear(sa, b * rp * rp, dim, dim)).sum();
            w.free(xw);
            let rel = w.alloc(sa, t * t * h);
            let bias = w.alloc(sa, t * t * h);
            w.free(rel);
            let mask = if shifted { w.alloc(sa, nw * t * t) } else { 0 };
            let att = dense_attention(w, sa, b * nw, t, t, dim, h);
            w.free(mask + qkv);
            let o = w.linear(sa, b * rp * rp, dim, dim);
            let a = w.alloc(sa, b * r * r * dim);
            w.free(o + att + bias);
            let (nx, fo) = block_tail(w, i, x, a, dim, ff);
            x = nx;
            if j + 1 == depth && stage + 1 < sw.depths.len() {
                let other = LayerTag::other(i);
                let half = r.div_ceil(2);
                let merged = w.alloc(other, b * half * half * 4 * dim);
                let normed = w.map(other, b * half * half * 4 * dim);
                let y = w.linear(other, b * half * half, 4 * dim, 2 * dim);
                w.free(normed + merged + x);
                x = y;
                r = half;
            }
            w.free(fo);
            i += 1;
        }
    }
    let cf = c.output_dim() as u64;
    let top = LayerTag::other(c.n_layers);
    let normed = w.map(top, b * r * r * cf);
    let out = w.map(top, b * cf);
    w.free(normed + x);
    out
}

/// Value of `metric` for one input of raw `size`.
pub fn metric_value(config: &ModelConfig, size: usize, mode: Mode, metric: CostMetric) -> u64 {
    let cost = flops_of(config, size, mode);
    match metric {
        CostMetric::Flops => cost.total_flops(),
        CostMetric::Bytes => cost.peak_bytes,
    }
}

/// Smallest grid size from which the efficient config is strictly cheaper at
/// every remaining grid point.
pub fn predict_tipping_point(
    vanilla: &ModelConfig,
    efficient: &ModelConfig,
    metric: CostMetric,
    mode: Mode,
    grid: &[usize],
) -> Result<Option<usize>> {
    if vanilla.modality() != efficient.modality() {
        return Err(Error::ModalityMismatch {
            model: vanilla.modality().to_string(),
            input: efficient.modality().to_string(),
        });
    }
    let a: Vec<f64> = grid.iter().map(|&s| metric_value(vanilla, s, mode, metric) as f64).collect();
    let e: Vec<f64> = grid.iter().map(|&s| metric_value(efficient, s, mode, metric) as f64).collect();
    Ok(sustained_crossover(grid, &a, &e, true))
}

/// Fraction of `metric` not attributed to self-attention tags. For bytes the
/// per-tag activation volume is used.
pub fn non_sa_share(config: &ModelConfig, size: usize, metric: CostMetric) -> f64 {
    let cost = flops_of(config, size, Mode::Inference);
    let by = match metric {
        CostMetric::Flops => cost.by_kind(|e| e.flops),
        CostMetric::Bytes => cost.by_kind(|e| e.bytes),
    };
    let total: u64 = by.values().sum();
    if total == 0 {
        return 0.0;
    }
    1.0 - by[&TagKind::SelfAttention] as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelzoo::Preset;

    #[test]
    fn band_pairs_by_enumeration() {
        for n in 0..40u64 {
            for half in 0..12u64 {
                for global in [false, true] {
                    let mut pairs = 0;
                    for i in 0..n {
                        let lo = i.saturating_sub(half);
                        let hi = (i + half).min(n - 1);
                        pairs += hi - lo + 1 + u64::from(global && lo > 0);
                    }
                    assert_eq!(band_pairs(n, half, global), pairs, "n {n} half {half}");
                }
            }
        }
    }

    #[test]
    fn empty_input_costs_nothing() {
        let c = ModelConfig::preset(Family::TextFull, Preset::DeskDims);
        let cost = flops_of(&c, 0, Mode::Inference);
        assert_eq!(cost.total_flops(), 0);
        assert_eq!(cost.peak_bytes, 0);
    }

    #[test]
    fn training_is_three_forwards() {
        let c = ModelConfig::preset(Family::TextFull, Preset::DeskDims);
        let i = flops_of(&c, 100, Mode::Inference).total_flops();
        let t = flops_of(&c, 100, Mode::Training).total_flops();
        assert_eq!(t, 3 * i);
    }

    #[test]
    fn metric_names_parse() {
        assert_eq!("FLOPS".parse::<CostMetric>().unwrap(), CostMetric::Flops);
        assert!("latency".parse::<CostMetric>().is_err());
    }
}
