//! The four self-attention variants on row-stacked, already-projected
//! queries, keys and values (`[batch·n × d]`, heads split by columns).

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numkernel::{AttnShape, BandShape, Graph, Tensor, Var};

fn scale_for(d: usize, heads: usize) -> f32 {
    1.0 / ((d / heads.max(1)) as f32).sqrt()
}

/// Dense softmax attention over all `n` positions.
pub fn full_attention(g: &Graph, q: &Var, k: &Var, v: &Var, batch: usize, n: usize, heads: usize) -> Result<Var> {
    let shape = AttnShape {
        batch,
        nq: n,
        nk: n,
        heads,
        scale: scale_for(q.cols(), heads),
    };
    g.attention(q, k, v, shape, None, None)
}

/// Token `i` attends to `[i − window/2, i + window/2]`. With `global_first`,
/// every token additionally sees token 0; the global row itself is the
/// caller's business.
pub fn sliding_window_attention(
    g: &Graph,
    q: &Var,
    k: &Var,
    v: &Var,
    batch: usize,
    n: usize,
    heads: usize,
    window: usize,
    global_first: bool,
) -> Result<Var> {
    if window < 2 || window % 2 != 0 {
        return Err(Error::Config(format!("attention window {window} must be even and >= 2")));
    }
    let shape = BandShape {
        batch,
        n,
        heads,
        half: window / 2,
        global_first,
        scale: scale_for(q.cols(), heads),
    };
    g.band_attention(q, k, v, shape)
}

/// Iterative pseudo-inverse of a square matrix. The initial scaling is
/// computed from values and treated as a constant.
pub fn iterative_pinv(g: &Graph, a: &Var, iters: usize) -> Result<Var> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::dim("pinv", format!("{:?} is not square", a.shape())));
    }
    let data = a.value().data();
    let mut max_row = 0f32;
    let mut col = vec![0f32; n];
    for r in 0..n {
        let row = &data[r * n..(r + 1) * n];
        max_row = max_row.max(row.iter().map(|x| x.abs()).sum());
        for (c, x) in col.iter_mut().zip(row) {
            *c += x.abs();
        }
    }
    let max_col = col.iter().copied().fold(0f32, f32::max);
    let c = 1.0 / (max_row * max_col);
    if !c.is_finite() {
        return Err(Error::Numerical("pseudo-inverse of a zero matrix".into()));
    }
    let z = g.scale(&g.transpose(a)?, c);
    pinv_iterate(g, a, z, iters)
}

/// Newton-Schulz style refinement of `z ≈ pinv(a)`. Fails if the residual
/// `‖I − a·z‖` grows three iterations running or stops being finite.
pub fn pinv_iterate(g: &Graph, a: &Var, mut z: Var, iters: usize) -> Result<Var> {
    let mut last = f64::INFINITY;
    let mut growth = 0;
    for _ in 0..iters {
        let az = g.matmul(a, &z)?;
        let residual = identity_residual(az.value());
        if !residual.is_finite() {
            return Err(Error::Numerical("pseudo-inverse iteration produced non-finite values".into()));
        }
        // once converged the residual jitters at rounding level; only
        // growth above that floor counts
        let floor = 1e-3 * (a.rows() as f64).sqrt();
        growth = if residual > last && residual > floor { growth + 1 } else { 0 };
        if growth >= 3 {
            return Err(Error::Numerical(format!(
                "pseudo-inverse residual grew for 3 consecutive iterations (now {residual:.3e})"
            )));
        }
        last = residual;
        let t = g.identity_minus(&az, 7.0)?;
        let t = g.matmul(&az, &t)?;
        let t = g.identity_minus(&t, 15.0)?;
        let t = g.matmul(&az, &t)?;
        let t = g.identity_minus(&t, 13.0)?;
        z = g.matmul(&g.scale(&z, 0.25), &t)?;
    }
    Ok(z)
}

fn identity_residual(m: &Tensor) -> f64 {
    let n = m.rows();
    let mut s = 0f64;
    for (i, x) in m.data().iter().enumerate() {
        let e = if i / n == i % n { 1.0 } else { 0.0 } - *x as f64;
        s += e * e;
    }
    s.sqrt()
}

/// Landmark approximation of softmax attention with `m` landmarks (segment
/// means of queries and keys) and an iterative pseudo-inverse.
#[allow(clippy::too_many_arguments)]
pub fn nystrom_attention(
    g: &Graph,
    q: &Var,
    k: &Var,
    v: &Var,
    batch: usize,
    n: usize,
    heads: usize,
    m: usize,
    iters: usize,
) -> Result<Var> {
    if m == 0 || m > n {
        return Err(Error::Config(format!("{m} landmarks for a sequence of {n}")));
    }
    let d = q.cols();
    if heads == 0 || d % heads != 0 || q.rows() != batch * n {
        return Err(Error::dim("nystrom_attention", format!("q {:?} for batch {batch}, n {n}", q.shape())));
    }
    let dh = d / heads;
    let s = scale_for(d, heads);
    let mut rows = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut cols = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice(q, b * n, n, h * dh, dh)?;
            let kh = g.slice(k, b * n, n, h * dh, dh)?;
            let vh = g.slice(v, b * n, n, h * dh, dh)?;
            let ql = g.segment_mean(&qh, m)?;
            let kl = g.segment_mean(&kh, m)?;
            let k1 = g.softmax(&g.matmul_t(&qh, false, &kl, true)?, s)?;
            let k2 = g.softmax(&g.matmul_t(&ql, false, &kl, true)?, s)?;
            let k3 = g.softmax(&g.matmul_t(&ql, false, &kh, true)?, s)?;
            let z = iterative_pinv(g, &k2, iters)?;
            let left = g.matmul(&k1, &z)?;
            let right = g.matmul(&k3, &vh)?;
            cols.push(g.matmul(&left, &right)?);
        }
        let refs: Vec<&Var> = cols.iter().collect();
        rows.push(g.concat_cols(&refs)?);
    }
    let refs: Vec<&Var> = rows.iter().collect();
    g.concat_rows(&refs)
}

/// Window geometry of one shifted-window block over `batch` square
/// `res × res` grids stored row-major.
#[derive(Debug, Clone)]
pub struct WindowPlan {
    pub batch: usize,
    pub res: usize,
    pub window: usize,
    pub shift: usize,
    /// Grid side after padding to a multiple of the window.
    pub padded: usize,
    partition: Arc<[Option<usize>]>,
    reverse: Arc<[Option<usize>]>,
}

impl WindowPlan {
    /// The window shrinks to the grid when the grid is smaller, in which case
    /// shifting is pointless and disabled.
    pub fn new(batch: usize, res: usize, window: usize, shifted: bool) -> WindowPlan {
        let w = window.min(res).max(1);
        let shift = if shifted && res > window { window / 2 } else { 0 };
        let rp = res.div_ceil(w) * w;
        let per_side = rp / w;
        let mut partition = Vec::with_capacity(batch * rp * rp);
        let mut reverse = vec![None; batch * res * res];
        for b in 0..batch {
            for wy in 0..per_side {
                for wx in 0..per_side {
                    for iy in 0..w {
                        for ix in 0..w {
                            let (y, x) = (wy * w + iy, wx * w + ix);
                            let (sy, sx) = ((y + shift) % rp, (x + shift) % rp);
                            if sy < res && sx < res {
                                let src = b * res * res + sy * res + sx;
                                reverse[src] = Some(partition.len());
                                partition.push(Some(src));
                            } else {
                                partition.push(None);
                            }
                        }
                    }
                }
            }
        }
        WindowPlan {
            batch,
            res,
            window: w,
            shift,
            padded: rp,
            partition: partition.into(),
            reverse: reverse.into(),
        }
    }

    pub fn windows_per_image(&self) -> usize {
        (self.padded / self.window).pow(2)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    /// `[batch·res² × c] -> [batch·nW·w² × c]`, window-major, zero padding.
    pub fn partition(&self, g: &Graph, x: &Var) -> Result<Var> {
        g.gather_rows(x, Arc::clone(&self.partition), 1)
    }

    /// Inverse of [`partition`](Self::partition); padding rows are dropped.
    pub fn reverse(&self, g: &Graph, x: &Var) -> Result<Var> {
        g.gather_rows(x, Arc::clone(&self.reverse), 1)
    }

    /// Additive mask `[nW·w² × w²]` keeping shifted windows from mixing
    /// regions that are not adjacent in the image; `None` when unshifted.
    pub fn mask(&self) -> Option<Tensor> {
        if self.shift == 0 {
            return None;
        }
        let (w, rp, s) = (self.window, self.padded, self.shift);
        let band = |p: usize| {
            if p < rp - w {
                0
            } else if p < rp - s {
                1
            } else {
                2
            }
        };
        let per_side = rp / w;
        let t = w * w;
        let mut mask = Tensor::zeros(&[self.windows_per_image() * t, t]);
        let md = mask.data_mut();
        for win in 0..self.windows_per_image() {
            let (wy, wx) = (win / per_side, win % per_side);
            let label = |i: usize| band(wy * w + i / w) * 3 + band(wx * w + i % w);
            for i in 0..t {
                for j in 0..t {
                    if label(i) != label(j) {
                        md[(win * t + i) * t + j] = f32::NEG_INFINITY;
                    }
                }
            }
        }
        Some(mask)
    }
}

/// Row index into a relative-position table sized for windows of `table_w`
/// (`(2·table_w − 1)²` rows) for every query/key pair of a `w × w` window.
pub fn relative_position_index(w: usize, table_w: usize) -> Vec<Option<usize>> {
    let t = w * w;
    let span = 2 * table_w - 1;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        for j in 0..t {
            let dy = i / w + table_w - 1 - j / w;
            let dx = i % w + table_w - 1 - j % w;
            idx.push(Some(dy * span + dx));
        }
    }
    idx
}

/// Windowed attention on partitioned rows, with an optional per-head bias
/// `[heads·w² × w²]` shared by every window.
pub fn window_attention(
    g: &Graph,
    q: &Var,
    k: &Var,
    v: &Var,
    plan: &WindowPlan,
    heads: usize,
    bias: Option<&Var>,
) -> Result<Var> {
    let t = plan.tokens_per_window();
    let shape = AttnShape {
        batch: plan.batch * plan.windows_per_image(),
        nq: t,
        nk: t,
        heads,
        scale: scale_for(q.cols(), heads),
    };
    let mask = plan.mask();
    g.attention(q, k, v, shape, bias, mask.as_ref())
}

/// Shifted-window self-attention over `batch` grids of side `side` with
/// identity projections.
pub fn shifted_window_attention_2d(
    g: &Graph,
    x: &Var,
    batch: usize,
    side: usize,
    window: usize,
    shifted: bool,
    heads: usize,
) -> Result<Var> {
    if x.rows() != batch * side * side {
        return Err(Error::dim(
            "shifted_window_attention_2d",
            format!("{} rows for {batch} grids of side {side}", x.rows()),
        ));
    }
    let plan = WindowPlan::new(batch, side, window, shifted);
    let xw = plan.partition(g, x)?;
    let out = window_attention(g, &xw, &xw, &xw, &plan, heads, None)?;
    plan.reverse(g, &out)
}
