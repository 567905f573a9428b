//! Encoder models assembled from tagged layers.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::attention::{
    full_attention, nystrom_attention, relative_position_index, sliding_window_attention, window_attention,
    WindowPlan,
};
use super::config::{pad_input, Family, ModelConfig};
use crate::error::{Error, Result};
use crate::instrument::region;
use crate::numkernel::kernels::LAYER_NORM_EPS;
use crate::numkernel::{with_tag, Affine, AttnShape, Conv1dSpec, Graph, Tensor, Var};
use crate::taxonomy::{LayerTag, Modality};

/// Token id used to pad text up to the family's length multiple.
pub const PAD_TOKEN: usize = 1;

/// One raw example; forward passes replicate it across the batch.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelInput {
    Tokens(Vec<usize>),
    /// Mono samples at the featurizer's sample rate.
    Waveform(Vec<f32>),
    /// Square RGB image, `side × side × 3`, row-major.
    Image { side: usize, pixels: Vec<f32> },
}

impl ModelInput {
    pub fn modality(&self) -> Modality {
        match self {
            ModelInput::Tokens(_) => Modality::Text,
            ModelInput::Waveform(_) => Modality::Speech,
            ModelInput::Image { .. } => Modality::Vision,
        }
    }

    /// Tokens, samples, or image side.
    pub fn size(&self) -> usize {
        match self {
            ModelInput::Tokens(t) => t.len(),
            ModelInput::Waveform(w) => w.len(),
            ModelInput::Image { side, .. } => *side,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tag: LayerTag,
    pub tensor: Arc<Tensor>,
}

struct Store {
    params: Vec<Param>,
    rng: ChaCha8Rng,
    normal: Normal<f32>,
}

impl Store {
    fn add(&mut self, name: String, tag: LayerTag, shape: &[usize], init: Init) -> usize {
        let t = with_tag(tag, || match init {
            Init::Normal => {
                let (rng, normal) = (&mut self.rng, &self.normal);
                Tensor::from_fn(shape, |_| normal.sample(rng))
            }
            Init::Const(c) => Tensor::full(shape, c),
        });
        self.params.push(Param {
            name,
            tag,
            tensor: Arc::new(t),
        });
        self.params.len() - 1
    }

    fn linear(&mut self, name: &str, tag: LayerTag, i: usize, o: usize, bias: bool) -> Lin {
        let w = self.add(format!("{name}.weight"), tag, &[i, o], Init::Normal);
        let b = bias.then(|| self.add(format!("{name}.bias"), tag, &[o], Init::Const(0.0)));
        Lin { w, b }
    }

    fn norm(&mut self, name: &str, tag: LayerTag, n: usize) -> Norm {
        Norm {
            g: self.add(format!("{name}.weight"), tag, &[n], Init::Const(1.0)),
            b: self.add(format!("{name}.bias"), tag, &[n], Init::Const(0.0)),
        }
    }
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Const(f32),
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: usize,
    b: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: usize,
    b: usize,
}

/// Parameters bound into one graph.
struct Bound<'a> {
    g: &'a Graph,
    vars: Vec<Var>,
}

impl Bound<'_> {
    fn p(&self, i: usize) -> &Var {
        &self.vars[i]
    }

    fn linear(&self, x: &Var, l: Lin) -> Result<Var> {
        self.g.linear(x, self.p(l.w), l.b.map(|b| self.p(b)))
    }

    fn layernorm(&self, x: &Var, n: Norm) -> Result<Var> {
        self.g.layernorm(x, self.p(n.g), self.p(n.b))
    }
}

#[derive(Debug, Clone)]
struct Block {
    heads: usize,
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
    /// Separate projections for the global token.
    global: Option<[Lin; 3]>,
    rel_table: Option<usize>,
    ln1: Norm,
    inter: Lin,
    out: Lin,
    ln2: Norm,
    /// Swin only: whether odd-position shifting applies and the patch merge
    /// that follows this block.
    shifted: bool,
    merge: Option<(Norm, Lin)>,
}

#[derive(Debug, Clone)]
enum Stem {
    Text {
        tok: usize,
        pos: usize,
        typ: usize,
        ln: Norm,
    },
    Speech {
        convs: Vec<usize>,
        chan_norm: Norm,
        feat_ln: Norm,
        proj: Lin,
        pos_v: usize,
        pos_g: usize,
        pos_b: usize,
        enc_ln: Norm,
    },
    Vit {
        patch: Lin,
        cls: usize,
        pos: usize,
    },
    Swin {
        patch: Lin,
        ln: Norm,
    },
}

#[derive(Debug, Clone)]
enum Tail {
    /// First token through a dense layer and tanh, optionally after a norm.
    Pooler { ln: Option<Norm>, dense: Lin },
    MeanPool { ln: Option<Norm> },
}

/// Output of a forward pass: the pooled representation and the parameter
/// variables it was computed from (for gradient lookup).
pub struct Forward {
    pub pooled: Var,
    pub params: Vec<Var>,
}

/// A taxonomy-tagged encoder. Immutable during inference; training steps
/// update parameters in place.
#[derive(Clone)]
pub struct EncoderModel {
    config: ModelConfig,
    store: Vec<Param>,
    n_encoder: usize,
    stem: Stem,
    blocks: Vec<Block>,
    tail: Tail,
    head: Option<Lin>,
}

impl std::fmt::Debug for EncoderModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EncoderModel")
            .field("config", &self.config.name)
            .field("params", &self.store.len())
            .field("head", &self.head.is_some())
            .finish()
    }
}

impl EncoderModel {
    /// Builds the encoder with seeded Gaussian weights.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<EncoderModel> {
        config.validate()?;
        let c = config;
        let normal = Normal::new(0.0, c.init_std).map_err(|e| Error::Config(format!("init_std: {e}")))?;
        let mut s = Store {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal,
        };
        let d = c.d_model;
        let l = c.n_layers;
        let emb = LayerTag::input_embedding();
        let pos = LayerTag::positional();
        let stem = match c.family.modality() {
            Modality::Text => Stem::Text {
                tok: s.add("embeddings.word".into(), emb, &[c.vocab_size, d], Init::Normal),
                pos: s.add("embeddings.position".into(), emb, &[c.max_positions, d], Init::Normal),
                typ: s.add("embeddings.token_type".into(), emb, &[c.type_vocab_size, d], Init::Normal),
                ln: s.norm("embeddings.norm", emb, d),
            },
            Modality::Speech => {
                let f = c.featurizer.as_ref().expect("validated");
                let mut cin = 1;
                let mut convs = Vec::new();
                for (i, &(k, _)) in f.layers.iter().enumerate() {
                    convs.push(s.add(format!("featurizer.conv{i}.weight"), emb, &[f.channels, cin, k], Init::Normal));
                    cin = f.channels;
                }
                let chan_norm = s.norm("featurizer.conv0.norm", emb, f.channels);
                let feat_ln = s.norm("projection.norm", LayerTag::other(0), f.channels);
                let proj = s.linear("projection", pos, f.channels, d, true);
                let k = f.pos_conv_kernel;
                let pos_v = s.add("pos_conv.weight_v".into(), pos, &[d, d / f.pos_conv_groups, k], Init::Normal);
                let pos_g = s.add("pos_conv.weight_g".into(), pos, &[k], Init::Const(1.0));
                let pos_b = s.add("pos_conv.bias".into(), pos, &[d], Init::Const(0.0));
                let enc_ln = s.norm("encoder.norm", LayerTag::other(0), d);
                Stem::Speech {
                    convs,
                    chan_norm,
                    feat_ln,
                    proj,
                    pos_v,
                    pos_g,
                    pos_b,
                    enc_ln,
                }
            }
            Modality::Vision if c.family == Family::VisionFull => {
                let p = c.patch_size.expect("validated");
                let side = c.image_size.expect("validated") / p;
                Stem::Vit {
                    patch: s.linear("patch_embed", emb, p * p * 3, d, true),
                    cls: s.add("cls_token".into(), pos, &[1, d], Init::Normal),
                    pos: s.add("position_embeddings".into(), pos, &[side * side + 1, d], Init::Normal),
                }
            }
            Modality::Vision => {
                let p = c.patch_size.expect("validated");
                Stem::Swin {
                    patch: s.linear("patch_embed", emb, p * p * 3, d, true),
                    ln: s.norm("patch_embed.norm", emb, d),
                }
            }
        };

        let mut blocks = Vec::with_capacity(l);
        let push_block = |s: &mut Store, i: usize, dim: usize, ff: usize, heads: usize| {
            let sa = LayerTag::attention(i);
            let name = format!("layer.{i}");
            let lin = |s: &mut Store, what: &str| s.linear(&format!("{name}.attention.{what}"), sa, dim, dim, true);
            let q = lin(s, "query");
            let k = lin(s, "key");
            let v = lin(s, "value");
            let global = c
                .global_first_token
                .then(|| [lin(s, "query_global"), lin(s, "key_global"), lin(s, "value_global")]);
            let o = lin(s, "output");
            let rel_table = c.swin.as_ref().map(|sw| {
                let span = 2 * sw.window - 1;
                s.add(format!("{name}.attention.relative_position_bias"), sa, &[span * span, heads], Init::Normal)
            });
            Block {
                heads,
                q,
                k,
                v,
                o,
                global,
                rel_table,
                ln1: s.norm(&format!("{name}.attention.norm"), LayerTag::other(i), dim),
                inter: s.linear(&format!("{name}.intermediate"), LayerTag::intermediate(i), dim, ff, true),
                out: s.linear(&format!("{name}.output"), LayerTag::output(i), ff, dim, true),
                ln2: s.norm(&format!("{name}.output.norm"), LayerTag::other(i), dim),
                shifted: false,
                merge: None,
            }
        };
        match &c.swin {
            Some(sw) => {
                let mut i = 0;
                for (stage, (&depth, &heads)) in sw.depths.iter().zip(&sw.heads).enumerate() {
                    let (dim, ff) = (d << stage, c.d_ff << stage);
                    for j in 0..depth {
                        let mut b = push_block(&mut s, i, dim, ff, heads);
                        b.shifted = j % 2 == 1;
                        if j + 1 == depth && stage + 1 < sw.depths.len() {
                            let tag = LayerTag::other(i);
                            let ln = s.norm(&format!("stage.{stage}.merge.norm"), tag, 4 * dim);
                            let lin = s.linear(&format!("stage.{stage}.merge.reduction"), tag, 4 * dim, 2 * dim, false);
                            b.merge = Some((ln, lin));
                        }
                        blocks.push(b);
                        i += 1;
                    }
                }
            }
            None => {
                for i in 0..l {
                    let b = push_block(&mut s, i, d, c.d_ff, c.n_heads);
                    blocks.push(b);
                }
            }
        }

        let top = LayerTag::other(l);
        let tail = match c.family {
            Family::TextFull | Family::TextSlidingWindow | Family::TextNystrom => Tail::Pooler {
                ln: None,
                dense: s.linear("pooler", top, d, d, true),
            },
            Family::VisionFull => {
                let ln = Some(s.norm("final_norm", top, d));
                Tail::Pooler {
                    ln,
                    dense: s.linear("pooler", top, d, d, true),
                }
            }
            Family::VisionShiftedWindow => Tail::MeanPool {
                ln: Some(s.norm("final_norm", top, c.output_dim())),
            },
            Family::SpeechFull | Family::SpeechSlidingWindow => Tail::MeanPool { ln: None },
        };
        let n_encoder = s.params.len();
        Ok(EncoderModel {
            config: c.clone(),
            store: s.params,
            n_encoder,
            stem,
            blocks,
            tail,
            head: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Encoder parameters; the classification head is not included.
    pub fn params(&self) -> &[Param] {
        &self.store[..self.n_encoder]
    }

    /// Encoder and head parameters.
    pub fn all_params(&self) -> &[Param] {
        &self.store
    }

    /// A copy whose parameters do not share storage with `self`.
    pub fn deep_clone(&self) -> EncoderModel {
        let mut m = self.clone();
        for p in &mut m.store {
            p.tensor = Arc::new(p.tensor.as_ref().clone());
        }
        m
    }

    pub fn resident_bytes(&self) -> u64 {
        self.store.iter().map(|p| p.tensor.bytes()).sum()
    }

    pub fn has_head(&self) -> bool {
        self.head.is_some()
    }

    /// Adds the two-way classification head used by training steps.
    pub fn attach_head(&mut self, seed: u64) {
        if self.head.is_some() {
            return;
        }
        let normal = Normal::new(0.0, self.config.init_std).expect("validated at construction");
        let mut s = Store {
            params: std::mem::take(&mut self.store),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x4845_4144),
            normal,
        };
        let tag = LayerTag::other(self.config.n_layers);
        self.head = Some(s.linear("classifier", tag, self.config.output_dim(), 2, true));
        self.store = s.params;
    }

    /// Encoder tokens produced for `input` after padding and featurization.
    pub fn sequence_length(&self, input: &ModelInput) -> Result<usize> {
        let c = &self.config;
        self.check_modality(input)?;
        match input {
            ModelInput::Tokens(t) => Ok(c.padded(t.len())),
            ModelInput::Waveform(w) => c.featurizer.as_ref().expect("validated").frames(w.len()),
            ModelInput::Image { side, .. } => {
                let p = c.patch_size.expect("validated");
                match c.family {
                    Family::VisionFull => {
                        let g = pad_input(*side, p) / p;
                        Ok(g * g + 1)
                    }
                    _ => {
                        let g = c.padded(*side) / p;
                        Ok(g * g)
                    }
                }
            }
        }
    }

    fn check_modality(&self, input: &ModelInput) -> Result<()> {
        if input.modality() != self.config.modality() {
            return Err(Error::ModalityMismatch {
                model: self.config.modality().to_string(),
                input: input.modality().to_string(),
            });
        }
        if input.size() == 0 {
            return Err(Error::EmptyOutput {
                op: "forward",
                detail: "empty input".into(),
            });
        }
        Ok(())
    }

    /// Runs the encoder on `batch` copies of `input` and returns the pooled
    /// `[batch × output_dim]` representation.
    pub fn forward(&self, g: &Graph, input: &ModelInput, batch: usize) -> Result<Forward> {
        self.check_modality(input)?;
        if batch == 0 {
            return Err(Error::EmptyOutput {
                op: "forward",
                detail: "batch size 0".into(),
            });
        }
        let bound = Bound {
            g,
            vars: self.store.iter().map(|p| g.param(Arc::clone(&p.tensor))).collect(),
        };
        let (x, n, res) = self.stem(&bound, input, batch)?;
        let x = self.encoder(&bound, x, batch, n, res)?;
        let pooled = self.tail(&bound, x, batch)?;
        Ok(Forward {
            pooled,
            params: bound.vars,
        })
    }

    /// Returns `[batch·n × d]` hidden states, `n`, and the grid side for Swin.
    fn stem(&self, m: &Bound, input: &ModelInput, batch: usize) -> Result<(Var, usize, usize)> {
        let g = m.g;
        let c = &self.config;
        match (&self.stem, input) {
            (Stem::Text { tok, pos, typ, ln }, ModelInput::Tokens(ids)) => {
                let n = c.padded(ids.len());
                region(LayerTag::input_embedding(), || {
                    let mut all = Vec::with_capacity(batch * n);
                    for _ in 0..batch {
                        all.extend_from_slice(ids);
                        all.resize(all.len() + n - ids.len(), PAD_TOKEN);
                    }
                    let pos_ids: Vec<usize> = (0..batch * n).map(|r| (r % n) % c.max_positions).collect();
                    let t = g.embedding(m.p(*tok), all.into())?;
                    let p = g.embedding(m.p(*pos), pos_ids.into())?;
                    let ty = g.embedding(m.p(*typ), vec![0; batch * n].into())?;
                    let x = g.add(&g.add(&t, &p)?, &ty)?;
                    Ok((m.layernorm(&x, *ln)?, n, 0))
                })
            }
            (
                Stem::Speech {
                    convs,
                    chan_norm,
                    feat_ln,
                    proj,
                    pos_v,
                    pos_g,
                    pos_b,
                    enc_ln,
                },
                ModelInput::Waveform(w),
            ) => {
                let f = c.featurizer.as_ref().expect("validated");
                let n = f.frames(w.len())?;
                let x = region(LayerTag::input_embedding(), || -> Result<Var> {
                    let mut data = Vec::with_capacity(batch * w.len());
                    for _ in 0..batch {
                        data.extend_from_slice(w);
                    }
                    let mut x = g.constant(Tensor::from_vec(&[batch, w.len()], data)?);
                    for (i, (&wi, &(_, stride))) in convs.iter().zip(&f.layers).enumerate() {
                        let spec = Conv1dSpec {
                            stride,
                            padding: 0,
                            groups: 1,
                        };
                        x = g.conv1d(&x, m.p(wi), None, spec, batch)?;
                        if i == 0 {
                            let affine = Affine::PerRow { channels: f.channels };
                            x = g.norm(&x, m.p(chan_norm.g), m.p(chan_norm.b), affine, LAYER_NORM_EPS)?;
                        }
                        x = g.gelu(&x);
                    }
                    g.transpose_blocks(&x, batch)
                })?;
                let x = region(LayerTag::other(0), || m.layernorm(&x, *feat_ln))?;
                let x = region(LayerTag::positional(), || -> Result<Var> {
                    let x = m.linear(&x, *proj)?;
                    let xt = g.transpose_blocks(&x, batch)?;
                    let w = g.weight_norm(m.p(*pos_v), m.p(*pos_g))?;
                    let spec = Conv1dSpec {
                        stride: 1,
                        padding: f.pos_conv_kernel / 2,
                        groups: f.pos_conv_groups,
                    };
                    let mut p = g.conv1d(&xt, &w, Some(m.p(*pos_b)), spec, batch)?;
                    if p.cols() > n {
                        p = g.slice(&p, 0, p.rows(), 0, n)?;
                    }
                    let p = g.transpose_blocks(&g.gelu(&p), batch)?;
                    g.add(&x, &p)
                })?;
                let x = region(LayerTag::other(0), || m.layernorm(&x, *enc_ln))?;
                Ok((x, n, 0))
            }
            (Stem::Vit { patch, cls, pos }, ModelInput::Image { side, pixels }) => {
                let p = c.patch_size.expect("validated");
                let sp = pad_input(*side, p);
                let grid = sp / p;
                let np = grid * grid;
                let n = np + 1;
                let x = region(LayerTag::input_embedding(), || -> Result<Var> {
                    let img = g.constant(image_batch(*side, pixels, sp, batch)?);
                    m.linear(&g.patchify(&img, p)?, *patch)
                })?;
                let x = region(LayerTag::positional(), || -> Result<Var> {
                    let cat = g.concat_rows(&[&x, m.p(*cls)])?;
                    let idx: Vec<Option<usize>> = (0..batch * n)
                        .map(|r| {
                            let (b, i) = (r / n, r % n);
                            Some(if i == 0 { batch * np } else { b * np + i - 1 })
                        })
                        .collect();
                    let x = g.gather_rows(&cat, idx.into(), 1)?;
                    let rows = m.p(*pos).rows();
                    let pos_ids: Vec<usize> = (0..batch * n).map(|r| (r % n) % rows).collect();
                    let pe = g.embedding(m.p(*pos), pos_ids.into())?;
                    g.add(&x, &pe)
                })?;
                Ok((x, n, 0))
            }
            (Stem::Swin { patch, ln }, ModelInput::Image { side, pixels }) => {
                let p = c.patch_size.expect("validated");
                let sp = c.padded(*side);
                let sp = pad_input(sp, p);
                let res = sp / p;
                let x = region(LayerTag::input_embedding(), || -> Result<Var> {
                    let img = g.constant(image_batch(*side, pixels, sp, batch)?);
                    let x = m.linear(&g.patchify(&img, p)?, *patch)?;
                    m.layernorm(&x, *ln)
                })?;
                Ok((x, res * res, res))
            }
            _ => Err(Error::ModalityMismatch {
                model: c.modality().to_string(),
                input: input.modality().to_string(),
            }),
        }
    }

    fn encoder(&self, m: &Bound, mut x: Var, batch: usize, mut n: usize, mut res: usize) -> Result<Var> {
        let g = m.g;
        let c = &self.config;
        for (i, b) in self.blocks.iter().enumerate() {
            let a = region(LayerTag::attention(i), || -> Result<Var> {
                if c.family == Family::VisionShiftedWindow {
                    return self.swin_attention(m, b, &x, batch, res);
                }
                let q = m.linear(&x, b.q)?;
                let k = m.linear(&x, b.k)?;
                let v = m.linear(&x, b.v)?;
                let mut a = match c.family {
                    Family::TextSlidingWindow | Family::SpeechSlidingWindow => sliding_window_attention(
                        g,
                        &q,
                        &k,
                        &v,
                        batch,
                        n,
                        b.heads,
                        c.attention_window.expect("validated"),
                        b.global.is_some(),
                    )?,
                    Family::TextNystrom => {
                        let lm = c.n_landmarks.expect("validated").min(n);
                        let iters = c.pinv_iterations.expect("validated");
                        nystrom_attention(g, &q, &k, &v, batch, n, b.heads, lm, iters)?
                    }
                    _ => full_attention(g, &q, &k, &v, batch, n, b.heads)?,
                };
                drop((q, k, v));
                if let Some([gq, gk, gv]) = b.global {
                    a = self.global_rows(m, &x, a, [gq, gk, gv], batch, n, b.heads)?;
                }
                m.linear(&a, b.o)
            })?;
            x = region(LayerTag::other(i), || m.layernorm(&g.add(&x, &a)?, b.ln1))?;
            drop(a);
            let h = region(LayerTag::intermediate(i), || -> Result<Var> { Ok(g.gelu(&m.linear(&x, b.inter)?)) })?;
            let o = region(LayerTag::output(i), || m.linear(&h, b.out))?;
            drop(h);
            x = region(LayerTag::other(i), || m.layernorm(&g.add(&x, &o)?, b.ln2))?;
            if let Some((ln, lin)) = b.merge {
                x = region(LayerTag::other(i), || -> Result<Var> {
                    let half = res.div_ceil(2);
                    let mut idx = Vec::with_capacity(batch * half * half * 4);
                    for bi in 0..batch {
                        for y in 0..half {
                            for xx in 0..half {
                                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                                    let (sy, sx) = (2 * y + dy, 2 * xx + dx);
                                    idx.push((sy < res && sx < res).then_some(bi * res * res + sy * res + sx));
                                }
                            }
                        }
                    }
                    let merged = g.gather_rows(&x, idx.into(), 4)?;
                    m.linear(&m.layernorm(&merged, ln)?, lin)
                })?;
                res = res.div_ceil(2);
                n = res * res;
            }
        }
        Ok(x)
    }

    /// Replaces each sequence's first row of `local` with full attention of
    /// the first token over the whole sequence.
    #[allow(clippy::too_many_arguments)]
    fn global_rows(
        &self,
        m: &Bound,
        x: &Var,
        local: Var,
        [gq, gk, gv]: [Lin; 3],
        batch: usize,
        n: usize,
        heads: usize,
    ) -> Result<Var> {
        let g = m.g;
        let firsts: Vec<Option<usize>> = (0..batch).map(|b| Some(b * n)).collect();
        let xf = g.gather_rows(x, firsts.into(), 1)?;
        let qg = m.linear(&xf, gq)?;
        let kg = m.linear(x, gk)?;
        let vg = m.linear(x, gv)?;
        let shape = AttnShape {
            batch,
            nq: 1,
            nk: n,
            heads,
            scale: 1.0 / ((x.cols() / heads) as f32).sqrt(),
        };
        let glob = g.attention(&qg, &kg, &vg, shape, None, None)?;
        drop((qg, kg, vg));
        let cat = g.concat_rows(&[&local, &glob])?;
        let rows = batch * n;
        let idx: Vec<Option<usize>> = (0..rows)
            .map(|r| Some(if r % n == 0 { rows + r / n } else { r }))
            .collect();
        g.gather_rows(&cat, idx.into(), 1)
    }

    fn swin_attention(&self, m: &Bound, b: &Block, x: &Var, batch: usize, res: usize) -> Result<Var> {
        let g = m.g;
        let sw = self.config.swin.as_ref().expect("validated");
        let plan = WindowPlan::new(batch, res, sw.window, b.shifted);
        let xw = plan.partition(g, x)?;
        let q = m.linear(&xw, b.q)?;
        let k = m.linear(&xw, b.k)?;
        let v = m.linear(&xw, b.v)?;
        drop(xw);
        let bias = match b.rel_table {
            Some(t) => {
                let idx = relative_position_index(plan.window, sw.window);
                Some(g.transpose(&g.gather_rows(m.p(t), idx.into(), 1)?)?)
            }
            None => None,
        };
        let a = window_attention(g, &q, &k, &v, &plan, b.heads, bias.as_ref())?;
        drop((q, k, v));
        let o = m.linear(&a, b.o)?;
        plan.reverse(g, &o)
    }

    fn tail(&self, m: &Bound, x: Var, batch: usize) -> Result<Var> {
        let g = m.g;
        region(LayerTag::other(self.config.n_layers), || match &self.tail {
            Tail::Pooler { ln, dense } => {
                let x = match ln {
                    Some(n) => m.layernorm(&x, *n)?,
                    None => x,
                };
                let n = x.rows() / batch;
                let firsts: Vec<Option<usize>> = (0..batch).map(|b| Some(b * n)).collect();
                let first = g.gather_rows(&x, firsts.into(), 1)?;
                Ok(g.tanh(&m.linear(&first, *dense)?))
            }
            Tail::MeanPool { ln } => {
                let x = match ln {
                    Some(n) => m.layernorm(&x, *n)?,
                    None => x,
                };
                g.mean_rows(&x, batch)
            }
        })
    }

    /// One SGD step on a two-way classification of `batch` copies of
    /// `input` (label 0). Attaches the head if missing; returns the loss.
    pub fn train_step(&mut self, input: &ModelInput, batch: usize, lr: f32) -> Result<f32> {
        self.attach_head(0);
        let head = self.head.expect("attached above");
        let grads = {
            let g = Graph::training();
            let fwd = self.forward(&g, input, batch)?;
            let bound = Bound { g: &g, vars: fwd.params };
            let (loss, lv) = region(LayerTag::other(self.config.n_layers), || -> Result<(f32, Var)> {
                let logits = bound.linear(&fwd.pooled, head)?;
                g.cross_entropy(&logits, &vec![0; batch])
            })?;
            drop(fwd.pooled);
            let mut grads = g.backward(&lv)?;
            drop(lv);
            let per_param: Vec<Option<Tensor>> = bound.vars.iter().map(|v| grads.take(v)).collect();
            (loss, per_param)
        };
        let (loss, per_param) = grads;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("training loss is {loss}")));
        }
        for (p, gr) in self.store.iter_mut().zip(per_param) {
            let Some(gr) = gr else { continue };
            let t = Arc::make_mut(&mut p.tensor);
            for (w, d) in t.data_mut().iter_mut().zip(gr.data()) {
                *w -= lr * d;
            }
        }
        Ok(loss)
    }
}

/// Replicates a square RGB image `batch` times, zero-padding it to `padded`.
fn image_batch(side: usize, pixels: &[f32], padded: usize, batch: usize) -> Result<Tensor> {
    if pixels.len() != side * side * 3 {
        return Err(Error::dim(
            "image",
            format!("{} values for a {side}x{side} RGB image", pixels.len()),
        ));
    }
    let mut data = vec![0.0f32; batch * padded * padded * 3];
    for b in 0..batch {
        for y in 0..side {
            let dst = ((b * padded + y) * padded) * 3;
            data[dst..dst + side * 3].copy_from_slice(&pixels[y * side * 3..(y + 1) * side * 3]);
        }
    }
    Tensor::from_vec(&[batch, padded, padded, 3], data)
}
