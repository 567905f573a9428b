//! Parameter counts from config arithmetic alone. The model constructor is
//! checked against this.

use super::config::{Family, ModelConfig};
use crate::breakdown::CostBreakdown;
use crate::taxonomy::{LayerTag, Modality, Mode};

fn linear(i: u64, o: u64) -> u64 {
    i * o + o
}

/// Parameters per tag and layer index. The training head is not included.
pub fn count_params(c: &ModelConfig) -> CostBreakdown {
    let mut out = CostBreakdown::new(Mode::Inference);
    let d = c.d_model as u64;
    let ff = c.d_ff as u64;
    let l = c.n_layers;
    let block = |out: &mut CostBreakdown, i: usize, d: u64, ff: u64, extra_sa: u64| {
        let projections = if c.global_first_token { 7 } else { 4 };
        out.add_params(LayerTag::attention(i), projections * linear(d, d) + extra_sa);
        out.add_params(LayerTag::other(i), 4 * d);
        out.add_params(LayerTag::intermediate(i), linear(d, ff));
        out.add_params(LayerTag::output(i), linear(ff, d));
    };
    match c.family.modality() {
        Modality::Text => {
            let tables = c.vocab_size + c.max_positions + c.type_vocab_size;
            out.add_params(LayerTag::input_embedding(), tables as u64 * d + 2 * d);
            for i in 0..l {
                block(&mut out, i, d, ff, 0);
            }
            out.add_params(LayerTag::other(l), linear(d, d));
        }
        Modality::Speech => {
            let f = c.featurizer.as_ref().expect("speech config has a featurizer");
            let ch = f.channels as u64;
            let mut cin = 1;
            let mut conv = 0;
            for &(k, _) in &f.layers {
                conv += ch * cin * k as u64;
                cin = ch;
            }
            out.add_params(LayerTag::input_embedding(), conv + 2 * ch);
            let k = f.pos_conv_kernel as u64;
            let pos_conv = d * (d / f.pos_conv_groups as u64) * k + k + d;
            out.add_params(LayerTag::positional(), linear(ch, d) + pos_conv);
            out.add_params(LayerTag::other(0), 2 * ch + 2 * d);
            for i in 0..l {
                block(&mut out, i, d, ff, 0);
            }
        }
        Modality::Vision if c.family == Family::VisionFull => {
            let p = c.patch_size.unwrap_or(1) as u64;
            out.add_params(LayerTag::input_embedding(), linear(p * p * 3, d));
            let side = c.image_size.unwrap_or(0) as u64 / p;
            out.add_params(LayerTag::positional(), d + (side * side + 1) * d);
            for i in 0..l {
                block(&mut out, i, d, ff, 0);
            }
            out.add_params(LayerTag::other(l), 2 * d + linear(d, d));
        }
        Modality::Vision => {
            let s = c.swin.as_ref().expect("shifted-window config has stages");
            let p = c.patch_size.unwrap_or(1) as u64;
            out.add_params(LayerTag::input_embedding(), linear(p * p * 3, d) + 2 * d);
            let table = (2 * s.window as u64 - 1).pow(2);
            let mut i = 0;
            for (stage, (&depth, &heads)) in s.depths.iter().zip(&s.heads).enumerate() {
                let (dim, sff) = (d << stage, ff << stage);
                for _ in 0..depth {
                    block(&mut out, i, dim, sff, table * heads as u64);
                    i += 1;
                }
                if stage + 1 < s.depths.len() {
                    out.add_params(LayerTag::other(i - 1), 8 * dim + 8 * dim * dim);
                }
            }
            out.add_params(LayerTag::other(l), 2 * (d << (s.depths.len() - 1)));
        }
    }
    out
}
