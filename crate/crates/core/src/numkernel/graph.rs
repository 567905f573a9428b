//! Tape-based reverse-mode differentiation over the kernels.
//!
//! A [`Graph`] built for inference records nothing, so intermediate tensors
//! are released as soon as the caller drops them. A training graph keeps every
//! tensor a backward kernel needs alive on the tape until [`Graph::backward`]
//! consumes it.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use super::attention::{attention_backward, attention_forward, band_backward, band_forward, AttnShape, BandShape};
use super::grad;
use super::kernels::{self, Affine, Conv1dSpec, LAYER_NORM_EPS};
use super::tally::{current_tag, suspend_tally, with_tag};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::taxonomy::LayerTag;

type Backward = Box<dyn FnOnce(&Tensor, &[bool]) -> Result<Vec<Option<Tensor>>>>;

struct Node {
    out: usize,
    inputs: Vec<(usize, bool)>,
    tag: Option<LayerTag>,
    backward: Backward,
}

/// A value in a [`Graph`].
#[derive(Clone)]
pub struct Var {
    id: usize,
    value: Arc<Tensor>,
    grad: bool,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn tensor(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn rows(&self) -> usize {
        self.value.rows()
    }

    pub fn cols(&self) -> usize {
        self.value.cols()
    }

    pub fn requires_grad(&self) -> bool {
        self.grad
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value.shape())
    }
}

/// Gradients produced by [`Graph::backward`], keyed by variable.
pub struct Grads {
    map: HashMap<usize, Tensor>,
}

impl Grads {
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        self.map.get(&v.id)
    }

    pub fn take(&mut self, v: &Var) -> Option<Tensor> {
        self.map.remove(&v.id)
    }
}

pub struct Graph {
    training: bool,
    next: Cell<usize>,
    tape: RefCell<Vec<Node>>,
}

impl Graph {
    pub fn inference() -> Graph {
        Graph::new(false)
    }

    pub fn training() -> Graph {
        Graph::new(true)
    }

    pub fn new(training: bool) -> Graph {
        Graph {
            training,
            next: Cell::new(0),
            tape: RefCell::new(Vec::new()),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn tape_len(&self) -> usize {
        self.tape.borrow().len()
    }

    fn fresh(&self) -> usize {
        let id = self.next.get();
        self.next.set(id + 1);
        id
    }

    /// A trainable leaf. Gradients are only tracked on training graphs.
    pub fn param(&self, t: Arc<Tensor>) -> Var {
        Var {
            id: self.fresh(),
            value: t,
            grad: self.training,
        }
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.constant_arc(Arc::new(t))
    }

    pub fn constant_arc(&self, t: Arc<Tensor>) -> Var {
        Var {
            id: self.fresh(),
            value: t,
            grad: false,
        }
    }

    fn record(
        &self,
        out: Arc<Tensor>,
        inputs: &[&Var],
        backward: impl FnOnce(&Tensor, &[bool]) -> Result<Vec<Option<Tensor>>> + 'static,
    ) -> Var {
        let id = self.fresh();
        let grad = self.training && inputs.iter().any(|v| v.grad);
        if grad {
            self.tape.borrow_mut().push(Node {
                out: id,
                inputs: inputs.iter().map(|v| (v.id, v.grad)).collect(),
                tag: current_tag(),
                backward: Box::new(backward),
            });
        }
        Var { id, value: out, grad }
    }

    fn unary(&self, out: Tensor, x: &Var, f: impl FnOnce(&Tensor) -> Result<Tensor> + 'static) -> Var {
        self.record(Arc::new(out), &[x], move |dy, _| Ok(vec![Some(f(dy)?)]))
    }

    /// Back-propagates from `loss`, consuming the tape. Tapes recorded by
    /// inference graphs are empty, so this returns no gradients there.
    pub fn backward(&self, loss: &Var) -> Result<Grads> {
        let seed = Tensor::full(loss.shape(), 1.0);
        self.backward_with(loss, seed)
    }

    /// Back-propagates an explicit upstream gradient for `out`.
    pub fn backward_with(&self, out: &Var, seed: Tensor) -> Result<Grads> {
        if seed.shape() != out.shape() {
            return Err(Error::dim("backward", "seed shape differs from output"));
        }
        let tape = std::mem::take(&mut *self.tape.borrow_mut());
        suspend_tally(|| {
            let mut grads: HashMap<usize, Tensor> = HashMap::new();
            if !out.grad {
                return Ok(Grads { map: grads });
            }
            grads.insert(out.id, seed);
            for node in tape.into_iter().rev() {
                let Some(dy) = grads.remove(&node.out) else {
                    continue;
                };
                let needs: Vec<bool> = node.inputs.iter().map(|i| i.1).collect();
                let run = node.backward;
                let ins = match node.tag {
                    Some(tag) => with_tag(tag, || run(&dy, &needs)),
                    None => run(&dy, &needs),
                }?;
                drop(dy);
                for (&(id, need), g) in node.inputs.iter().zip(ins) {
                    let Some(g) = g else { continue };
                    if !need {
                        continue;
                    }
                    match grads.get_mut(&id) {
                        Some(acc) => {
                            if acc.shape() != g.shape() {
                                return Err(Error::dim("backward", "gradient shapes disagree"));
                            }
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                        None => {
                            grads.insert(id, g);
                        }
                    }
                }
            }
            Ok(Grads { map: grads })
        })
    }

    pub fn linear(&self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let out = kernels::linear(x.value(), w.value(), b.map(|b| b.value()))?;
        let (xt, wt) = (x.tensor(), w.tensor());
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record(Arc::new(out), &inputs, move |dy, needs| {
            let dx = needs[0].then(|| kernels::matmul_t(dy, false, &wt, true)).transpose()?;
            let dw = needs[1].then(|| kernels::matmul_t(&xt, true, dy, false)).transpose()?;
            let mut g = vec![dx, dw];
            if needs.len() > 2 {
                g.push(needs[2].then(|| grad::column_sums(dy)));
            }
            Ok(g)
        }))
    }

    pub fn matmul_t(&self, a: &Var, ta: bool, b: &Var, tb: bool) -> Result<Var> {
        let out = kernels::matmul_t(a.value(), ta, b.value(), tb)?;
        let (at, bt) = (a.tensor(), b.tensor());
        Ok(self.record(Arc::new(out), &[a, b], move |dy, _| {
            let (da, db) = grad::matmul_t_backward(&at, ta, &bt, tb, dy)?;
            Ok(vec![Some(da), Some(db)])
        }))
    }

    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::add(a.value(), b.value())?;
        Ok(self.record(Arc::new(out), &[a, b], |dy, needs| {
            Ok(needs.iter().map(|&n| n.then(|| dy.clone())).collect())
        }))
    }

    pub fn scale(&self, x: &Var, s: f32) -> Var {
        self.unary(kernels::scale(x.value(), s), x, move |dy| Ok(kernels::scale(dy, s)))
    }

    /// `c·I − x`.
    pub fn identity_minus(&self, x: &Var, c: f32) -> Result<Var> {
        let out = kernels::identity_minus(x.value(), c)?;
        Ok(self.unary(out, x, |dy| Ok(kernels::scale(dy, -1.0))))
    }

    pub fn norm(&self, x: &Var, gamma: &Var, beta: &Var, affine: Affine, eps: f32) -> Result<Var> {
        let (out, stats) = kernels::norm_rows(x.value(), gamma.value(), beta.value(), affine, eps)?;
        let (xt, gt) = (x.tensor(), gamma.tensor());
        Ok(self.record(Arc::new(out), &[x, gamma, beta], move |dy, _| {
            let (dx, dg, db) = grad::norm_rows_backward(&xt, &gt, &stats, dy, affine)?;
            Ok(vec![Some(dx), Some(dg), Some(db)])
        }))
    }

    pub fn layernorm(&self, x: &Var, gamma: &Var, beta: &Var) -> Result<Var> {
        self.norm(x, gamma, beta, Affine::PerColumn, LAYER_NORM_EPS)
    }

    pub fn gelu(&self, x: &Var) -> Var {
        let xt = x.tensor();
        self.unary(kernels::gelu(x.value()), x, move |dy| grad::gelu_backward(&xt, dy))
    }

    pub fn tanh(&self, x: &Var) -> Var {
        let out = Arc::new(kernels::tanh(x.value()));
        let y = Arc::clone(&out);
        self.record(out, &[x], move |dy, _| Ok(vec![Some(grad::tanh_backward(&y, dy)?)]))
    }

    /// Row-wise `softmax(scale · x)`.
    pub fn softmax(&self, x: &Var, scale: f32) -> Result<Var> {
        let out = Arc::new(kernels::softmax_rows_scaled(x.value(), scale)?);
        let y = Arc::clone(&out);
        Ok(self.record(out, &[x], move |dy, _| {
            Ok(vec![Some(grad::softmax_rows_backward_scaled(&y, dy, scale)?)])
        }))
    }

    pub fn embedding(&self, table: &Var, ids: Arc<[usize]>) -> Result<Var> {
        let out = kernels::embedding(table.value(), &ids)?;
        let vocab = table.rows();
        Ok(self.unary(out, table, move |dy| grad::embedding_backward(&ids, dy, vocab)))
    }

    pub fn patchify(&self, img: &Var, patch: usize) -> Result<Var> {
        let out = kernels::patchify(img.value(), patch)?;
        let shape = img.shape().to_vec();
        Ok(self.unary(out, img, move |dy| grad::patchify_backward(dy, &shape, patch)))
    }

    pub fn conv1d(&self, x: &Var, w: &Var, b: Option<&Var>, spec: Conv1dSpec, batch: usize) -> Result<Var> {
        let out = kernels::conv1d(x.value(), w.value(), b.map(|b| b.value()), spec, batch)?;
        let (xt, wt) = (x.tensor(), w.tensor());
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record(Arc::new(out), &inputs, move |dy, needs| {
            let (dx, dw, db) = grad::conv1d_backward(&xt, &wt, dy, spec, batch)?;
            let mut g = vec![needs[0].then_some(dx), Some(dw)];
            if needs.len() > 2 {
                g.push(Some(db));
            }
            Ok(g)
        }))
    }

    pub fn weight_norm(&self, v: &Var, g: &Var) -> Result<Var> {
        let (out, norms) = kernels::weight_norm(v.value(), g.value())?;
        let (vt, gt) = (v.tensor(), g.tensor());
        Ok(self.record(Arc::new(out), &[v, g], move |dy, _| {
            let (dv, dg) = grad::weight_norm_backward(&vt, &gt, &norms, dy)?;
            Ok(vec![Some(dv), Some(dg)])
        }))
    }

    pub fn gather_rows(&self, x: &Var, idx: Arc<[Option<usize>]>, group: usize) -> Result<Var> {
        let out = kernels::gather_rows(x.value(), &idx, group)?;
        let rows = x.rows();
        Ok(self.unary(out, x, move |dy| grad::gather_rows_backward(dy, &idx, rows)))
    }

    pub fn concat_rows(&self, parts: &[&Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
        let out = kernels::concat_rows(&values)?;
        let rows: Vec<usize> = parts.iter().map(|p| p.rows()).collect();
        Ok(self.record(Arc::new(out), parts, move |dy, needs| {
            let c = dy.cols();
            let mut r0 = 0;
            let mut g = Vec::with_capacity(rows.len());
            for (&r, &need) in rows.iter().zip(needs) {
                g.push(need.then(|| kernels::slice(dy, r0, r, 0, c)).transpose()?);
                r0 += r;
            }
            Ok(g)
        }))
    }

    pub fn concat_cols(&self, parts: &[&Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
        let out = kernels::concat_cols(&values)?;
        let cols: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
        Ok(self.record(Arc::new(out), parts, move |dy, needs| {
            let r = dy.rows();
            let mut c0 = 0;
            let mut g = Vec::with_capacity(cols.len());
            for (&c, &need) in cols.iter().zip(needs) {
                g.push(need.then(|| kernels::slice(dy, 0, r, c0, c)).transpose()?);
                c0 += c;
            }
            Ok(g)
        }))
    }

    pub fn slice(&self, x: &Var, r0: usize, nr: usize, c0: usize, nc: usize) -> Result<Var> {
        let out = kernels::slice(x.value(), r0, nr, c0, nc)?;
        let (r, c) = (x.rows(), x.cols());
        Ok(self.unary(out, x, move |dy| {
            let mut dx = Tensor::zeros(&[r, c]);
            for i in 0..nr {
                dx.data_mut()[(r0 + i) * c + c0..(r0 + i) * c + c0 + nc].copy_from_slice(dy.row(i));
            }
            Ok(dx)
        }))
    }

    pub fn transpose(&self, x: &Var) -> Result<Var> {
        let out = kernels::transpose(x.value())?;
        Ok(self.unary(out, x, kernels::transpose))
    }

    /// Transposes each of `batch` stacked blocks.
    pub fn transpose_blocks(&self, x: &Var, batch: usize) -> Result<Var> {
        let out = kernels::transpose_blocks(x.value(), batch)?;
        Ok(self.unary(out, x, move |dy| kernels::transpose_blocks(dy, batch)))
    }

    pub fn mean_rows(&self, x: &Var, batch: usize) -> Result<Var> {
        let out = kernels::mean_rows(x.value(), batch)?;
        let n = x.rows() / batch;
        Ok(self.unary(out, x, move |dy| grad::mean_rows_backward(dy, n)))
    }

    pub fn segment_mean(&self, x: &Var, m: usize) -> Result<Var> {
        let out = kernels::segment_mean(x.value(), m)?;
        let n = x.rows();
        Ok(self.unary(out, x, move |dy| grad::segment_mean_backward(dy, n)))
    }

    /// Dense multi-head attention; see [`attention_forward`] for layouts.
    pub fn attention(
        &self,
        q: &Var,
        k: &Var,
        v: &Var,
        shape: AttnShape,
        bias: Option<&Var>,
        mask: Option<&Tensor>,
    ) -> Result<Var> {
        let (out, probs) = attention_forward(q.value(), k.value(), v.value(), &shape, bias.map(|b| b.value()), mask)?;
        let (qt, kt, vt) = (q.tensor(), k.tensor(), v.tensor());
        let bias_shape = bias.map(|b| b.shape().to_vec());
        let mut inputs = vec![q, k, v];
        inputs.extend(bias);
        Ok(self.record(Arc::new(out), &inputs, move |dy, needs| {
            let want_bias = needs.len() > 3 && needs[3];
            let (dq, dk, dv, db) = attention_backward(&qt, &kt, &vt, &probs, dy, &shape, want_bias)?;
            let mut g = vec![Some(dq), Some(dk), Some(dv)];
            if let Some(shape) = bias_shape {
                g.push(db.map(|t| t.reshape(&shape)).transpose()?);
            }
            Ok(g)
        }))
    }

    pub fn band_attention(&self, q: &Var, k: &Var, v: &Var, shape: BandShape) -> Result<Var> {
        let (out, probs) = band_forward(q.value(), k.value(), v.value(), &shape)?;
        let (qt, kt, vt) = (q.tensor(), k.tensor(), v.tensor());
        Ok(self.record(Arc::new(out), &[q, k, v], move |dy, _| {
            let (dq, dk, dv) = band_backward(&qt, &kt, &vt, &probs, dy, &shape)?;
            Ok(vec![Some(dq), Some(dk), Some(dv)])
        }))
    }

    /// Mean cross-entropy. Returns the loss value and a `[1]` variable to
    /// back-propagate from.
    pub fn cross_entropy(&self, logits: &Var, labels: &[usize]) -> Result<(f32, Var)> {
        let (loss, probs) = kernels::cross_entropy(logits.value(), labels)?;
        let labels = labels.to_vec();
        let out = Tensor::from_vec(&[1], vec![loss])?;
        let var = self.unary(out, logits, move |dy| {
            let mut d = grad::cross_entropy_backward(&probs, &labels)?;
            let s = dy.data()[0];
            d.data_mut().iter_mut().for_each(|v| *v *= s);
            Ok(d)
        });
        Ok((loss, var))
    }
}
