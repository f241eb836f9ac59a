use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Mask, Tensor, Var, MASK_VALUE};

use super::config::Activation;
use super::params::{ParamId, ParamStore};
use super::session::Session;

fn init_weight<R: Rng>(store: &mut ParamStore, name: String, fan_in: usize, fan_out: usize, rng: &mut R) -> ParamId {
    let std = (1.0 / fan_in as f64).sqrt();
    store.add(name, Tensor::randn(&[fan_in, fan_out], std, rng))
}

/// `y = x·W + b` applied over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            weight: init_weight(store, format!("{prefix}.weight"), d_in, d_out, rng),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let shape = sess.graph.shape(x).to_vec();
        let d_in = *shape.last().ok_or_else(|| Error::dim("linear", &shape, &[]))?;
        let rows = shape.iter().product::<usize>() / d_in.max(1);
        let (w, b) = (sess.param(self.weight), sess.param(self.bias));
        let d_out = sess.graph.shape(w)[1];
        let flat = sess.graph.reshape(x, &[rows, d_in])?;
        let y = sess.graph.matmul(flat, w)?;
        let y = sess.graph.add(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = d_out;
        sess.graph.reshape(y, &out_shape)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{prefix}.gain"), Tensor::full(&[d], 1.0)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let (g, b) = (sess.param(self.gain), sess.param(self.bias));
        sess.graph.layer_norm(x, g, b)
    }

    /// Post-norm residual: `LN(x + dropout(y))`.
    pub fn residual(&self, sess: &mut Session, x: Var, y: Var) -> Result<Var> {
        let y = sess.dropout(y)?;
        let s = sess.graph.add(x, y)?;
        self.forward(sess, s)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub activation: Activation,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        d_ff: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{prefix}.up"), d, d_ff, rng),
            down: Linear::new(store, &format!("{prefix}.down"), d_ff, d, rng),
            activation,
        }
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let h = self.up.forward(sess, x)?;
        let h = match self.activation {
            Activation::Relu => sess.graph.relu(h),
            Activation::Gelu => sess.graph.gelu(h),
        };
        self.down.forward(sess, h)
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::new(store, &format!("{prefix}.query"), d, d, rng),
            key: Linear::new(store, &format!("{prefix}.key"), d, d, rng),
            value: Linear::new(store, &format!("{prefix}.value"), d, d, rng),
            out: Linear::new(store, &format!("{prefix}.out"), d, d, rng),
            heads,
        }
    }

    pub fn forward(&self, sess: &mut Session, query: Var, key: Var, value: Var, mask: Option<&Mask>) -> Result<Var> {
        multi_head_attention(sess, self, query, key, value, mask)
    }
}

fn split_heads(sess: &mut Session, x: Var, heads: usize) -> Result<Var> {
    let s = sess.graph.shape(x).to_vec();
    let x = sess.graph.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    sess.graph.transpose(x, 1, 2)
}

/// Per head `softmax(QKᵀ/√d_head + mask)·V`, heads concatenated, then the
/// output projection. Inputs are `[batch, len, hidden]`; `mask` broadcasts
/// against the `[batch, heads, len_q, len_k]` scores.
pub fn multi_head_attention(
    sess: &mut Session,
    params: &Attention,
    query: Var,
    key: Var,
    value: Var,
    mask: Option<&Mask>,
) -> Result<Var> {
    let qs = sess.graph.shape(query).to_vec();
    let ks = sess.graph.shape(key).to_vec();
    let vs = sess.graph.shape(value).to_vec();
    if qs.len() != 3 || ks.len() != 3 || ks != vs || qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(Error::dim("attention", &qs, &ks));
    }
    if qs[2] % params.heads != 0 {
        return Err(Error::dim("attention heads", &qs, &[params.heads]));
    }
    let (batch, len_q, d) = (qs[0], qs[1], qs[2]);
    let d_head = d / params.heads;

    let q = params.query.forward(sess, query)?;
    let k = params.key.forward(sess, key)?;
    let v = params.value.forward(sess, value)?;
    let q = split_heads(sess, q, params.heads)?;
    let k = split_heads(sess, k, params.heads)?;
    let v = split_heads(sess, v, params.heads)?;

    let kt = sess.graph.transpose(k, 2, 3)?;
    let scores = sess.graph.bmm(q, kt)?;
    let mut scores = sess.graph.scale(scores, 1.0 / (d_head as f64).sqrt());
    if let Some(m) = mask {
        scores = sess.graph.masked_fill(scores, m, MASK_VALUE)?;
    }
    let weights = sess.graph.softmax(scores, 3)?;
    let ctx = sess.graph.bmm(weights, v)?;
    let ctx = sess.graph.transpose(ctx, 1, 2)?;
    let ctx = sess.graph.reshape(ctx, &[batch, len_q, d])?;
    params.out.forward(sess, ctx)
}
