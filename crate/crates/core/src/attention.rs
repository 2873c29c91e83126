//! Multi-head attention and feed-forward sublayers.

use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::scalar::{lit, Scalar};
use crate::tensor::{Graph, ParamId, Tensor, Var, MASK_FILL};

pub const LAYERNORM_EPS: f64 = 1e-6;

/// Query, key, value and output projections, each `d × d`. Column block
/// `h` of the query/key/value matrices is head `h`.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("d = {d} is not divisible by heads = {heads}")));
        }
        Ok(Self {
            wq: store.add_glorot(format!("{prefix}.wq"), d, d, rng),
            wk: store.add_glorot(format!("{prefix}.wk"), d, d, rng),
            wv: store.add_glorot(format!("{prefix}.wv"), d, d, rng),
            wo: store.add_glorot(format!("{prefix}.wo"), d, d, rng),
            heads,
        })
    }
}

#[derive(Clone, Debug)]
pub struct FfnParams {
    pub w2: ParamId,
    pub b2: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
}

impl FfnParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, d_ff: usize, rng: &mut Rng) -> Self {
        Self {
            w2: store.add_glorot(format!("{prefix}.w2"), d, d_ff, rng),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[d_ff])),
            w1: store.add_glorot(format!("{prefix}.w1"), d_ff, d, rng),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[d])),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{prefix}.g"), Tensor::ones(&[d])),
            bias: store.add(format!("{prefix}.b"), Tensor::zeros(&[d])),
        }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layernorm(x, p[self.gain], p[self.bias], lit(LAYERNORM_EPS))
    }
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub self_attn: AttentionParams,
    pub ln_attn: LayerNormParams,
    pub cross: Option<(AttentionParams, LayerNormParams)>,
    pub ffn: FfnParams,
    pub ln_ffn: LayerNormParams,
    pub dropout: f64,
}

impl LayerParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        dropout: f64,
        cross: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let self_attn = AttentionParams::new(store, &format!("{prefix}.attn"), d, heads, rng)?;
        let ln_attn = LayerNormParams::new(store, &format!("{prefix}.ln_attn"), d);
        let cross = if cross {
            Some((
                AttentionParams::new(store, &format!("{prefix}.cross"), d, heads, rng)?,
                LayerNormParams::new(store, &format!("{prefix}.ln_cross"), d),
            ))
        } else {
            None
        };
        Ok(Self {
            self_attn,
            ln_attn,
            cross,
            ffn: FfnParams::new(store, &format!("{prefix}.ffn"), d, d_ff, rng),
            ln_ffn: LayerNormParams::new(store, &format!("{prefix}.ln_ffn"), d),
            dropout,
        })
    }
}

/// `softmax(q kᵀ / √dh) v` over `[b, lq, dh]` queries and `[b, lm, dh]`
/// keys and values. `blocked` (same layout as the logits `[b, lq, lm]`)
/// marks entries that get no weight.
pub fn scaled_dot_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    blocked: Option<Arc<Vec<bool>>>,
) -> Result<Var> {
    let dh = *g.shape(q).last().ok_or_else(|| invalid("attention on a scalar"))?;
    let logits = g.matmul_nt(q, k)?;
    let logits = g.scale(logits, lit(1.0 / (dh as f64).sqrt()))?;
    let logits = match blocked {
        Some(m) => g.masked_fill(logits, m, lit(MASK_FILL))?,
        None => logits,
    };
    let rank = g.shape(logits).len();
    let w = g.softmax(logits, rank - 1)?;
    g.matmul(w, v)
}

fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let [b, l, d] = *g.shape(x) else {
        return Err(invalid("expected [batch, length, d]"));
    };
    let x = g.reshape(x, &[b, l, heads, d / heads])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * heads, l, d / heads])
}

/// Multi-head attention of `xq: [b, lq, d]` over `xm: [b, lm, d]`.
/// `blocked` has layout `[b, lq, lm]` and applies to every head.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    a: &AttentionParams,
    xq: Var,
    xm: Var,
    blocked: Option<&[bool]>,
) -> Result<Var> {
    let (qs, ms) = (g.shape(xq).to_vec(), g.shape(xm).to_vec());
    if qs.len() != 3 || ms.len() != 3 || qs[0] != ms[0] || qs[2] != ms[2] {
        return Err(Error::ShapeMismatch {
            op: "attention",
            left: qs,
            right: ms,
        });
    }
    let (b, lq, d, lm, h) = (qs[0], qs[1], qs[2], ms[1], a.heads);
    if d % h != 0 {
        return Err(invalid(format!("d = {d} is not divisible by heads = {h}")));
    }
    let blocked = match blocked {
        Some(m) if m.len() != b * lq * lm => {
            return Err(Error::ShapeMismatch {
                op: "attention mask",
                left: vec![m.len()],
                right: vec![b, lq, lm],
            })
        }
        Some(m) => {
            let per = lq * lm;
            let mut full = Vec::with_capacity(b * h * per);
            for bi in 0..b {
                for _ in 0..h {
                    full.extend_from_slice(&m[bi * per..(bi + 1) * per]);
                }
            }
            Some(Arc::new(full))
        }
        None => None,
    };
    let q = g.matmul(xq, p[a.wq])?;
    let k = g.matmul(xm, p[a.wk])?;
    let v = g.matmul(xm, p[a.wv])?;
    let (q, k, v) = (split_heads(g, q, h)?, split_heads(g, k, h)?, split_heads(g, v, h)?);
    let o = scaled_dot_attention(g, q, k, v, blocked)?;
    let o = g.reshape(o, &[b, h, lq, d / h])?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &[b, lq, d])?;
    g.matmul(o, p[a.wo])
}

/// `layernorm(q + dropout(attention(q, m)))`.
#[allow(clippy::too_many_arguments)]
pub fn self_attn_sublayer<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    layer: &LayerParams,
    q: Var,
    m: Var,
    blocked: Option<&[bool]>,
    rng: &mut Rng,
    training: bool,
) -> Result<Var> {
    let a = multi_head_attention(g, p, &layer.self_attn, q, m, blocked)?;
    let a = g.dropout(a, layer.dropout, rng, training)?;
    let r = g.add(q, a)?;
    layer.ln_attn.apply(g, p, r)
}

/// `layernorm(x + dropout(W1 relu(W2 x + b2) + b1))`, position-wise.
pub fn ffn_sublayer<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    layer: &LayerParams,
    x: Var,
    rng: &mut Rng,
    training: bool,
) -> Result<Var> {
    let f = &layer.ffn;
    let hdn = g.matmul(x, p[f.w2])?;
    let hdn = g.add_bias(hdn, p[f.b2])?;
    let hdn = g.relu(hdn)?;
    let y = g.matmul(hdn, p[f.w1])?;
    let y = g.add_bias(y, p[f.b1])?;
    let y = g.dropout(y, layer.dropout, rng, training)?;
    let r = g.add(x, y)?;
    layer.ln_ffn.apply(g, p, r)
}

/// Unmasked attention of decoder rows `x: [n, d]` over `enc: [n_src, d]`,
/// with the same residual and normalisation scheme.
pub fn cross_attn_sublayer<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    layer: &LayerParams,
    x: Var,
    enc: Var,
    rng: &mut Rng,
    training: bool,
) -> Result<Var> {
    let (a, ln) = layer.cross.as_ref().ok_or_else(|| invalid("layer has no cross-attention"))?;
    let [n, d] = *g.shape(x) else {
        return Err(invalid("cross-attention expects [n, d] decoder rows"));
    };
    let ns = g.shape(enc)[0];
    let q = g.reshape(x, &[1, n, d])?;
    let m = g.reshape(enc, &[1, ns, d])?;
    let o = multi_head_attention(g, p, a, q, m, None)?;
    let o = g.reshape(o, &[n, d])?;
    let o = g.dropout(o, layer.dropout, rng, training)?;
    let r = g.add(x, o)?;
    ln.apply(g, p, r)
}
