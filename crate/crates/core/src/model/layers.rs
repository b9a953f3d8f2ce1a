//! Transformer building blocks recorded on a [`Ctx`] tape.

use super::params::{Ctx, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Result, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let weight = store.add_xavier_uniform(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = ctx.tape.matmul(x, ctx.p(self.weight))?;
        ctx.tape.add_row(y, ctx.p(self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            eps,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let n = ctx.tape.layernorm(x, self.eps)?;
        let s = ctx.tape.mul_row(n, ctx.p(self.gamma))?;
        ctx.tape.add_row(s, ctx.p(self.beta))
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, ratio: usize, rng: &mut Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, dim * ratio, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dim * ratio, dim, rng),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.tape.gelu(h)?;
        self.fc2.forward(ctx, h)
    }
}

/// Multi-head attention with separate query, key, value and output maps.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

/// Half-open row range `[start, end)`.
pub type Window = (usize, usize);

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
        }
    }

    /// Scaled dot-product attention of `queries` over `context`. Returns the
    /// output and the per-head attention matrices (`Q × K`).
    pub fn forward_with_weights(&self, ctx: &mut Ctx, queries: Var, context: Var) -> Result<(Var, Vec<Var>)> {
        let q = self.q.forward(ctx, queries)?;
        let k = self.k.forward(ctx, context)?;
        let v = self.v.forward(ctx, context)?;
        let (heads, weights) = self.attend(ctx, q, k, v)?;
        Ok((self.out.forward(ctx, heads)?, weights))
    }

    pub fn forward(&self, ctx: &mut Ctx, queries: Var, context: Var) -> Result<Var> {
        Ok(self.forward_with_weights(ctx, queries, context)?.0)
    }

    /// Self-attention restricted to disjoint row windows: each token only sees
    /// tokens of its own window.
    pub fn forward_windowed(&self, ctx: &mut Ctx, x: Var, windows: &[Window]) -> Result<Var> {
        let q = self.q.forward(ctx, x)?;
        let k = self.k.forward(ctx, x)?;
        let v = self.v.forward(ctx, x)?;
        let mut parts = Vec::with_capacity(windows.len());
        for &(s, e) in windows {
            let qw = ctx.tape.slice_rows(q, s, e)?;
            let kw = ctx.tape.slice_rows(k, s, e)?;
            let vw = ctx.tape.slice_rows(v, s, e)?;
            parts.push(self.attend(ctx, qw, kw, vw)?.0);
        }
        let joined = ctx.tape.concat_rows(&parts)?;
        self.out.forward(ctx, joined)
    }

    fn attend(&self, ctx: &mut Ctx, q: Var, k: Var, v: Var) -> Result<(Var, Vec<Var>)> {
        let dim = ctx.tape.shape(q)[1];
        let hd = dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (s, e) = (h * hd, (h + 1) * hd);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    ctx.tape.slice_cols(q, s, e)?,
                    ctx.tape.slice_cols(k, s, e)?,
                    ctx.tape.slice_cols(v, s, e)?,
                )
            };
            let kt = ctx.tape.transpose(kh)?;
            let scores = ctx.tape.matmul(qh, kt)?;
            let scores = ctx.tape.scale(scores, scale)?;
            let w = ctx.tape.softmax(scores, 1)?;
            outs.push(ctx.tape.matmul(w, vh)?);
            weights.push(w);
        }
        let out = if outs.len() == 1 {
            outs[0]
        } else {
            ctx.tape.concat_cols(&outs)?
        };
        Ok((out, weights))
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

pub struct BlockDims {
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub eps: f64,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, d: &BlockDims, rng: &mut Rng) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d.dim, d.eps),
            attn: Attention::new(store, &format!("{name}.attn"), d.dim, d.heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d.dim, d.eps),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d.dim, d.mlp_ratio, rng),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.norm1.forward(ctx, x)?;
        let a = self.attn.forward(ctx, h, h)?;
        let x = ctx.tape.add(x, a)?;
        self.feed_forward(ctx, x)
    }

    pub fn forward_windowed(&self, ctx: &mut Ctx, x: Var, windows: &[Window]) -> Result<Var> {
        let h = self.norm1.forward(ctx, x)?;
        let a = self.attn.forward_windowed(ctx, h, windows)?;
        let x = ctx.tape.add(x, a)?;
        self.feed_forward(ctx, x)
    }

    fn feed_forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.norm2.forward(ctx, x)?;
        let m = self.mlp.forward(ctx, h)?;
        ctx.tape.add(x, m)
    }
}

/// Query stream attends to a separate key/value stream; the MLP runs on the
/// query stream only.
#[derive(Debug, Clone)]
pub struct CrossBlock {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl CrossBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: &BlockDims, rng: &mut Rng) -> Self {
        Self {
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), d.dim, d.eps),
            norm_kv: LayerNorm::new(store, &format!("{name}.norm_kv"), d.dim, d.eps),
            attn: Attention::new(store, &format!("{name}.attn"), d.dim, d.heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d.dim, d.eps),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d.dim, d.mlp_ratio, rng),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, queries: Var, context: Var) -> Result<Var> {
        Ok(self.forward_with_weights(ctx, queries, context)?.0)
    }

    pub fn forward_with_weights(&self, ctx: &mut Ctx, queries: Var, context: Var) -> Result<(Var, Vec<Var>)> {
        let q = self.norm_q.forward(ctx, queries)?;
        let kv = self.norm_kv.forward(ctx, context)?;
        let (a, w) = self.attn.forward_with_weights(ctx, q, kv)?;
        let x = ctx.tape.add(queries, a)?;
        let h = self.norm2.forward(ctx, x)?;
        let m = self.mlp.forward(ctx, h)?;
        Ok((ctx.tape.add(x, m)?, w))
    }
}

/// Contiguous windows of length `window` over `len` rows, starting after an
/// initial partial window of `offset` rows. The trailing window may be short.
pub fn windows(len: usize, window: usize, offset: usize) -> Vec<Window> {
    let window = window.clamp(1, len.max(1));
    let mut out = Vec::new();
    let mut start = 0;
    let first = offset % window;
    if first > 0 && first < len {
        out.push((0, first));
        start = first;
    }
    while start < len {
        let end = (start + window).min(len);
        out.push((start, end));
        start = end;
    }
    out
}
