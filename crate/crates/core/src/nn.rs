//! Layers built on [`Graph`]: linear maps, layer norm, small MLPs and
//! pre-norm transformer blocks with multi-head attention.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Real, Result, Tensor, TensorError};

const LN_EPS: f32 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, module: &str, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let std = 1.0 / (fan_in as f32).sqrt();
        Self {
            w: pb.normal(module, &format!("{name}.w"), fan_in, fan_out, std),
            b: pb.zeros(module, &format!("{name}.b"), 1, fan_out),
        }
    }

    pub fn zeros<R: Rng>(
        pb: &mut ParamBuilder<'_, R>,
        module: &str,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        Self {
            w: pb.zeros(module, &format!("{name}.w"), fan_in, fan_out),
            b: pb.zeros(module, &format!("{name}.b"), 1, fan_out),
        }
    }

    pub fn from_weights<R: Rng>(pb: &mut ParamBuilder<'_, R>, module: &str, name: &str, w: Tensor, b: Tensor) -> Self {
        Self {
            w: pb.tensor(module, &format!("{name}.w"), w),
            b: pb.tensor(module, &format!("{name}.b"), b),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }

    pub fn out_dim<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.w).cols()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, module: &str, name: &str, dim: usize) -> Self {
        Self {
            gamma: pb.ones(module, &format!("{name}.gamma"), 1, dim),
            beta: pb.zeros(module, &format!("{name}.beta"), 1, dim),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let n = g.layer_norm_rows(x, LN_EPS);
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.mul_row(n, gamma)?;
        g.add_row(y, beta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Tanh,
}

impl Activation {
    fn apply<T: Real>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// Two-layer perceptron: `in -> hidden -> out`, activation between layers only.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn new<R: Rng>(
        pb: &mut ParamBuilder<'_, R>,
        module: &str,
        name: &str,
        dims: (usize, usize, usize),
        act: Activation,
    ) -> Self {
        Self {
            hidden: Linear::new(pb, module, &format!("{name}.0"), dims.0, dims.1),
            out: Linear::new(pb, module, &format!("{name}.1"), dims.1, dims.2),
            act,
        }
    }

    /// Same as [`Mlp::new`] but with a zero output layer, so the MLP starts at 0.
    pub fn zero_output<R: Rng>(
        pb: &mut ParamBuilder<'_, R>,
        module: &str,
        name: &str,
        dims: (usize, usize, usize),
        act: Activation,
    ) -> Self {
        Self {
            hidden: Linear::new(pb, module, &format!("{name}.0"), dims.0, dims.1),
            out: Linear::zeros(pb, module, &format!("{name}.1"), dims.1, dims.2),
            act,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, store, x)?;
        let h = self.act.apply(g, h);
        self.out.forward(g, store, h)
    }

    /// Forward with dropout after the hidden activation.
    pub fn forward_dropout<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        p: f32,
        seed: u64,
    ) -> Result<Var> {
        let h = self.hidden.forward(g, store, x)?;
        let h = self.act.apply(g, h);
        let h = g.dropout(h, p, seed);
        self.out.forward(g, store, h)
    }
}

/// Scaled dot-product attention split over `heads` heads.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, module: &str, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(pb, module, &format!("{name}.q"), dim, dim),
            k: Linear::new(pb, module, &format!("{name}.k"), dim, dim),
            v: Linear::new(pb, module, &format!("{name}.v"), dim, dim),
            o: Linear::new(pb, module, &format!("{name}.o"), dim, dim),
            heads,
        }
    }

    /// Query and key projections start from the same draw, so initial
    /// attention scores track similarity between query and key tokens.
    pub fn new_tied_qk<R: Rng>(
        pb: &mut ParamBuilder<'_, R>,
        module: &str,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        let q = Linear::new(pb, module, &format!("{name}.q"), dim, dim);
        let wq = pb.store.get(q.w).clone();
        let k = Linear::from_weights(pb, module, &format!("{name}.k"), wq, Tensor::zeros(1, dim));
        Self {
            q,
            k,
            v: Linear::new(pb, module, &format!("{name}.v"), dim, dim),
            o: Linear::new(pb, module, &format!("{name}.o"), dim, dim),
            heads,
        }
    }

    /// Returns the `Lq x dim` output and the head-averaged `Lq x Lk`
    /// attention matrix (row-stochastic).
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, query: Var, kv: Var) -> Result<(Var, Var)> {
        let [_, dim] = g.shape(query);
        let [_, kv_dim] = g.shape(kv);
        if dim != kv_dim {
            return Err(TensorError::ShapeMismatch {
                op: "multi_head_attention",
                left: g.shape(query),
                right: g.shape(kv),
            });
        }
        if self.heads == 0 || dim % self.heads != 0 {
            return Err(TensorError::InvalidShape {
                op: "multi_head_attention",
                shape: g.shape(query),
                reason: "width not divisible by head count",
            });
        }
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let q = self.q.forward(g, store, query)?;
        let k = self.k.forward(g, store, kv)?;
        let v = self.v.forward(g, store, kv)?;
        let mut outs = Vec::with_capacity(self.heads);
        let mut attn_sum: Option<Var> = None;
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh)?,
                    g.slice_cols(k, h * dh, dh)?,
                    g.slice_cols(v, h * dh, dh)?,
                )
            };
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, scale);
            let p = g.softmax_rows(s);
            outs.push(g.matmul(p, vh)?);
            attn_sum = Some(match attn_sum {
                None => p,
                Some(acc) => g.add(acc, p)?,
            });
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        let out = self.o.forward(g, store, cat)?;
        let attn = g.scale(attn_sum.expect("at least one head"), 1.0 / self.heads as f32);
        Ok((out, attn))
    }
}

/// Pre-norm self-attention encoder block with a GELU feed-forward layer.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
}

impl EncoderBlock {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, module: &str, dim: usize, heads: usize, ffn: usize) -> Self {
        Self {
            ln1: LayerNorm::new(pb, module, "ln1", dim),
            attn: MultiHeadAttention::new(pb, module, "attn", dim, heads),
            ln2: LayerNorm::new(pb, module, "ln2", dim),
            ffn: Mlp::new(pb, module, "ffn", (dim, ffn, dim), Activation::Gelu),
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        dropout: f32,
    ) -> Result<(Var, Var)> {
        let n = self.ln1.forward(g, store, x)?;
        let (a, attn) = self.attn.forward(g, store, n, n)?;
        let seed = g.fresh_seed();
        let a = g.dropout(a, dropout, seed);
        let x = g.add(x, a)?;
        let n = self.ln2.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, n)?;
        let seed = g.fresh_seed();
        let f = g.dropout(f, dropout, seed);
        Ok((g.add(x, f)?, attn))
    }
}

/// Pre-norm cross-attention block: queries from one sequence attend to another.
#[derive(Clone, Debug)]
pub struct CrossAttentionBlock {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: MultiHeadAttention,
}

impl CrossAttentionBlock {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, module: &str, dim: usize, heads: usize) -> Self {
        Self {
            ln_q: LayerNorm::new(pb, module, "ln_q", dim),
            ln_kv: LayerNorm::new(pb, module, "ln_kv", dim),
            attn: MultiHeadAttention::new_tied_qk(pb, module, "attn", dim, heads),
        }
    }

    /// Returns `query + attention message` and the head-averaged attention.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        query: Var,
        kv: Var,
        dropout: f32,
    ) -> Result<(Var, Var)> {
        let nq = self.ln_q.forward(g, store, query)?;
        let nkv = self.ln_kv.forward(g, store, kv)?;
        let (m, attn) = self.attn.forward(g, store, nq, nkv)?;
        let seed = g.fresh_seed();
        let m = g.dropout(m, dropout, seed);
        Ok((g.add(query, m)?, attn))
    }
}
