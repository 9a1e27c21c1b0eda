//! Rewrite-view fusion for text and the three-layer multimodal transformer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Graph, Var};
use crate::nn::{Activation, CrossAttentionBlock, EncoderBlock, Mlp};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Real, Result, Tensor, TensorError};

/// Clamp `alpha_0` up to `alpha_min` and hand the remaining mass to the
/// rewrite weights in proportion to their original values.
pub fn renormalize_weights(alpha: &[f64], alpha_min: f64) -> Result<Vec<f64>> {
    if !(alpha_min > 0.0 && alpha_min < 1.0) {
        return Err(TensorError::Invalid(format!("alpha_min {alpha_min} must lie in (0,1)")));
    }
    if alpha.len() < 2 {
        return Err(TensorError::Invalid(
            "need the original and at least one rewrite weight".into(),
        ));
    }
    let a0 = alpha[0].max(alpha_min);
    let rest: f64 = alpha[1..].iter().sum();
    let mut out = vec![a0];
    for &a in &alpha[1..] {
        out.push(if rest > 0.0 {
            (1.0 - a0) * a / rest
        } else {
            (1.0 - a0) / (alpha.len() - 1) as f64
        });
    }
    Ok(out)
}

/// Quality-gated fusion of the original text with its rewrites.
#[derive(Clone, Debug)]
pub struct Aarf {
    pub quality: Mlp,
    pub gate: Mlp,
    pub proj: Vec<ParamId>,
    pub alpha_min: f32,
    pub views: usize,
}

/// Outputs of [`Aarf::forward`], all batched over rows.
pub struct AarfOut {
    /// `N x H`.
    pub h_fuse: Var,
    /// `N x (V+1)`, original text weight first.
    pub alpha: Var,
    /// `N x V`.
    pub quality: Var,
    /// Projected rewrites, one `N x H` node per view.
    pub projected: Vec<Var>,
}

impl Aarf {
    pub fn new<R: Rng>(
        pb: &mut ParamBuilder<'_, R>,
        h: usize,
        views: usize,
        hidden: usize,
        alpha_min: f32,
    ) -> Result<Self> {
        if !(alpha_min > 0.0 && alpha_min < 1.0) {
            return Err(TensorError::Invalid(format!("alpha_min {alpha_min} must lie in (0,1)")));
        }
        let quality = Mlp::new(pb, "aarf", "quality", (2 * h, hidden, 1), Activation::Gelu);
        let gate = Mlp::new(
            pb,
            "aarf",
            "gate",
            ((views + 1) * h + views, hidden, views + 1),
            Activation::Gelu,
        );
        let noise = Normal::new(0.0f32, 0.01).expect("std");
        let proj = (0..views)
            .map(|v| {
                let mut w = Tensor::identity(h);
                for x in w.data_mut() {
                    *x += noise.sample(pb.rng);
                }
                pb.tensor("aarf", &format!("proj_{v}"), w)
            })
            .collect();
        Ok(Self {
            quality,
            gate,
            proj,
            alpha_min,
            views,
        })
    }

    /// `sigmoid(MLP_q([h_orig; h_rew]))`, `N x 1`.
    pub fn rewrite_quality<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        h_orig: Var,
        h_rew: Var,
    ) -> Result<Var> {
        let x = g.concat_cols(&[h_orig, h_rew])?;
        let z = self.quality.forward(g, store, x)?;
        Ok(g.sigmoid(z))
    }

    /// Renormalized weights from gate logits `N x (V+1)`.
    pub fn weights_from_logits<T: Real>(&self, g: &mut Graph<T>, logits: Var) -> Result<Var> {
        let soft = g.softmax_rows(logits);
        let a0 = g.slice_cols(soft, 0, 1)?;
        let rest = g.slice_cols(soft, 1, self.views)?;
        let a0c = g.clamp(a0, self.alpha_min, 1.0);
        // (1 - a0c) / (1 - a0) scales the rewrite weights to the leftover mass
        let num = g.scale(a0c, -1.0);
        let num = g.add_const(num, 1.0);
        let den = g.sum_cols(rest);
        let inv = g.recip(den);
        let k = g.mul(num, inv)?;
        let rest = g.mul_col(rest, k)?;
        g.concat_cols(&[a0c, rest])
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        h_orig: Var,
        h_rew: &[Var],
    ) -> Result<AarfOut> {
        if h_rew.len() != self.views {
            return Err(TensorError::Invalid(format!(
                "expected {} rewrite views, got {}",
                self.views,
                h_rew.len()
            )));
        }
        let mut q = Vec::with_capacity(self.views);
        for &r in h_rew {
            q.push(self.rewrite_quality(g, store, h_orig, r)?);
        }
        let mut gate_in = vec![h_orig];
        gate_in.extend_from_slice(h_rew);
        gate_in.extend_from_slice(&q);
        let x = g.concat_cols(&gate_in)?;
        let logits = self.gate.forward(g, store, x)?;
        let alpha = self.weights_from_logits(g, logits)?;
        let a0 = g.slice_cols(alpha, 0, 1)?;
        let mut h_fuse = g.mul_col(h_orig, a0)?;
        let mut projected = Vec::with_capacity(self.views);
        for (v, &r) in h_rew.iter().enumerate() {
            let p = g.param(store, self.proj[v]);
            let pr = g.matmul(r, p)?;
            projected.push(pr);
            let av = g.slice_cols(alpha, v + 1, 1)?;
            let term = g.mul_col(pr, av)?;
            h_fuse = g.add(h_fuse, term)?;
        }
        let quality = g.concat_cols(&q)?;
        Ok(AarfOut {
            h_fuse,
            alpha,
            quality,
            projected,
        })
    }
}

pub const MODALITIES: [&str; 3] = ["text", "visual", "audio"];

/// Directed cross-attention order: `(query, partner)` modality indices.
pub const DIRECTIONS: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)];

/// Index into [`DIRECTIONS`] of the direction used for each score pair's
/// alignment term: text<-visual, text<-audio, visual<-audio.
pub const PAIR_DIRECTION: [usize; 3] = [0, 1, 3];

/// Three-layer hierarchical multimodal transformer.
#[derive(Clone, Debug)]
pub struct Hmt {
    pub intra: [EncoderBlock; 3],
    pub cross: [CrossAttentionBlock; 6],
    /// Per-modality `3 -> hidden -> 2` MLPs over the pairwise scores.
    pub beta: [Mlp; 3],
    pub cls: ParamId,
    pub pos: ParamId,
    pub global: EncoderBlock,
    pub dropout: f32,
}

/// Per-sample outputs of layers A and B.
pub struct HmtSample {
    /// Pooled layer-B outputs, `1 x H` each, in [`MODALITIES`] order.
    pub pooled: [Var; 3],
    /// Head-averaged attention per [`DIRECTIONS`] entry.
    pub attn: Vec<Var>,
}

impl Hmt {
    pub fn new<R: Rng>(
        pb: &mut ParamBuilder<'_, R>,
        h: usize,
        heads: usize,
        ffn: usize,
        small_hidden: usize,
        dropout: f32,
    ) -> Self {
        let intra = [0, 1, 2].map(|m| EncoderBlock::new(pb, &format!("hmt.intra.{}", MODALITIES[m]), h, heads, ffn));
        let cross = [0, 1, 2, 3, 4, 5].map(|i| {
            let (q, k) = DIRECTIONS[i];
            CrossAttentionBlock::new(
                pb,
                &format!("hmt.cross.{}_from_{}", MODALITIES[q], MODALITIES[k]),
                h,
                heads,
            )
        });
        let beta =
            [0, 1, 2].map(|m| Mlp::zero_output(pb, "hmt.beta", MODALITIES[m], (3, small_hidden, 2), Activation::Tanh));
        // unit scale, like the projected tokens it sits beside
        let cls = pb.normal("hmt.global", "cls", 1, h, 1.0);
        let pos = pb.normal("hmt.global", "pos", 5, h, 0.02);
        let global = EncoderBlock::new(pb, "hmt.global", h, heads, ffn);
        Self {
            intra,
            cross,
            beta,
            cls,
            pos,
            global,
            dropout,
        }
    }

    /// Consistency weights for every modality: three `N x 2` nodes.
    pub fn betas<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, c: Var) -> Result<[Var; 3]> {
        let mut out = Vec::with_capacity(3);
        for mlp in &self.beta {
            let z = mlp.forward(g, store, c)?;
            out.push(g.softmax_rows(z));
        }
        Ok([out[0], out[1], out[2]])
    }

    /// Layers A and B for one sample. `seqs` are the projected `L_m x H`
    /// sequences; `beta` holds the sample's `1 x 2` weights per modality.
    pub fn encode_sample<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        seqs: [Var; 3],
        beta: [Var; 3],
    ) -> Result<HmtSample> {
        let mut refined = Vec::with_capacity(3);
        for (m, &x) in seqs.iter().enumerate() {
            let (y, _) = self.intra[m].forward(g, store, x, self.dropout)?;
            refined.push(y);
        }
        let mut msgs = Vec::with_capacity(6);
        let mut attn = Vec::with_capacity(6);
        for (i, &(q, k)) in DIRECTIONS.iter().enumerate() {
            let (msg, a) = self.cross[i].forward(g, store, refined[q], refined[k], self.dropout)?;
            msgs.push(msg);
            attn.push(a);
        }
        let mut pooled = Vec::with_capacity(3);
        for m in 0..3 {
            let b0 = g.slice_cols(beta[m], 0, 1)?;
            let b1 = g.slice_cols(beta[m], 1, 1)?;
            let first = g.mul_scalar(msgs[2 * m], b0)?;
            let second = g.mul_scalar(msgs[2 * m + 1], b1)?;
            let hb = g.add(first, second)?;
            pooled.push(g.mean_rows(hb)?);
        }
        Ok(HmtSample {
            pooled: [pooled[0], pooled[1], pooled[2]],
            attn,
        })
    }

    /// Layer C: `[CLS; text; visual; audio; fuse]` plus positions through the
    /// global block; returns the CLS output row `1 x H`.
    pub fn global_sample<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        pooled: [Var; 3],
        fuse: Var,
    ) -> Result<Var> {
        let cls = g.param(store, self.cls);
        let pos = g.param(store, self.pos);
        let z = g.concat_rows(&[cls, pooled[0], pooled[1], pooled[2], fuse])?;
        let z = g.add(z, pos)?;
        let (out, _) = self.global.forward(g, store, z, self.dropout)?;
        g.slice_rows(out, 0, 1)
    }
}
