//! The full detector head: consistency scoring, rewrite fusion, the
//! hierarchical transformer and the classifier, wired over record batches.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{Classifier, ClassifierOut, PredictionOutput, NUM_CONSISTENCY_INPUTS};
use crate::consistency::{consistency_field, pool_modality, Cmcg, ConsistencyBundle, Tcmi};
use crate::features::FeatureRecord;
use crate::fusion::{Aarf, AarfOut, Hmt, DIRECTIONS, MODALITIES};
use crate::graph::{Graph, Var};
use crate::nn::Linear;
use crate::params::{CheckpointError, ParamBuilder, ParamStore};
use crate::tensor::{Real, Result, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_in: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Width of the small gating MLPs (quality, gate, beta, global, temporal).
    pub small_hidden: usize,
    pub classifier_hidden: usize,
    pub classifier_dropout: f32,
    pub encoder_dropout: f32,
    pub views: usize,
    pub alpha_min: f32,
    pub t_prime: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_in: 32,
            hidden: 64,
            heads: 8,
            ffn: 128,
            small_hidden: 16,
            classifier_hidden: 256,
            classifier_dropout: 0.3,
            encoder_dropout: 0.1,
            views: 3,
            alpha_min: 0.5,
            t_prime: 16,
            init_seed: 17,
        }
    }
}

impl ModelConfig {
    /// Full-width configuration: 256 hidden, 8 heads.
    pub fn wide() -> Self {
        Self {
            hidden: 256,
            ffn: 512,
            small_hidden: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TensorError::Invalid(m));
        if self.d_in == 0 || self.hidden == 0 || self.ffn == 0 || self.small_hidden == 0 || self.classifier_hidden == 0
        {
            return bad("model widths must be positive".into());
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.views == 0 {
            return bad("need at least one rewrite view".into());
        }
        if !(self.alpha_min > 0.0 && self.alpha_min < 1.0) {
            return bad(format!("alpha_min {} must lie in (0,1)", self.alpha_min));
        }
        for p in [self.classifier_dropout, self.encoder_dropout] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("dropout {p} must lie in [0,1)"));
            }
        }
        if self.t_prime == 0 {
            return bad("t_prime must be positive".into());
        }
        Ok(())
    }
}

/// Switches for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Feed zeros instead of the five consistency scalars to the classifier.
    pub no_consistency_inputs: bool,
    /// Skip rewrite fusion: `h_fuse = h_orig`.
    pub no_rewrite_fusion: bool,
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub input_proj: [Linear; 3],
    pub cmcg: Cmcg,
    pub tcmi: Tcmi,
    pub aarf: Aarf,
    pub hmt: Hmt,
    pub classifier: Classifier,
}

/// Graph nodes for one batch forward pass.
pub struct BatchOut {
    /// `N x 3` pairwise scores (tv, ta, va).
    pub c_pairs: Var,
    pub c_global: Var,
    pub c_temp: Var,
    pub h_orig: Var,
    /// Fusion outputs; `None` when fusion is ablated.
    pub fusion: Option<AarfOut>,
    pub h_fuse: Var,
    /// Pooled layer-B outputs per modality, `N x H` each.
    pub pooled: [Var; 3],
    pub h_global: Var,
    /// Per-sample layer-B attention, in [`DIRECTIONS`] order.
    pub attn: Vec<Vec<Var>>,
    pub head_input: Var,
    pub head: ClassifierOut,
    /// Seed of the classifier dropout mask, for reuse by paired branches.
    pub head_seed: u64,
}

/// Per-sample inference output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    pub prediction: PredictionOutput,
    pub bundle: ConsistencyBundle,
    /// `[c_tv, c_ta, c_va]` with the original text (index 0) and each rewrite.
    pub view_scores: Vec<[f32; 3]>,
}

fn pooled_batch<T: Real>(records: &[&FeatureRecord], pick: impl Fn(&FeatureRecord) -> &Tensor) -> Result<Tensor<T>> {
    let rows = records
        .iter()
        .map(|r| Ok(pool_modality(pick(r))?.cast::<T>().into_data()))
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

impl Detector {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut pb = ParamBuilder {
            store: &mut store,
            rng: &mut rng,
        };
        let c = &config;
        let input_proj = [0, 1, 2].map(|m| Linear::new(&mut pb, "input", MODALITIES[m], c.d_in, c.hidden));
        let cmcg = Cmcg::new(&mut pb, c.d_in, c.small_hidden);
        let tcmi = Tcmi::new(&mut pb, c.d_in, c.small_hidden, c.t_prime);
        let aarf = Aarf::new(&mut pb, c.hidden, c.views, c.small_hidden, c.alpha_min)?;
        let hmt = Hmt::new(&mut pb, c.hidden, c.heads, c.ffn, c.small_hidden, c.encoder_dropout);
        let classifier = Classifier::new(&mut pb, c.hidden, c.classifier_hidden, c.classifier_dropout);
        Ok(Self {
            config,
            store,
            input_proj,
            cmcg,
            tcmi,
            aarf,
            hmt,
            classifier,
        })
    }

    pub fn check_record(&self, r: &FeatureRecord) -> Result<()> {
        let d = self.config.d_in;
        let bad = [&r.text, &r.visual, &r.audio]
            .iter()
            .any(|t| t.cols() != d || t.rows() == 0)
            || r.rewrites.len() != self.config.views
            || r.rewrites.iter().any(|t| t.cols() != d || t.rows() == 0);
        if bad {
            return Err(TensorError::Invalid(format!(
                "record {} does not match the model (d_in {d}, {} views)",
                r.id, self.config.views
            )));
        }
        Ok(())
    }

    /// Batch forward in any precision. `store` must hold this model's
    /// parameters (possibly cast).
    pub fn forward_batch<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        records: &[&FeatureRecord],
        ablation: Ablation,
    ) -> Result<BatchOut> {
        if records.is_empty() {
            return Err(TensorError::Invalid("empty batch".into()));
        }
        for r in records {
            self.check_record(r)?;
        }
        let n = records.len();

        let raw_t = g.constant(pooled_batch(records, |r| &r.text)?);
        let raw_v = g.constant(pooled_batch(records, |r| &r.visual)?);
        let raw_a = g.constant(pooled_batch(records, |r| &r.audio)?);
        let c_pairs = self.cmcg.pair_scores(g, store, raw_t, raw_v, raw_a)?;
        let c_global = self.cmcg.global_score(g, store, c_pairs)?;

        let mut summaries = Vec::with_capacity(n);
        for r in records {
            let v = g.constant(r.visual.cast());
            let a = g.constant(r.audio.cast());
            let d = self.tcmi.distances(g, store, v, a)?;
            summaries.push(self.tcmi.summary(g, d)?);
        }
        let s = g.concat_rows(&summaries)?;
        let c_temp = self.tcmi.score(g, store, s)?;

        // Pooling commutes with the affine input map, so rewrites and the
        // original text are pooled first and projected once.
        let h_orig = self.input_proj[0].forward(g, store, raw_t)?;
        let h_fuse;
        let fusion = if ablation.no_rewrite_fusion {
            h_fuse = h_orig;
            None
        } else {
            let mut rew = Vec::with_capacity(self.config.views);
            for v in 0..self.config.views {
                let raw = g.constant(pooled_batch(records, |r| &r.rewrites[v])?);
                rew.push(self.input_proj[0].forward(g, store, raw)?);
            }
            let out = self.aarf.forward(g, store, h_orig, &rew)?;
            h_fuse = out.h_fuse;
            Some(out)
        };

        let betas = self.hmt.betas(g, store, c_pairs)?;
        let mut pooled_rows: [Vec<Var>; 3] = Default::default();
        let mut global_rows = Vec::with_capacity(n);
        let mut attn = Vec::with_capacity(n);
        for (i, r) in records.iter().enumerate() {
            let mut seqs = [r.text.cast(), r.visual.cast(), r.audio.cast()].map(|t| g.constant(t));
            for m in 0..3 {
                seqs[m] = self.input_proj[m].forward(g, store, seqs[m])?;
            }
            let beta = [
                g.slice_rows(betas[0], i, 1)?,
                g.slice_rows(betas[1], i, 1)?,
                g.slice_rows(betas[2], i, 1)?,
            ];
            let sample = self.hmt.encode_sample(g, store, seqs, beta)?;
            let fuse = g.slice_rows(h_fuse, i, 1)?;
            global_rows.push(self.hmt.global_sample(g, store, sample.pooled, fuse)?);
            for m in 0..3 {
                pooled_rows[m].push(sample.pooled[m]);
            }
            attn.push(sample.attn);
        }
        let pooled = [
            g.concat_rows(&pooled_rows[0])?,
            g.concat_rows(&pooled_rows[1])?,
            g.concat_rows(&pooled_rows[2])?,
        ];
        let h_global = g.concat_rows(&global_rows)?;
        let head_input = self.head_input(g, h_global, c_pairs, c_global, c_temp, ablation)?;
        let head_seed = g.fresh_seed();
        let head = self.classifier.forward(g, store, head_input, head_seed)?;
        Ok(BatchOut {
            c_pairs,
            c_global,
            c_temp,
            h_orig,
            fusion,
            h_fuse,
            pooled,
            h_global,
            attn,
            head_input,
            head,
            head_seed,
        })
    }

    /// `[h_global; c_tv; c_ta; c_va; c_global; c_temp]`, or zeros in place
    /// of the consistency scalars when ablated.
    pub fn head_input<T: Real>(
        &self,
        g: &mut Graph<T>,
        h_global: Var,
        c_pairs: Var,
        c_global: Var,
        c_temp: Var,
        ablation: Ablation,
    ) -> Result<Var> {
        if ablation.no_consistency_inputs {
            let n = g.shape(h_global)[0];
            let z = g.constant(Tensor::zeros(n, NUM_CONSISTENCY_INPUTS));
            g.concat_cols(&[h_global, z])
        } else {
            g.concat_cols(&[h_global, c_pairs, c_global, c_temp])
        }
    }

    /// Re-runs the global layer with `h_orig` in the fusion slot and feeds
    /// the classifier with the same dropout mask as the main branch.
    pub fn head_with_original_text<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        out: &BatchOut,
        ablation: Ablation,
    ) -> Result<ClassifierOut> {
        let n = g.shape(out.h_orig)[0];
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let pooled = [
                g.slice_rows(out.pooled[0], i, 1)?,
                g.slice_rows(out.pooled[1], i, 1)?,
                g.slice_rows(out.pooled[2], i, 1)?,
            ];
            let orig = g.slice_rows(out.h_orig, i, 1)?;
            rows.push(self.hmt.global_sample(g, store, pooled, orig)?);
        }
        let h_global = g.concat_rows(&rows)?;
        let x = self.head_input(g, h_global, out.c_pairs, out.c_global, out.c_temp, ablation)?;
        self.classifier.forward(g, store, x, out.head_seed)
    }

    /// Pairwise scores with the text slot filled by the original text and by
    /// each rewrite in turn.
    pub fn view_scores(&self, record: &FeatureRecord) -> Result<Vec<[f32; 3]>> {
        let mut g: Graph = Graph::new();
        let refs = [record];
        let v = g.constant(pooled_batch(&refs, |r| &r.visual)?);
        let a = g.constant(pooled_batch(&refs, |r| &r.audio)?);
        let mut texts = vec![pooled_batch::<f32>(&refs, |r| &r.text)?];
        for k in 0..record.rewrites.len() {
            texts.push(pooled_batch(&refs, |r| &r.rewrites[k])?);
        }
        let mut out = Vec::with_capacity(texts.len());
        for t in texts {
            let t = g.constant(t);
            let c = self.cmcg.pair_scores(&mut g, &self.store, t, v, a)?;
            let c = g.value(c);
            out.push([c.get(0, 0), c.get(0, 1), c.get(0, 2)]);
        }
        Ok(out)
    }

    /// Inference on one chunk of records in a single graph.
    pub fn infer_chunk(&self, records: &[&FeatureRecord], ablation: Ablation) -> Result<Vec<Inference>> {
        let mut g: Graph = Graph::new();
        let out = self.forward_batch(&mut g, &self.store, records, ablation)?;
        let mut res = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            let p = g.value(out.head.p_fake).get(i, 0) as f64;
            let u = g.value(out.head.u_hat).get(i, 0) as f64;
            let c = g.value(out.c_pairs);
            let mut fields = IndexMap::new();
            for (k, &(q, p_)) in DIRECTIONS.iter().enumerate() {
                let f = consistency_field(g.value(out.attn[i][k]))?;
                fields.insert(format!("{}_from_{}", MODALITIES[q], MODALITIES[p_]), f);
            }
            let bundle = ConsistencyBundle {
                c_tv: c.get(i, 0),
                c_ta: c.get(i, 1),
                c_va: c.get(i, 2),
                c_global: g.value(out.c_global).get(i, 0),
                c_temp: g.value(out.c_temp).get(i, 0),
                fields,
            };
            res.push(Inference {
                prediction: PredictionOutput::new(p, u),
                bundle,
                view_scores: self.view_scores(r)?,
            });
        }
        Ok(res)
    }

    /// Inference over all records, parallel over fixed-size chunks. Output
    /// order and values do not depend on the thread count.
    pub fn infer(&self, records: &[FeatureRecord], ablation: Ablation) -> Result<Vec<Inference>> {
        let refs: Vec<&FeatureRecord> = records.iter().collect();
        let chunks: Vec<Result<Vec<Inference>>> = refs.par_chunks(64).map(|c| self.infer_chunk(c, ablation)).collect();
        let mut out = Vec::with_capacity(records.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    pub fn write_checkpoint<W: std::io::Write>(&self, w: W) -> std::result::Result<usize, CheckpointError> {
        let meta = serde_json::to_value(&self.config).map_err(|e| CheckpointError::Header(e.to_string()))?;
        self.store.write_checkpoint(&meta, w)
    }

    pub fn read_checkpoint<R: std::io::Read>(r: R) -> std::result::Result<Self, CheckpointError> {
        let (store, meta) = ParamStore::read_checkpoint(r)?;
        let config: ModelConfig =
            serde_json::from_value(meta).map_err(|e| CheckpointError::Header(format!("model config: {e}")))?;
        let mut det = Detector::new(config).map_err(|e| CheckpointError::Header(e.to_string()))?;
        det.store.load_values(&store)?;
        Ok(det)
    }
}
