//! The joint training objective and the training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::classification_metrics;
use crate::classifier::{error_margin, regress_to};
use crate::consistency::field_mean;
use crate::features::FeatureRecord;
use crate::fusion::PAIR_DIRECTION;
use crate::graph::{splitmix64, Graph, Var};
use crate::model::{Ablation, BatchOut, Detector};
use crate::optim::{AdamW, WarmupCosine};
use crate::params::ParamStore;
use crate::tensor::{Real, Result, Tensor, TensorError};

/// Row normalization floor for cosine similarity.
const COS_EPS: f32 = 1e-12;
/// Added to self-similarity logits so a view never counts as its own candidate.
const SELF_MASK: f64 = -1e9;

pub const COMPONENTS: [&str; 8] = ["ce", "intra", "cross", "adv", "sem", "style", "reg", "unc"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub intra: f64,
    pub cross: f64,
    pub adv: f64,
    pub sem: f64,
    pub style: f64,
    pub reg: f64,
    pub unc: f64,
    /// InfoNCE temperature.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            intra: 0.1,
            cross: 0.1,
            adv: 0.5,
            sem: 0.1,
            style: 0.1,
            reg: 0.05,
            unc: 0.1,
            tau: 0.1,
        }
    }
}

impl LossWeights {
    /// Weight per entry of [`COMPONENTS`]; cross-entropy is always 1.
    pub fn as_array(&self) -> [f64; 8] {
        [
            1.0, self.intra, self.cross, self.adv, self.sem, self.style, self.reg, self.unc,
        ]
    }

    pub fn all_zero() -> Self {
        Self {
            intra: 0.0,
            cross: 0.0,
            adv: 0.0,
            sem: 0.0,
            style: 0.0,
            reg: 0.0,
            unc: 0.0,
            tau: 0.1,
        }
    }

    /// Copy with the named component's weight set to zero.
    pub fn without(&self, component: &str) -> Option<Self> {
        let mut w = self.clone();
        match component {
            "intra" => w.intra = 0.0,
            "cross" => w.cross = 0.0,
            "adv" => w.adv = 0.0,
            "sem" => w.sem = 0.0,
            "style" => w.style = 0.0,
            "reg" => w.reg = 0.0,
            "unc" => w.unc = 0.0,
            _ => return None,
        }
        Some(w)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.as_array().iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err("loss weights must be finite and nonnegative".into());
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(format!("temperature {} must be positive", self.tau));
        }
        Ok(())
    }
}

/// Weighted sum of component values, in [`COMPONENTS`] order.
pub fn total_loss_value(parts: &[f64; 8], weights: &LossWeights) -> f64 {
    parts.iter().zip(weights.as_array()).map(|(p, w)| p * w).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch: usize,
    pub epochs: usize,
    pub warmup_ratio: f32,
    pub seed: u64,
    /// Perturbation scale relative to the RMS of the classifier input.
    pub noise_scale: f64,
    pub patience: usize,
    pub weight_decay: f32,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            batch: 32,
            epochs: 50,
            warmup_ratio: 0.1,
            seed: 7,
            noise_scale: 0.01,
            patience: 10,
            weight_decay: 0.01,
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(format!("learning rate {} must be positive", self.lr));
        }
        if self.batch < 2 {
            return Err("batch size must be at least 2 for contrastive terms".into());
        }
        if self.epochs == 0 {
            return Err("epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(format!("warmup ratio {} must lie in [0,1)", self.warmup_ratio));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err("noise scale must be nonnegative".into());
        }
        if self.patience == 0 {
            return Err("patience must be positive".into());
        }
        Ok(())
    }
}

/// `-mean_i log softmax_j(cos(u_i, v_j) / tau)[i]`.
pub fn infonce<T: Real>(g: &mut Graph<T>, u: Var, v: Var, tau: f64) -> Result<Var> {
    let [n, _] = g.shape(u);
    if g.shape(v)[0] != n {
        return Err(TensorError::ShapeMismatch {
            op: "infonce",
            left: g.shape(u),
            right: g.shape(v),
        });
    }
    if n < 2 {
        return Err(TensorError::Invalid("InfoNCE needs at least two pairs".into()));
    }
    let un = g.l2_normalize_rows(u, COS_EPS);
    let vn = g.l2_normalize_rows(v, COS_EPS);
    let s = g.matmul_nt(un, vn)?;
    let s = g.scale(s, (1.0 / tau) as f32);
    let ls = g.log_softmax_rows(s);
    let eye = g.constant(Tensor::identity(n));
    let diag = g.mul(ls, eye)?;
    let total = g.sum_all(diag);
    Ok(g.scale(total, -1.0 / n as f32))
}

/// Contrastive loss over `views` (each `N x H`, one per text view): views of
/// the same sample are positives, views of other samples negatives.
pub fn style_infonce<T: Real>(g: &mut Graph<T>, views: &[Var], tau: f64) -> Result<Var> {
    if views.len() < 2 {
        return Err(TensorError::Invalid("style loss needs at least two views".into()));
    }
    let n = g.shape(views[0])[0];
    if n < 2 {
        return Err(TensorError::Invalid("style loss needs at least two samples".into()));
    }
    let k = views.len();
    let m = n * k;
    let z = g.concat_rows(views)?;
    let zn = g.l2_normalize_rows(z, COS_EPS);
    let s = g.matmul_nt(zn, zn)?;
    let s = g.scale(s, (1.0 / tau) as f32);
    let mut mask = Tensor::zeros(m, m);
    let mut pos = Tensor::zeros(m, m);
    let w = T::lit(1.0 / ((k - 1) * m) as f64);
    for a in 0..m {
        mask.set(a, a, T::lit(SELF_MASK));
        for b in 0..m {
            if a != b && a % n == b % n {
                pos.set(a, b, w);
            }
        }
    }
    let mask = g.constant(mask);
    let s = g.add(s, mask)?;
    let ls = g.log_softmax_rows(s);
    let pos = g.constant(pos);
    let picked = g.mul(ls, pos)?;
    let total = g.sum_all(picked);
    Ok(g.scale(total, -1.0))
}

/// `mean_i KL(p_i || q_i)` from log-probability rows.
pub fn mean_kl<T: Real>(g: &mut Graph<T>, log_p: Var, log_q: Var) -> Result<Var> {
    let kl = g.kl_div_rows(log_p, log_q)?;
    Ok(g.mean_all(kl))
}

/// `sum_pairs mean_i (c_ij - mean F_ij)^2` where `F` are the attention fields
/// of the matching direction.
pub fn field_regularizer<T: Real>(g: &mut Graph<T>, c_pairs: Var, attn: &[Vec<Var>]) -> Result<Var> {
    let mut rows = Vec::with_capacity(attn.len());
    for a in attn {
        let mut cols = Vec::with_capacity(3);
        for &dir in &PAIR_DIRECTION {
            cols.push(field_mean(g, a[dir])?);
        }
        rows.push(g.concat_cols(&cols)?);
    }
    let f = g.concat_rows(&rows)?;
    let d = g.sub(c_pairs, f)?;
    let sq = g.square(d);
    let s = g.sum_all(sq);
    Ok(g.scale(s, 1.0 / attn.len() as f32))
}

/// Gaussian perturbation with standard deviation `scale * RMS(x)`.
pub fn perturbation<T: Real>(x: &Tensor<T>, scale: f64, seed: u64) -> Tensor<T> {
    let rms = (x.data().iter().map(|v| v.f64().powi(2)).sum::<f64>() / x.len().max(1) as f64).sqrt();
    let std = scale * rms;
    if std == 0.0 {
        return Tensor::zeros(x.rows(), x.cols());
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..x.len()).map(|_| T::lit(dist.sample(&mut rng))).collect();
    Tensor::new(x.rows(), x.cols(), data).expect("shape")
}

/// Quantities the objective treats as constants: the sampled perturbation
/// and the error-margin target. Fixing them lets finite differences see the
/// same function the analytic gradient describes.
#[derive(Clone, Debug)]
pub struct LossConstants<T: Real> {
    pub delta: Tensor<T>,
    pub margin: Tensor<T>,
}

/// Loss components of one batch as graph nodes, in [`COMPONENTS`] order.
pub struct BatchLosses<T: Real> {
    pub out: BatchOut,
    pub parts: [Var; 8],
    pub total: Var,
    pub constants: LossConstants<T>,
}

/// Forward pass plus every loss term. Components with zero weight are still
/// evaluated so their values can be logged. `constants` overrides the
/// perturbation and margin drawn from this pass.
#[allow(clippy::too_many_arguments)]
pub fn batch_losses<T: Real>(
    det: &Detector,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    records: &[&FeatureRecord],
    weights: &LossWeights,
    noise_scale: f64,
    noise_seed: u64,
    ablation: Ablation,
    constants: Option<&LossConstants<T>>,
) -> Result<BatchLosses<T>> {
    let out = det.forward_batch(g, store, records, ablation)?;
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let targets: Vec<f32> = labels.iter().map(|&y| y as f32).collect();
    let tau = weights.tau;

    let ce = g.binary_cross_entropy(out.head.p_fake, &targets)?;

    let l_vis = infonce(g, out.h_fuse, out.pooled[1], tau)?;
    let l_aud = infonce(g, out.h_fuse, out.pooled[2], tau)?;
    let mut intra = g.add(l_vis, l_aud)?;
    let style = if let Some(f) = &out.fusion {
        let mut rew = None;
        for &p in &f.projected {
            let l = infonce(g, out.h_orig, p, tau)?;
            rew = Some(match rew {
                None => l,
                Some(acc) => g.add(acc, l)?,
            });
        }
        let rew = g.scale(rew.expect("at least one view"), 1.0 / f.projected.len() as f32);
        intra = g.add(intra, rew)?;
        let mut views = vec![out.h_orig];
        views.extend_from_slice(&f.projected);
        style_infonce(g, &views, tau)?
    } else {
        // without fusion the rewrites never enter the model
        g.constant(Tensor::scalar(T::zero()))
    };

    let cross = infonce(g, out.h_fuse, out.h_global, tau)?;

    let constants = match constants {
        Some(c) => c.clone(),
        None => LossConstants {
            delta: perturbation(g.value(out.head_input), noise_scale, noise_seed),
            margin: error_margin(g.value(out.head.p_fake), &labels)?,
        },
    };
    let delta = g.constant(constants.delta.clone());
    let xp = g.add(out.head_input, delta)?;
    let noisy = det.classifier.forward(g, store, xp, out.head_seed)?;
    let adv = mean_kl(g, out.head.log_probs, noisy.log_probs)?;

    let orig = det.head_with_original_text(g, store, &out, ablation)?;
    let sem = mean_kl(g, orig.log_probs, out.head.log_probs)?;

    let reg = field_regularizer(g, out.c_pairs, &out.attn)?;
    let unc = regress_to(g, out.head.u_hat, constants.margin.clone())?;

    let parts = [ce, intra, cross, adv, sem, style, reg, unc];
    let mut total = ce;
    for (&p, w) in parts.iter().zip(weights.as_array()).skip(1) {
        if w != 0.0 {
            let t = g.scale(p, w as f32);
            total = g.add(total, t)?;
        }
    }
    Ok(BatchLosses {
        out,
        parts,
        total,
        constants,
    })
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Invalid(String),
    #[error("non-finite {component} loss at epoch {epoch}, step {step}")]
    NonFinite {
        component: &'static str,
        epoch: usize,
        step: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-batch value of each component, keyed as in [`COMPONENTS`].
    pub losses: indexmap::IndexMap<String, f64>,
    pub total: f64,
    pub lr: f32,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Model restored to the best validation macro-F1 epoch.
    pub detector: Detector,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
}

/// Shuffled batches for one epoch; a trailing singleton joins the previous batch.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ (epoch as u64).wrapping_mul(0xA24B_AED4_963E_E407)));
    idx.shuffle(&mut rng);
    let mut out: Vec<Vec<usize>> = idx.chunks(batch).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(last);
    }
    out
}

/// Probability of "fake" for each record under the current parameters.
pub fn predict_p_fake(det: &Detector, records: &[FeatureRecord], ablation: Ablation) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    let refs: Vec<&FeatureRecord> = records.iter().collect();
    let chunks: Vec<Result<Vec<f64>>> = refs
        .par_chunks(64)
        .map(|c| {
            let mut g: Graph = Graph::new();
            let out = det.forward_batch(&mut g, &det.store, c, ablation)?;
            Ok(g.value(out.head.p_fake).data().iter().map(|&p| p as f64).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(records.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

pub fn train(
    mut det: Detector,
    train_set: &[FeatureRecord],
    val_set: &[FeatureRecord],
    cfg: &TrainConfig,
    weights: &LossWeights,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> std::result::Result<TrainOutcome, TrainError> {
    cfg.validate().map_err(TrainError::Invalid)?;
    weights.validate().map_err(TrainError::Invalid)?;
    if train_set.len() < 2 || val_set.is_empty() {
        return Err(TrainError::Invalid(format!(
            "need at least 2 training and 1 validation record, got {} and {}",
            train_set.len(),
            val_set.len()
        )));
    }
    let batches_per_epoch = epoch_batches(train_set.len(), cfg.batch, cfg.seed, 0).len();
    let sched = WarmupCosine::new(cfg.lr, batches_per_epoch * cfg.epochs, cfg.warmup_ratio);
    let mut opt = AdamW::new(&det.store, cfg.weight_decay);
    let val_labels: Vec<u8> = val_set.iter().map(|r| r.label).collect();

    let mut history = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize, det.store.clone());
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut sums = [0.0f64; 8];
        let mut total_sum = 0.0;
        let batches = epoch_batches(train_set.len(), cfg.batch, cfg.seed, epoch);
        let mut lr = 0.0;
        for batch in &batches {
            let recs: Vec<&FeatureRecord> = batch.iter().map(|&i| &train_set[i]).collect();
            let batch_seed = splitmix64(cfg.seed ^ (step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut g: Graph = Graph::training_seeded(batch_seed);
            let losses = batch_losses(
                &det,
                &mut g,
                &det.store,
                &recs,
                weights,
                cfg.noise_scale,
                splitmix64(batch_seed ^ 0xADD),
                cfg.ablation,
                None,
            )?;
            for (k, &p) in losses.parts.iter().enumerate() {
                let v = g.value(p).item() as f64;
                if !v.is_finite() {
                    return Err(TrainError::NonFinite {
                        component: COMPONENTS[k],
                        epoch,
                        step,
                    });
                }
                sums[k] += v;
            }
            let total = g.value(losses.total).item() as f64;
            if !total.is_finite() {
                return Err(TrainError::NonFinite {
                    component: "total",
                    epoch,
                    step,
                });
            }
            total_sum += total;
            let grads = g.backward(losses.total)?.for_store(&det.store);
            lr = sched.lr(step);
            opt.step(&mut det.store, &grads, lr)?;
            step += 1;
        }
        let nb = batches.len() as f64;
        let p = predict_p_fake(&det, val_set, cfg.ablation)?;
        if let Some(i) = p.iter().position(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite {
                component: "validation prediction",
                epoch,
                step: i,
            });
        }
        let preds: Vec<u8> = p.iter().map(|&v| u8::from(v > 0.5)).collect();
        let m = classification_metrics(&preds, &val_labels).map_err(|e| TrainError::Invalid(e.to_string()))?;
        let rec = EpochRecord {
            epoch,
            losses: COMPONENTS
                .iter()
                .zip(sums)
                .map(|(k, s)| (k.to_string(), s / nb))
                .collect(),
            total: total_sum / nb,
            lr,
            val_accuracy: m.accuracy,
            val_macro_f1: m.macro_f1,
        };
        on_epoch(&rec);
        history.push(rec);
        if m.macro_f1 > best.0 {
            best = (m.macro_f1, epoch, det.store.clone());
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }
    det.store = best.2;
    Ok(TrainOutcome {
        detector: det,
        history,
        best_epoch: best.1,
        best_val_macro_f1: best.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_loss_examples() {
        let ones = [1.0; 8];
        assert!((total_loss_value(&ones, &LossWeights::default()) - 2.05).abs() < 1e-12);
        let parts = [0.7, 3.0, 2.0, 1.0, 4.0, 5.0, 6.0, 7.0];
        assert_eq!(total_loss_value(&parts, &LossWeights::all_zero()), 0.7);
    }

    #[test]
    fn infonce_examples() {
        let mut g: Graph<f64> = Graph::new();
        let u = g.input(Tensor::full(4, 3, 0.5));
        let l = infonce(&mut g, u, u, 0.1).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-6);

        let mut g: Graph<f64> = Graph::new();
        let u = g.input(Tensor::identity(2));
        let l = infonce(&mut g, u, u, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((g.value(l).item() + (e / (e + 1.0)).ln()).abs() < 1e-9);

        let mut g: Graph<f64> = Graph::new();
        let u = g.input(Tensor::full(1, 3, 0.5));
        assert!(infonce(&mut g, u, u, 0.1).is_err());
    }

    #[test]
    fn style_loss_examples() {
        // two samples, two identical views each, samples orthogonal
        let mut g: Graph<f64> = Graph::new();
        let v = g.input(Tensor::identity(2));
        let l = style_infonce(&mut g, &[v, v], 1.0).unwrap();
        let e = std::f64::consts::E;
        let expected = (e + 2.0).ln() - 1.0;
        assert!((g.value(l).item() - expected).abs() < 1e-9);
        assert!(g.value(l).item() < 3f64.ln());

        let mut g: Graph<f64> = Graph::new();
        let v = g.input(Tensor::full(1, 2, 1.0));
        assert!(style_infonce(&mut g, &[v, v], 1.0).is_err());
    }

    #[test]
    fn kl_examples() {
        let lp = |p: f64| Tensor::row(&[(1.0 - p).ln(), p.ln()]);
        let mut g: Graph<f64> = Graph::new();
        let a = g.input(lp(0.9));
        let b = g.input(lp(0.5));
        let ab = mean_kl(&mut g, a, b).unwrap();
        let ba = mean_kl(&mut g, b, a).unwrap();
        let hand = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((g.value(ab).item() - hand).abs() < 1e-12);
        assert!((g.value(ab).item() - 0.3681).abs() < 1e-4);
        assert!((g.value(ab).item() - g.value(ba).item()).abs() > 1e-3);
        let aa = mean_kl(&mut g, a, a).unwrap();
        assert_eq!(g.value(aa).item(), 0.0);
    }

    #[test]
    fn zero_noise_scale_gives_no_perturbation() {
        let x: Tensor = Tensor::full(2, 3, 1.5);
        assert_eq!(perturbation(&x, 0.0, 9), Tensor::zeros(2, 3));
        let p = perturbation(&x, 0.01, 9);
        assert_eq!(p, perturbation(&x, 0.01, 9));
        assert!(p.data().iter().all(|v| v.abs() < 0.1));
    }

    #[test]
    fn batches_cover_every_index_once() {
        let b = epoch_batches(65, 32, 3, 1);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![32, 33]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..65).collect::<Vec<_>>());
        assert_eq!(b, epoch_batches(65, 32, 3, 1));
        assert_ne!(b, epoch_batches(65, 32, 3, 2));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            batch: 1,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(LossWeights {
            tau: 0.0,
            ..LossWeights::default()
        }
        .validate()
        .is_err());
        assert_eq!(LossWeights::default().without("adv").unwrap().adv, 0.0);
        assert!(LossWeights::default().without("ce").is_none());
    }
}
