//! Cross-modal consistency: pairwise gates on pooled features, the global
//! consistency scalar, attention-derived consistency fields with their
//! alignment penalty, and the temporal audio-visual inconsistency score.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::nn::{Activation, Linear, Mlp};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Real, Result, Tensor, TensorError};

/// Modality pairs in score order: text-visual, text-audio, visual-audio.
pub const PAIRS: [(&str, &str); 3] = [("text", "visual"), ("text", "audio"), ("visual", "audio")];
pub const PAIR_NAMES: [&str; 3] = ["tv", "ta", "va"];

/// Row-sum tolerance for attention matrices handed to [`consistency_field`].
pub const STOCHASTIC_TOL: f64 = 1e-4;

/// Column-wise mean of an `L x d` sequence.
pub fn pool_modality<T: Real>(h: &Tensor<T>) -> Result<Tensor<T>> {
    h.mean_rows()
}

/// `sigmoid(w . [h_i; h_j] + b)` for single vectors.
pub fn pairwise_consistency(h_i: &[f32], h_j: &[f32], w: &[f32], b: f32) -> Result<f32> {
    if h_i.len() + h_j.len() != w.len() {
        return Err(TensorError::ShapeMismatch {
            op: "pairwise_consistency",
            left: [1, h_i.len() + h_j.len()],
            right: [1, w.len()],
        });
    }
    let z: f64 = h_i
        .iter()
        .chain(h_j)
        .zip(w)
        .map(|(&x, &k)| x as f64 * k as f64)
        .sum::<f64>()
        + b as f64;
    Ok(crate::tensor::sigmoid(z) as f32)
}

/// Row maxima of a row-stochastic attention matrix.
pub fn consistency_field<T: Real>(a: &Tensor<T>) -> Result<Vec<T>> {
    if a.cols() == 0 {
        return Err(TensorError::InvalidShape {
            op: "consistency_field",
            shape: a.shape(),
            reason: "no partner positions",
        });
    }
    let mut out = Vec::with_capacity(a.rows());
    for r in 0..a.rows() {
        let row = a.row_slice(r);
        let s: f64 = row.iter().map(|v| v.f64()).sum();
        if (s - 1.0).abs() > STOCHASTIC_TOL || row.iter().any(|v| v.f64() < 0.0) {
            return Err(TensorError::Invalid(format!(
                "consistency_field: row {r} is not stochastic (sum {s})"
            )));
        }
        out.push(row.iter().copied().fold(T::neg_infinity(), T::max));
    }
    Ok(out)
}

/// `sum_pairs (c_ij - mean F_ij)^2` for one sample.
pub fn field_alignment_loss(c: &[f64], fields: &[Vec<f64>]) -> Result<f64> {
    if c.len() != 3 || fields.len() != 3 {
        return Err(TensorError::Invalid(format!(
            "field_alignment_loss needs three pairs, got {} scores and {} fields",
            c.len(),
            fields.len()
        )));
    }
    let mut total = 0.0;
    for (ci, f) in c.iter().zip(fields) {
        if f.is_empty() {
            return Err(TensorError::Invalid("empty consistency field".into()));
        }
        let m = f.iter().sum::<f64>() / f.len() as f64;
        total += (ci - m).powi(2);
    }
    Ok(total)
}

/// `T' x T` matrix whose product with a `T x d` sequence linearly
/// interpolates it at `T'` evenly spaced fractional indices over `[0, T-1]`.
pub fn resample_matrix<T: Real>(t: usize, t_prime: usize) -> Result<Tensor<T>> {
    if t_prime < 2 {
        return Err(TensorError::InvalidShape {
            op: "temporal_resample",
            shape: [t_prime, t],
            reason: "target length must be at least 2",
        });
    }
    if t < 2 {
        return Err(TensorError::InvalidShape {
            op: "temporal_resample",
            shape: [t_prime, t],
            reason: "source needs at least two timesteps",
        });
    }
    let mut m = Tensor::zeros(t_prime, t);
    for i in 0..t_prime {
        let pos = i as f64 * (t - 1) as f64 / (t_prime - 1) as f64;
        let lo = (pos.floor() as usize).min(t - 2);
        let frac = pos - lo as f64;
        m.set(i, lo, T::lit(1.0 - frac));
        m.set(i, lo + 1, T::lit(frac));
    }
    Ok(m)
}

pub fn temporal_resample<T: Real>(h: &Tensor<T>, t_prime: usize) -> Result<Tensor<T>> {
    resample_matrix(h.rows(), t_prime)?.matmul(h)
}

/// Summary `[mean, population variance, max]` of a distance sequence.
pub fn distance_summary(d: &[f64]) -> [f64; 3] {
    let n = d.len().max(1) as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    [mean, var, max]
}

/// Stabilizer inside the square root of the per-step distance.
pub const DIST_EPS: f32 = 1e-8;

/// Pairwise gates and the global consistency MLP.
#[derive(Clone, Debug)]
pub struct Cmcg {
    pub pairs: [Linear; 3],
    pub global: Mlp,
}

impl Cmcg {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, d: usize, hidden: usize) -> Self {
        let pairs = [0, 1, 2].map(|i| Linear::new(pb, "cmcg", &format!("gate_{}", PAIR_NAMES[i]), 2 * d, 1));
        // Non-negative weights so that, before training, the global score
        // grows with each pairwise score.
        let w0 = Tensor::new(
            3,
            hidden,
            (0..3 * hidden)
                .map(|_| pb.rng.random_range(0.0..1.0f32) / (3.0f32).sqrt())
                .collect(),
        )
        .expect("shape");
        let w1 = Tensor::new(
            hidden,
            1,
            (0..hidden)
                .map(|_| pb.rng.random_range(0.0..1.0f32) / (hidden as f32).sqrt())
                .collect(),
        )
        .expect("shape");
        let hidden_layer = Linear::from_weights(pb, "cmcg", "global.0", w0, Tensor::zeros(1, hidden));
        let out = Linear::from_weights(pb, "cmcg", "global.1", w1, Tensor::zeros(1, 1));
        Self {
            pairs,
            global: Mlp {
                hidden: hidden_layer,
                out,
                act: Activation::Tanh,
            },
        }
    }

    /// Pairwise scores `N x 3` (columns tv, ta, va) from pooled `N x d`
    /// text, visual and audio features.
    pub fn pair_scores<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        text: Var,
        visual: Var,
        audio: Var,
    ) -> Result<Var> {
        let inputs = [(text, visual), (text, audio), (visual, audio)];
        let mut cols = Vec::with_capacity(3);
        for (gate, (a, b)) in self.pairs.iter().zip(inputs) {
            let x = g.concat_cols(&[a, b])?;
            let z = gate.forward(g, store, x)?;
            cols.push(g.sigmoid(z));
        }
        g.concat_cols(&cols)
    }

    /// Single pairwise score column `N x 1` for pair index `pair`.
    pub fn pair_score<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        pair: usize,
        a: Var,
        b: Var,
    ) -> Result<Var> {
        let x = g.concat_cols(&[a, b])?;
        let z = self.pairs[pair].forward(g, store, x)?;
        Ok(g.sigmoid(z))
    }

    /// `sigmoid(MLP_c(c))`, `N x 3 -> N x 1`.
    pub fn global_score<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, c: Var) -> Result<Var> {
        let z = self.global.forward(g, store, c)?;
        Ok(g.sigmoid(z))
    }
}

/// Temporal audio-visual inconsistency.
#[derive(Clone, Debug)]
pub struct Tcmi {
    pub proj_av: ParamId,
    pub mlp: Mlp,
    pub t_prime: usize,
}

impl Tcmi {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, d: usize, hidden: usize, t_prime: usize) -> Self {
        Self {
            proj_av: pb.tensor("tcmi", "proj_av", Tensor::identity(d)),
            mlp: Mlp::new(pb, "tcmi", "mlp", (3, hidden, 1), Activation::Tanh),
            t_prime,
        }
    }

    /// Per-step distances `T' x 1` between resampled visual and projected
    /// resampled audio of one sample.
    pub fn distances<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, visual: Var, audio: Var) -> Result<Var> {
        let k = g.shape(visual)[0];
        // a single visual frame is held constant over time
        let rv = if k == 1 {
            Tensor::full(self.t_prime, 1, T::one())
        } else {
            resample_matrix(k, self.t_prime)?
        };
        let rv = g.constant(rv);
        let ra = g.constant(resample_matrix(g.shape(audio)[0], self.t_prime)?);
        let v = g.matmul(rv, visual)?;
        let a = g.matmul(ra, audio)?;
        let p = g.param(store, self.proj_av);
        let pa = g.matmul(a, p)?;
        let diff = g.sub(v, pa)?;
        let sq = g.square(diff);
        let s = g.sum_cols(sq);
        let s = g.add_const(s, DIST_EPS);
        Ok(g.sqrt(s))
    }

    /// `[mean, population variance, max]` of a `T' x 1` distance column, as `1 x 3`.
    pub fn summary<T: Real>(&self, g: &mut Graph<T>, d: Var) -> Result<Var> {
        let mean = g.mean_rows(d)?;
        let n = g.shape(d)[0];
        let mb = g.broadcast(mean, n, 1)?;
        let centered = g.sub(d, mb)?;
        let sq = g.square(centered);
        let var = g.mean_rows(sq)?;
        let max = g.col_max(d)?;
        g.concat_cols(&[mean, var, max])
    }

    /// `1 - sigmoid(MLP_temp(s))` for stacked summaries `N x 3 -> N x 1`.
    pub fn score<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, s: Var) -> Result<Var> {
        let z = self.mlp.forward(g, store, s)?;
        let sig = g.sigmoid(z);
        let neg = g.scale(sig, -1.0);
        Ok(g.add_const(neg, 1.0))
    }
}

/// Per-sample consistency outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyBundle {
    pub c_tv: f32,
    pub c_ta: f32,
    pub c_va: f32,
    pub c_global: f32,
    pub c_temp: f32,
    /// Field vectors keyed `"<query>_from_<partner>"`, e.g. `text_from_visual`.
    pub fields: indexmap::IndexMap<String, Vec<f32>>,
}

impl ConsistencyBundle {
    pub fn pairs(&self) -> [f32; 3] {
        [self.c_tv, self.c_ta, self.c_va]
    }
}

/// Mean over fields `F = rowmax(A)` as a graph value `1 x 1`.
pub fn field_mean<T: Real>(g: &mut Graph<T>, attn: Var) -> Result<Var> {
    let f = g.row_max(attn)?;
    Ok(g.mean_all(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_examples() {
        let h: Tensor = Tensor::new(2, 2, vec![1.0, 1.0, 3.0, 3.0]).unwrap();
        assert_eq!(pool_modality(&h).unwrap().data(), &[2.0, 2.0]);
        let one: Tensor = Tensor::row(&[4.0, -1.0]);
        assert_eq!(pool_modality(&one).unwrap(), one);
        assert!(pool_modality(&Tensor::<f32>::zeros(0, 3)).is_err());
    }

    #[test]
    fn pairwise_examples() {
        let h = [0.3, -0.2];
        assert_eq!(pairwise_consistency(&h, &h, &[0.0; 4], 0.0).unwrap(), 0.5);
        let c = pairwise_consistency(&h, &h, &[0.0; 4], 10.0).unwrap();
        assert!((c - 0.999_954_6).abs() < 1e-6);
        assert!(pairwise_consistency(&h, &h, &[0.0; 3], 0.0).is_err());
    }

    #[test]
    fn field_examples() {
        let a: Tensor = Tensor::row(&[0.1, 0.7, 0.2]);
        assert_eq!(consistency_field(&a).unwrap(), vec![0.7]);
        let u: Tensor = Tensor::row(&[0.25; 4]);
        assert_eq!(consistency_field(&u).unwrap(), vec![0.25]);
        let bad: Tensor = Tensor::row(&[0.5, 0.6]);
        assert!(consistency_field(&bad).is_err());
    }

    #[test]
    fn alignment_loss_examples() {
        let f = vec![vec![0.25, 0.75], vec![0.125], vec![0.0, 0.5, 1.0]];
        assert_eq!(field_alignment_loss(&[0.5, 0.125, 0.5], &f).unwrap(), 0.0);
        let zeros = vec![vec![0.0], vec![0.0], vec![0.0]];
        assert_eq!(field_alignment_loss(&[1.0, 1.0, 1.0], &zeros).unwrap(), 3.0);
        assert!(field_alignment_loss(&[1.0, 1.0], &zeros[..2]).is_err());
    }

    #[test]
    fn resample_examples() {
        let h: Tensor<f64> = Tensor::new(2, 1, vec![0.0, 2.0]).unwrap();
        assert_eq!(temporal_resample(&h, 3).unwrap().data(), &[0.0, 1.0, 2.0]);
        let x: Tensor<f64> = Tensor::new(5, 2, (0..10).map(|i| (i * i) as f64).collect()).unwrap();
        let same = temporal_resample(&x, 5).unwrap();
        assert!(same.max_abs_diff(&x) < 1e-12);
        assert!(temporal_resample(&x, 1).is_err());
    }

    #[test]
    fn summary_uses_population_variance() {
        assert_eq!(distance_summary(&[1.0, 3.0]), [2.0, 1.0, 3.0]);
    }
}
