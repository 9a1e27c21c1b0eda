//! Fake/real head with confidence, entropy and a learned uncertainty scalar.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::nn::{Activation, Linear, Mlp};
use crate::params::{ParamBuilder, ParamStore};
use crate::tensor::{Real, Result, Tensor, TensorError};

/// Consistency scalars appended to the global representation:
/// `c_tv, c_ta, c_va, c_global, c_temp`.
pub const NUM_CONSISTENCY_INPUTS: usize = 5;

#[derive(Clone, Debug)]
pub struct Classifier {
    pub mlp: Mlp,
    pub unc: Linear,
    pub dropout: f32,
}

/// Graph nodes of one classifier evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierOut {
    /// `N x 2`, column 1 is "fake".
    pub log_probs: Var,
    /// `N x 1`.
    pub p_fake: Var,
    /// `N x 1`; computed on a detached copy of the input.
    pub u_hat: Var,
}

impl Classifier {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, h: usize, hidden: usize, dropout: f32) -> Self {
        let input = h + NUM_CONSISTENCY_INPUTS;
        let mlp = Mlp::new(pb, "classifier", "mlp", (input, hidden, 2), Activation::Gelu);
        // The consistency columns start disconnected; training decides their use.
        let w = pb.store.get_mut(mlp.hidden.w);
        for r in h..input {
            for c in 0..hidden {
                w.set(r, c, 0.0);
            }
        }
        let unc = Linear::zeros(pb, "classifier", "unc", input, 1);
        Self { mlp, unc, dropout }
    }

    /// `x` is the `N x (H + 5)` head input. Dropout applies only in training
    /// graphs and uses `seed`, so two calls with the same seed share a mask.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        seed: u64,
    ) -> Result<ClassifierOut> {
        let logits = self.mlp.forward_dropout(g, store, x, self.dropout, seed)?;
        let log_probs = g.log_softmax_rows(logits);
        let probs = g.exp(log_probs);
        let p_fake = g.slice_cols(probs, 1, 1)?;
        let xd = g.detach(x);
        let z = self.unc.forward(g, store, xd)?;
        let u_hat = g.sigmoid(z);
        Ok(ClassifierOut {
            log_probs,
            p_fake,
            u_hat,
        })
    }
}

/// `max(p, 1 - p)`.
pub fn confidence(p_fake: f64) -> f64 {
    p_fake.max(1.0 - p_fake)
}

/// Binary predictive entropy in nats; 0 at the endpoints.
pub fn entropy(p_fake: f64) -> f64 {
    let term = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    term(p_fake) + term(1.0 - p_fake)
}

/// `u_ent / ln 2 + u_hat`.
pub fn composite_uncertainty(u_ent: f64, u_hat: f64) -> f64 {
    u_ent / std::f64::consts::LN_2 + u_hat
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionOutput {
    pub p_fake: f64,
    pub conf: f64,
    pub u_ent: f64,
    pub u_hat: f64,
    pub u_comp: f64,
}

impl PredictionOutput {
    pub fn new(p_fake: f64, u_hat: f64) -> Self {
        let u_ent = entropy(p_fake);
        Self {
            p_fake,
            conf: confidence(p_fake),
            u_ent,
            u_hat,
            u_comp: composite_uncertainty(u_ent, u_hat),
        }
    }

    pub fn predicted_label(&self) -> u8 {
        u8::from(self.p_fake > 0.5)
    }
}

/// `|y - p|` per row, as a constant column.
pub fn error_margin<T: Real>(p_fake: &Tensor<T>, labels: &[u8]) -> Result<Tensor<T>> {
    if p_fake.cols() != 1 || p_fake.rows() != labels.len() {
        return Err(TensorError::Invalid(format!(
            "error margin: {:?} predictions, {} labels",
            p_fake.shape(),
            labels.len()
        )));
    }
    let m = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| (T::lit(y as f64) - p_fake.get(i, 0)).abs())
        .collect();
    Tensor::new(labels.len(), 1, m)
}

/// `mean((u_hat - target)^2)` against a fixed target column.
pub fn regress_to<T: Real>(g: &mut Graph<T>, u_hat: Var, target: Tensor<T>) -> Result<Var> {
    if g.shape(u_hat) != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "regress_to",
            left: g.shape(u_hat),
            right: target.shape(),
        });
    }
    let target = g.constant(target);
    let diff = g.sub(u_hat, target)?;
    let sq = g.square(diff);
    Ok(g.mean_all(sq))
}

/// `mean((u_hat - |y - p|)^2)` with the error margin treated as a constant.
pub fn uncertainty_target_loss<T: Real>(g: &mut Graph<T>, u_hat: Var, p_fake: Var, labels: &[u8]) -> Result<Var> {
    let margin = error_margin(g.value(p_fake), labels)?;
    regress_to(g, u_hat, margin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn entropy_examples() {
        assert!((entropy(0.5) - std::f64::consts::LN_2).abs() < 1e-12);
        let hand = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((entropy(0.9) - hand).abs() < 1e-12);
        assert!((entropy(0.9) - 0.3251).abs() < 1e-4);
        assert_eq!(entropy(0.0), 0.0);
        assert_eq!(composite_uncertainty(0.0, 0.0), 0.0);
        assert!((composite_uncertainty(std::f64::consts::LN_2, 1.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_head_is_uninformative() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clf = Classifier::new(
            &mut ParamBuilder {
                store: &mut store,
                rng: &mut rng,
            },
            4,
            8,
            0.3,
        );
        for t in store.tensors_mut() {
            *t = Tensor::zeros(t.rows(), t.cols());
        }
        let mut g: Graph = Graph::new();
        let x = g.input(Tensor::full(3, 9, 0.7));
        let out = clf.forward(&mut g, &store, x, 0).unwrap();
        for i in 0..3 {
            let pred = PredictionOutput::new(
                g.value(out.p_fake).get(i, 0) as f64,
                g.value(out.u_hat).get(i, 0) as f64,
            );
            assert_eq!(pred.p_fake, 0.5);
            assert_eq!(pred.conf, 0.5);
            assert!((pred.u_ent - std::f64::consts::LN_2).abs() < 1e-9);
        }
    }

    #[test]
    fn consistency_rows_start_at_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let clf = Classifier::new(
            &mut ParamBuilder {
                store: &mut store,
                rng: &mut rng,
            },
            4,
            8,
            0.3,
        );
        let w = store.get(clf.mlp.hidden.w);
        assert!((4..9).all(|r| (0..8).all(|c| w.get(r, c) == 0.0)));
        assert!((0..4).any(|r| (0..8).any(|c| w.get(r, c) != 0.0)));
    }

    #[test]
    fn uncertainty_loss_examples() {
        let mut g: Graph<f64> = Graph::new();
        let u = g.input(Tensor::scalar(0.0));
        let p = g.input(Tensor::scalar(0.25));
        let l = uncertainty_target_loss(&mut g, u, p, &[1]).unwrap();
        assert!((g.value(l).item() - 0.5625).abs() < 1e-12);
        let grads = g.backward(l).unwrap();
        // the error margin is a constant, so p receives nothing from this loss
        assert!(grads.wrt(p).is_none_or(|t| t.item() == 0.0));
        assert!((grads.wrt(u).unwrap().item() - (-1.5)).abs() < 1e-12);

        let mut g: Graph<f64> = Graph::new();
        let u = g.input(Tensor::scalar(0.75));
        let p = g.input(Tensor::scalar(0.25));
        let l = uncertainty_target_loss(&mut g, u, p, &[1]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }
}
