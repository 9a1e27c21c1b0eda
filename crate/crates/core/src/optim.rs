//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use crate::params::ParamStore;
use crate::tensor::{Tensor, TensorError};

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f32) -> Self {
        let zeros = || store.tensors().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`; `grads` is aligned with `store.ids()`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f32) -> Result<(), TensorError> {
        if grads.len() != self.m.len() {
            return Err(TensorError::Invalid(format!(
                "expected {} gradients, got {}",
                self.m.len(),
                grads.len()
            )));
        }
        self.step += 1;
        for (i, p) in store.tensors_mut().enumerate() {
            adamw_update(
                p,
                &grads[i],
                &mut self.m[i],
                &mut self.v[i],
                lr,
                (self.beta1, self.beta2),
                self.eps,
                self.weight_decay,
                self.step,
            )?;
        }
        Ok(())
    }
}

/// Single-tensor AdamW update at 1-based `step`, in place.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    lr: f32,
    betas: (f32, f32),
    eps: f32,
    weight_decay: f32,
    step: u64,
) -> Result<(), TensorError> {
    // Zero is allowed: the warmup schedule starts there.
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(TensorError::Invalid(format!(
            "learning rate must be non-negative, got {lr}"
        )));
    }
    if step == 0 {
        return Err(TensorError::Invalid("AdamW step counter is 1-based".into()));
    }
    for other in [grad, &*m, &*v] {
        if other.shape() != param.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw",
                left: param.shape(),
                right: other.shape(),
            });
        }
    }
    let (b1, b2) = betas;
    let bc1 = 1.0 - (b1 as f64).powi(step as i32);
    let bc2 = 1.0 - (b2 as f64).powi(step as i32);
    let md = m.data_mut();
    let vd = v.data_mut();
    for (i, (w, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
        md[i] = b1 * md[i] + (1.0 - b1) * g;
        vd[i] = b2 * vd[i] + (1.0 - b2) * g * g;
        let m_hat = md[i] as f64 / bc1;
        let v_hat = vd[i] as f64 / bc2;
        let upd = m_hat / (v_hat.sqrt() + eps as f64) + weight_decay as f64 * *w as f64;
        *w = (*w as f64 - lr as f64 * upd) as f32;
    }
    Ok(())
}

/// The public optimizer entry point with a strictly positive learning rate.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    lr: f32,
    betas: (f32, f32),
    weight_decay: f32,
    step: u64,
) -> Result<(), TensorError> {
    if !(lr > 0.0) {
        return Err(TensorError::Invalid(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    adamw_update(param, grad, m, v, lr, betas, 1e-8, weight_decay, step)
}

/// Linear warmup from 0 to `peak`, then cosine decay to 0 at `total_steps`.
#[derive(Clone, Copy, Debug)]
pub struct WarmupCosine {
    pub peak: f32,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl WarmupCosine {
    pub fn new(peak: f32, total_steps: usize, warmup_ratio: f32) -> Self {
        let warmup_steps = ((total_steps as f64) * warmup_ratio as f64).round() as usize;
        Self {
            peak,
            warmup_steps: warmup_steps.min(total_steps),
            total_steps,
        }
    }

    /// Learning rate for the 0-based `step`.
    pub fn lr(&self, step: usize) -> f32 {
        if step < self.warmup_steps {
            return self.peak * step as f32 / self.warmup_steps as f32;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        (0.5 * self.peak as f64 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f32) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn zero_grad_no_decay_leaves_params() {
        let mut w = Tensor::row(&[1.0, -2.0, 3.5]);
        let g = Tensor::zeros(1, 3);
        let (mut m, mut v) = (Tensor::zeros(1, 3), Tensor::zeros(1, 3));
        let before = w.clone();
        for step in 1..=5 {
            adamw_step(&mut w, &g, &mut m, &mut v, 1e-2, (0.9, 0.999), 0.0, step).unwrap();
        }
        assert_eq!(w, before);
    }

    #[test]
    fn one_step_on_square_descends() {
        let mut w = one(1.0);
        let (mut m, mut v) = (one(0.0), one(0.0));
        adamw_step(&mut w, &one(2.0), &mut m, &mut v, 0.1, (0.9, 0.999), 0.0, 1).unwrap();
        assert!(w.item() < 1.0);
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let mut w = one(0.0);
        let (mut m, mut v) = (one(0.0), one(0.0));
        for step in 1..=200 {
            let g = one(2.0 * (w.item() - 3.0));
            adamw_step(&mut w, &g, &mut m, &mut v, 0.1, (0.9, 0.999), 0.0, step).unwrap();
        }
        assert!((w.item() - 3.0).abs() < 0.05, "w = {}", w.item());
    }

    #[test]
    fn nonpositive_lr_rejected() {
        let mut w = one(1.0);
        let (mut m, mut v) = (one(0.0), one(0.0));
        assert!(adamw_step(&mut w, &one(1.0), &mut m, &mut v, 0.0, (0.9, 0.999), 0.0, 1).is_err());
        assert!(adamw_step(&mut w, &one(1.0), &mut m, &mut v, -1e-3, (0.9, 0.999), 0.0, 1).is_err());
    }

    #[test]
    fn decoupled_decay_shrinks_weights_without_gradient() {
        let mut w = one(2.0);
        let (mut m, mut v) = (one(0.0), one(0.0));
        adamw_step(&mut w, &one(0.0), &mut m, &mut v, 0.1, (0.9, 0.999), 0.5, 1).unwrap();
        assert!((w.item() - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-6);
    }

    #[test]
    fn schedule_endpoints() {
        let s = WarmupCosine::new(5e-5, 1000, 0.1);
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(100) - 5e-5).abs() < 1e-12);
        assert!(s.lr(999) < 1e-9);
        assert_eq!(s.lr(1000), 0.0);
        assert!(s.lr(50) > 0.0 && s.lr(50) < 5e-5);
    }
}
