//! Central finite-difference checks against [`Graph::backward`].
//!
//! Checks run in `f64`: at a step of 1e-3, `f32` rounding alone moves the
//! difference quotient by around 1e-4, which would swamp a 1e-3 relative
//! tolerance on small gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Fault, Graph, Var};
use crate::params::ParamStore;
use crate::tensor::{Result, Tensor};

pub const DEFAULT_EPS: f64 = 1e-3;
pub const DEFAULT_TOL: f64 = 1e-3;

/// Denominator floor for the relative error, so gradients that are
/// exactly zero analytically are compared on an absolute scale.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(tensor index, element index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl CheckReport {
    fn new() -> Self {
        Self {
            max_rel_err: 0.0,
            checked: 0,
            worst: None,
        }
    }

    fn record(&mut self, t: usize, i: usize, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        let err = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if err > self.max_rel_err || !err.is_finite() {
            self.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
            self.worst = Some((t, i, analytic, numeric));
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Fixed weights that reduce an output tensor to a scalar. A `1 x 1`
/// output keeps weight 1 so scalar losses are checked as they are.
pub fn projection_weights(rows: usize, cols: usize) -> Tensor<f64> {
    if rows * cols == 1 {
        return Tensor::scalar(1.0);
    }
    let w = (0..rows * cols)
        .map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0)
        .collect();
    Tensor::new(rows, cols, w).expect("shape")
}

fn project_graph(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let [r, c] = g.shape(y);
    if r * c == 1 {
        return Ok(y);
    }
    let w = g.constant(projection_weights(r, c));
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

fn project_value(y: &Tensor<f64>) -> f64 {
    let w = projection_weights(y.rows(), y.cols());
    y.data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum()
}

fn new_graph(train_seed: Option<u64>, fault: Option<Fault>) -> Graph<f64> {
    let g = match train_seed {
        Some(s) => Graph::training_seeded(s),
        None => Graph::new(),
    };
    match fault {
        Some(f) => g.with_fault(f),
        None => g,
    }
}

/// Checks gradients of `f` with respect to every entry of `inputs`.
/// Non-scalar outputs are reduced with [`projection_weights`].
pub fn check_inputs<F>(inputs: &[Tensor<f64>], eps: f64, fault: Option<Fault>, f: F) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = new_graph(None, fault);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    let loss = project_graph(&mut g, y)?;
    let grads = g.backward(loss)?;
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let y = f(&mut g, &vars)?;
        Ok(project_value(g.value(y)))
    };
    let mut report = CheckReport::new();
    let mut xs = inputs.to_vec();
    for (ti, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[ti].rows(), inputs[ti].cols()));
        for i in 0..inputs[ti].len() {
            let x0 = inputs[ti].data()[i];
            xs[ti].data_mut()[i] = x0 + eps;
            let up = eval(&xs)?;
            xs[ti].data_mut()[i] = x0 - eps;
            let down = eval(&xs)?;
            xs[ti].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * eps);
            report.record(ti, i, analytic.data()[i], numeric);
        }
    }
    Ok(report)
}

/// Checks parameter gradients of `f`. At most `per_tensor` entries of each
/// parameter tensor are probed (chosen with `seed`); dropout masks are
/// replayed from `train_seed` when given.
pub fn check_params<F>(
    store: &ParamStore<f64>,
    eps: f64,
    per_tensor: usize,
    seed: u64,
    train_seed: Option<u64>,
    fault: Option<Fault>,
    f: F,
) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = new_graph(train_seed, fault);
    let y = f(&mut g, store)?;
    let loss = project_graph(&mut g, y)?;
    let grads = g.backward(loss)?.for_store(store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = store.clone();
    let mut report = CheckReport::new();
    let ids: Vec<_> = store.ids().collect();
    for (ti, id) in ids.into_iter().enumerate() {
        let n = store.get(id).len();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        for i in picks {
            let x0 = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = x0 + eps;
            let mut g = new_graph(train_seed, None);
            let y = f(&mut g, &probe)?;
            let up = project_value(g.value(y));
            probe.get_mut(id).data_mut()[i] = x0 - eps;
            let mut g = new_graph(train_seed, None);
            let y = f(&mut g, &probe)?;
            let down = project_value(g.value(y));
            probe.get_mut(id).data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * eps);
            report.record(ti, i, grads[ti].data()[i], numeric);
        }
    }
    Ok(report)
}
