//! Central finite-difference verification of reverse-mode gradients.
//!
//! Both the analytic and the numeric side run in an `f64` graph. Every
//! trainable parameter bound by the loss function is checked on a
//! deterministic subsample of its coordinates.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    /// Coordinates checked per tensor; larger tensors are subsampled.
    pub max_coords: usize,
    /// Relative errors are taken against `max(|analytic|, |numeric|, abs_floor)`.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            tolerance: 1e-3,
            max_coords: 12,
            abs_floor: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub eps: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradReport {
    pub fn get(&self, name: &str) -> Option<&ParamCheck> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

fn evaluate<F>(store: &ParamStore, loss_fn: &F, name: &str, values: Vec<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    g.override_param(name, values);
    let loss = loss_fn(&mut g, store)?;
    scalar_loss(&g, loss)
}

fn scalar_loss(g: &Graph<f64>, loss: Var) -> Result<f64> {
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(Error::dim(
            "grad_check",
            format!("loss has shape {:?}", g.shape(loss)),
        ));
    }
    if !v[0].is_finite() {
        return Err(Error::NonFinite {
            op: "grad_check loss",
            index: 0,
        });
    }
    Ok(v[0])
}

/// Compares reverse-mode gradients of `loss_fn` with
/// `(f(θ + eps) − f(θ − eps)) / 2eps` for every trainable parameter it binds.
pub fn grad_check<F>(store: &ParamStore, cfg: &GradCheckConfig, loss_fn: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore) -> Result<Var>,
{
    if cfg.eps <= 0.0 || !cfg.eps.is_finite() {
        return Err(Error::Config(format!(
            "grad_check eps must be positive, got {}",
            cfg.eps
        )));
    }
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    scalar_loss(&g, loss)?;
    g.backward(loss)?;
    let analytic = g.param_grads();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = Vec::with_capacity(analytic.len());
    for (name, grad) in analytic {
        let base: Vec<f64> = store
            .get(&name)
            .expect("bound parameters exist in the store")
            .data()
            .iter()
            .map(|&v| v as f64)
            .collect();
        let coords: Vec<usize> = if base.len() <= cfg.max_coords {
            (0..base.len()).collect()
        } else {
            let mut c = sample(&mut rng, base.len(), cfg.max_coords - 1).into_vec();
            // Always include the steepest coordinate.
            let steepest = grad
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .map(|(i, _)| i)
                .unwrap_or(0);
            if !c.contains(&steepest) {
                c.push(steepest);
            }
            c.sort_unstable();
            c
        };
        let mut check = ParamCheck {
            name: name.clone(),
            coords: coords.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &coords {
            let mut plus = base.clone();
            plus[i] += cfg.eps;
            let mut minus = base.clone();
            minus[i] -= cfg.eps;
            let fp = evaluate(store, &loss_fn, &name, plus)?;
            let fm = evaluate(store, &loss_fn, &name, minus)?;
            let numeric = (fp - fm) / (2.0 * cfg.eps);
            let a = grad[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.abs_floor);
            if rel >= check.max_rel_err {
                check.max_rel_err = rel;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        params.push(check);
    }
    let max_rel_err = params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradReport {
        params,
        max_rel_err,
        eps: cfg.eps,
        tolerance: cfg.tolerance,
        pass: max_rel_err <= cfg.tolerance,
    })
}
