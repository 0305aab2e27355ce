//! Finite-state mean-field-game problem definitions.
//!
//! A model supplies the costs `f`, `F`, `g`, the Hamiltonian
//! `H(x, eta, p) = min_a { f(x, a) + sum_{y != x} a_y p_y }` and the rate
//! selector attaining that minimum. Here `p` is always a difference vector
//! `delta(u, x)` with `p[x] = 0`. Both the Hamiltonian and the selector may
//! depend on the population `eta` (the cybersecurity model's infection rates
//! do); the quadratic model ignores it.
//!
//! Trainers differentiate through `H` and the selector, so each model also
//! reports their derivatives.

mod cyber;
mod quadratic;
mod zero;

pub use cyber::{CyberModel, CyberParams, CyberState, SwitchRule};
pub use quadratic::QuadraticModel;
pub use zero::ZeroCostModel;

use std::sync::Arc;

use crate::config::KeyValues;
use crate::error::{Error, Result};

/// Sup norms of the running, mean-field and terminal costs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostSupNorms {
    pub running: f64,
    pub mean_field: f64,
    pub terminal: f64,
}

pub trait MeanFieldModel: Send + Sync {
    fn name(&self) -> &str;

    fn num_states(&self) -> usize;

    fn horizon(&self) -> f64;

    /// Bounds `(a_low, a_high)` on every off-diagonal transition rate.
    fn rate_bounds(&self) -> (f64, f64);

    /// Running cost `f(x, ·)` at the full rate row `rates` (diagonal ignored).
    fn running_cost(&self, x: usize, eta: &[f64], rates: &[f64]) -> f64;

    fn mean_field_cost(&self, x: usize, eta: &[f64]) -> f64;

    fn mean_field_cost_grad(&self, x: usize, eta: &[f64], out: &mut [f64]);

    fn terminal_cost(&self, x: usize, eta: &[f64]) -> f64;

    fn terminal_cost_grad(&self, x: usize, eta: &[f64], out: &mut [f64]);

    fn hamiltonian(&self, x: usize, eta: &[f64], p: &[f64]) -> f64;

    /// Partial derivatives of [`MeanFieldModel::hamiltonian`] in `eta` and
    /// `p`. Implementations overwrite both outputs.
    fn hamiltonian_grad(&self, x: usize, eta: &[f64], p: &[f64], d_eta: &mut [f64], d_p: &mut [f64]);

    /// Optimal rate row `gamma*(x, p)`; `out[x]` balances the row to zero.
    fn rate_selector(&self, x: usize, eta: &[f64], p: &[f64], out: &mut [f64]);

    /// Row-major `d x d` Jacobians of the selector row: `d_eta[y * d + j]` is
    /// `d gamma_y / d eta_j`, likewise for `d_p`.
    fn rate_selector_jacobian(&self, x: usize, eta: &[f64], p: &[f64], d_eta: &mut [f64], d_p: &mut [f64]);

    fn sup_norms(&self) -> CostSupNorms;

    /// A smoothed stand-in used while training, if the exact selector is
    /// discontinuous.
    fn training_surrogate(&self) -> Option<Arc<dyn MeanFieldModel>> {
        None
    }

    /// `H(x, eta, p) + F(x, eta)`.
    fn hamiltonian_bar(&self, x: usize, eta: &[f64], p: &[f64]) -> f64 {
        self.hamiltonian(x, eta, p) + self.mean_field_cost(x, eta)
    }

    /// Short `key = value` description written into run manifests.
    fn describe(&self) -> Vec<(String, String)>;
}

/// A-priori sup bound on `U` and the Hamiltonian regularity box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelBounds {
    pub u_bound: f64,
    pub hamiltonian_box: f64,
}

/// `u_bound = C_g + T (C_f + C_F)`, `hamiltonian_box = sqrt(2d) u_bound + 1`.
pub fn compute_bounds(model: &dyn MeanFieldModel) -> ModelBounds {
    let c = model.sup_norms();
    let u_bound = c.terminal + model.horizon() * (c.running + c.mean_field);
    let hamiltonian_box = (2.0 * model.num_states() as f64).sqrt() * u_bound + 1.0;
    ModelBounds {
        u_bound,
        hamiltonian_box,
    }
}

/// Generator row sums and off-diagonal signs of a `d x d` row-major rate
/// matrix; returns the worst violation.
pub fn generator_violation(rates: &[f64], d: usize) -> f64 {
    let mut worst = 0.0_f64;
    for x in 0..d {
        let row = &rates[x * d..(x + 1) * d];
        let scale = row.iter().fold(1.0_f64, |m, r| m.max(r.abs()));
        worst = worst.max(row.iter().sum::<f64>().abs() / scale);
        for (y, &r) in row.iter().enumerate() {
            if y != x {
                worst = worst.max(-r);
            }
        }
    }
    worst
}

/// Drift of the Kolmogorov forward equation,
/// `drift[x] = sum_y eta_y gamma*_x(y, eta, delta(values, y))`.
pub fn kolmogorov_drift(model: &dyn MeanFieldModel, eta: &[f64], values: &[f64], out: &mut [f64]) {
    let d = eta.len();
    let mut p = vec![0.0; d];
    let mut row = vec![0.0; d];
    out.iter_mut().for_each(|o| *o = 0.0);
    for y in 0..d {
        crate::simplex::delta_into(values, y, &mut p);
        model.rate_selector(y, eta, &p, &mut row);
        for x in 0..d {
            out[x] += eta[y] * row[x];
        }
    }
}

/// [`kolmogorov_drift`] and its Jacobians in `eta` and `values`
/// (row-major `d x d`, row = output component).
pub fn kolmogorov_drift_jacobian(
    model: &dyn MeanFieldModel,
    eta: &[f64],
    values: &[f64],
    out: &mut [f64],
    d_eta: &mut [f64],
    d_values: &mut [f64],
) {
    let d = eta.len();
    let mut p = vec![0.0; d];
    let mut row = vec![0.0; d];
    let mut j_eta = vec![0.0; d * d];
    let mut j_p = vec![0.0; d * d];
    out.iter_mut().for_each(|o| *o = 0.0);
    d_eta.iter_mut().for_each(|o| *o = 0.0);
    d_values.iter_mut().for_each(|o| *o = 0.0);
    for y in 0..d {
        crate::simplex::delta_into(values, y, &mut p);
        model.rate_selector(y, eta, &p, &mut row);
        model.rate_selector_jacobian(y, eta, &p, &mut j_eta, &mut j_p);
        for x in 0..d {
            out[x] += eta[y] * row[x];
            d_eta[x * d + y] += row[x];
            for j in 0..d {
                d_eta[x * d + j] += eta[y] * j_eta[x * d + j];
                // p_j = values_j - values_y
                let g = eta[y] * j_p[x * d + j];
                d_values[x * d + j] += g;
                d_values[x * d + y] -= g;
            }
        }
    }
}

/// `hamiltonian_bar(x, eta, delta(values, x))` together with its gradients in
/// `eta` and `values`.
pub fn hamiltonian_bar_with_grad(
    model: &dyn MeanFieldModel,
    x: usize,
    eta: &[f64],
    values: &[f64],
    d_eta: &mut [f64],
    d_values: &mut [f64],
) -> f64 {
    let d = eta.len();
    let p = crate::simplex::delta(values, x);
    let mut dp = vec![0.0; d];
    let mut df = vec![0.0; d];
    model.hamiltonian_grad(x, eta, &p, d_eta, &mut dp);
    model.mean_field_cost_grad(x, eta, &mut df);
    for j in 0..d {
        d_eta[j] += df[j];
    }
    let mut total = 0.0;
    for j in 0..d {
        d_values[j] = dp[j];
        total += dp[j];
    }
    d_values[x] -= total;
    model.hamiltonian_bar(x, eta, &p)
}

/// Builds a built-in model from a parsed config (`model = quadratic|cyber|zero`
/// plus `model.*` fields). Consumed keys are marked on `kv`.
pub fn from_config(kv: &mut KeyValues) -> Result<Arc<dyn MeanFieldModel>> {
    let name = kv.take_string("model")?;
    match name.as_str() {
        "quadratic" => {
            let d = kv.take_or("model.d", 2usize)?;
            let b = kv.take_or("model.b", 4.0)?;
            let horizon = kv.take_or("model.T", 0.5)?;
            Ok(Arc::new(QuadraticModel::new(d, b, horizon)?))
        }
        "cyber" => {
            let defaults = CyberParams::illustrative();
            let params = CyberParams {
                k_d: kv.take_or("model.k_D", defaults.k_d)?,
                k_i: kv.take_or("model.k_I", defaults.k_i)?,
                rho: kv.take_or("model.rho", defaults.rho)?,
                v_h: kv.take_or("model.v_H", defaults.v_h)?,
                q_hack_d: kv.take_or("model.qH_D", defaults.q_hack_d)?,
                q_hack_u: kv.take_or("model.qH_U", defaults.q_hack_u)?,
                q_rec_d: kv.take_or("model.qR_D", defaults.q_rec_d)?,
                q_rec_u: kv.take_or("model.qR_U", defaults.q_rec_u)?,
                beta_dd: kv.take_or("model.beta_DD", defaults.beta_dd)?,
                beta_uu: kv.take_or("model.beta_UU", defaults.beta_uu)?,
                beta_ud: kv.take_or("model.beta_UD", defaults.beta_ud)?,
                beta_du: kv.take_or("model.beta_DU", defaults.beta_du)?,
            };
            let horizon = kv.take_or("model.T", CyberModel::DEFAULT_HORIZON)?;
            let default_temperature = 0.05 * params.k_i;
            let temperature = kv.take_or("model.smoothing", default_temperature)?;
            let model = CyberModel::new(params, horizon)?;
            let model = if temperature > 0.0 {
                model.with_training_temperature(temperature)?
            } else {
                model
            };
            Ok(Arc::new(model))
        }
        "zero" => {
            let d = kv.take_or("model.d", 2usize)?;
            let horizon = kv.take_or("model.T", 0.5)?;
            let a_low = kv.take_or("model.a_low", 1.0)?;
            let a_high = kv.take_or("model.a_high", 3.0)?;
            Ok(Arc::new(ZeroCostModel::new(d, horizon, a_low, a_high)?))
        }
        other => Err(Error::Config(format!(
            "unknown model {other:?} (expected quadratic, cyber or zero)"
        ))),
    }
}

pub(crate) fn check_rate_bounds(a_low: f64, a_high: f64) -> Result<()> {
    if !(a_low >= 0.0 && a_low <= a_high && a_high.is_finite()) {
        return Err(Error::Model(format!(
            "rate bounds [{a_low}, {a_high}] must satisfy 0 <= a_low <= a_high < inf"
        )));
    }
    Ok(())
}

pub(crate) fn check_horizon(horizon: f64) -> Result<()> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::Model(format!("horizon must be positive, got {horizon}")));
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Finite-difference check of every derivative a model reports.
    pub fn check_derivatives(model: &dyn MeanFieldModel, seed: u64, p_scale: f64, tol: f64) {
        let d = model.num_states();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-6;
        for _ in 0..50 {
            let eta = crate::simplex::sample_uniform(d, &mut rng).unwrap().into_inner();
            let x = rng.random_range(0..d);
            let mut p: Vec<f64> = (0..d).map(|_| rng.random_range(-p_scale..p_scale)).collect();
            p[x] = 0.0;
            let mut d_eta = vec![0.0; d];
            let mut d_p = vec![0.0; d];
            model.hamiltonian_grad(x, &eta, &p, &mut d_eta, &mut d_p);
            let mut j_eta = vec![0.0; d * d];
            let mut j_p = vec![0.0; d * d];
            model.rate_selector_jacobian(x, &eta, &p, &mut j_eta, &mut j_p);
            for j in 0..d {
                let bump = |v: &Vec<f64>, s: f64| {
                    let mut w = v.clone();
                    w[j] += s;
                    w
                };
                let fd = (model.hamiltonian(x, &eta, &bump(&p, h)) - model.hamiltonian(x, &eta, &bump(&p, -h)))
                    / (2.0 * h);
                if j != x {
                    assert!((fd - d_p[j]).abs() < tol, "dH/dp_{j}: fd {fd} vs {}", d_p[j]);
                }
                let fd = (model.hamiltonian(x, &bump(&eta, h), &p) - model.hamiltonian(x, &bump(&eta, -h), &p))
                    / (2.0 * h);
                assert!((fd - d_eta[j]).abs() < tol, "dH/deta_{j}: fd {fd} vs {}", d_eta[j]);

                let mut up = vec![0.0; d];
                let mut dn = vec![0.0; d];
                if j != x {
                    model.rate_selector(x, &eta, &bump(&p, h), &mut up);
                    model.rate_selector(x, &eta, &bump(&p, -h), &mut dn);
                    for y in 0..d {
                        let fd = (up[y] - dn[y]) / (2.0 * h);
                        assert!((fd - j_p[y * d + j]).abs() < tol, "dgamma_{y}/dp_{j}");
                    }
                }
                model.rate_selector(x, &bump(&eta, h), &p, &mut up);
                model.rate_selector(x, &bump(&eta, -h), &p, &mut dn);
                for y in 0..d {
                    let fd = (up[y] - dn[y]) / (2.0 * h);
                    assert!((fd - j_eta[y * d + j]).abs() < tol, "dgamma_{y}/deta_{j}");
                }
                let fd = (model.terminal_cost(x, &bump(&eta, h)) - model.terminal_cost(x, &bump(&eta, -h)))
                    / (2.0 * h);
                let mut g = vec![0.0; d];
                model.terminal_cost_grad(x, &eta, &mut g);
                assert!((fd - g[j]).abs() < tol);
                let fd = (model.mean_field_cost(x, &bump(&eta, h)) - model.mean_field_cost(x, &bump(&eta, -h)))
                    / (2.0 * h);
                model.mean_field_cost_grad(x, &eta, &mut g);
                assert!((fd - g[j]).abs() < tol);
            }
        }
    }

    /// The selector attains the Hamiltonian and lies in the admissible set.
    pub fn check_selector_attains_minimum(model: &dyn MeanFieldModel, seed: u64, p_scale: f64) {
        let d = model.num_states();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..200 {
            let eta = crate::simplex::sample_uniform(d, &mut rng).unwrap().into_inner();
            let x = rng.random_range(0..d);
            let mut p: Vec<f64> = (0..d).map(|_| rng.random_range(-p_scale..p_scale)).collect();
            p[x] = 0.0;
            let mut rates = vec![0.0; d];
            model.rate_selector(x, &eta, &p, &mut rates);
            assert!(rates.iter().sum::<f64>().abs() < 1e-12);
            let attained = model.running_cost(x, &eta, &rates)
                + (0..d).filter(|&y| y != x).map(|y| rates[y] * p[y]).sum::<f64>();
            let h = model.hamiltonian(x, &eta, &p);
            assert!((attained - h).abs() < 1e-10, "{attained} vs {h}");
        }
    }
}
