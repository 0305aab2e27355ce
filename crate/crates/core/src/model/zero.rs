use crate::error::Result;
use crate::model::{check_horizon, check_rate_bounds, CostSupNorms, MeanFieldModel};
use crate::error::Error;

/// A game with no costs at all: `f = F = g = 0` and rates in
/// `[a_low, a_high]`. Its master equation solution is `U = 0`, which makes it
/// a sanity check for the solvers.
///
/// The minimizing rate is `a_low` for a positive gap and `a_high` for a
/// negative one; ties pick `a_low`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroCostModel {
    d: usize,
    horizon: f64,
    a_low: f64,
    a_high: f64,
}

impl ZeroCostModel {
    pub fn new(d: usize, horizon: f64, a_low: f64, a_high: f64) -> Result<Self> {
        if d < 2 {
            return Err(Error::Model(format!("zero-cost model needs d >= 2, got {d}")));
        }
        check_horizon(horizon)?;
        check_rate_bounds(a_low, a_high)?;
        Ok(ZeroCostModel {
            d,
            horizon,
            a_low,
            a_high,
        })
    }

    fn rate(&self, p: f64) -> f64 {
        if p < 0.0 {
            self.a_high
        } else {
            self.a_low
        }
    }
}

impl MeanFieldModel for ZeroCostModel {
    fn name(&self) -> &str {
        "zero"
    }

    fn num_states(&self) -> usize {
        self.d
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn rate_bounds(&self) -> (f64, f64) {
        (self.a_low, self.a_high)
    }

    fn running_cost(&self, _x: usize, _eta: &[f64], _rates: &[f64]) -> f64 {
        0.0
    }

    fn mean_field_cost(&self, _x: usize, _eta: &[f64]) -> f64 {
        0.0
    }

    fn mean_field_cost_grad(&self, _x: usize, _eta: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }

    fn terminal_cost(&self, _x: usize, _eta: &[f64]) -> f64 {
        0.0
    }

    fn terminal_cost_grad(&self, _x: usize, _eta: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }

    fn hamiltonian(&self, x: usize, _eta: &[f64], p: &[f64]) -> f64 {
        p.iter()
            .enumerate()
            .filter(|&(y, _)| y != x)
            .map(|(_, &v)| self.rate(v) * v)
            .sum()
    }

    fn hamiltonian_grad(&self, x: usize, _eta: &[f64], p: &[f64], d_eta: &mut [f64], d_p: &mut [f64]) {
        d_eta.iter_mut().for_each(|o| *o = 0.0);
        for (y, o) in d_p.iter_mut().enumerate() {
            *o = if y == x { 0.0 } else { self.rate(p[y]) };
        }
    }

    fn rate_selector(&self, x: usize, _eta: &[f64], p: &[f64], out: &mut [f64]) {
        let mut total = 0.0;
        for (y, o) in out.iter_mut().enumerate() {
            if y != x {
                *o = self.rate(p[y]);
                total += *o;
            }
        }
        out[x] = -total;
    }

    fn rate_selector_jacobian(&self, _x: usize, _eta: &[f64], _p: &[f64], d_eta: &mut [f64], d_p: &mut [f64]) {
        d_eta.iter_mut().for_each(|o| *o = 0.0);
        d_p.iter_mut().for_each(|o| *o = 0.0);
    }

    fn sup_norms(&self) -> CostSupNorms {
        CostSupNorms {
            running: 0.0,
            mean_field: 0.0,
            terminal: 0.0,
        }
    }

    fn describe(&self) -> Vec<(String, String)> {
        vec![
            ("model".into(), "zero".into()),
            ("model.d".into(), self.d.to_string()),
            ("model.T".into(), self.horizon.to_string()),
            ("model.a_low".into(), self.a_low.to_string()),
            ("model.a_high".into(), self.a_high.to_string()),
        ]
    }
}
