use crate::error::{Error, Result};
use crate::model::{check_horizon, CostSupNorms, MeanFieldModel};

const RATE_LOW: f64 = 1.0;
const RATE_HIGH: f64 = 3.0;
const RATE_TARGET: f64 = 2.0;

/// Quadratic switching cost `f(x, a) = b sum_{y != x} (a_y - 2)^2` on rates in
/// `[1, 3]`, congestion cost `F(x, eta) = eta_x`, and no terminal cost.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticModel {
    d: usize,
    b: f64,
    horizon: f64,
}

impl QuadraticModel {
    /// Requires `horizon <= b`, which keeps every `|delta(U, x)_y| <= 2b` so
    /// that the Hamiltonian has its smooth interior form.
    pub fn new(d: usize, b: f64, horizon: f64) -> Result<Self> {
        if d < 2 {
            return Err(Error::Model(format!("quadratic model needs d >= 2, got {d}")));
        }
        if !(b > 0.0 && b.is_finite()) {
            return Err(Error::Model(format!("cost coefficient b must be positive, got {b}")));
        }
        check_horizon(horizon)?;
        if horizon > b {
            return Err(Error::Model(format!("horizon {horizon} exceeds b = {b}")));
        }
        Ok(QuadraticModel { d, b, horizon })
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    /// Clamped minimizer of `b (a - 2)^2 + a p` over `[1, 3]`.
    pub fn optimal_rate(&self, p: f64) -> f64 {
        (RATE_TARGET - p / (2.0 * self.b)).clamp(RATE_LOW, RATE_HIGH)
    }

    fn interior(&self, p: f64) -> bool {
        p.abs() < 2.0 * self.b
    }
}

/// Rate row for state `x`: off-diagonals `clamp(2 - p_y / 2b, 1, 3)`.
pub fn quadratic_rate_selector(b: f64, x: usize, p: &[f64], out: &mut [f64]) {
    let mut total = 0.0;
    for (y, o) in out.iter_mut().enumerate() {
        if y == x {
            continue;
        }
        *o = (RATE_TARGET - p[y] / (2.0 * b)).clamp(RATE_LOW, RATE_HIGH);
        total += *o;
    }
    out[x] = -total;
}

/// `sum_{y != x} (2 p_y - p_y^2 / 4b)` when every `|p_y| <= 2b`; otherwise the
/// cost evaluated at the clamped minimizer.
pub fn quadratic_hamiltonian(b: f64, x: usize, p: &[f64]) -> f64 {
    let others = p.iter().enumerate().filter(|&(y, _)| y != x).map(|(_, &v)| v);
    if others.clone().all(|v| v.abs() <= 2.0 * b) {
        others.map(|v| 2.0 * v - v * v / (4.0 * b)).sum()
    } else {
        others
            .map(|v| {
                let a = (RATE_TARGET - v / (2.0 * b)).clamp(RATE_LOW, RATE_HIGH);
                b * (a - RATE_TARGET).powi(2) + a * v
            })
            .sum()
    }
}

impl MeanFieldModel for QuadraticModel {
    fn name(&self) -> &str {
        "quadratic"
    }

    fn num_states(&self) -> usize {
        self.d
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn rate_bounds(&self) -> (f64, f64) {
        (RATE_LOW, RATE_HIGH)
    }

    fn running_cost(&self, x: usize, _eta: &[f64], rates: &[f64]) -> f64 {
        rates
            .iter()
            .enumerate()
            .filter(|&(y, _)| y != x)
            .map(|(_, &a)| self.b * (a - RATE_TARGET).powi(2))
            .sum()
    }

    fn mean_field_cost(&self, x: usize, eta: &[f64]) -> f64 {
        eta[x]
    }

    fn mean_field_cost_grad(&self, x: usize, _eta: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        out[x] = 1.0;
    }

    fn terminal_cost(&self, _x: usize, _eta: &[f64]) -> f64 {
        0.0
    }

    fn terminal_cost_grad(&self, _x: usize, _eta: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }

    fn hamiltonian(&self, x: usize, _eta: &[f64], p: &[f64]) -> f64 {
        quadratic_hamiltonian(self.b, x, p)
    }

    fn hamiltonian_grad(&self, x: usize, _eta: &[f64], p: &[f64], d_eta: &mut [f64], d_p: &mut [f64]) {
        d_eta.iter_mut().for_each(|o| *o = 0.0);
        for (y, o) in d_p.iter_mut().enumerate() {
            *o = if y == x { 0.0 } else { self.optimal_rate(p[y]) };
        }
    }

    fn rate_selector(&self, x: usize, _eta: &[f64], p: &[f64], out: &mut [f64]) {
        quadratic_rate_selector(self.b, x, p, out);
    }

    fn rate_selector_jacobian(&self, x: usize, _eta: &[f64], p: &[f64], d_eta: &mut [f64], d_p: &mut [f64]) {
        let d = self.d;
        d_eta.iter_mut().for_each(|o| *o = 0.0);
        d_p.iter_mut().for_each(|o| *o = 0.0);
        for y in (0..d).filter(|&y| y != x) {
            if self.interior(p[y]) {
                let slope = -1.0 / (2.0 * self.b);
                d_p[y * d + y] = slope;
                d_p[x * d + y] = -slope;
            }
        }
    }

    fn sup_norms(&self) -> CostSupNorms {
        CostSupNorms {
            running: self.b * (self.d - 1) as f64,
            mean_field: 1.0,
            terminal: 0.0,
        }
    }

    fn describe(&self) -> Vec<(String, String)> {
        vec![
            ("model".into(), "quadratic".into()),
            ("model.d".into(), self.d.to_string()),
            ("model.b".into(), self.b.to_string()),
            ("model.T".into(), self.horizon.to_string()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testing;
    use crate::model::{compute_bounds, ModelBounds};
    use proptest::prelude::*;

    fn grid_minimum(b: f64, p: &[f64], x: usize) -> f64 {
        // Brute force over a 200-point grid per free rate (d = 3).
        let grid: Vec<f64> = (0..200).map(|i| 1.0 + 2.0 * i as f64 / 199.0).collect();
        let ys: Vec<usize> = (0..p.len()).filter(|&y| y != x).collect();
        let mut best = f64::INFINITY;
        for &a in &grid {
            for &c in &grid {
                let v = b * (a - 2.0).powi(2) + a * p[ys[0]] + b * (c - 2.0).powi(2) + c * p[ys[1]];
                best = best.min(v);
            }
        }
        best
    }

    #[test]
    fn selector_examples() {
        let mut out = vec![0.0; 3];
        quadratic_rate_selector(4.0, 0, &[0.0, 0.0, 0.0], &mut out);
        assert_eq!(out, vec![-4.0, 2.0, 2.0]);
        quadratic_rate_selector(4.0, 0, &[0.0, 8.0, -8.0], &mut out);
        assert_eq!(out, vec![-4.0, 1.0, 3.0]);
        let mut out = vec![0.0; 2];
        quadratic_rate_selector(4.0, 0, &[0.0, 4.0], &mut out);
        assert_eq!(out[1], 1.5);
    }

    #[test]
    fn hamiltonian_examples() {
        assert_eq!(quadratic_hamiltonian(4.0, 0, &[0.0, 0.0]), 0.0);
        assert_eq!(quadratic_hamiltonian(4.0, 0, &[0.0, 4.0]), 7.0);
        let p = [0.0, 10.0, -10.0];
        let h = quadratic_hamiltonian(4.0, 0, &p);
        assert!((h - grid_minimum(4.0, &p, 0)).abs() < 1e-4, "{h}");
    }

    #[test]
    fn bounds() {
        let m = QuadraticModel::new(2, 4.0, 0.5).unwrap();
        let ModelBounds {
            u_bound,
            hamiltonian_box,
        } = compute_bounds(&m);
        assert_eq!(u_bound, 2.5);
        assert_eq!(hamiltonian_box, 6.0);
    }

    #[test]
    fn rejects_long_horizons() {
        assert!(QuadraticModel::new(2, 4.0, 5.0).is_err());
        assert!(QuadraticModel::new(1, 4.0, 0.5).is_err());
        assert!(QuadraticModel::new(2, -1.0, 0.5).is_err());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let m = QuadraticModel::new(3, 4.0, 0.5).unwrap();
        testing::check_derivatives(&m, 3, 6.0, 1e-6);
        testing::check_selector_attains_minimum(&m, 4, 20.0);
    }

    proptest! {
        #[test]
        fn selector_is_admissible_and_attains_grid_minimum(
            p1 in -6.0f64..6.0,
            p2 in -6.0f64..6.0,
            x in 0usize..3,
        ) {
            let b = 4.0;
            let mut p = vec![p1, p2];
            p.insert(x, 0.0);
            let mut rates = vec![0.0; 3];
            quadratic_rate_selector(b, x, &p, &mut rates);
            prop_assert!(rates.iter().sum::<f64>().abs() < 1e-12);
            for y in (0..3).filter(|&y| y != x) {
                prop_assert!((1.0..=3.0).contains(&rates[y]));
            }
            let h = quadratic_hamiltonian(b, x, &p);
            let grid = grid_minimum(b, &p, x);
            prop_assert!(h <= grid + 1e-12);
            prop_assert!(grid - h < 1e-3);
        }

        #[test]
        fn hamiltonian_is_concave_in_the_interior(
            p in -7.0f64..7.0,
            q in -7.0f64..7.0,
        ) {
            let b = 4.0;
            let h = 0.5;
            let eval = |v: f64| quadratic_hamiltonian(b, 0, &[0.0, v, q]);
            let second = eval(p + h) - 2.0 * eval(p) + eval(p - h);
            prop_assert!(second / (h * h) <= -1.0 / (2.0 * b) + 1e-9);
        }

        #[test]
        fn congestion_cost_is_lasry_lions_monotone(
            a in prop::collection::vec(0.01f64..1.0, 3),
            c in prop::collection::vec(0.01f64..1.0, 3),
        ) {
            let m = QuadraticModel::new(3, 4.0, 0.5).unwrap();
            let norm = |v: &Vec<f64>| { let s: f64 = v.iter().sum(); v.iter().map(|w| w / s).collect::<Vec<_>>() };
            let (eta, hat) = (norm(&a), norm(&c));
            let total: f64 = (0..3)
                .map(|x| (m.mean_field_cost(x, &eta) - m.mean_field_cost(x, &hat)) * (eta[x] - hat[x]))
                .sum();
            prop_assert!(total >= 0.0);
        }
    }
}
