use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{check_horizon, CostSupNorms, MeanFieldModel};

/// The four states of the cybersecurity model, in index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CyberState {
    DefendedSusceptible = 0,
    UndefendedSusceptible = 1,
    DefendedInfected = 2,
    UndefendedInfected = 3,
}

impl CyberState {
    pub const ALL: [CyberState; 4] = [
        CyberState::DefendedSusceptible,
        CyberState::UndefendedSusceptible,
        CyberState::DefendedInfected,
        CyberState::UndefendedInfected,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(x: usize) -> Self {
        Self::ALL[x]
    }

    pub fn label(self) -> &'static str {
        match self {
            CyberState::DefendedSusceptible => "DS",
            CyberState::UndefendedSusceptible => "US",
            CyberState::DefendedInfected => "DI",
            CyberState::UndefendedInfected => "UI",
        }
    }

    /// The state reached by toggling the defence.
    fn partner(self) -> Self {
        match self {
            CyberState::DefendedSusceptible => CyberState::UndefendedSusceptible,
            CyberState::UndefendedSusceptible => CyberState::DefendedSusceptible,
            CyberState::DefendedInfected => CyberState::UndefendedInfected,
            CyberState::UndefendedInfected => CyberState::DefendedInfected,
        }
    }
}

const DS: usize = 0;
const US: usize = 1;
const DI: usize = 2;
const UI: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CyberParams {
    pub k_d: f64,
    pub k_i: f64,
    pub rho: f64,
    pub v_h: f64,
    pub q_hack_d: f64,
    pub q_hack_u: f64,
    pub q_rec_d: f64,
    pub q_rec_u: f64,
    pub beta_dd: f64,
    pub beta_uu: f64,
    pub beta_ud: f64,
    pub beta_du: f64,
}

impl CyberParams {
    /// Illustrative defaults chosen for this crate; they are not calibrated
    /// to any data set.
    pub fn illustrative() -> Self {
        CyberParams {
            k_d: 0.3,
            k_i: 0.5,
            rho: 0.8,
            v_h: 0.6,
            q_hack_d: 0.3,
            q_hack_u: 0.6,
            q_rec_d: 0.5,
            q_rec_u: 0.4,
            beta_dd: 0.3,
            beta_uu: 0.6,
            beta_ud: 0.5,
            beta_du: 0.4,
        }
    }

    fn all(&self) -> [f64; 12] {
        [
            self.k_d,
            self.k_i,
            self.rho,
            self.v_h,
            self.q_hack_d,
            self.q_hack_u,
            self.q_rec_d,
            self.q_rec_u,
            self.beta_dd,
            self.beta_uu,
            self.beta_ud,
            self.beta_du,
        ]
    }

    /// Infection rate of a defended susceptible computer.
    pub fn infection_defended(&self, eta: &[f64]) -> f64 {
        self.v_h * self.q_hack_d + self.beta_dd * eta[DI] + self.beta_ud * eta[UI]
    }

    /// Infection rate of an undefended susceptible computer.
    pub fn infection_undefended(&self, eta: &[f64]) -> f64 {
        self.v_h * self.q_hack_u + self.beta_uu * eta[UI] + self.beta_du * eta[DI]
    }

    fn running_cost(&self, x: usize) -> f64 {
        let mut cost = 0.0;
        if x == DS || x == DI {
            cost += self.k_d;
        }
        if x == DI || x == UI {
            cost += self.k_i;
        }
        cost
    }

    /// Exogenous (non-switch) transition `(target, rate)` out of `x`.
    fn exogenous(&self, x: usize, eta: &[f64]) -> (usize, f64) {
        match x {
            DS => (DI, self.infection_defended(eta)),
            US => (UI, self.infection_undefended(eta)),
            DI => (DS, self.q_rec_d),
            UI => (US, self.q_rec_u),
            _ => unreachable!("cyber state out of range"),
        }
    }

    /// `d rate / d eta` of the exogenous transition out of `x`.
    fn exogenous_grad(&self, x: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        match x {
            DS => {
                out[DI] = self.beta_dd;
                out[UI] = self.beta_ud;
            }
            US => {
                out[UI] = self.beta_uu;
                out[DI] = self.beta_du;
            }
            _ => {}
        }
    }
}

/// How the defence toggle reacts to the value gap `p = U(partner) - U(x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SwitchRule {
    /// Switch at rate `rho` iff `p < 0`; ties do not switch.
    Exact,
    /// Switch at rate `rho * sigmoid(-p / temperature)`. The matching
    /// Hamiltonian term is `-rho * temperature * softplus(-p / temperature)`,
    /// so the selector stays the `p`-gradient of the Hamiltonian.
    Smoothed { temperature: f64 },
}

/// The cybersecurity game on `{DS, US, DI, UI}` with binary defence switching
/// and no mean-field or terminal cost.
#[derive(Debug, Clone, PartialEq)]
pub struct CyberModel {
    params: CyberParams,
    horizon: f64,
    rule: SwitchRule,
    training_temperature: Option<f64>,
}

impl CyberModel {
    pub const DEFAULT_HORIZON: f64 = 2.0;

    pub fn new(params: CyberParams, horizon: f64) -> Result<Self> {
        if params.all().iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Model(format!("cyber parameters must be finite and >= 0: {params:?}")));
        }
        check_horizon(horizon)?;
        Ok(CyberModel {
            params,
            horizon,
            rule: SwitchRule::Exact,
            training_temperature: None,
        })
    }

    /// Trainers will see a copy using [`SwitchRule::Smoothed`] at this
    /// temperature; evaluation keeps the exact rule.
    pub fn with_training_temperature(mut self, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Model(format!("smoothing temperature must be positive, got {temperature}")));
        }
        self.training_temperature = Some(temperature);
        Ok(self)
    }

    pub fn with_rule(mut self, rule: SwitchRule) -> Self {
        self.rule = rule;
        self
    }

    pub fn params(&self) -> &CyberParams {
        &self.params
    }

    pub fn rule(&self) -> SwitchRule {
        self.rule
    }

    /// Cost-plus-rates expression minimized by the Hamiltonian, for a fixed
    /// switch decision `switch`.
    pub fn pre_hamiltonian(&self, x: usize, eta: &[f64], p: &[f64], switch: bool) -> f64 {
        let partner = CyberState::from_index(x).partner().index();
        let (target, rate) = self.params.exogenous(x, eta);
        let a = if switch { 1.0 } else { 0.0 };
        self.params.running_cost(x) + rate * p[target] + self.params.rho * a * p[partner]
    }

    /// Switch rate and its derivative in the gap `p`.
    fn switch_rate(&self, gap: f64) -> (f64, f64) {
        let rho = self.params.rho;
        match self.rule {
            SwitchRule::Exact => (if gap < 0.0 { rho } else { 0.0 }, 0.0),
            SwitchRule::Smoothed { temperature } => {
                let s = sigmoid(-gap / temperature);
                (rho * s, -rho * s * (1.0 - s) / temperature)
            }
        }
    }

    /// The minimized switch contribution to the Hamiltonian.
    fn switch_term(&self, gap: f64) -> f64 {
        let rho = self.params.rho;
        match self.rule {
            SwitchRule::Exact => rho * gap.min(0.0),
            SwitchRule::Smoothed { temperature } => -rho * temperature * softplus(-gap / temperature),
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl MeanFieldModel for CyberModel {
    fn name(&self) -> &str {
        "cyber"
    }

    fn num_states(&self) -> usize {
        4
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn rate_bounds(&self) -> (f64, f64) {
        let p = &self.params;
        let worst_eta = [0.0, 0.0, 1.0, 0.0];
        let worst_eta_u = [0.0, 0.0, 0.0, 1.0];
        let high = [
            p.rho,
            p.q_rec_d,
            p.q_rec_u,
            p.infection_defended(&worst_eta).max(p.infection_defended(&worst_eta_u)),
            p.infection_undefended(&worst_eta).max(p.infection_undefended(&worst_eta_u)),
        ]
        .into_iter()
        .fold(0.0, f64::max);
        (0.0, high)
    }

    fn running_cost(&self, x: usize, _eta: &[f64], _rates: &[f64]) -> f64 {
        self.params.running_cost(x)
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

    fn hamiltonian(&self, x: usize, eta: &[f64], p: &[f64]) -> f64 {
        let partner = CyberState::from_index(x).partner().index();
        let (target, rate) = self.params.exogenous(x, eta);
        self.params.running_cost(x) + rate * p[target] + self.switch_term(p[partner])
    }

    fn hamiltonian_grad(&self, x: usize, eta: &[f64], p: &[f64], d_eta: &mut [f64], d_p: &mut [f64]) {
        let partner = CyberState::from_index(x).partner().index();
        let (target, rate) = self.params.exogenous(x, eta);
        self.params.exogenous_grad(x, d_eta);
        d_eta.iter_mut().for_each(|g| *g *= p[target]);
        d_p.iter_mut().for_each(|g| *g = 0.0);
        d_p[target] = rate;
        d_p[partner] = self.switch_rate(p[partner]).0;
    }

    fn rate_selector(&self, x: usize, eta: &[f64], p: &[f64], out: &mut [f64]) {
        let partner = CyberState::from_index(x).partner().index();
        let (target, rate) = self.params.exogenous(x, eta);
        out.iter_mut().for_each(|o| *o = 0.0);
        out[target] = rate;
        out[partner] = self.switch_rate(p[partner]).0;
        out[x] = -(rate + out[partner]);
    }

    fn rate_selector_jacobian(&self, x: usize, eta: &[f64], p: &[f64], d_eta: &mut [f64], d_p: &mut [f64]) {
        let d = 4;
        let partner = CyberState::from_index(x).partner().index();
        let (target, _) = self.params.exogenous(x, eta);
        d_eta.iter_mut().for_each(|o| *o = 0.0);
        d_p.iter_mut().for_each(|o| *o = 0.0);
        let mut g = [0.0; 4];
        self.params.exogenous_grad(x, &mut g);
        for j in 0..d {
            d_eta[target * d + j] = g[j];
            d_eta[x * d + j] = -g[j];
        }
        let slope = self.switch_rate(p[partner]).1;
        d_p[partner * d + partner] = slope;
        d_p[x * d + partner] = -slope;
    }

    fn sup_norms(&self) -> CostSupNorms {
        CostSupNorms {
            running: self.params.k_d + self.params.k_i,
            mean_field: 0.0,
            terminal: 0.0,
        }
    }

    fn training_surrogate(&self) -> Option<Arc<dyn MeanFieldModel>> {
        let temperature = self.training_temperature?;
        let mut smoothed = self.clone().with_rule(SwitchRule::Smoothed { temperature });
        smoothed.training_temperature = None;
        Some(Arc::new(smoothed))
    }

    fn describe(&self) -> Vec<(String, String)> {
        let p = &self.params;
        let mut out = vec![
            ("model".into(), "cyber".into()),
            ("model.T".into(), self.horizon.to_string()),
        ];
        for (k, v) in [
            ("k_D", p.k_d),
            ("k_I", p.k_i),
            ("rho", p.rho),
            ("v_H", p.v_h),
            ("qH_D", p.q_hack_d),
            ("qH_U", p.q_hack_u),
            ("qR_D", p.q_rec_d),
            ("qR_U", p.q_rec_u),
            ("beta_DD", p.beta_dd),
            ("beta_UU", p.beta_uu),
            ("beta_UD", p.beta_ud),
            ("beta_DU", p.beta_du),
        ] {
            out.push((format!("model.{k}"), v.to_string()));
        }
        out.push((
            "model.smoothing".into(),
            self.training_temperature.unwrap_or(0.0).to_string(),
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{compute_bounds, testing};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> CyberModel {
        CyberModel::new(CyberParams::illustrative(), 2.0).unwrap()
    }

    /// `p = delta(u, x)` for a value vector `u`.
    fn gaps(u: [f64; 4], x: usize) -> Vec<f64> {
        crate::simplex::delta(&u, x)
    }

    #[test]
    fn switches_only_when_strictly_cheaper() {
        let m = model();
        let eta = [0.25; 4];
        let mut rates = [0.0; 4];
        // U(US) < U(DS): leave the defence.
        m.rate_selector(DS, &eta, &gaps([1.0, 0.5, 2.0, 2.0], DS), &mut rates);
        assert_eq!(rates[US], m.params.rho);
        // Tie.
        m.rate_selector(DS, &eta, &gaps([1.0, 1.0, 2.0, 2.0], DS), &mut rates);
        assert_eq!(rates[US], 0.0);
    }

    #[test]
    fn zero_gaps_give_pure_infection_dynamics() {
        let m = model();
        let p = m.params;
        let eta = [0.1, 0.2, 0.3, 0.4];
        let mut rates = [0.0; 4];
        m.rate_selector(DS, &eta, &[0.0; 4], &mut rates);
        assert_eq!(rates[US], 0.0);
        let expected = p.v_h * p.q_hack_d + p.beta_dd * eta[DI] + p.beta_ud * eta[UI];
        assert!((rates[DI] - expected).abs() < 1e-15);
        assert_eq!(rates.iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn pre_hamiltonian_examples() {
        let m = model();
        let p = m.params;
        let eta = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(m.pre_hamiltonian(US, &eta, &[0.0; 4], false), 0.0);
        let u = [0.4, 0.1, 1.3, 0.9];
        let expected = p.k_d + p.k_i + p.rho * (u[UI] - u[DI]) + p.q_rec_d * (u[DS] - u[DI]);
        assert!((m.pre_hamiltonian(DI, &eta, &gaps(u, DI), true) - expected).abs() < 1e-14);
    }

    #[test]
    fn hamiltonian_is_the_two_point_minimum() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let eta = crate::simplex::sample_uniform(4, &mut rng).unwrap().into_inner();
            let u: [f64; 4] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
            for x in 0..4 {
                let p = gaps(u, x);
                let brute = m.pre_hamiltonian(x, &eta, &p, false).min(m.pre_hamiltonian(x, &eta, &p, true));
                assert!((m.hamiltonian(x, &eta, &p) - brute).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rate_rows_are_generators() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let eta = crate::simplex::sample_uniform(4, &mut rng).unwrap().into_inner();
            let u: [f64; 4] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
            let mut matrix = vec![0.0; 16];
            for x in 0..4 {
                m.rate_selector(x, &eta, &gaps(u, x), &mut matrix[x * 4..(x + 1) * 4]);
            }
            assert!(crate::model::generator_violation(&matrix, 4) < 1e-14);
        }
    }

    #[test]
    fn bounds() {
        let m = model();
        let b = compute_bounds(&m);
        assert!((b.u_bound - 2.0 * 0.8).abs() < 1e-15);
    }

    #[test]
    fn exact_rule_attains_minimum() {
        testing::check_selector_attains_minimum(&model(), 7, 3.0);
    }

    #[test]
    fn smoothed_derivatives_match_finite_differences() {
        let m = model().with_rule(SwitchRule::Smoothed { temperature: 0.1 });
        testing::check_derivatives(&m, 8, 1.0, 1e-6);
    }

    #[test]
    fn smoothed_rule_approaches_exact() {
        let exact = model();
        let smooth = model().with_rule(SwitchRule::Smoothed { temperature: 1e-4 });
        let eta = [0.25; 4];
        let p = gaps([1.0, 0.3, 2.0, 1.0], DS);
        assert!((exact.hamiltonian(DS, &eta, &p) - smooth.hamiltonian(DS, &eta, &p)).abs() < 1e-3);
        let surrogate = model().with_training_temperature(0.02).unwrap().training_surrogate().unwrap();
        assert!(surrogate.training_surrogate().is_none());
    }

    #[test]
    fn rejects_negative_parameters() {
        let mut p = CyberParams::illustrative();
        p.rho = -1.0;
        assert!(CyberModel::new(p, 1.0).is_err());
    }
}
