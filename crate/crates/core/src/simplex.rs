//! Points of the probability simplex over `d` states, uniform sampling, and the
//! finite-difference operators used throughout the crate.
//!
//! States are 0-based indices `0..d` everywhere in the API.

use rand::Rng;
use rand_distr::Exp1;

use crate::error::{Error, Result};

/// Largest tolerated negative component of a distribution.
pub const NEGATIVITY_SLACK: f64 = 1e-12;
/// Tolerance on `|sum - 1|`.
pub const SUM_TOLERANCE: f64 = 1e-10;
/// Largest violation [`Distribution::repair`] will silently fix.
pub const REPAIR_LIMIT: f64 = 1e-7;

/// A probability vector over `d` states.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    /// Validates `weights` against the simplex tolerances.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidDimension("distribution over zero states".into()));
        }
        let violation = simplex_violation(&weights);
        if violation.is_nan() || violation > SUM_TOLERANCE.max(NEGATIVITY_SLACK) {
            return Err(Error::NotADistribution(format!("{weights:?}")));
        }
        if weights.iter().any(|&w| w < -NEGATIVITY_SLACK) {
            return Err(Error::NotADistribution(format!("{weights:?}")));
        }
        let mut weights = weights;
        for w in &mut weights {
            *w = w.max(0.0);
        }
        Ok(Distribution(weights))
    }

    /// Clips small negative entries to zero and renormalizes, provided the
    /// input is within [`REPAIR_LIMIT`] of the simplex.
    pub fn repair(mut weights: Vec<f64>) -> Result<Self> {
        let violation = simplex_violation(&weights);
        if !(violation <= REPAIR_LIMIT) {
            return Err(Error::IntegratorDiverged(format!(
                "simplex violation {violation:.3e} exceeds {REPAIR_LIMIT:e}"
            )));
        }
        for w in &mut weights {
            *w = w.max(0.0);
        }
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        Ok(Distribution(weights))
    }

    /// Parses comma-separated weights, normalizing if they are within
    /// [`SUM_TOLERANCE`] of the simplex.
    pub fn parse(text: &str) -> Result<Self> {
        let weights = text
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad distribution component {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut dist = Distribution::new(weights)?;
        let total: f64 = dist.0.iter().sum();
        for w in &mut dist.0 {
            *w /= total;
        }
        Ok(dist)
    }

    pub fn uniform(d: usize) -> Self {
        assert!(d > 0);
        Distribution(vec![1.0 / d as f64; d])
    }

    pub fn vertex(d: usize, x: usize) -> Self {
        assert!(x < d);
        let mut w = vec![0.0; d];
        w[x] = 1.0;
        Distribution(w)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for Distribution {
    type Output = f64;

    fn index(&self, x: usize) -> &f64 {
        &self.0[x]
    }
}

impl AsRef<[f64]> for Distribution {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Distance of `weights` from the simplex: the larger of `|sum - 1|` and the
/// most negative component's magnitude. NaN propagates.
pub fn simplex_violation(weights: &[f64]) -> f64 {
    let sum: f64 = weights.iter().sum();
    let neg = weights.iter().fold(0.0_f64, |acc, &w| acc.max(-w));
    if sum.is_nan() {
        return f64::NAN;
    }
    (sum - 1.0).abs().max(neg)
}

/// The direction `e_to - e_from` along which measure derivatives are taken.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexDirection {
    pub from_state: usize,
    pub to_state: usize,
    pub vector: Vec<f64>,
}

impl SimplexDirection {
    pub fn new(d: usize, from_state: usize, to_state: usize) -> Result<Self> {
        if from_state >= d || to_state >= d {
            return Err(Error::InvalidDimension(format!(
                "direction ({from_state}, {to_state}) outside {d} states"
            )));
        }
        let mut vector = vec![0.0; d];
        vector[to_state] += 1.0;
        vector[from_state] -= 1.0;
        Ok(SimplexDirection {
            from_state,
            to_state,
            vector,
        })
    }
}

/// Draws from the uniform law on the simplex by normalizing `d` independent
/// rate-1 exponentials.
pub fn sample_uniform<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<Distribution> {
    if d == 0 {
        return Err(Error::InvalidDimension("cannot sample a 0-state simplex".into()));
    }
    let mut w: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    Ok(Distribution(w))
}

/// `delta(b, x)[y] = b[y] - b[x]`.
pub fn delta(values: &[f64], x: usize) -> Vec<f64> {
    let bx = values[x];
    values.iter().map(|&by| by - bx).collect()
}

/// In-place variant of [`delta`].
pub fn delta_into(values: &[f64], x: usize, out: &mut [f64]) {
    let bx = values[x];
    for (o, &by) in out.iter_mut().zip(values) {
        *o = by - bx;
    }
}

/// Finite-difference estimate of the derivative of `f` at `eta` along `dir`.
///
/// Central differences are used when both `eta ± h·dir` stay on the simplex;
/// otherwise a second-order one-sided stencil on the feasible side.
pub fn directional_derivative<F>(
    f: F,
    eta: &Distribution,
    dir: &SimplexDirection,
    h: f64,
) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if dir.vector.len() != eta.dim() {
        return Err(Error::DimensionMismatch {
            expected: eta.dim(),
            actual: dir.vector.len(),
        });
    }
    if dir.from_state == dir.to_state {
        return Ok(0.0);
    }
    let shifted = |s: f64| -> Vec<f64> {
        eta.as_slice()
            .iter()
            .zip(&dir.vector)
            .map(|(&e, &v)| e + s * v)
            .collect()
    };
    let feasible = |s: f64| shifted(s).iter().all(|&w| w >= -NEGATIVITY_SLACK);

    if feasible(h) && feasible(-h) {
        Ok((f(&shifted(h)) - f(&shifted(-h))) / (2.0 * h))
    } else if feasible(2.0 * h) {
        Ok((-3.0 * f(&shifted(0.0)) + 4.0 * f(&shifted(h)) - f(&shifted(2.0 * h))) / (2.0 * h))
    } else if feasible(-2.0 * h) {
        Ok((3.0 * f(&shifted(0.0)) - 4.0 * f(&shifted(-h)) + f(&shifted(-2.0 * h))) / (2.0 * h))
    } else {
        Err(Error::SimplexBoundary)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_state_simplex_is_a_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_uniform(1, &mut rng).unwrap().as_slice(), &[1.0]);
        assert!(matches!(
            sample_uniform(0, &mut rng),
            Err(Error::InvalidDimension(_))
        ));
    }

    #[test]
    fn two_state_mean_is_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| sample_uniform(2, &mut rng).unwrap()[0])
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
    }

    #[test]
    fn three_state_marginal_cdf() {
        // kappa_1 + kappa_2 ~ Beta(2, 1), so P(. <= 0.5) = 0.25.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| {
                let k = sample_uniform(3, &mut rng).unwrap();
                k[0] + k[1] <= 0.5
            })
            .count();
        let cdf = hits as f64 / n as f64;
        assert!((cdf - 0.25).abs() < 0.01, "{cdf}");
    }

    #[test]
    fn delta_examples() {
        assert_eq!(delta(&[1.0, 2.0], 0), vec![0.0, 1.0]);
        assert_eq!(delta(&[3.0, -1.0, 2.0], 1), vec![4.0, 0.0, 3.0]);
        assert!(delta(&[7.0; 4], 2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn derivative_of_linear_and_constant_fields() {
        let eta = Distribution::new(vec![0.2, 0.3, 0.5]).unwrap();
        let dir = SimplexDirection::new(3, 0, 2).unwrap();
        let d = directional_derivative(|e| e[2], &eta, &dir, 1e-4).unwrap();
        assert!((d - 1.0).abs() < 1e-6);
        let d = directional_derivative(|_| 4.0, &eta, &dir, 1e-4).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn derivative_of_quadratic_field() {
        let f = |e: &[f64]| e[0] * e[1];
        let dir = SimplexDirection::new(3, 0, 1).unwrap();
        let eta = Distribution::uniform(3);
        let d = directional_derivative(f, &eta, &dir, 1e-4).unwrap();
        assert!(d.abs() < 1e-6);
        // Asymmetric point: D_{01} f = eta_0 - eta_1.
        let eta = Distribution::new(vec![0.6, 0.1, 0.3]).unwrap();
        let d = directional_derivative(f, &eta, &dir, 1e-4).unwrap();
        assert!((d - 0.5).abs() < 1e-6, "{d}");
    }

    #[test]
    fn derivative_at_the_boundary_is_one_sided() {
        let eta = Distribution::vertex(2, 1);
        // Moving mass 1 -> 0 is feasible, the reverse is not.
        let dir = SimplexDirection::new(2, 1, 0).unwrap();
        let d = directional_derivative(|e| e[0] * e[0] + e[0], &eta, &dir, 1e-4).unwrap();
        assert!((d - 1.0).abs() < 1e-6, "{d}");
        let corner = Distribution::vertex(3, 2);
        let dir = SimplexDirection::new(3, 0, 1).unwrap();
        assert!(matches!(
            directional_derivative(|e| e[0], &corner, &dir, 1e-4),
            Err(Error::SimplexBoundary)
        ));
    }

    #[test]
    fn repair_policy() {
        let d = Distribution::repair(vec![0.5 + 5e-8, 0.5 - 1e-9, -1e-9]).unwrap();
        assert!((d.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(d.as_slice().iter().all(|&w| w >= 0.0));
        assert!(matches!(
            Distribution::repair(vec![0.6, 0.5]),
            Err(Error::IntegratorDiverged(_))
        ));
        assert!(Distribution::repair(vec![f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn parse_normalizes() {
        let d = Distribution::parse("0.5, 0.5").unwrap();
        assert_eq!(d.as_slice(), &[0.5, 0.5]);
        assert!(Distribution::parse("0.5,0.6").is_err());
        assert!(Distribution::parse("a,b").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn samples_are_distributions(seed in any::<u64>(), d in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = sample_uniform(d, &mut rng).unwrap();
            prop_assert!(Distribution::new(k.into_inner()).is_ok());
        }
    }

    proptest! {
        #[test]
        fn delta_is_linear_and_bounded(
            b in prop::collection::vec(-10.0f64..10.0, 1..8),
            c in prop::collection::vec(-10.0f64..10.0, 8),
            s in -3.0f64..3.0,
            x_seed in 0usize..100,
        ) {
            let d = b.len();
            let x = x_seed % d;
            let c = &c[..d];
            let lhs = delta(&b.iter().zip(c).map(|(p, q)| p + s * q).collect::<Vec<_>>(), x);
            let (db, dc) = (delta(&b, x), delta(c, x));
            for y in 0..d {
                prop_assert!((lhs[y] - (db[y] + s * dc[y])).abs() < 1e-9);
            }
            prop_assert_eq!(db[x], 0.0);
            let norm = db.iter().map(|v| v * v).sum::<f64>().sqrt();
            let max = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            // Sharp form of the sup bound; it coincides with sqrt(2d) max at d = 2.
            prop_assert!(norm <= 2.0 * ((d - 1) as f64).sqrt() * max + 1e-12);
        }

        #[test]
        fn affine_fields_have_exact_slopes(
            coef in prop::collection::vec(-5.0f64..5.0, 4),
            seed in any::<u64>(),
            from in 0usize..4,
            to in 0usize..4,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let eta = sample_uniform(4, &mut rng).unwrap();
            let dir = SimplexDirection::new(4, from, to).unwrap();
            let f = |e: &[f64]| 1.5 + e.iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>();
            match directional_derivative(f, &eta, &dir, 1e-3) {
                Ok(v) => {
                    let exact = if from == to { 0.0 } else { coef[to] - coef[from] };
                    prop_assert!((v - exact).abs() < 1e-8, "{} vs {}", v, exact);
                }
                Err(Error::SimplexBoundary) => {}
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }
    }
}
