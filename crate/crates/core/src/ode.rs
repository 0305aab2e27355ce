//! Time grids, RK4 integration of the Kolmogorov forward equation, and the
//! classical forward–backward solver for the MFG system that serves as the
//! reference for both neural schemes.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{generator_violation, kolmogorov_drift, MeanFieldModel};
use crate::simplex::{self, Distribution};

/// Row-sum tolerance for rate matrices handed to [`propagate_measure`].
const GENERATOR_TOLERANCE: f64 = 1e-9;

/// A partition `t_0 < t_1 < ... < t_N` of a time interval.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(start: f64, end: f64, intervals: usize) -> Result<Self> {
        if intervals == 0 || !(end > start) {
            return Err(Error::InvalidDimension(format!(
                "uniform grid on [{start}, {end}] with {intervals} intervals"
            )));
        }
        let h = (end - start) / intervals as f64;
        let mut nodes: Vec<f64> = (0..=intervals).map(|i| start + h * i as f64).collect();
        nodes[intervals] = end;
        Ok(TimeGrid { nodes })
    }

    /// Uniform grid on `[start, end]` whose step is as close as possible to
    /// `step` from below.
    pub fn with_step(start: f64, end: f64, step: f64) -> Result<Self> {
        let intervals = ((end - start) / step - 1e-9).ceil().max(1.0) as usize;
        Self::uniform(start, end, intervals)
    }

    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 || nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidDimension(
                "grid nodes must be strictly increasing with at least two entries".into(),
            ));
        }
        Ok(TimeGrid { nodes })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn num_intervals(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn start(&self) -> f64 {
        self.nodes[0]
    }

    pub fn end(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    pub fn increment(&self, i: usize) -> f64 {
        self.nodes[i + 1] - self.nodes[i]
    }

    /// `|pi|`, the largest increment.
    pub fn max_step(&self) -> f64 {
        self.nodes.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    /// The sub-grid `t_i < ... < t_N`.
    pub fn suffix(&self, i: usize) -> Result<TimeGrid> {
        TimeGrid::from_nodes(self.nodes[i..].to_vec())
    }

    /// Index of the last node `<= t` (clamped to the grid).
    pub fn left_index(&self, t: f64) -> usize {
        let n = self.num_intervals();
        match self
            .nodes
            .binary_search_by(|v| v.partial_cmp(&t).unwrap_or(std::cmp::Ordering::Less))
        {
            Ok(i) => i.min(n),
            Err(0) => 0,
            Err(i) => (i - 1).min(n),
        }
    }
}

/// One classical Runge–Kutta step of `dy/dt = f(t, y)` from `t` with step `h`
/// (negative `h` integrates backwards).
pub fn rk4_step<F>(mut f: F, t: f64, y: &[f64], h: f64, out: &mut [f64])
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    f(t, y, &mut k1);
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k1[i];
    }
    f(t + 0.5 * h, &tmp, &mut k2);
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k2[i];
    }
    f(t + 0.5 * h, &tmp, &mut k3);
    for i in 0..n {
        tmp[i] = y[i] + h * k3[i];
    }
    f(t + h, &tmp, &mut k4);
    for i in 0..n {
        out[i] = y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// Integrates `d rho_x / dt = sum_y rho_y Q_{yx}(t, rho)` from `t_start` to
/// `t_end` with `substeps` RK4 steps. `rate_field(t, rho, q)` fills the
/// row-major `d x d` generator `q`.
pub fn propagate_measure<F>(
    mut rate_field: F,
    kappa: &Distribution,
    t_start: f64,
    t_end: f64,
    substeps: usize,
) -> Result<Distribution>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let d = kappa.dim();
    if substeps == 0 {
        return Err(Error::InvalidDimension("propagation needs at least one substep".into()));
    }
    let h = (t_end - t_start) / substeps as f64;
    let mut q = vec![0.0; d * d];
    let mut rho = kappa.as_slice().to_vec();
    let mut next = vec![0.0; d];
    let mut bad_generator = None;
    for s in 0..substeps {
        let t = t_start + h * s as f64;
        rk4_step(
            |t, r, out| {
                rate_field(t, r, &mut q);
                let v = generator_violation(&q, d);
                if !(v <= GENERATOR_TOLERANCE) && bad_generator.is_none() {
                    bad_generator = Some(v);
                }
                for x in 0..d {
                    out[x] = (0..d).map(|y| r[y] * q[y * d + x]).sum();
                }
            },
            t,
            &rho,
            h,
            &mut next,
        );
        if let Some(v) = bad_generator {
            return Err(Error::Model(format!(
                "rate matrix is not a generator (violation {v:.3e})"
            )));
        }
        rho = Distribution::repair(std::mem::take(&mut next))?.into_inner();
        next = vec![0.0; d];
    }
    Distribution::new(rho)
}

/// Paired value and population paths on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub values_u: Vec<Vec<f64>>,
    pub values_mu: Vec<Distribution>,
}

impl Trajectory {
    pub fn num_states(&self) -> usize {
        self.values_mu[0].dim()
    }

    /// CSV with header `t,x,u,mu`, one row per node and state.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,x,u,mu")?;
        for (i, &t) in self.grid.nodes().iter().enumerate() {
            for x in 0..self.num_states() {
                writeln!(out, "{t},{x},{},{}", self.values_u[i][x], self.values_mu[i][x])?;
            }
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
    }

    /// Largest absolute difference in `u` and in `mu` against another
    /// trajectory on the same grid.
    pub fn sup_distance(&self, other: &Trajectory) -> (f64, f64) {
        let mut du = 0.0_f64;
        let mut dm = 0.0_f64;
        for i in 0..self.values_u.len().min(other.values_u.len()) {
            for x in 0..self.num_states() {
                du = du.max((self.values_u[i][x] - other.values_u[i][x]).abs());
                dm = dm.max((self.values_mu[i][x] - other.values_mu[i][x]).abs());
            }
        }
        (du, dm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardOptions {
    /// Initial relaxation `omega` in `(0, 1]`; halved after three consecutive
    /// residual increases.
    pub damping: f64,
    /// Sup-norm tolerance on successive population iterates.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PicardOptions {
    fn default() -> Self {
        PicardOptions {
            damping: 0.5,
            tolerance: 1e-8,
            max_iterations: 1000,
        }
    }
}

/// Cubic Hermite interpolation on `[0, h]` at offset `s` from the left node.
fn hermite(y0: &[f64], m0: &[f64], y1: &[f64], m1: &[f64], h: f64, s: f64, out: &mut [f64]) {
    let r = s / h;
    let r2 = r * r;
    let r3 = r2 * r;
    let h00 = 2.0 * r3 - 3.0 * r2 + 1.0;
    let h10 = r3 - 2.0 * r2 + r;
    let h01 = -2.0 * r3 + 3.0 * r2;
    let h11 = r3 - r2;
    for i in 0..out.len() {
        out[i] = h00 * y0[i] + h10 * h * m0[i] + h01 * y1[i] + h11 * h * m1[i];
    }
}

/// Node values and time derivatives of a path on a grid.
struct NodePath {
    values: Vec<Vec<f64>>,
    slopes: Vec<Vec<f64>>,
}

impl NodePath {
    fn at(&self, grid: &TimeGrid, j: usize, t: f64, out: &mut [f64]) {
        hermite(
            &self.values[j],
            &self.slopes[j],
            &self.values[j + 1],
            &self.slopes[j + 1],
            grid.increment(j),
            t - grid.nodes()[j],
            out,
        );
    }
}

fn backward_rhs(model: &dyn MeanFieldModel, mu: &[f64], u: &[f64], out: &mut [f64]) {
    let mut p = vec![0.0; u.len()];
    for x in 0..u.len() {
        simplex::delta_into(u, x, &mut p);
        out[x] = -model.hamiltonian_bar(x, mu, &p);
    }
}

/// Value function given a population path: `du/dt = -Hbar(x, mu, delta(u, x))`
/// backward from `u(T) = g(., mu(T))`.
fn solve_backward(model: &dyn MeanFieldModel, grid: &TimeGrid, mu: &NodePath) -> NodePath {
    let d = model.num_states();
    let n = grid.num_intervals();
    let mut values = vec![vec![0.0; d]; n + 1];
    let mut slopes = vec![vec![0.0; d]; n + 1];
    for x in 0..d {
        values[n][x] = model.terminal_cost(x, &mu.values[n]);
    }
    backward_rhs(model, &mu.values[n], &values[n], &mut slopes[n]);
    let mut mu_t = vec![0.0; d];
    for j in (0..n).rev() {
        let (head, tail) = values.split_at_mut(j + 1);
        rk4_step(
            |t, u, out| {
                mu.at(grid, j, t, &mut mu_t);
                backward_rhs(model, &mu_t, u, out);
            },
            grid.nodes()[j + 1],
            &tail[0],
            -grid.increment(j),
            &mut head[j],
        );
        backward_rhs(model, &mu.values[j], &values[j], &mut slopes[j]);
    }
    NodePath { values, slopes }
}

/// Population path given a value path, started from `eta`.
fn solve_forward(
    model: &dyn MeanFieldModel,
    grid: &TimeGrid,
    eta: &Distribution,
    u: &NodePath,
) -> Result<NodePath> {
    let d = model.num_states();
    let n = grid.num_intervals();
    let mut values = vec![vec![0.0; d]; n + 1];
    let mut slopes = vec![vec![0.0; d]; n + 1];
    values[0] = eta.as_slice().to_vec();
    kolmogorov_drift(model, &values[0], &u.values[0], &mut slopes[0]);
    let mut u_t = vec![0.0; d];
    let mut next = vec![0.0; d];
    for j in 0..n {
        rk4_step(
            |t, rho, out| {
                u.at(grid, j, t, &mut u_t);
                kolmogorov_drift(model, rho, &u_t, out);
            },
            grid.nodes()[j],
            &values[j],
            grid.increment(j),
            &mut next,
        );
        values[j + 1] = Distribution::repair(next.clone())?.into_inner();
        let (head, tail) = slopes.split_at_mut(j + 1);
        let _ = head;
        kolmogorov_drift(model, &values[j + 1], &u.values[j + 1], &mut tail[0]);
    }
    Ok(NodePath { values, slopes })
}

/// Solves the MFG system on `grid` (which must end at the model horizon) for
/// the initial population `eta` at `grid.start()`, by damped Picard iteration
/// on the population path.
pub fn solve_mfg_system(
    model: &dyn MeanFieldModel,
    eta: &Distribution,
    grid: &TimeGrid,
    options: &PicardOptions,
) -> Result<Trajectory> {
    let d = model.num_states();
    if eta.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: eta.dim(),
        });
    }
    if (grid.end() - model.horizon()).abs() > 1e-12 * model.horizon().max(1.0) {
        return Err(Error::InvalidDimension(format!(
            "grid ends at {} but the horizon is {}",
            grid.end(),
            model.horizon()
        )));
    }
    if !(options.damping > 0.0 && options.damping <= 1.0) {
        return Err(Error::Config(format!("damping {} outside (0, 1]", options.damping)));
    }
    let n = grid.num_intervals();
    let mut mu = NodePath {
        values: vec![eta.as_slice().to_vec(); n + 1],
        slopes: vec![vec![0.0; d]; n + 1],
    };
    let mut omega = options.damping;
    let mut last_residual = f64::INFINITY;
    let mut increases = 0;
    for _ in 0..options.max_iterations {
        let u = solve_backward(model, grid, &mu);
        let fresh = solve_forward(model, grid, eta, &u)?;
        let residual = fresh
            .values
            .iter()
            .zip(&mu.values)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).abs()))
            .fold(0.0, f64::max);
        if !residual.is_finite() {
            return Err(Error::IntegratorDiverged("non-finite Picard residual".into()));
        }
        if residual < options.tolerance {
            let u = solve_backward(model, grid, &fresh);
            return Ok(Trajectory {
                grid: grid.clone(),
                values_u: u.values,
                values_mu: fresh
                    .values
                    .into_iter()
                    .map(Distribution::repair)
                    .collect::<Result<_>>()?,
            });
        }
        if residual > last_residual {
            increases += 1;
            if increases >= 3 {
                omega *= 0.5;
                increases = 0;
            }
        } else {
            increases = 0;
        }
        last_residual = residual;
        for (m, f) in mu.values.iter_mut().zip(&fresh.values) {
            for (a, b) in m.iter_mut().zip(f) {
                *a = (1.0 - omega) * *a + omega * b;
            }
        }
        for (m, f) in mu.slopes.iter_mut().zip(&fresh.slopes) {
            for (a, b) in m.iter_mut().zip(f) {
                *a = (1.0 - omega) * *a + omega * b;
            }
        }
    }
    Err(Error::NonConvergence {
        iterations: options.max_iterations,
        residual: last_residual,
    })
}

/// `U(t_0, ., eta) = u^{t_0, eta}(t_0, .)` on a uniform grid from `t0` to the
/// horizon with step at most `step`.
pub fn master_value(
    model: &dyn MeanFieldModel,
    t0: f64,
    eta: &Distribution,
    step: f64,
    options: &PicardOptions,
) -> Result<Vec<f64>> {
    let horizon = model.horizon();
    if t0 >= horizon - 1e-14 {
        return Ok((0..model.num_states())
            .map(|x| model.terminal_cost(x, eta.as_slice()))
            .collect());
    }
    let grid = TimeGrid::with_step(t0, horizon, step)?;
    Ok(solve_mfg_system(model, eta, &grid, options)?.values_u.swap_remove(0))
}

/// `U(t_i, x, eta)` for every grid node and every requested `eta`.
#[derive(Debug, Clone)]
pub struct OracleTable {
    pub times: Vec<f64>,
    pub etas: Vec<Distribution>,
    /// `values[i][k]` holds `U(times[i], ., etas[k])`, or the solver error.
    pub values: Vec<Vec<std::result::Result<Vec<f64>, String>>>,
}

impl OracleTable {
    pub fn failures(&self) -> usize {
        self.values.iter().flatten().filter(|v| v.is_err()).count()
    }
}

/// Tabulates the master-equation solution from the classical solver. Each
/// entry re-solves on the grid suffix starting at its node, so entries are
/// consistent with full-grid solves. Failures are recorded per entry.
pub fn master_surface_from_oracle(
    model: &dyn MeanFieldModel,
    grid: &TimeGrid,
    etas: &[Distribution],
    options: &PicardOptions,
    threads: usize,
) -> Result<OracleTable> {
    use rayon::prelude::*;

    let n = grid.num_intervals();
    let jobs: Vec<(usize, usize)> = (0..=n)
        .flat_map(|i| (0..etas.len()).map(move |k| (i, k)))
        .collect();
    let solve = |&(i, k): &(usize, usize)| -> std::result::Result<Vec<f64>, String> {
        let eta = &etas[k];
        if i == n {
            return Ok((0..model.num_states())
                .map(|x| model.terminal_cost(x, eta.as_slice()))
                .collect());
        }
        let sub = grid.suffix(i).map_err(|e| e.to_string())?;
        solve_mfg_system(model, eta, &sub, options)
            .map(|mut tr| tr.values_u.swap_remove(0))
            .map_err(|e| e.to_string())
    };
    let flat: Vec<_> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(solve).collect())
    } else {
        jobs.iter().map(solve).collect()
    };
    let mut values = Vec::with_capacity(n + 1);
    let mut it = flat.into_iter();
    for _ in 0..=n {
        values.push(it.by_ref().take(etas.len()).collect());
    }
    Ok(OracleTable {
        times: grid.nodes().to_vec(),
        etas: etas.to_vec(),
        values,
    })
}

/// Empirical Lipschitz constant of the oracle `U` in `eta`: the largest
/// `|U(t, x, a) - U(t, x, b)| / |a - b|` over `pairs` random `(t, a, b)`.
pub fn oracle_lipschitz_estimate(
    model: &dyn MeanFieldModel,
    pairs: usize,
    seed: u64,
    step: f64,
    options: &PicardOptions,
) -> Result<f64> {
    let d = model.num_states();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = 0.0_f64;
    for _ in 0..pairs {
        let t = rng.random_range(0.0..model.horizon());
        let a = simplex::sample_uniform(d, &mut rng)?;
        let b = simplex::sample_uniform(d, &mut rng)?;
        let dist = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt();
        if dist < 1e-9 {
            continue;
        }
        let ua = master_value(model, t, &a, step, options)?;
        let ub = master_value(model, t, &b, step, options)?;
        for x in 0..d {
            best = best.max((ua[x] - ub[x]).abs() / dist);
        }
    }
    Ok(best)
}
