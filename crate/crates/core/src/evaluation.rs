//! Comparing surfaces, reconstructing equilibria from a surface, the
//! sampled-maximum rate study, and CSV exports for plots.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Exp1};

use crate::dbme::DbmeSolution;
use crate::dgme::{dgme_max_loss, sample_points, train_dgme_with, DgmeConfig};
use crate::error::{Error, Result};
use crate::model::{MeanFieldModel, QuadraticModel};
use crate::neural::NeuralSurface;
use crate::ode::{rk4_step, solve_mfg_system, PicardOptions, TimeGrid, Trajectory};
use crate::simplex::{self, Distribution};

/// Anything that can be evaluated as `U(t, x, eta)`.
pub trait ValueSurface: Sync {
    fn num_states(&self) -> usize;

    fn value(&self, t: f64, x: usize, eta: &[f64]) -> Result<f64>;

    fn values(&self, t: f64, eta: &[f64]) -> Result<Vec<f64>> {
        (0..self.num_states()).map(|x| self.value(t, x, eta)).collect()
    }

    /// `U(t0, ., mu)` and the population at `t1` under the rates the surface
    /// induces. Defaults to [`rk4_advance`].
    fn advance(&self, model: &dyn MeanFieldModel, t0: f64, t1: f64, mu: &Distribution) -> Result<(Vec<f64>, Distribution)> {
        rk4_advance(self, model, t0, t1, mu)
    }
}

/// One RK4 step of the population with rates from `surface` at the stage
/// times, together with `U(t0, ., mu)`.
pub fn rk4_advance<S: ValueSurface + ?Sized>(
    surface: &S,
    model: &dyn MeanFieldModel,
    t0: f64,
    t1: f64,
    mu: &Distribution,
) -> Result<(Vec<f64>, Distribution)> {
    let d = model.num_states();
    let now = surface.values(t0, mu.as_slice())?;
    let mut failure = None;
    let mut next = vec![0.0; d];
    rk4_step(
        |t, rho, out| {
            match surface.values(t, rho) {
                Ok(u) => crate::model::kolmogorov_drift(model, rho, &u, out),
                Err(e) => {
                    failure.get_or_insert(e);
                    out.iter_mut().for_each(|o| *o = 0.0);
                }
            };
        },
        t0,
        mu.as_slice(),
        t1 - t0,
        &mut next,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((now, Distribution::repair(next)?))
}

impl<T: ValueSurface + ?Sized> ValueSurface for &T {
    fn num_states(&self) -> usize {
        (**self).num_states()
    }

    fn value(&self, t: f64, x: usize, eta: &[f64]) -> Result<f64> {
        (**self).value(t, x, eta)
    }

    fn values(&self, t: f64, eta: &[f64]) -> Result<Vec<f64>> {
        (**self).values(t, eta)
    }

    fn advance(&self, model: &dyn MeanFieldModel, t0: f64, t1: f64, mu: &Distribution) -> Result<(Vec<f64>, Distribution)> {
        (**self).advance(model, t0, t1, mu)
    }
}

impl ValueSurface for NeuralSurface {
    fn num_states(&self) -> usize {
        NeuralSurface::num_states(self)
    }

    fn value(&self, t: f64, x: usize, eta: &[f64]) -> Result<f64> {
        self.evaluate(&self.encode(t, x, eta))
    }

    fn values(&self, t: f64, eta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.values_all_states(t, eta))
    }
}

/// A DBME solution as a surface, piecewise constant in time.
pub struct DbmeSurface<'a> {
    pub solution: &'a DbmeSolution,
    pub model: &'a dyn MeanFieldModel,
}

impl ValueSurface for DbmeSurface<'_> {
    fn num_states(&self) -> usize {
        self.model.num_states()
    }

    fn value(&self, t: f64, x: usize, eta: &[f64]) -> Result<f64> {
        Ok(self.solution.value(self.model, t, x, eta))
    }
}

/// The classical solver as a surface: every evaluation solves the MFG system
/// from `(t, eta)` on a uniform grid with step at most `step`.
pub struct OracleSurface<'a> {
    pub model: &'a dyn MeanFieldModel,
    pub step: f64,
    pub options: PicardOptions,
}

impl<'a> OracleSurface<'a> {
    pub fn new(model: &'a dyn MeanFieldModel, step: f64) -> Self {
        OracleSurface {
            model,
            step,
            options: PicardOptions::default(),
        }
    }

    fn solve_from(&self, t: f64, eta: &[f64]) -> Result<Option<Trajectory>> {
        if t >= self.model.horizon() - 1e-12 {
            return Ok(None);
        }
        let grid = TimeGrid::with_step(t, self.model.horizon(), self.step)?;
        let eta = Distribution::repair(eta.to_vec())?;
        solve_mfg_system(self.model, &eta, &grid, &self.options).map(Some)
    }
}

impl ValueSurface for OracleSurface<'_> {
    fn num_states(&self) -> usize {
        self.model.num_states()
    }

    fn value(&self, t: f64, x: usize, eta: &[f64]) -> Result<f64> {
        Ok(self.values(t, eta)?[x])
    }

    fn values(&self, t: f64, eta: &[f64]) -> Result<Vec<f64>> {
        match self.solve_from(t, eta)? {
            Some(tr) => Ok(tr.values_u[0].clone()),
            None => Ok((0..self.model.num_states())
                .map(|x| self.model.terminal_cost(x, eta))
                .collect()),
        }
    }

    /// Uses the solver's own flow from `(t0, mu)`, so that reconstruction on
    /// the solver grid is the discrete consistency relation.
    fn advance(&self, model: &dyn MeanFieldModel, t0: f64, t1: f64, mu: &Distribution) -> Result<(Vec<f64>, Distribution)> {
        let tr = self
            .solve_from(t0, mu.as_slice())?
            .ok_or_else(|| Error::InvalidDimension("cannot advance past the horizon".into()))?;
        let nodes = tr.grid.nodes();
        if (nodes[1] - t1).abs() <= 1e-12 * t1.abs().max(1.0) {
            return Ok((tr.values_u[0].clone(), tr.values_mu[1].clone()));
        }
        rk4_advance(self, model, t0, t1, mu)
    }
}

/// Wraps a closure as a surface.
pub struct FnSurface<F> {
    pub num_states: usize,
    pub f: F,
}

impl<F: Fn(f64, usize, &[f64]) -> f64 + Sync> ValueSurface for FnSurface<F> {
    fn num_states(&self) -> usize {
        self.num_states
    }

    fn value(&self, t: f64, x: usize, eta: &[f64]) -> Result<f64> {
        Ok((self.f)(t, x, eta))
    }
}

/// Integrates the population forward on `grid` with rates read off `surface`
/// and records `u(t, x) = U(t, x, mu(t))`.
pub fn reconstruct_equilibrium(
    surface: &dyn ValueSurface,
    model: &dyn MeanFieldModel,
    eta: &Distribution,
    grid: &TimeGrid,
) -> Result<Trajectory> {
    let n = grid.num_intervals();
    let mut values_u = Vec::with_capacity(n + 1);
    let mut values_mu = Vec::with_capacity(n + 1);
    let mut mu = eta.clone();
    for j in 0..n {
        let (u, next) = surface.advance(model, grid.nodes()[j], grid.nodes()[j + 1], &mu)?;
        values_u.push(u);
        values_mu.push(mu);
        mu = next;
    }
    values_u.push(surface.values(grid.end(), mu.as_slice())?);
    values_mu.push(mu);
    Ok(Trajectory {
        grid: grid.clone(),
        values_u,
        values_mu,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub t: f64,
    pub mean: f64,
    pub sup: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    pub samples: usize,
    pub seed: u64,
}

impl ComparisonReport {
    pub fn max_mean(&self) -> f64 {
        self.rows.iter().map(|r| r.mean).fold(0.0, f64::max)
    }

    pub fn max_sup(&self) -> f64 {
        self.rows.iter().map(|r| r.sup).fold(0.0, f64::max)
    }

    /// Mean of the per-time means.
    pub fn overall_mean(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.mean).sum::<f64>() / self.rows.len() as f64
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,mean_abs_diff,sup_abs_diff")?;
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.t, r.mean, r.sup)?;
        }
        Ok(())
    }
}

/// Mean and sup of `|a - b|` over `n_samples` uniform `(x, eta)` at each
/// time; the same points are used at every time. Point evaluations run on
/// `threads` workers; the reductions are sequential, so results do not
/// depend on the worker count.
pub fn compare_surfaces(
    a: &dyn ValueSurface,
    b: &dyn ValueSurface,
    eval_times: &[f64],
    n_samples: usize,
    seed: u64,
    threads: usize,
) -> Result<ComparisonReport> {
    use rayon::prelude::*;

    let d = a.num_states();
    if b.num_states() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: b.num_states(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<(usize, Distribution)> = (0..n_samples)
        .map(|_| {
            let x = rng.random_range(0..d);
            simplex::sample_uniform(d, &mut rng).map(|eta| (x, eta))
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(f64, &(usize, Distribution))> = eval_times
        .iter()
        .flat_map(|&t| points.iter().map(move |p| (t, p)))
        .collect();
    let diff = |&(t, (x, eta)): &(f64, &(usize, Distribution))| -> Result<f64> {
        Ok((a.value(t, *x, eta.as_slice())? - b.value(t, *x, eta.as_slice())?).abs())
    };
    let diffs: Vec<Result<f64>> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(diff).collect())
    } else {
        jobs.iter().map(diff).collect()
    };
    let diffs = diffs.into_iter().collect::<Result<Vec<f64>>>()?;
    let rows = eval_times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let chunk = &diffs[i * n_samples..(i + 1) * n_samples];
            let mean = if chunk.is_empty() {
                0.0
            } else {
                chunk.iter().sum::<f64>() / chunk.len() as f64
            };
            let sup = chunk.iter().copied().fold(0.0, f64::max);
            ComparisonRow { t, mean, sup }
        })
        .collect();
    Ok(ComparisonReport {
        rows,
        samples: n_samples,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingStudy {
    pub d: usize,
    /// `(K, mean of the minimum)`.
    pub rows: Vec<(usize, f64)>,
    /// Least-squares slope of `log mean` against `log K`.
    pub slope: f64,
}

impl SamplingStudy {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "d,K,mean_min_l1")?;
        for (k, m) in &self.rows {
            writeln!(out, "{},{k},{m}", self.d)?;
        }
        Ok(())
    }
}

/// Monte Carlo estimate of `E[min over K uniform simplex samples of the L1
/// norm of the first d-1 coordinates]`, for each `K`, plus the fitted
/// log-log slope.
pub fn sampling_rate_study(d: usize, ks: &[usize], trials: usize, seed: u64) -> Result<SamplingStudy> {
    if d < 2 {
        return Err(Error::InvalidDimension(format!("rate study needs d >= 2, got {d}")));
    }
    if ks.is_empty() || ks.contains(&0) || trials == 0 {
        return Err(Error::InvalidDimension("rate study needs K >= 1 and trials >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut total = 0.0;
        for _ in 0..trials {
            let mut best = f64::INFINITY;
            for _ in 0..k {
                // First d-1 coordinates of an Exp(1)-normalized draw.
                let mut head = 0.0;
                for _ in 0..d - 1 {
                    let e: f64 = Exp1.sample(&mut rng);
                    head += e;
                }
                let last: f64 = Exp1.sample(&mut rng);
                best = best.min(head / (head + last));
            }
            total += best;
        }
        rows.push((k, total / trials as f64));
    }
    let slope = log_log_slope(&rows);
    Ok(SamplingStudy { d, rows, slope })
}

fn log_log_slope(rows: &[(usize, f64)]) -> f64 {
    if rows.len() < 2 {
        return 0.0;
    }
    let pts: Vec<(f64, f64)> = rows.iter().map(|&(k, m)| ((k as f64).ln(), m.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Output layouts for plotting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FigureKind {
    /// `t,x,eta1,value` on 101 values of `eta1` (d = 2).
    D2Lines,
    /// `t,x,eta1,eta2,value` on a barycentric grid (d = 3).
    D3SimplexHeat,
    /// `t,x,u,mu`.
    Trajectory,
    /// `epoch,mean_loss`.
    LossCurves,
    /// `d,seconds,iterations,reached,ratio`.
    RuntimeScaling,
}

impl std::str::FromStr for FigureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "d2-lines" => Ok(FigureKind::D2Lines),
            "d3-simplex-heat" => Ok(FigureKind::D3SimplexHeat),
            "trajectory" => Ok(FigureKind::Trajectory),
            "loss-curves" => Ok(FigureKind::LossCurves),
            "runtime-scaling" => Ok(FigureKind::RuntimeScaling),
            other => Err(Error::Config(format!(
                "unknown figure kind {other:?} (expected d2-lines, d3-simplex-heat, trajectory, loss-curves or runtime-scaling)"
            ))),
        }
    }
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(f))
}

/// `U(t, x, (e, 1 - e))` for 101 equispaced `e` at each time and state.
pub fn write_d2_lines<W: Write>(surface: &dyn ValueSurface, times: &[f64], mut out: W) -> Result<()> {
    if surface.num_states() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            actual: surface.num_states(),
        });
    }
    writeln!(out, "t,x,eta1,value").map_err(io_err)?;
    for &t in times {
        for x in 0..2 {
            for i in 0..=100 {
                let e = i as f64 / 100.0;
                let v = surface.value(t, x, &[e, 1.0 - e])?;
                writeln!(out, "{t},{x},{e},{v}").map_err(io_err)?;
            }
        }
    }
    Ok(())
}

/// `U(t, x, eta)` on the barycentric grid `eta = (i, j, n - i - j) / n`.
pub fn write_d3_simplex_heat<W: Write>(
    surface: &dyn ValueSurface,
    times: &[f64],
    resolution: usize,
    mut out: W,
) -> Result<()> {
    if surface.num_states() != 3 {
        return Err(Error::DimensionMismatch {
            expected: 3,
            actual: surface.num_states(),
        });
    }
    if resolution == 0 {
        return Err(Error::InvalidDimension("resolution must be positive".into()));
    }
    writeln!(out, "t,x,eta1,eta2,value").map_err(io_err)?;
    let n = resolution as f64;
    for &t in times {
        for x in 0..3 {
            for i in 0..=resolution {
                for j in 0..=resolution - i {
                    let (e1, e2) = (i as f64 / n, j as f64 / n);
                    let e3 = ((resolution - i - j) as f64 / n).max(0.0);
                    let v = surface.value(t, x, &[e1, e2, e3])?;
                    writeln!(out, "{t},{x},{e1},{e2},{v}").map_err(io_err)?;
                }
            }
        }
    }
    Ok(())
}

pub fn write_loss_curves<W: Write>(epoch_losses: &[f64], mut out: W) -> Result<()> {
    writeln!(out, "epoch,mean_loss").map_err(io_err)?;
    for (i, l) in epoch_losses.iter().enumerate() {
        writeln!(out, "{i},{l}").map_err(io_err)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeRow {
    pub d: usize,
    pub seconds: f64,
    pub iterations: usize,
    pub reached: bool,
}

/// DGME wall time on the quadratic model for each `d` until the epoch-mean
/// loss drops below `target_loss` (or the configured iterations run out).
pub fn runtime_scaling(dims: &[usize], target_loss: f64, b: f64, horizon: f64, base: &DgmeConfig) -> Result<Vec<RuntimeRow>> {
    let mut rows = Vec::with_capacity(dims.len());
    for &d in dims {
        let model = QuadraticModel::new(d, b, horizon)?;
        let start = Instant::now();
        let mut window = Vec::with_capacity(base.epoch_length);
        let mut reached_at = None;
        let result = train_dgme_with(&model, base, |it, loss| {
            if reached_at.is_some() {
                return;
            }
            window.push(loss);
            if window.len() == base.epoch_length {
                let mean = window.iter().sum::<f64>() / window.len() as f64;
                if mean <= target_loss {
                    reached_at = Some((it + 1, start.elapsed().as_secs_f64()));
                }
                window.clear();
            }
        })?;
        let (iterations, seconds, reached) = match reached_at {
            Some((it, s)) => (it, s, true),
            None => (result.loss_trace.len(), start.elapsed().as_secs_f64(), false),
        };
        rows.push(RuntimeRow {
            d,
            seconds,
            iterations,
            reached,
        });
    }
    Ok(rows)
}

pub fn write_runtime_scaling<W: Write>(rows: &[RuntimeRow], mut out: W) -> Result<()> {
    writeln!(out, "d,seconds,iterations,reached,ratio").map_err(io_err)?;
    for (i, r) in rows.iter().enumerate() {
        let ratio = if i == 0 { f64::NAN } else { r.seconds / rows[i - 1].seconds };
        writeln!(out, "{},{},{},{},{}", r.d, r.seconds, r.iterations, r.reached, ratio).map_err(io_err)?;
    }
    Ok(())
}

fn io_err(e: std::io::Error) -> Error {
    Error::io(Path::new("<output>"), e)
}

/// Writes any [`Trajectory`] as a figure file.
pub fn export_trajectory(tr: &Trajectory, path: &Path) -> Result<()> {
    tr.write_csv(create(path)?).map_err(|e| Error::io(path, e))
}

pub fn export_d2_lines(surface: &dyn ValueSurface, times: &[f64], path: &Path) -> Result<()> {
    write_d2_lines(surface, times, create(path)?)
}

pub fn export_d3_simplex_heat(surface: &dyn ValueSurface, times: &[f64], resolution: usize, path: &Path) -> Result<()> {
    write_d3_simplex_heat(surface, times, resolution, create(path)?)
}

pub fn export_loss_curves(epoch_losses: &[f64], path: &Path) -> Result<()> {
    write_loss_curves(epoch_losses, create(path)?)
}

pub fn export_runtime_scaling(rows: &[RuntimeRow], path: &Path) -> Result<()> {
    write_runtime_scaling(rows, create(path)?)
}

/// Held-out DGME loss of a network on fresh points.
pub fn dgme_holdout(net: &NeuralSurface, model: &dyn MeanFieldModel, n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = sample_points(model, n, &mut rng);
    dgme_max_loss(net, model, &points)
}
