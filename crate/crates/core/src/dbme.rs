//! Backward-in-time training of one network per grid node, each fitted to
//! the one-step dynamic programming relation against the next node.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::model::{compute_bounds, hamiltonian_bar_with_grad, kolmogorov_drift_jacobian, MeanFieldModel};
use crate::neural::tape::{Tape, Var};
use crate::neural::{load_checkpoint, save_checkpoint, NetworkSpec, NeuralSurface, TapeParams};
use crate::ode::{oracle_lipschitz_estimate, propagate_measure, PicardOptions, TimeGrid};
use crate::optim::{Adam, AdamConfig, MaxMode};
use crate::simplex::{self, Distribution};

/// How gradients treat the propagated measure `M(kappa)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropagationGradient {
    /// Differentiate through every RK4 stage.
    Full,
    /// Treat `M(kappa)` as a constant within each iteration.
    Detached,
}

/// Bound on the spectral norm of the first-layer `eta` weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LipschitzBound {
    Fixed(f64),
    /// `factor` times the largest oracle slope over `pairs` random pairs.
    FromOracle { pairs: usize, factor: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DbmeConfig {
    pub network: NetworkSpec,
    pub grid: TimeGrid,
    /// Fresh simplex samples per optimizer iteration.
    pub samples: usize,
    pub iterations: usize,
    /// Iteration multiplier for the first trained step, `i = N - 1`.
    pub first_step_factor: usize,
    pub adam: AdamConfig,
    /// Per-step geometric learning-rate decay, as in the DGME trainer.
    pub lr_final_factor: f64,
    pub max_mode: MaxMode,
    pub propagation: PropagationGradient,
    /// RK4 steps per grid interval for `M(kappa)`.
    pub substeps: usize,
    pub lipschitz: LipschitzBound,
    pub warm_start: bool,
    pub use_surrogate: bool,
    pub seed: u64,
}

impl DbmeConfig {
    pub fn new(grid: TimeGrid) -> Self {
        DbmeConfig {
            network: NetworkSpec::default(),
            grid,
            samples: 256,
            iterations: 200,
            first_step_factor: 4,
            adam: AdamConfig::default(),
            lr_final_factor: 1.0,
            max_mode: MaxMode::Hard,
            propagation: PropagationGradient::Full,
            substeps: 2,
            lipschitz: LipschitzBound::FromOracle {
                pairs: 1000,
                factor: 2.0,
            },
            warm_start: true,
            use_surrogate: true,
            seed: 0,
        }
    }

    /// Reads `dbme.*`, `net.*` and `seed`; the grid is uniform on
    /// `[0, horizon]` with `dbme.intervals` pieces.
    pub fn from_config(kv: &mut KeyValues, horizon: f64) -> Result<Self> {
        let intervals = kv.take_or("dbme.intervals", 50usize)?;
        let d = DbmeConfig::new(TimeGrid::uniform(0.0, horizon, intervals)?);
        let max_name = kv.take_or("dbme.max", "hard".to_string())?;
        let temperature = kv.take_or("dbme.temperature", 0.01)?;
        let propagation = match kv.take_or("dbme.propagation", "full".to_string())?.as_str() {
            "full" => PropagationGradient::Full,
            "detached" => PropagationGradient::Detached,
            other => return Err(Error::Config(format!("unknown dbme.propagation {other:?}"))),
        };
        let lipschitz = match kv.take_opt::<f64>("dbme.lipschitz_bound")? {
            Some(b) => LipschitzBound::Fixed(b),
            None => LipschitzBound::FromOracle {
                pairs: kv.take_or("dbme.lipschitz_pairs", 1000)?,
                factor: kv.take_or("dbme.lipschitz_factor", 2.0)?,
            },
        };
        let config = DbmeConfig {
            network: NetworkSpec::from_config(kv)?,
            samples: kv.take_or("dbme.samples", d.samples)?,
            iterations: kv.take_or("dbme.iterations", d.iterations)?,
            first_step_factor: kv.take_or("dbme.first_step_factor", d.first_step_factor)?,
            adam: AdamConfig {
                learning_rate: kv.take_or("dbme.lr", d.adam.learning_rate)?,
                beta1: kv.take_or("dbme.beta1", d.adam.beta1)?,
                beta2: kv.take_or("dbme.beta2", d.adam.beta2)?,
                epsilon: d.adam.epsilon,
            },
            lr_final_factor: kv.take_or("dbme.lr_final_factor", d.lr_final_factor)?,
            max_mode: MaxMode::parse(&max_name, temperature)?,
            propagation,
            substeps: kv.take_or("dbme.substeps", d.substeps)?,
            lipschitz,
            warm_start: kv.take_or("dbme.warm_start", d.warm_start)?,
            use_surrogate: kv.take_or("dbme.surrogate", d.use_surrogate)?,
            seed: kv.take_or("seed", d.seed)?,
            grid: d.grid,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.substeps == 0 || self.first_step_factor == 0 {
            return Err(Error::Config(
                "dbme.samples, dbme.substeps and dbme.first_step_factor must be positive".into(),
            ));
        }
        if let LipschitzBound::Fixed(b) = self.lipschitz {
            if !(b > 0.0) {
                return Err(Error::Config(format!("Lipschitz bound must be positive, got {b}")));
            }
        }
        if !(self.lr_final_factor > 0.0) {
            return Err(Error::Config("dbme.lr_final_factor must be positive".into()));
        }
        Ok(())
    }
}

/// The surface at the next grid node.
#[derive(Debug, Clone, Copy)]
pub enum NextSurface<'a> {
    /// The terminal cost `g`.
    Terminal,
    /// A trained network, evaluated with its truncation cap.
    Net(&'a NeuralSurface),
}

impl NextSurface<'_> {
    fn value(&self, model: &dyn MeanFieldModel, x: usize, eta: &[f64]) -> f64 {
        match self {
            NextSurface::Terminal => model.terminal_cost(x, eta),
            NextSurface::Net(n) => n.value(0.0, x, eta),
        }
    }
}

/// Untruncated `U(y, eta)` for every state.
fn raw_values(net: &NeuralSurface, eta: &[f64]) -> Vec<f64> {
    let d = net.num_states();
    let mut inputs = Array2::zeros((d, net.input_dim()));
    for y in 0..d {
        let mut row = inputs.row_mut(y);
        net.encode_into(0.0, y, eta, row.as_slice_mut().expect("standard layout"));
    }
    net.evaluate_batch_raw(&inputs).expect("encoded inputs")
}

/// `M(kappa)`: the Kolmogorov flow over one interval with rates read off
/// `net`.
pub fn propagate_with_network(
    net: &NeuralSurface,
    model: &dyn MeanFieldModel,
    kappa: &Distribution,
    dt: f64,
    substeps: usize,
) -> Result<Distribution> {
    let d = model.num_states();
    let mut p = vec![0.0; d];
    propagate_measure(
        |_, rho, q| {
            let u = raw_values(net, rho);
            for y in 0..d {
                simplex::delta_into(&u, y, &mut p);
                model.rate_selector(y, rho, &p, &mut q[y * d..(y + 1) * d]);
            }
        },
        kappa,
        0.0,
        dt,
        substeps,
    )
}

/// `|next(x, M(kappa)) - U_i(x, kappa) + dt Hbar(x, kappa, delta(U_i, x))|`.
pub fn dbme_pointwise_residual(
    net: &NeuralSurface,
    next: NextSurface<'_>,
    x: usize,
    kappa: &Distribution,
    dt: f64,
    model: &dyn MeanFieldModel,
    substeps: usize,
) -> Result<f64> {
    let moved = propagate_with_network(net, model, kappa, dt, substeps)?;
    let u = raw_values(net, kappa.as_slice());
    let h_bar = model.hamiltonian_bar(x, kappa.as_slice(), &simplex::delta(&u, x));
    Ok((next.value(model, x, moved.as_slice()) - u[x] + dt * h_bar).abs())
}

/// `U(y, rho_s)` for every sample row `s` of `rho` and state `y`, as a
/// `samples x d` node.
fn values_node(tape: &mut Tape, net: &NeuralSurface, params: &TapeParams, rho: Var) -> Var {
    let (k, d) = tape.value(rho).dim();
    let width = net.eta_offset();
    let mut states = Array2::zeros((k * d, width));
    let mut scratch = vec![0.0; net.input_dim()];
    let zeros = vec![0.0; d];
    for s in 0..k {
        for y in 0..d {
            net.encode_into(0.0, y, &zeros, &mut scratch);
            states.row_mut(s * d + y).iter_mut().zip(&scratch[..width]).for_each(|(a, &b)| *a = b);
        }
    }
    let states = tape.constant(states);
    let repeated = tape.gather(rho, (0..k).flat_map(|s| std::iter::repeat_n(s, d)).collect());
    let input = tape.concat_cols(&[states, repeated]);
    let out = net.forward_on(tape, params, input);
    tape.reshape(out, k, d)
}

fn drift_node(tape: &mut Tape, model: &dyn MeanFieldModel, rho: Var, values: Var) -> Var {
    let d = model.num_states();
    let joined = tape.concat_cols(&[rho, values]);
    let mut d_eta = vec![0.0; d * d];
    let mut d_values = vec![0.0; d * d];
    tape.linearized(joined, d, |_, row, out, jac| {
        let (eta, u) = row.split_at(d);
        kolmogorov_drift_jacobian(model, eta, u, out, &mut d_eta, &mut d_values);
        for x in 0..d {
            jac[x * 2 * d..x * 2 * d + d].copy_from_slice(&d_eta[x * d..(x + 1) * d]);
            jac[x * 2 * d + d..(x + 1) * 2 * d].copy_from_slice(&d_values[x * d..(x + 1) * d]);
        }
    })
}

/// `samples x d` node of pointwise residuals (signed) for all states.
#[allow(clippy::too_many_arguments)]
fn residual_node(
    tape: &mut Tape,
    net: &NeuralSurface,
    params: &TapeParams,
    propagation_params: &TapeParams,
    next: NextSurface<'_>,
    model: &dyn MeanFieldModel,
    kappas: &[Vec<f64>],
    dt: f64,
    substeps: usize,
) -> Var {
    let d = model.num_states();
    let k = kappas.len();
    let kappa = tape.constant(Array2::from_shape_fn((k, d), |(s, x)| kappas[s][x]));
    let values = values_node(tape, net, params, kappa);
    let mut scratch = vec![0.0; d];
    let h_bar = tape.linearized(values, d, |s, u, out, jac| {
        for x in 0..d {
            out[x] = hamiltonian_bar_with_grad(model, x, &kappas[s], u, &mut scratch, &mut jac[x * d..(x + 1) * d]);
        }
    });

    let h = dt / substeps as f64;
    let mut rho = kappa;
    for _ in 0..substeps {
        let u1 = values_node(tape, net, propagation_params, rho);
        let k1 = drift_node(tape, model, rho, u1);
        let step = tape.scale(k1, 0.5 * h);
        let r2 = tape.add(rho, step);
        let u2 = values_node(tape, net, propagation_params, r2);
        let k2 = drift_node(tape, model, r2, u2);
        let step = tape.scale(k2, 0.5 * h);
        let r3 = tape.add(rho, step);
        let u3 = values_node(tape, net, propagation_params, r3);
        let k3 = drift_node(tape, model, r3, u3);
        let step = tape.scale(k3, h);
        let r4 = tape.add(rho, step);
        let u4 = values_node(tape, net, propagation_params, r4);
        let k4 = drift_node(tape, model, r4, u4);
        let k23 = tape.add(k2, k3);
        let k23 = tape.scale(k23, 2.0);
        let sum = tape.add(k1, k4);
        let sum = tape.add(sum, k23);
        let step = tape.scale(sum, h / 6.0);
        rho = tape.add(rho, step);
    }

    let target = match next {
        NextSurface::Terminal => {
            let mut grad = vec![0.0; d];
            tape.linearized(rho, d, |_, eta, out, jac| {
                for x in 0..d {
                    out[x] = model.terminal_cost(x, eta);
                    model.terminal_cost_grad(x, eta, &mut grad);
                    jac[x * d..(x + 1) * d].copy_from_slice(&grad);
                }
            })
        }
        NextSurface::Net(next_net) => {
            let next_params = next_net.load_params(tape, false);
            let v = values_node(tape, next_net, &next_params, rho);
            match next_net.truncation_cap() {
                Some(cap) => tape.min_const(v, cap),
                None => v,
            }
        }
    };
    let step = tape.scale(h_bar, dt);
    let diff = tape.sub(target, values);
    tape.add(diff, step)
}

/// Reduced loss over `[d] x kappas`.
pub fn dbme_step_loss(
    net: &NeuralSurface,
    next: NextSurface<'_>,
    kappas: &[Vec<f64>],
    dt: f64,
    model: &dyn MeanFieldModel,
    substeps: usize,
    mode: MaxMode,
) -> Result<f64> {
    if kappas.is_empty() {
        return Err(Error::InvalidDimension("empty sample set".into()));
    }
    let mut tape = Tape::new();
    let params = net.load_params(&mut tape, false);
    let r = residual_node(&mut tape, net, &params, &params, next, model, kappas, dt, substeps);
    let r = tape.abs(r);
    let loss = mode.reduce(&mut tape, r);
    Ok(tape.scalar(loss))
}

#[derive(Debug, Clone)]
pub struct DbmeSolution {
    pub grid: TimeGrid,
    /// Networks for nodes `0..N`; node `N` is the terminal cost.
    pub nets: Vec<NeuralSurface>,
    /// Held-out losses per node, `epsilons[N] = 0`.
    pub epsilons: Vec<f64>,
    /// Reduced training loss per iteration, per node.
    pub loss_traces: Vec<Vec<f64>>,
    pub lipschitz_bound: f64,
}

impl DbmeSolution {
    pub fn max_epsilon(&self) -> f64 {
        self.epsilons.iter().copied().fold(0.0, f64::max)
    }

    /// The surface at node `i`, with node `N` mapped to `g`.
    pub fn node(&self, i: usize) -> NextSurface<'_> {
        if i >= self.nets.len() {
            NextSurface::Terminal
        } else {
            NextSurface::Net(&self.nets[i])
        }
    }

    /// `U(t_i, x, eta)` at node `i`.
    pub fn value_at_node(&self, model: &dyn MeanFieldModel, i: usize, x: usize, eta: &[f64]) -> f64 {
        self.node(i).value(model, x, eta)
    }

    /// Piecewise constant in time: the left node's surface.
    pub fn value(&self, model: &dyn MeanFieldModel, t: f64, x: usize, eta: &[f64]) -> f64 {
        let i = self.grid.left_index(t + 1e-12 * self.grid.end().max(1.0));
        self.value_at_node(model, i, x, eta)
    }
}

impl DbmeSolution {
    /// Writes `node_XXXX.ckpt` per trained node, `epsilons.csv`
    /// (`node,t,epsilon`) and `losses.csv` (`node,iteration,loss`).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, net) in self.nets.iter().enumerate() {
            save_checkpoint(net, &dir.join(node_file(i)))?;
        }
        let path = dir.join("epsilons.csv");
        let mut text = String::from("node,t,epsilon\n");
        for (i, (t, e)) in self.grid.nodes().iter().zip(&self.epsilons).enumerate() {
            text.push_str(&format!("{i},{t:?},{e:?}\n"));
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("losses.csv");
        let mut text = String::from("node,iteration,loss\n");
        for (i, trace) in self.loss_traces.iter().enumerate() {
            for (it, l) in trace.iter().enumerate() {
                text.push_str(&format!("{i},{it},{l:?}\n"));
            }
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Reads a directory written by [`DbmeSolution::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("epsilons.csv");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut nodes = Vec::new();
        let mut epsilons = Vec::new();
        for line in text.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Checkpoint(format!("{}: bad line {line:?}", path.display())))
            };
            if fields.len() != 3 {
                return Err(Error::Checkpoint(format!("{}: bad line {line:?}", path.display())));
            }
            nodes.push(parse(fields[1])?);
            epsilons.push(parse(fields[2])?);
        }
        let grid = TimeGrid::from_nodes(nodes)?;
        let nets = (0..grid.num_intervals())
            .map(|i| load_checkpoint(&dir.join(node_file(i))))
            .collect::<Result<Vec<_>>>()?;
        let lipschitz_bound = nets.first().and_then(|n| n.lipschitz_bound()).unwrap_or(f64::INFINITY);
        let path = dir.join("losses.csv");
        let mut loss_traces = vec![Vec::new(); nets.len()];
        if let Ok(text) = std::fs::read_to_string(&path) {
            for line in text.lines().skip(1) {
                let mut it = line.split(',');
                let node: Option<usize> = it.next().and_then(|s| s.parse().ok());
                let loss: Option<f64> = it.nth(1).and_then(|s| s.parse().ok());
                match (node, loss) {
                    (Some(n), Some(l)) if n < loss_traces.len() => loss_traces[n].push(l),
                    _ => return Err(Error::Checkpoint(format!("{}: bad line {line:?}", path.display()))),
                }
            }
        }
        Ok(DbmeSolution {
            grid,
            nets,
            epsilons,
            loss_traces,
            lipschitz_bound,
        })
    }
}

fn node_file(i: usize) -> String {
    format!("node_{i:04}.ckpt")
}

/// Resolves the configured Lipschitz bound.
pub fn resolve_lipschitz_bound(model: &dyn MeanFieldModel, config: &DbmeConfig) -> Result<f64> {
    match config.lipschitz {
        LipschitzBound::Fixed(b) => Ok(b),
        LipschitzBound::FromOracle { pairs, factor } => {
            let step = config.grid.max_step().min(0.01);
            let slope = oracle_lipschitz_estimate(model, pairs, config.seed, step, &PicardOptions::default())?;
            // A zero slope would freeze the eta weights entirely.
            Ok((factor * slope).max(1e-3))
        }
    }
}

/// Trains nodes `N-1, ..., 0`.
pub fn train_dbme(model: &dyn MeanFieldModel, config: &DbmeConfig) -> Result<DbmeSolution> {
    train_dbme_with(model, config, |_, _, _| {})
}

/// [`train_dbme`] with a callback `(node, iteration, loss)`.
pub fn train_dbme_with<F>(model: &dyn MeanFieldModel, config: &DbmeConfig, mut progress: F) -> Result<DbmeSolution>
where
    F: FnMut(usize, usize, f64),
{
    config.validate()?;
    if (config.grid.end() - model.horizon()).abs() > 1e-12 * model.horizon().max(1.0) || config.grid.start() != 0.0 {
        return Err(Error::Config("DBME grid must cover [0, T]".into()));
    }
    let bound = resolve_lipschitz_bound(model, config)?;
    let surrogate = if config.use_surrogate {
        model.training_surrogate()
    } else {
        None
    };
    let train_model: &dyn MeanFieldModel = surrogate.as_deref().unwrap_or(model);
    let d = model.num_states();
    let n = config.grid.num_intervals();
    let cap = compute_bounds(model).u_bound;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut nets: Vec<Option<NeuralSurface>> = vec![None; n];
    let mut epsilons = vec![0.0; n + 1];
    let mut loss_traces = vec![Vec::new(); n];
    for i in (0..n).rev() {
        let dt = config.grid.increment(i);
        let mut net = match (config.warm_start, nets.get(i + 1).and_then(|o| o.as_ref())) {
            (true, Some(next)) => next.clone(),
            _ => NeuralSurface::new(d, false, &config.network, &mut rng)?,
        };
        net.set_truncation_cap(None);
        net.project_lipschitz(bound);
        let next = match nets.get(i + 1).and_then(|o| o.as_ref()) {
            Some(next) => NextSurface::Net(next),
            None => NextSurface::Terminal,
        };
        let iterations = if i + 1 == n {
            config.iterations * config.first_step_factor
        } else {
            config.iterations
        };
        let mut adam = Adam::new(config.adam, net.params().len());
        let trace = &mut loss_traces[i];
        for it in 0..iterations {
            let kappas: Vec<Vec<f64>> = (0..config.samples)
                .map(|_| simplex::sample_uniform(d, &mut rng).map(Distribution::into_inner))
                .collect::<Result<_>>()?;
            let mut tape = Tape::new();
            let params = net.load_params(&mut tape, true);
            let propagation_params = match config.propagation {
                PropagationGradient::Full => params.clone(),
                PropagationGradient::Detached => net.load_params(&mut tape, false),
            };
            let r = residual_node(
                &mut tape,
                &net,
                &params,
                &propagation_params,
                next,
                train_model,
                &kappas,
                dt,
                config.substeps,
            );
            let r = tape.abs(r);
            let loss = config.max_mode.reduce(&mut tape, r);
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::TrainingDiverged { step: i, loss: value });
            }
            let grads = tape.backward(loss);
            let grad = net.collect_grads(&params, &grads);
            let lr_factor = config.lr_final_factor.powf(it as f64 / iterations.max(1) as f64);
            adam.step(net.params_mut(), &grad, lr_factor);
            net.project_lipschitz(bound);
            trace.push(value);
            progress(i, it, value);
        }
        let mut holdout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ (0x9e37_79b9_7f4a_7c15_u64.wrapping_mul(i as u64 + 1)));
        let holdout: Vec<Vec<f64>> = (0..4 * config.samples)
            .map(|_| simplex::sample_uniform(d, &mut holdout_rng).map(Distribution::into_inner))
            .collect::<Result<_>>()?;
        epsilons[i] = dbme_step_loss(&net, next, &holdout, dt, train_model, config.substeps, MaxMode::Hard)?;
        if !epsilons[i].is_finite() {
            return Err(Error::TrainingDiverged {
                step: i,
                loss: epsilons[i],
            });
        }
        net.set_truncation_cap(Some(cap));
        net.set_lipschitz_bound(Some(bound));
        nets[i] = Some(net);
    }
    Ok(DbmeSolution {
        grid: config.grid.clone(),
        nets: nets.into_iter().map(|n| n.expect("every node trained")).collect(),
        epsilons,
        loss_traces,
        lipschitz_bound: bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{QuadraticModel, ZeroCostModel};
    use crate::neural::{Activation, StateEncoding};
    use rand::Rng;

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec {
            hidden: vec![6, 5],
            ..NetworkSpec::default()
        }
    }

    fn constant_net(d: usize, c: f64) -> NeuralSurface {
        let spec = NetworkSpec {
            hidden: vec![],
            activation: Activation::Identity,
            output_activation: Activation::Identity,
            encoding: StateEncoding::Scalar,
        };
        let mut net = NeuralSurface::zeros(d, false, &spec).unwrap();
        let n = net.params().len();
        net.params_mut()[n - 1] = c;
        net
    }

    #[test]
    fn zero_network_at_the_last_step() {
        let model = QuadraticModel::new(2, 4.0, 0.5).unwrap();
        let net = constant_net(2, 0.0);
        let kappa = Distribution::new(vec![0.3, 0.7]).unwrap();
        for x in 0..2 {
            let r = dbme_pointwise_residual(&net, NextSurface::Terminal, x, &kappa, 0.01, &model, 2).unwrap();
            assert!((r - 0.01 * kappa[x]).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_step_with_equal_networks() {
        let model = QuadraticModel::new(3, 4.0, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = NeuralSurface::new(3, false, &tiny_spec(), &mut rng).unwrap();
        let kappa = Distribution::new(vec![0.2, 0.5, 0.3]).unwrap();
        let r = dbme_pointwise_residual(&net, NextSurface::Net(&net), 1, &kappa, 0.0, &model, 2).unwrap();
        assert!(r < 1e-15);
    }

    #[test]
    fn symmetric_exact_solution_is_second_order() {
        // U(t, x, eta) = (T - t) / 2 at eta = (1/2, 1/2) is the exact
        // solution along the symmetric flow.
        let model = QuadraticModel::new(2, 4.0, 0.5).unwrap();
        let kappa = Distribution::uniform(2);
        let mut last = f64::INFINITY;
        for dt in [0.1, 0.05, 0.025] {
            let t = 0.5 - 2.0 * dt;
            let now = constant_net(2, (0.5 - t) / 2.0);
            let next = constant_net(2, (0.5 - t - dt) / 2.0);
            let r = dbme_pointwise_residual(&now, NextSurface::Net(&next), 0, &kappa, dt, &model, 2).unwrap();
            assert!(r <= last / 4.0 + 1e-15, "{r} vs {last}");
            last = r;
        }
    }

    #[test]
    fn tape_loss_matches_pointwise_residuals() {
        let model = QuadraticModel::new(3, 4.0, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = NeuralSurface::new(3, false, &tiny_spec(), &mut rng).unwrap();
        let mut next = NeuralSurface::new(3, false, &tiny_spec(), &mut rng).unwrap();
        next.set_truncation_cap(Some(0.1));
        let kappas: Vec<Vec<f64>> = (0..5)
            .map(|_| simplex::sample_uniform(3, &mut rng).unwrap().into_inner())
            .collect();
        for nxt in [NextSurface::Terminal, NextSurface::Net(&next)] {
            let mut worst = 0.0_f64;
            for k in &kappas {
                let kd = Distribution::new(k.clone()).unwrap();
                for x in 0..3 {
                    worst = worst.max(dbme_pointwise_residual(&net, nxt, x, &kd, 0.05, &model, 2).unwrap());
                }
            }
            let loss = dbme_step_loss(&net, nxt, &kappas, 0.05, &model, 2, MaxMode::Hard).unwrap();
            assert!((loss - worst).abs() < 1e-12, "{loss} vs {worst}");
        }
        let one = dbme_step_loss(&net, NextSurface::Terminal, &kappas[..1], 0.05, &model, 2, MaxMode::Hard).unwrap();
        let kd = Distribution::new(kappas[0].clone()).unwrap();
        let single = (0..3)
            .map(|x| dbme_pointwise_residual(&net, NextSurface::Terminal, x, &kd, 0.05, &model, 2).unwrap())
            .fold(0.0, f64::max);
        assert!((one - single).abs() < 1e-12);
        assert!(dbme_step_loss(&net, NextSurface::Terminal, &[], 0.05, &model, 2, MaxMode::Hard).is_err());
    }

    #[test]
    fn log_sum_exp_approaches_the_hard_max() {
        let model = QuadraticModel::new(2, 4.0, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = NeuralSurface::new(2, false, &tiny_spec(), &mut rng).unwrap();
        let kappas: Vec<Vec<f64>> = (0..16)
            .map(|_| simplex::sample_uniform(2, &mut rng).unwrap().into_inner())
            .collect();
        let hard = dbme_step_loss(&net, NextSurface::Terminal, &kappas, 0.1, &model, 2, MaxMode::Hard).unwrap();
        for tau in [1e-1, 1e-2, 1e-3] {
            let soft = dbme_step_loss(
                &net,
                NextSurface::Terminal,
                &kappas,
                0.1,
                &model,
                2,
                MaxMode::LogSumExp { temperature: tau },
            )
            .unwrap();
            assert!(soft >= hard && soft - hard <= tau * (32f64).ln() + 1e-12);
        }
    }

    fn full_gradient_check(propagation: PropagationGradient) {
        let model = QuadraticModel::new(2, 4.0, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = NeuralSurface::new(2, false, &tiny_spec(), &mut rng).unwrap();
        let mut next = NeuralSurface::new(2, false, &tiny_spec(), &mut rng).unwrap();
        next.set_truncation_cap(Some(10.0));
        let kappas: Vec<Vec<f64>> = (0..4)
            .map(|_| simplex::sample_uniform(2, &mut rng).unwrap().into_inner())
            .collect();
        let mode = MaxMode::LogSumExp { temperature: 0.05 };
        let loss_of = |n: &NeuralSurface, prop: &NeuralSurface| {
            let mut tape = Tape::new();
            let p = n.load_params(&mut tape, false);
            let q = prop.load_params(&mut tape, false);
            let r = residual_node(&mut tape, n, &p, &q, NextSurface::Net(&next), &model, &kappas, 0.2, 2);
            let r = tape.abs(r);
            let l = mode.reduce(&mut tape, r);
            tape.scalar(l)
        };
        let mut tape = Tape::new();
        let p = net.load_params(&mut tape, true);
        let q = match propagation {
            PropagationGradient::Full => p.clone(),
            PropagationGradient::Detached => net.load_params(&mut tape, false),
        };
        let r = residual_node(&mut tape, &net, &p, &q, NextSurface::Net(&next), &model, &kappas, 0.2, 2);
        let r = tape.abs(r);
        let l = mode.reduce(&mut tape, r);
        let grad = net.collect_grads(&p, &tape.backward(l));
        let h = 1e-6;
        for k in 0..net.params().len() {
            let mut a = net.clone();
            a.params_mut()[k] += h;
            let mut b = net.clone();
            b.params_mut()[k] -= h;
            let num = match propagation {
                PropagationGradient::Full => (loss_of(&a, &a) - loss_of(&b, &b)) / (2.0 * h),
                PropagationGradient::Detached => (loss_of(&a, &net) - loss_of(&b, &net)) / (2.0 * h),
            };
            assert!((num - grad[k]).abs() < 1e-6 * num.abs().max(1.0), "{k}: {num} vs {}", grad[k]);
        }
    }

    #[test]
    fn full_propagation_gradient_matches_finite_differences() {
        full_gradient_check(PropagationGradient::Full);
    }

    #[test]
    fn detached_gradient_matches_finite_differences() {
        full_gradient_check(PropagationGradient::Detached);
    }

    fn quick_config(model: &dyn MeanFieldModel, intervals: usize, seed: u64) -> DbmeConfig {
        DbmeConfig {
            network: tiny_spec(),
            samples: 16,
            iterations: 20,
            lipschitz: LipschitzBound::Fixed(1.5),
            seed,
            ..DbmeConfig::new(TimeGrid::uniform(0.0, model.horizon(), intervals).unwrap())
        }
    }

    #[test]
    fn training_is_deterministic_and_respects_the_bound() {
        let model = QuadraticModel::new(2, 4.0, 0.5).unwrap();
        let config = quick_config(&model, 3, 7);
        let a = train_dbme(&model, &config).unwrap();
        let b = train_dbme(&model, &config).unwrap();
        assert_eq!(a.epsilons, b.epsilons);
        assert_eq!(a.loss_traces, b.loss_traces);
        assert_eq!(a.epsilons.len(), 4);
        assert_eq!(a.epsilons[3], 0.0);
        assert_eq!(a.loss_traces[2].len(), 80);
        for net in &a.nets {
            assert!(net.eta_weight_norm() <= 1.5 * (1.0 + 1e-9));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eta = simplex::sample_uniform(2, &mut rng).unwrap();
        let x = rng.random_range(0..2);
        assert_eq!(a.value_at_node(&model, 3, x, eta.as_slice()), 0.0);
        assert_eq!(a.value(&model, 0.5, x, eta.as_slice()), 0.0);
    }

    #[test]
    fn save_and_load_round_trip() {
        let model = QuadraticModel::new(2, 4.0, 0.5).unwrap();
        let mut config = quick_config(&model, 2, 3);
        config.iterations = 5;
        let a = train_dbme(&model, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        let b = DbmeSolution::load(dir.path()).unwrap();
        assert_eq!(a.grid, b.grid);
        assert_eq!(a.nets, b.nets);
        assert_eq!(a.epsilons, b.epsilons);
        assert_eq!(a.loss_traces, b.loss_traces);
        assert_eq!(a.lipschitz_bound, b.lipschitz_bound);
        assert!(DbmeSolution::load(&dir.path().join("absent")).is_err());
    }

    #[test]
    fn rejects_bad_configs() {
        let model = ZeroCostModel::new(2, 0.5, 1.0, 3.0).unwrap();
        let mut config = quick_config(&model, 2, 0);
        config.samples = 0;
        assert!(train_dbme(&model, &config).is_err());
        let mut config = quick_config(&model, 2, 0);
        config.grid = TimeGrid::uniform(0.0, 0.4, 2).unwrap();
        assert!(train_dbme(&model, &config).is_err());
    }
}
