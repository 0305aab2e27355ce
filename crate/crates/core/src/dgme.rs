//! Galerkin-type training of one space-time network on the master-equation
//! residual plus the terminal mismatch.

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::model::{compute_bounds, hamiltonian_bar_with_grad, kolmogorov_drift_jacobian, MeanFieldModel};
use crate::neural::tape::{Tape, Var};
use crate::neural::{NetworkSpec, NeuralSurface, TapeParams};
use crate::optim::{Adam, AdamConfig, MaxMode};
use crate::simplex;

/// How the residual and terminal terms share the batch maximum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossCoupling {
    /// `max_i (|residual_i| + |terminal_i|)`, both at the same `(x, eta)`.
    Coupled,
    /// `max_i |residual_i| + max_j |terminal_j|` over independent points.
    Separate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DgmeConfig {
    pub network: NetworkSpec,
    pub batch_size: usize,
    pub iterations: usize,
    pub adam: AdamConfig,
    /// The learning rate decays geometrically to this fraction of its
    /// initial value over the run; `1` keeps it constant.
    pub lr_final_factor: f64,
    pub max_mode: MaxMode,
    pub coupling: LossCoupling,
    /// Terminal points per iteration under [`LossCoupling::Separate`].
    pub terminal_samples: usize,
    /// Iterations averaged into one entry of the per-epoch loss curve.
    pub epoch_length: usize,
    /// Train against the model's smoothed surrogate when it has one.
    pub use_surrogate: bool,
    pub seed: u64,
}

impl Default for DgmeConfig {
    fn default() -> Self {
        DgmeConfig {
            network: NetworkSpec::default(),
            batch_size: 128,
            iterations: 5000,
            adam: AdamConfig::default(),
            lr_final_factor: 1.0,
            max_mode: MaxMode::Hard,
            coupling: LossCoupling::Coupled,
            terminal_samples: 128,
            epoch_length: 30,
            use_surrogate: true,
            seed: 0,
        }
    }
}

impl DgmeConfig {
    /// Reads `dgme.*`, `net.*` and `seed`.
    pub fn from_config(kv: &mut KeyValues) -> Result<Self> {
        let d = DgmeConfig::default();
        let max_name = kv.take_or("dgme.max", "hard".to_string())?;
        let temperature = kv.take_or("dgme.temperature", 0.01)?;
        let coupling = match kv.take_or("dgme.coupling", "coupled".to_string())?.as_str() {
            "coupled" => LossCoupling::Coupled,
            "separate" => LossCoupling::Separate,
            other => return Err(Error::Config(format!("unknown dgme.coupling {other:?}"))),
        };
        let config = DgmeConfig {
            network: NetworkSpec::from_config(kv)?,
            batch_size: kv.take_or("dgme.batch", d.batch_size)?,
            iterations: kv.take_or("dgme.iterations", d.iterations)?,
            adam: AdamConfig {
                learning_rate: kv.take_or("dgme.lr", d.adam.learning_rate)?,
                beta1: kv.take_or("dgme.beta1", d.adam.beta1)?,
                beta2: kv.take_or("dgme.beta2", d.adam.beta2)?,
                epsilon: d.adam.epsilon,
            },
            lr_final_factor: kv.take_or("dgme.lr_final_factor", d.lr_final_factor)?,
            max_mode: MaxMode::parse(&max_name, temperature)?,
            coupling,
            terminal_samples: kv.take_or("dgme.terminal_samples", d.terminal_samples)?,
            epoch_length: kv.take_or("dgme.epoch_length", d.epoch_length)?,
            use_surrogate: kv.take_or("dgme.surrogate", d.use_surrogate)?,
            seed: kv.take_or("seed", d.seed)?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epoch_length == 0 {
            return Err(Error::Config("dgme.batch and dgme.epoch_length must be positive".into()));
        }
        if self.coupling == LossCoupling::Separate && self.terminal_samples == 0 {
            return Err(Error::Config("dgme.terminal_samples must be positive".into()));
        }
        if !(self.lr_final_factor > 0.0) {
            return Err(Error::Config("dgme.lr_final_factor must be positive".into()));
        }
        Ok(())
    }
}

/// A collocation point `(t, x, eta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DgmePoint {
    pub t: f64,
    pub x: usize,
    pub eta: Vec<f64>,
}

/// Uniform on `[0, T) x [d] x simplex`.
pub fn sample_points<R: Rng + ?Sized>(model: &dyn MeanFieldModel, n: usize, rng: &mut R) -> Vec<DgmePoint> {
    let d = model.num_states();
    (0..n)
        .map(|_| {
            let t = rng.random_range(0.0..model.horizon());
            let x = rng.random_range(0..d);
            let eta = simplex::sample_uniform(d, rng).expect("d >= 1").into_inner();
            DgmePoint { t, x, eta }
        })
        .collect()
}

/// Tape nodes for a batch: signed residuals and terminal mismatches, both
/// `batch x 1`.
pub(crate) struct ResidualNodes {
    pub residual: Var,
    pub terminal: Var,
}

/// Builds residuals at `interior` and terminal mismatches at `terminal`
/// (the same `(x, eta)` with `t = T` under coupled losses).
pub(crate) fn residual_nodes(
    tape: &mut Tape,
    net: &NeuralSurface,
    params: &TapeParams,
    model: &dyn MeanFieldModel,
    interior: &[DgmePoint],
    terminal: &[DgmePoint],
) -> ResidualNodes {
    let d = model.num_states();
    let b = interior.len();
    let nt = terminal.len();
    let dim = net.input_dim();
    let horizon = model.horizon();
    let mut inputs = Array2::zeros((b * d + nt, dim));
    for (s, p) in interior.iter().enumerate() {
        for y in 0..d {
            let mut row = inputs.row_mut(s * d + y);
            net.encode_into(p.t, y, &p.eta, row.as_slice_mut().expect("standard layout"));
        }
    }
    for (s, p) in terminal.iter().enumerate() {
        let mut row = inputs.row_mut(b * d + s);
        net.encode_into(horizon, p.x, &p.eta, row.as_slice_mut().expect("standard layout"));
    }
    let input = tape.constant(inputs);
    let rows: Vec<usize> = interior.iter().enumerate().map(|(s, p)| s * d + p.x).collect();
    let eta0 = net.eta_offset();
    let cols: Vec<usize> = std::iter::once(0).chain((0..d).map(|j| eta0 + j)).collect();
    let (out, tangents) = net.forward_with_tangents(tape, params, input, &rows, &cols);

    let values = tape.gather(out, (0..b * d).collect());
    let values = tape.reshape(values, b, d);
    let tangents = tape.reshape(tangents, b, d + 1);
    let d_t = tape.slice_cols(tangents, 0, 1);
    let d_eta = tape.slice_cols(tangents, 1, d);

    let mut d_eta_scratch = vec![0.0; d * d];
    let mut d_values = vec![0.0; d * d];
    let mut drift = vec![0.0; d];
    let model_terms = tape.linearized(values, 1 + d, |s, u, out, jac| {
        let p = &interior[s];
        out[0] = hamiltonian_bar_with_grad(model, p.x, &p.eta, u, &mut d_eta_scratch[..d], &mut jac[..d]);
        kolmogorov_drift_jacobian(model, &p.eta, u, &mut drift, &mut d_eta_scratch, &mut d_values);
        out[1..].copy_from_slice(&drift);
        jac[d..].copy_from_slice(&d_values);
    });
    let h_bar = tape.slice_cols(model_terms, 0, 1);
    let drift = tape.slice_cols(model_terms, 1, d);
    let transport = tape.mul(d_eta, drift);
    let transport = tape.row_sum(transport);
    let residual = tape.add(d_t, h_bar);
    let residual = tape.add(residual, transport);

    let terminal_values = tape.gather(out, (b * d..b * d + nt).collect());
    let g = Array2::from_shape_fn((nt, 1), |(s, _)| model.terminal_cost(terminal[s].x, &terminal[s].eta));
    let g = tape.constant(g);
    let terminal = tape.sub(terminal_values, g);
    ResidualNodes { residual, terminal }
}

/// Reduced batch loss on the tape.
fn batch_loss(
    tape: &mut Tape,
    net: &NeuralSurface,
    params: &TapeParams,
    model: &dyn MeanFieldModel,
    interior: &[DgmePoint],
    terminal: Option<&[DgmePoint]>,
    mode: MaxMode,
) -> Var {
    match terminal {
        None => {
            let nodes = residual_nodes(tape, net, params, model, interior, interior);
            let r = tape.abs(nodes.residual);
            let g = tape.abs(nodes.terminal);
            let point = tape.add(r, g);
            mode.reduce(tape, point)
        }
        Some(term) => {
            let nodes = residual_nodes(tape, net, params, model, interior, term);
            let r = tape.abs(nodes.residual);
            let g = tape.abs(nodes.terminal);
            let r = mode.reduce(tape, r);
            let g = mode.reduce(tape, g);
            tape.add(r, g)
        }
    }
}

/// `dU/dt + Hbar(x, eta, delta(U, x)) + sum_y eta_y D^eta_y U . gamma*(y)` at
/// one point.
pub fn dgme_residual(net: &NeuralSurface, model: &dyn MeanFieldModel, t: f64, x: usize, eta: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let params = net.load_params(&mut tape, false);
    let p = [DgmePoint {
        t,
        x,
        eta: eta.to_vec(),
    }];
    let nodes = residual_nodes(&mut tape, net, &params, model, &p, &p);
    tape.scalar(nodes.residual)
}

/// `|residual(t, x, eta)| + |U(T, x, eta) - g(x, eta)|`.
pub fn dgme_point_loss(net: &NeuralSurface, model: &dyn MeanFieldModel, t: f64, x: usize, eta: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let params = net.load_params(&mut tape, false);
    let p = [DgmePoint {
        t,
        x,
        eta: eta.to_vec(),
    }];
    let nodes = residual_nodes(&mut tape, net, &params, model, &p, &p);
    tape.scalar(nodes.residual).abs() + tape.scalar(nodes.terminal).abs()
}

/// Largest point loss over `points` (hard max, untruncated network).
pub fn dgme_max_loss(net: &NeuralSurface, model: &dyn MeanFieldModel, points: &[DgmePoint]) -> f64 {
    let mut tape = Tape::new();
    let params = net.load_params(&mut tape, false);
    let loss = batch_loss(&mut tape, net, &params, model, points, None, MaxMode::Hard);
    tape.scalar(loss)
}

#[derive(Debug, Clone)]
pub struct DgmeSolution {
    /// Trained network with truncation at the a-priori bound.
    pub net: NeuralSurface,
    /// Reduced batch loss at every iteration.
    pub loss_trace: Vec<f64>,
    /// Mean of `loss_trace` over consecutive epochs.
    pub epoch_losses: Vec<f64>,
    /// Hard-max point loss over `8 x batch` fresh points.
    pub holdout_loss: f64,
    pub config: DgmeConfig,
}

/// Runs the training loop. The model's smoothed surrogate, when present and
/// enabled, supplies the Hamiltonian and rates used in the residual.
pub fn train_dgme(model: &dyn MeanFieldModel, config: &DgmeConfig) -> Result<DgmeSolution> {
    train_dgme_with(model, config, |_, _| {})
}

/// [`train_dgme`] with a callback `(iteration, loss)` after every step.
pub fn train_dgme_with<F>(model: &dyn MeanFieldModel, config: &DgmeConfig, mut progress: F) -> Result<DgmeSolution>
where
    F: FnMut(usize, f64),
{
    config.validate()?;
    let surrogate: Option<Arc<dyn MeanFieldModel>> = if config.use_surrogate {
        model.training_surrogate()
    } else {
        None
    };
    let train_model: &dyn MeanFieldModel = surrogate.as_deref().unwrap_or(model);
    let d = model.num_states();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = NeuralSurface::new(d, true, &config.network, &mut rng)?;
    let mut adam = Adam::new(config.adam, net.params().len());
    let mut loss_trace = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let interior = sample_points(train_model, config.batch_size, &mut rng);
        let terminal = match config.coupling {
            LossCoupling::Coupled => None,
            LossCoupling::Separate => Some(sample_points(train_model, config.terminal_samples, &mut rng)),
        };
        let mut tape = Tape::new();
        let params = net.load_params(&mut tape, true);
        let loss = batch_loss(
            &mut tape,
            &net,
            &params,
            train_model,
            &interior,
            terminal.as_deref(),
            config.max_mode,
        );
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::TrainingDiverged { step: it, loss: value });
        }
        let grads = tape.backward(loss);
        let grad = net.collect_grads(&params, &grads);
        let lr_factor = config.lr_final_factor.powf(it as f64 / config.iterations.max(1) as f64);
        adam.step(net.params_mut(), &grad, lr_factor);
        loss_trace.push(value);
        progress(it, value);
    }
    let epoch_losses = loss_trace
        .chunks(config.epoch_length)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    let mut holdout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0ff5_e7d6_e3e1);
    let holdout = sample_points(train_model, 8 * config.batch_size, &mut holdout_rng);
    let holdout_loss = dgme_max_loss(&net, train_model, &holdout);
    net.set_truncation_cap(Some(compute_bounds(model).u_bound));
    Ok(DgmeSolution {
        net,
        loss_trace,
        epoch_losses,
        holdout_loss,
        config: config.clone(),
    })
}
