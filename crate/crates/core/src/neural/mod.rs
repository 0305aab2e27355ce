//! Fully connected networks `U(t?, x, eta; theta)` with exact gradients in the
//! parameters and the inputs.
//!
//! Parameters are stored flat, layer by layer: the weight matrix row-major
//! (`out x in`) followed by the bias.

mod checkpoint;
pub mod tape;

use ndarray::Array2;
use rand::Rng;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use tape::{Gradients, Tape, Var};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

/// Lower bound on power iterations used for the spectral norm.
const MIN_POWER_ITERATIONS: usize = 50;
const MAX_POWER_ITERATIONS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Elu,
    Identity,
}

impl Activation {
    /// `order`-th derivative at `z`, for `order <= 3`.
    pub fn derivative(self, z: f64, order: u8) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-z).exp());
                let s1 = s * (1.0 - s);
                match order {
                    0 => s,
                    1 => s1,
                    2 => s1 * (1.0 - 2.0 * s),
                    _ => s1 * (1.0 - 6.0 * s + 6.0 * s * s),
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                let t1 = 1.0 - t * t;
                match order {
                    0 => t,
                    1 => t1,
                    2 => -2.0 * t * t1,
                    _ => -2.0 * t1 * t1 + 4.0 * t * t * t1,
                }
            }
            Activation::Elu => {
                if z > 0.0 {
                    match order {
                        0 => z,
                        1 => 1.0,
                        _ => 0.0,
                    }
                } else {
                    let e = z.exp();
                    if order == 0 {
                        e - 1.0
                    } else {
                        e
                    }
                }
            }
            Activation::Identity => match order {
                0 => z,
                1 => 1.0,
                _ => 0.0,
            },
        }
    }

    pub fn apply(self, z: f64) -> f64 {
        self.derivative(z, 0)
    }

    pub fn tag(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Elu => "elu",
            Activation::Identity => "identity",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "elu" => Ok(Activation::Elu),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

/// How the discrete state enters the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StateEncoding {
    /// One input holding `x + 1` for state index `x`.
    Scalar,
    /// `d` inputs, one-hot.
    OneHot,
}

impl StateEncoding {
    pub fn width(self, num_states: usize) -> usize {
        match self {
            StateEncoding::Scalar => 1,
            StateEncoding::OneHot => num_states,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            StateEncoding::Scalar => "scalar",
            StateEncoding::OneHot => "one-hot",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "scalar" => Ok(StateEncoding::Scalar),
            "one-hot" | "onehot" => Ok(StateEncoding::OneHot),
            other => Err(Error::Config(format!("unknown state encoding {other:?}"))),
        }
    }
}

/// Architecture choices shared by both trainers.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub output_activation: Activation,
    pub encoding: StateEncoding,
}

impl NetworkSpec {
    /// Reads `net.hidden`, `net.activation`, `net.output` and `net.encoding`.
    pub fn from_config(kv: &mut KeyValues) -> Result<Self> {
        let d = NetworkSpec::default();
        let spec = NetworkSpec {
            hidden: kv.take_list_or("net.hidden", &d.hidden)?,
            activation: Activation::from_tag(&kv.take_or("net.activation", d.activation.tag().to_string())?)?,
            output_activation: Activation::from_tag(&kv.take_or("net.output", d.output_activation.tag().to_string())?)?,
            encoding: StateEncoding::from_tag(&kv.take_or("net.encoding", d.encoding.tag().to_string())?)?,
        };
        if spec.hidden.is_empty() || spec.activation == Activation::Identity {
            return Err(Error::Config("networks need at least one nonlinear hidden layer".into()));
        }
        Ok(spec)
    }
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            hidden: vec![60; 4],
            activation: Activation::Sigmoid,
            output_activation: Activation::Identity,
            encoding: StateEncoding::Scalar,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub value: f64,
    pub d_params: Vec<f64>,
    pub d_inputs: Vec<f64>,
}

/// Parameters of a surface loaded onto a tape.
#[derive(Debug, Clone)]
pub struct TapeParams {
    layers: Vec<(Var, Var)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralSurface {
    num_states: usize,
    time_input: bool,
    layer_sizes: Vec<usize>,
    activation: Activation,
    output_activation: Activation,
    encoding: StateEncoding,
    truncation_cap: Option<f64>,
    lipschitz_bound: Option<f64>,
    params: Vec<f64>,
}

impl NeuralSurface {
    /// Glorot-uniform weights and zero biases.
    pub fn new<R: Rng + ?Sized>(num_states: usize, time_input: bool, spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(num_states, time_input, spec)?;
        let mut offset = 0;
        for l in 0..net.layer_sizes.len() - 1 {
            let (fan_in, fan_out) = (net.layer_sizes[l], net.layer_sizes[l + 1]);
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut net.params[offset..offset + fan_in * fan_out] {
                *w = rng.random_range(-s..s);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn zeros(num_states: usize, time_input: bool, spec: &NetworkSpec) -> Result<Self> {
        if num_states == 0 {
            return Err(Error::InvalidDimension("network needs at least one state".into()));
        }
        if spec.hidden.contains(&0) {
            return Err(Error::InvalidDimension("hidden layers must be non-empty".into()));
        }
        if spec.activation == Activation::Identity && !spec.hidden.is_empty() {
            return Err(Error::Config("hidden activation must be nonlinear".into()));
        }
        let input = usize::from(time_input) + spec.encoding.width(num_states) + num_states;
        let mut layer_sizes = vec![input];
        layer_sizes.extend(&spec.hidden);
        layer_sizes.push(1);
        let n = layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(NeuralSurface {
            num_states,
            time_input,
            layer_sizes,
            activation: spec.activation,
            output_activation: spec.output_activation,
            encoding: spec.encoding,
            truncation_cap: None,
            lipschitz_bound: None,
            params: vec![0.0; n],
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        num_states: usize,
        time_input: bool,
        layer_sizes: Vec<usize>,
        activation: Activation,
        output_activation: Activation,
        encoding: StateEncoding,
        truncation_cap: Option<f64>,
        lipschitz_bound: Option<f64>,
        params: Vec<f64>,
    ) -> Result<Self> {
        let expected_input = usize::from(time_input) + encoding.width(num_states) + num_states;
        if layer_sizes.len() < 2 || layer_sizes[0] != expected_input || layer_sizes[layer_sizes.len() - 1] != 1 {
            return Err(Error::InvalidDimension(format!("inconsistent layer sizes {layer_sizes:?}")));
        }
        let n: usize = layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if params.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: params.len(),
            });
        }
        Ok(NeuralSurface {
            num_states,
            time_input,
            layer_sizes,
            activation,
            output_activation,
            encoding,
            truncation_cap,
            lipschitz_bound,
            params,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn has_time_input(&self) -> bool {
        self.time_input
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    pub fn encoding(&self) -> StateEncoding {
        self.encoding
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    /// Column of the first `eta` coordinate in the input vector.
    pub fn eta_offset(&self) -> usize {
        usize::from(self.time_input) + self.encoding.width(self.num_states)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                actual: params.len(),
            });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn truncation_cap(&self) -> Option<f64> {
        self.truncation_cap
    }

    pub fn set_truncation_cap(&mut self, cap: Option<f64>) {
        self.truncation_cap = cap;
    }

    pub fn lipschitz_bound(&self) -> Option<f64> {
        self.lipschitz_bound
    }

    pub fn set_lipschitz_bound(&mut self, bound: Option<f64>) {
        self.lipschitz_bound = bound;
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.layer_sizes.len());
        let mut o = 0;
        for w in self.layer_sizes.windows(2) {
            offsets.push(o);
            o += w[0] * w[1] + w[1];
        }
        offsets
    }

    fn layer_activation(&self, l: usize) -> Activation {
        if l + 2 == self.layer_sizes.len() {
            self.output_activation
        } else {
            self.activation
        }
    }

    /// Writes the input vector for `(t, x, eta)` into `out`; `t` is ignored
    /// for networks without a time input.
    pub fn encode_into(&self, t: f64, x: usize, eta: &[f64], out: &mut [f64]) {
        let mut c = 0;
        if self.time_input {
            out[0] = t;
            c = 1;
        }
        match self.encoding {
            StateEncoding::Scalar => {
                out[c] = (x + 1) as f64;
                c += 1;
            }
            StateEncoding::OneHot => {
                for y in 0..self.num_states {
                    out[c + y] = if y == x { 1.0 } else { 0.0 };
                }
                c += self.num_states;
            }
        }
        out[c..c + self.num_states].copy_from_slice(eta);
    }

    pub fn encode(&self, t: f64, x: usize, eta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.input_dim()];
        self.encode_into(t, x, eta, &mut out);
        out
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        Ok(())
    }

    /// Untruncated output.
    pub fn evaluate_raw(&self, input: &[f64]) -> Result<f64> {
        self.check_input(input)?;
        let mut a = input.to_vec();
        let mut offset = 0;
        for l in 0..self.layer_sizes.len() - 1 {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let act = self.layer_activation(l);
            a = (0..n_out)
                .map(|o| {
                    let z = b[o] + w[o * n_in..(o + 1) * n_in].iter().zip(&a).map(|(p, q)| p * q).sum::<f64>();
                    act.apply(z)
                })
                .collect();
            offset += n_in * n_out + n_out;
        }
        Ok(a[0])
    }

    /// Output, capped at the truncation level when one is set.
    pub fn evaluate(&self, input: &[f64]) -> Result<f64> {
        let raw = self.evaluate_raw(input)?;
        Ok(match self.truncation_cap {
            Some(cap) => raw.min(cap),
            None => raw,
        })
    }

    /// Truncated value at `(t, x, eta)`.
    pub fn value(&self, t: f64, x: usize, eta: &[f64]) -> f64 {
        self.evaluate(&self.encode(t, x, eta)).expect("encoded input has the right size")
    }

    /// Untruncated outputs for each row of `inputs`.
    pub fn evaluate_batch_raw(&self, inputs: &Array2<f64>) -> Result<Vec<f64>> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: inputs.ncols(),
            });
        }
        let mut a = inputs.clone();
        for (l, (w, b)) in self.weight_matrices().into_iter().enumerate() {
            let act = self.layer_activation(l);
            let mut z = a.dot(&w.t());
            z += &b;
            if act != Activation::Identity {
                z.mapv_inplace(|v| act.apply(v));
            }
            a = z;
        }
        Ok(a.column(0).to_vec())
    }

    /// Outputs for each row, truncated when a cap is set.
    pub fn evaluate_batch(&self, inputs: &Array2<f64>) -> Result<Vec<f64>> {
        let mut out = self.evaluate_batch_raw(inputs)?;
        if let Some(cap) = self.truncation_cap {
            out.iter_mut().for_each(|v| *v = v.min(cap));
        }
        Ok(out)
    }

    /// Truncated `U(t, y, eta)` for every state `y`.
    pub fn values_all_states(&self, t: f64, eta: &[f64]) -> Vec<f64> {
        let d = self.num_states;
        let mut inputs = Array2::zeros((d, self.input_dim()));
        for y in 0..d {
            let mut row = inputs.row_mut(y);
            self.encode_into(t, y, eta, row.as_slice_mut().expect("standard layout"));
        }
        self.evaluate_batch(&inputs).expect("encoded inputs have the right size")
    }

    fn weight_matrices(&self) -> Vec<(Array2<f64>, Array2<f64>)> {
        let offsets = self.layer_offsets();
        self.layer_sizes
            .windows(2)
            .zip(offsets)
            .map(|(w, o)| {
                let (n_in, n_out) = (w[0], w[1]);
                let weights = Array2::from_shape_vec((n_out, n_in), self.params[o..o + n_in * n_out].to_vec())
                    .expect("layer size");
                let bias = Array2::from_shape_vec((1, n_out), self.params[o + n_in * n_out..o + n_in * n_out + n_out].to_vec())
                    .expect("layer size");
                (weights, bias)
            })
            .collect()
    }

    /// Loads the parameters onto `tape`, as trainable leaves or constants.
    pub fn load_params(&self, tape: &mut Tape, trainable: bool) -> TapeParams {
        let layers = self
            .weight_matrices()
            .into_iter()
            .map(|(w, b)| {
                if trainable {
                    (tape.param(w), tape.param(b))
                } else {
                    (tape.constant(w), tape.constant(b))
                }
            })
            .collect();
        TapeParams { layers }
    }

    /// Untruncated outputs (`rows x 1`) for the input rows of `input`.
    pub fn forward_on(&self, tape: &mut Tape, p: &TapeParams, input: Var) -> Var {
        let mut a = input;
        for (l, &(w, b)) in p.layers.iter().enumerate() {
            let z = tape.matmul_t(a, w);
            let z = tape.add_row(z, b);
            let act = self.layer_activation(l);
            a = if act == Activation::Identity { z } else { tape.act(z, act, 0) };
        }
        a
    }

    /// Outputs plus input derivatives. The second node has one row per pair
    /// `(rows[i], cols[j])` at position `i * cols.len() + j`, holding
    /// `d output[rows[i]] / d input[rows[i], cols[j]]`.
    pub fn forward_with_tangents(
        &self,
        tape: &mut Tape,
        p: &TapeParams,
        input: Var,
        rows: &[usize],
        cols: &[usize],
    ) -> (Var, Var) {
        let k = cols.len();
        let mut seed = Array2::zeros((rows.len() * k, self.input_dim()));
        for i in 0..rows.len() {
            for (j, &c) in cols.iter().enumerate() {
                seed[[i * k + j, c]] = 1.0;
            }
        }
        let gather_idx: Vec<usize> = rows.iter().flat_map(|&r| std::iter::repeat_n(r, k)).collect();
        let mut tangent = tape.constant(seed);
        let mut a = input;
        for (l, &(w, b)) in p.layers.iter().enumerate() {
            let z = tape.matmul_t(a, w);
            let z = tape.add_row(z, b);
            let tz = tape.matmul_t(tangent, w);
            let act = self.layer_activation(l);
            if act == Activation::Identity {
                a = z;
                tangent = tz;
            } else {
                a = tape.act(z, act, 0);
                let slope = tape.act(z, act, 1);
                let slope = tape.gather(slope, gather_idx.clone());
                tangent = tape.mul(tz, slope);
            }
        }
        (a, tangent)
    }

    /// Flattens tape gradients of the parameters into the storage layout.
    pub fn collect_grads(&self, p: &TapeParams, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.params.len());
        for (l, &(w, b)) in p.layers.iter().enumerate() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            match grads.get(w) {
                Some(g) => out.extend(g.iter()),
                None => out.extend(std::iter::repeat_n(0.0, n_in * n_out)),
            }
            match grads.get(b) {
                Some(g) => out.extend(g.iter()),
                None => out.extend(std::iter::repeat_n(0.0, n_out)),
            }
        }
        out
    }

    /// Exact derivatives of the untruncated output in every parameter and
    /// every input coordinate.
    pub fn backprop(&self, input: &[f64]) -> Result<GradientBundle> {
        self.check_input(input)?;
        let mut tape = Tape::new();
        let p = self.load_params(&mut tape, true);
        let x = tape.param(Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("row"));
        let out = self.forward_on(&mut tape, &p, x);
        let grads = tape.backward(out);
        Ok(GradientBundle {
            value: tape.scalar(out),
            d_params: self.collect_grads(&p, &grads),
            d_inputs: grads.get(x).map(|g| g.iter().copied().collect()).unwrap_or_else(|| vec![0.0; input.len()]),
        })
    }

    /// `dU/d eta_z - dU/d eta_y` at `input`.
    pub fn measure_derivative(&self, input: &[f64], y: usize, z: usize) -> Result<f64> {
        let d = self.num_states;
        if y >= d || z >= d {
            return Err(Error::InvalidDimension(format!("states ({y}, {z}) outside [0, {d})")));
        }
        if y == z {
            self.check_input(input)?;
            return Ok(0.0);
        }
        let g = self.backprop(input)?;
        let o = self.eta_offset();
        Ok(g.d_inputs[o + z] - g.d_inputs[o + y])
    }

    /// The first-layer columns acting on `eta`, as a `width x d` matrix.
    pub fn eta_weights(&self) -> Array2<f64> {
        let n_in = self.layer_sizes[0];
        let n_out = self.layer_sizes[1];
        let o = self.eta_offset();
        Array2::from_shape_fn((n_out, self.num_states), |(r, c)| self.params[r * n_in + o + c])
    }

    /// Spectral norm of [`NeuralSurface::eta_weights`].
    pub fn eta_weight_norm(&self) -> f64 {
        spectral_norm(&self.eta_weights())
    }

    /// Rescales the `eta` columns of the first layer so that their spectral
    /// norm is at most `bound`. Returns whether anything changed.
    pub fn project_lipschitz(&mut self, bound: f64) -> bool {
        let norm = self.eta_weight_norm();
        if norm <= bound {
            return false;
        }
        let factor = bound / norm;
        let n_in = self.layer_sizes[0];
        let o = self.eta_offset();
        for r in 0..self.layer_sizes[1] {
            for c in 0..self.num_states {
                self.params[r * n_in + o + c] *= factor;
            }
        }
        true
    }
}

/// Largest singular value by power iteration on the smaller Gram matrix.
pub fn spectral_norm(m: &Array2<f64>) -> f64 {
    let gram = if m.nrows() >= m.ncols() { m.t().dot(m) } else { m.dot(&m.t()) };
    let n = gram.nrows();
    if n == 0 {
        return 0.0;
    }
    // Deterministic start with no special alignment.
    let mut v: ndarray::Array1<f64> = (0..n).map(|i| 1.0 + 0.1 * i as f64).collect();
    let mut lambda = 0.0;
    for it in 0..MAX_POWER_ITERATIONS {
        let w = gram.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w) / v.dot(&v);
        v = w / norm;
        let converged = (next - lambda).abs() <= 1e-15 * next.abs();
        lambda = next;
        if it + 1 >= MIN_POWER_ITERATIONS && converged {
            break;
        }
    }
    lambda.max(0.0).sqrt()
}
