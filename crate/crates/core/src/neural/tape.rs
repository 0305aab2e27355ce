//! Reverse-mode differentiation over batched matrices.
//!
//! Every node holds a `rows x cols` matrix; rows are batch points. Nodes built
//! only from constants carry no gradient and are skipped on the way back.

use ndarray::{s, Array2, Axis};

use super::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `x w^T`
    MatMulT(Var, Var),
    /// Adds a `1 x n` row to every row.
    AddRow(Var, Var),
    Act(Var, Activation, u8),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    RowSum(Var),
    Abs(Var),
    MinConst(Var, f64),
    /// Row-wise map with stored per-row Jacobians, `rows x (out * in)`,
    /// row-major with output index outer.
    Linearized(Var, Array2<f64>),
    MaxAll(Var, (usize, usize)),
    LogSumExp(Var, f64),
    MeanAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node that needs one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul_t(&mut self, x: Var, w: Var) -> Var {
        let value = self.value(x).dot(&self.value(w).t());
        let g = self.grad_flag(&[x, w]);
        self.push(value, Op::MatMulT(x, w), g)
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let value = self.value(x) + self.value(row);
        let g = self.grad_flag(&[x, row]);
        self.push(value, Op::AddRow(x, row), g)
    }

    /// Elementwise `order`-th derivative of the activation.
    pub fn act(&mut self, x: Var, kind: Activation, order: u8) -> Var {
        let value = self.value(x).mapv(|z| kind.derivative(z, order));
        let g = self.grad_flag(&[x]);
        self.push(value, Op::Act(x, kind, order), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let g = self.grad_flag(&[a, b]);
        self.push(value, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let g = self.grad_flag(&[a, b]);
        self.push(value, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let g = self.grad_flag(&[a, b]);
        self.push(value, Op::Mul(a, b), g)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let g = self.grad_flag(&[a]);
        self.push(value, Op::Scale(a, c), g)
    }

    /// Adds the constant `c` elementwise.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        let g = self.grad_flag(&[a]);
        self.push(value, Op::AddScalar(a), g)
    }

    /// Rows `x[idx[0]], x[idx[1]], ...`; indices may repeat.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let value = self.value(x).select(Axis(0), &idx);
        let g = self.grad_flag(&[x]);
        self.push(value, Op::Gather(x, idx), g)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let flat: Vec<f64> = self.value(x).iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), flat).expect("reshape keeps the element count");
        let g = self.grad_flag(&[x]);
        self.push(value, Op::Reshape(x), g)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + len]).to_owned();
        let g = self.grad_flag(&[x]);
        self.push(value, Op::SliceCols(x, start), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("matching row counts");
        let g = self.grad_flag(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn row_sum(&mut self, x: Var) -> Var {
        let value = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        let g = self.grad_flag(&[x]);
        self.push(value, Op::RowSum(x), g)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::abs);
        let g = self.grad_flag(&[x]);
        self.push(value, Op::Abs(x), g)
    }

    pub fn min_const(&mut self, x: Var, cap: f64) -> Var {
        let value = self.value(x).mapv(|v| v.min(cap));
        let g = self.grad_flag(&[x]);
        self.push(value, Op::MinConst(x, cap), g)
    }

    /// Row-wise map `f(row) -> (value, jacobian)` with `jacobian` row-major
    /// `out x in`.
    pub fn linearized<F>(&mut self, x: Var, out_cols: usize, mut f: F) -> Var
    where
        F: FnMut(usize, &[f64], &mut [f64], &mut [f64]),
    {
        let input = self.value(x);
        let (rows, in_cols) = input.dim();
        let mut value = Array2::zeros((rows, out_cols));
        let mut jac = Array2::zeros((rows, out_cols * in_cols));
        let mut row_in = vec![0.0; in_cols];
        for r in 0..rows {
            row_in.iter_mut().zip(input.row(r)).for_each(|(a, &b)| *a = b);
            let mut out_row = value.row_mut(r);
            let mut jac_row = jac.row_mut(r);
            f(
                r,
                &row_in,
                out_row.as_slice_mut().expect("standard layout"),
                jac_row.as_slice_mut().expect("standard layout"),
            );
        }
        let g = self.grad_flag(&[x]);
        self.push(value, Op::Linearized(x, jac), g)
    }

    /// Largest entry, with the subgradient at the first argmax.
    pub fn max_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut best = (0, 0);
        let mut best_val = f64::NEG_INFINITY;
        // A NaN entry wins so that divergence surfaces in the loss.
        for ((r, c), &e) in v.indexed_iter() {
            if e.is_nan() {
                best_val = e;
                best = (r, c);
                break;
            }
            if e > best_val {
                best_val = e;
                best = (r, c);
            }
        }
        let value = Array2::from_elem((1, 1), best_val);
        let g = self.grad_flag(&[x]);
        self.push(value, Op::MaxAll(x, best), g)
    }

    /// `tau log sum exp(v / tau)`, an upper bound on the max within
    /// `tau log(n)`.
    pub fn log_sum_exp(&mut self, x: Var, tau: f64) -> Var {
        let v = self.value(x);
        let m = v.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let s: f64 = v.iter().map(|&e| ((e - m) / tau).exp()).sum();
        let value = Array2::from_elem((1, 1), m + tau * s.ln());
        let g = self.grad_flag(&[x]);
        self.push(value, Op::LogSumExp(x, tau), g)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(x).mean().unwrap_or(0.0));
        let g = self.grad_flag(&[x]);
        self.push(value, Op::MeanAll(x), g)
    }

    /// Reverse sweep from the `1 x 1` node `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Array2::ones(self.value(out).dim()));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMulT(x, w) => {
                if self.nodes[x.0].needs_grad {
                    self.accumulate(grads, *x, g.dot(self.value(*w)));
                }
                if self.nodes[w.0].needs_grad {
                    self.accumulate(grads, *w, g.t().dot(self.value(*x)));
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.nodes[row.0].needs_grad {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Act(x, kind, order) => {
                let z = self.value(*x);
                let mut out = g.clone();
                out.zip_mut_with(z, |a, &zz| *a *= kind.derivative(zz, order + 1));
                self.accumulate(grads, *x, out);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, -g);
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g * *c),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Gather(x, idx) => {
                let mut out = Array2::zeros(self.value(*x).dim());
                for (r, &src) in idx.iter().enumerate() {
                    let mut row = out.row_mut(src);
                    row += &g.row(r);
                }
                self.accumulate(grads, *x, out);
            }
            Op::Reshape(x) => {
                let flat: Vec<f64> = g.iter().copied().collect();
                let out = Array2::from_shape_vec(self.value(*x).dim(), flat).expect("same count");
                self.accumulate(grads, *x, out);
            }
            Op::SliceCols(x, start) => {
                let mut out = Array2::zeros(self.value(*x).dim());
                out.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                self.accumulate(grads, *x, out);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    if self.nodes[p.0].needs_grad {
                        self.accumulate(grads, *p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::RowSum(x) => {
                let cols = self.value(*x).ncols();
                let out = Array2::from_shape_fn((g.nrows(), cols), |(r, _)| g[[r, 0]]);
                self.accumulate(grads, *x, out);
            }
            Op::Abs(x) => {
                let mut out = g.clone();
                out.zip_mut_with(self.value(*x), |a, &v| *a *= sign(v));
                self.accumulate(grads, *x, out);
            }
            Op::MinConst(x, cap) => {
                let mut out = g.clone();
                out.zip_mut_with(self.value(*x), |a, &v| {
                    if v > *cap {
                        *a = 0.0
                    }
                });
                self.accumulate(grads, *x, out);
            }
            Op::Linearized(x, jac) => {
                let (rows, in_cols) = self.value(*x).dim();
                let out_cols = g.ncols();
                let mut out = Array2::zeros((rows, in_cols));
                for r in 0..rows {
                    for o in 0..out_cols {
                        let go = g[[r, o]];
                        if go == 0.0 {
                            continue;
                        }
                        for c in 0..in_cols {
                            out[[r, c]] += go * jac[[r, o * in_cols + c]];
                        }
                    }
                }
                self.accumulate(grads, *x, out);
            }
            Op::MaxAll(x, at) => {
                let mut out = Array2::zeros(self.value(*x).dim());
                out[*at] = g[[0, 0]];
                self.accumulate(grads, *x, out);
            }
            Op::LogSumExp(x, tau) => {
                let v = self.value(*x);
                let top = node.value[[0, 0]];
                let out = v.mapv(|e| g[[0, 0]] * ((e - top) / tau).exp());
                self.accumulate(grads, *x, out);
            }
            Op::MeanAll(x) => {
                let v = self.value(*x);
                let n = v.len().max(1) as f64;
                self.accumulate(grads, *x, Array2::from_elem(v.dim(), g[[0, 0]] / n));
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad<F: Fn(&Array2<f64>) -> f64>(f: F, at: &Array2<f64>) -> Array2<f64> {
        let h = 1e-6;
        let mut out = Array2::zeros(at.dim());
        for idx in 0..at.len() {
            let (r, c) = (idx / at.ncols(), idx % at.ncols());
            let mut p = at.clone();
            p[[r, c]] += h;
            let mut m = at.clone();
            m[[r, c]] -= h;
            out[[r, c]] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    fn composite(x: &Array2<f64>, grad: bool) -> (f64, Option<Array2<f64>>) {
        let mut t = Tape::new();
        let xv = if grad { t.param(x.clone()) } else { t.constant(x.clone()) };
        let w = t.constant(array![[0.3, -0.7, 0.2], [1.1, 0.4, -0.5]]);
        let b = t.constant(array![[0.1, -0.2]]);
        let z = t.matmul_t(xv, w);
        let z = t.add_row(z, b);
        let a = t.act(z, Activation::Sigmoid, 0);
        let da = t.act(z, Activation::Sigmoid, 1);
        let m = t.mul(a, da);
        let gathered = t.gather(m, vec![1, 0, 1]);
        let r = t.reshape(gathered, 2, 3);
        let sl = t.slice_cols(r, 1, 2);
        let c = t.concat_cols(&[sl, r]);
        let s = t.row_sum(c);
        let s = t.add_scalar(s, -0.9);
        let ab = t.abs(s);
        let lin = t.linearized(ab, 2, |_, v, out, jac| {
            out[0] = v[0] * v[0];
            out[1] = 3.0 * v[0];
            jac[0] = 2.0 * v[0];
            jac[1] = 3.0;
        });
        let cap = t.min_const(lin, 5.0);
        let l = t.log_sum_exp(cap, 0.3);
        let mx = t.max_all(cap);
        let mean = t.mean_all(cap);
        let sum = t.add(l, mx);
        let sum = t.sub(sum, mean);
        let out = t.scale(sum, 1.5);
        let g = grad.then(|| t.backward(out).get(xv).unwrap().clone());
        (t.scalar(out), g)
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let x = array![[0.2, -0.4, 0.9], [0.5, 0.1, -0.3]];
        let (_, g) = composite(&x, true);
        let num = numeric_grad(|p| composite(p, false).0, &x);
        let g = g.unwrap();
        for (a, b) in g.iter().zip(num.iter()) {
            assert!((a - b).abs() < 1e-6, "{g} vs {num}");
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(array![[1.0]]);
        let p = t.param(array![[2.0]]);
        let m = t.mul(c, p);
        let grads = t.backward(m);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap()[[0, 0]], 1.0);
    }

    #[test]
    fn weight_gradient_of_matmul() {
        let mut t = Tape::new();
        let x = t.constant(array![[1.0, 2.0]]);
        let w = t.param(array![[3.0, 4.0]]);
        let y = t.matmul_t(x, w);
        let g = t.backward(y);
        assert_eq!(g.get(w).unwrap(), &array![[1.0, 2.0]]);
        assert_eq!(t.scalar(y), 11.0);
    }

    #[test]
    fn log_sum_exp_bounds_the_max() {
        let mut t = Tape::new();
        let x = t.constant(array![[0.1, 0.5, 0.4, 0.2]]);
        for tau in [1.0, 0.1, 0.01] {
            let l = t.log_sum_exp(x, tau);
            let gap = t.scalar(l) - 0.5;
            assert!(gap >= 0.0 && gap <= tau * 4f64.ln() + 1e-15);
        }
    }
}
