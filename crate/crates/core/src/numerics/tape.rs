//! A single-use reverse-mode gradient tape over dense matrices.
//!
//! Every primitive computes its value eagerly and appends a node. `backward`
//! walks the nodes in reverse and accumulates adjoints into the inputs that
//! depend on at least one parameter leaf; constant subgraphs are skipped.
//!
//! Non-finite values do not abort mid-computation. The first primitive to
//! produce one is remembered and reported by [`Tape::check`], so a caller can
//! write the forward pass as straight-line code and test once at the end.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    BroadcastRows(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Abs(Var),
    ClampMin(Var, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    SumRows(Var),
    Select(Var, usize),
    MinOf(Var, usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<&'static str>,
    branch_signature: u64,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros if the root does not depend on it.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[var.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
            branch_signature: 0xcbf2_9ce4_8422_2325,
        }
    }

    fn push(&mut self, op: Op, value: Tensor, primitive: &'static str) -> Var {
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some(primitive);
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
            }
            Op::Transpose(a)
            | Op::BroadcastRows(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Abs(a)
            | Op::ClampMin(a, _)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::Sum(a)
            | Op::SumRows(a)
            | Op::Select(a, _)
            | Op::MinOf(a, _) => self.nodes[a.0].needs_grad,
        };
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record_branch(&mut self, bit: u64) {
        self.branch_signature = (self.branch_signature ^ bit).wrapping_mul(FNV_PRIME);
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(Op::Leaf, value, "param");
        self.nodes[v.0].needs_grad = true;
        v
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, "constant")
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.item()
    }

    pub fn shape(&self, var: Var) -> [usize; 2] {
        self.nodes[var.0].value.shape()
    }

    /// Fails with the name of the first primitive that produced a non-finite value.
    pub fn check(&self) -> Result<()> {
        match self.fault {
            Some(primitive) => Err(Error::NonFinite { primitive }),
            None => Ok(()),
        }
    }

    /// Hash of every piecewise branch taken so far (ReLU masks, |x| signs,
    /// clamp activity, and min selections). Two evaluations with equal
    /// signatures lie on the same smooth piece of the computed function.
    pub fn branch_signature(&self) -> u64 {
        self.branch_signature
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .matmul(self.value(b))
            .unwrap_or_else(|e| panic!("{e}"));
        self.push(Op::MatMul(a, b), value, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(Op::Transpose(a), value, "transpose")
    }

    fn assert_same(&self, op: &str, a: Var, b: Var) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "shape mismatch in {op}: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same("add", a, b);
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), value, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same("sub", a, b);
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), value, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same("mul", a, b);
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), value, "mul")
    }

    /// Adds the `1 × c` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let [_, c] = self.shape(a);
        assert_eq!(self.shape(row), [1, c], "add_row expects a 1x{c} row");
        let mut value = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.push(Op::AddRow(a, row), value, "add_row")
    }

    /// Repeats a `1 × c` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let [r, c] = self.shape(a);
        assert_eq!(r, 1, "broadcast_rows expects a single row");
        let row = self.value(a).data().to_vec();
        let value = Tensor::from_vec(n, c, row.repeat(n)).expect("shape");
        self.push(Op::BroadcastRows(a), value, "broadcast_rows")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(a, factor), value, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        let value = self.value(a).map(|x| x + offset);
        self.push(Op::AddScalar(a), value, "add_scalar")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        for i in 0..value.len() {
            let bit = u64::from(self.value(a).data()[i] > 0.0);
            self.record_branch(bit);
        }
        self.push(Op::Relu(a), value, "relu")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), value, "exp")
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x.ln() } else { f64::NAN });
        self.push(Op::Log(a), value, "log")
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), value, "square")
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        for i in 0..value.len() {
            let x = self.value(a).data()[i];
            self.record_branch(if x > 0.0 { 1 } else if x < 0.0 { 2 } else { 3 });
        }
        self.push(Op::Abs(a), value, "abs")
    }

    /// `max(a, floor)` elementwise; no gradient flows where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|x| x.max(floor));
        for i in 0..value.len() {
            let bit = u64::from(self.value(a).data()[i] > floor);
            self.record_branch(bit);
        }
        self.push(Op::ClampMin(a, floor), value, "clamp_min")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_rows();
        self.push(Op::SoftmaxRows(a), value, "softmax_rows")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(Op::LogSoftmaxRows(a), value, "log_softmax_rows")
    }

    /// Sum of all entries, as a `1 × 1` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value, "sum")
    }

    /// Per-row sums, as an `r × 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let sums = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        let value = Tensor::from_vec(t.rows(), 1, sums).expect("shape");
        self.push(Op::SumRows(a), value, "sum_rows")
    }

    /// The entry at flat (row-major) position `index`, as a scalar.
    pub fn select(&mut self, a: Var, index: usize) -> Var {
        let value = Tensor::scalar(self.value(a).data()[index]);
        self.push(Op::Select(a, index), value, "select")
    }

    /// Minimum over the entries at the given flat positions. The lowest
    /// listed position wins ties and receives the whole adjoint.
    pub fn min_of(&mut self, a: Var, indices: &[usize]) -> Var {
        assert!(!indices.is_empty(), "min_of over an empty index set");
        let data = self.value(a).data();
        let mut best = indices[0];
        for &i in &indices[1..] {
            if data[i] < data[best] {
                best = i;
            }
        }
        let value = Tensor::scalar(data[best]);
        self.record_branch(best as u64);
        self.push(Op::MinOf(a, best), value, "min_of")
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), [1, 1], "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, a, g.matmul_t(self.value(b)));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, b, self.value(a).t_matmul(g));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, a, g.zip_map(self.value(b), |x, y| x * y));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, b, g.zip_map(self.value(a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, a, g.clone());
                if self.nodes[row.0].needs_grad {
                    self.accumulate(grads, row, column_sums(g));
                }
            }
            Op::BroadcastRows(a) => self.accumulate(grads, a, column_sums(g)),
            Op::Scale(a, factor) => self.accumulate(grads, a, g.map(|x| x * factor)),
            Op::AddScalar(a) => self.accumulate(grads, a, g.clone()),
            Op::Relu(a) => {
                let d = g.zip_map(self.value(a), |x, y| if y > 0.0 { x } else { 0.0 });
                self.accumulate(grads, a, d);
            }
            Op::Exp(a) => self.accumulate(grads, a, g.zip_map(out, |x, y| x * y)),
            Op::Log(a) => self.accumulate(grads, a, g.zip_map(self.value(a), |x, y| x / y)),
            Op::Square(a) => {
                self.accumulate(grads, a, g.zip_map(self.value(a), |x, y| 2.0 * x * y))
            }
            Op::Abs(a) => {
                let d = g.zip_map(self.value(a), |x, y| {
                    if y > 0.0 {
                        x
                    } else if y < 0.0 {
                        -x
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, a, d);
            }
            Op::ClampMin(a, floor) => {
                let d = g.zip_map(self.value(a), |x, y| if y > floor { x } else { 0.0 });
                self.accumulate(grads, a, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = g.clone();
                for r in 0..d.rows() {
                    let y = out.row(r);
                    let dot: f64 = g.row(r).iter().zip(y).map(|(x, y)| x * y).sum();
                    for (dx, &yi) in d.row_mut(r).iter_mut().zip(y) {
                        *dx = yi * (*dx - dot);
                    }
                }
                self.accumulate(grads, a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let mut d = g.clone();
                for r in 0..d.rows() {
                    let mut probs = out.row(r).to_vec();
                    for p in &mut probs {
                        *p = p.exp();
                    }
                    let total: f64 = g.row(r).iter().sum();
                    for (dx, p) in d.row_mut(r).iter_mut().zip(&probs) {
                        *dx -= p * total;
                    }
                }
                self.accumulate(grads, a, d);
            }
            Op::Sum(a) => {
                let [r, c] = self.shape(a);
                self.accumulate(grads, a, Tensor::filled(r, c, g.item()));
            }
            Op::SumRows(a) => {
                let [r, c] = self.shape(a);
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    d.row_mut(i).fill(g.data()[i]);
                }
                self.accumulate(grads, a, d);
            }
            Op::Select(a, index) | Op::MinOf(a, index) => {
                let [r, c] = self.shape(a);
                let mut d = Tensor::zeros(r, c);
                d.data_mut()[index] = g.item();
                self.accumulate(grads, a, d);
            }
        }
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut sums = vec![0.0; g.cols()];
    for r in 0..g.rows() {
        for (s, x) in sums.iter_mut().zip(g.row(r)) {
            *s += x;
        }
    }
    Tensor::row_vector(sums)
}

/// Evaluates `computation` on a fresh tape with every tensor of `params`
/// registered as a differentiable leaf, and returns the scalar loss together
/// with its gradient with respect to each parameter, in input order.
pub fn forward_backward<F>(params: &[Tensor], computation: F) -> Result<(f64, Vec<Tensor>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = computation(&mut tape, &vars)?;
    tape.check()?;
    let grads = tape.backward(root);
    Ok((tape.scalar(root), vars.iter().map(|&v| grads.get(v)).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_grad(x: f64, f: impl FnOnce(&mut Tape, Var) -> Var) -> (f64, f64) {
        let (loss, grads) =
            forward_backward(&[Tensor::scalar(x)], |t, v| Ok(f(t, v[0]))).unwrap();
        (loss, grads[0].item())
    }

    #[test]
    fn square_at_three() {
        let (loss, grad) = scalar_grad(3.0, |t, x| t.mul(x, x));
        assert_eq!(loss, 9.0);
        assert_eq!(grad, 6.0);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let (loss, grad) = scalar_grad(3.0, |t, _| t.constant(Tensor::scalar(4.0)));
        assert_eq!(loss, 4.0);
        assert_eq!(grad, 0.0);
    }

    #[test]
    fn log_of_negative_names_primitive() {
        let err = forward_backward(&[Tensor::scalar(-1.0)], |t, v| Ok(t.log(v[0]))).unwrap_err();
        assert!(matches!(err, Error::NonFinite { primitive: "log" }));
    }

    #[test]
    fn min_of_routes_gradient_to_argmin() {
        let x = Tensor::row_vector(vec![3.0, 1.0, 2.0, 0.5]);
        let (loss, grads) =
            forward_backward(&[x], |t, v| Ok(t.min_of(v[0], &[0, 1, 2]))).unwrap();
        assert_eq!(loss, 1.0);
        assert_eq!(grads[0].data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    fn finite_diff(params: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> Vec<Tensor> {
        let eval = |ps: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
            let root = f(&mut tape, &vars);
            tape.scalar(root)
        };
        let h = 1e-6;
        let mut out = Vec::new();
        for (pi, p) in params.iter().enumerate() {
            let mut g = Tensor::zeros(p.rows(), p.cols());
            for i in 0..p.len() {
                let mut plus = params.to_vec();
                plus[pi].data_mut()[i] += h;
                let mut minus = params.to_vec();
                minus[pi].data_mut()[i] -= h;
                g.data_mut()[i] = (eval(&plus) - eval(&minus)) / (2.0 * h);
            }
            out.push(g);
        }
        out
    }

    #[test]
    fn primitives_match_finite_differences() {
        let a = Tensor::from_rows(&[vec![0.3, -0.7, 1.1], vec![0.9, 0.2, -0.4]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.5, -0.1], vec![0.4, 0.8], vec![-0.6, 0.3]]).unwrap();
        let row = Tensor::row_vector(vec![0.05, -0.2]);
        let f = |t: &mut Tape, v: &[Var]| {
            let ab = t.matmul(v[0], v[1]);
            let ab = t.add_row(ab, v[2]);
            let r = t.relu(ab);
            let e = t.exp(ab);
            let sm = t.softmax_rows(e);
            let lsm = t.log_softmax_rows(ab);
            let bt = t.transpose(v[1]);
            let sq = t.square(bt);
            let ab2 = t.abs(bt);
            let m = t.mul(sq, ab2);
            let s1 = t.sum(m);
            let rs = t.sum_rows(sm);
            let s2 = t.sum(rs);
            let l = t.clamp_min(sm, 0.3);
            let l = t.log(l);
            let s3 = t.sum(l);
            let sel = t.select(lsm, 3);
            let s4 = t.sum(r);
            let bc = t.broadcast_rows(v[2], 3);
            let bc = t.sub(bc, v[1]);
            let s5 = t.sum(bc);
            let s5 = t.square(s5);
            let mn = t.min_of(ab, &[0, 1, 2, 3]);
            let mut acc = t.add(s1, s2);
            for term in [s3, sel, s4, s5, mn] {
                acc = t.add(acc, term);
            }
            let acc = t.scale(acc, 0.7);
            t.add_scalar(acc, 1.0)
        };
        let params = vec![a, b, row];
        let (_, analytic) = forward_backward(&params, |t, v| Ok(f(t, v))).unwrap();
        let numeric = finite_diff(&params, &f);
        for (an, nu) in analytic.iter().zip(&numeric) {
            assert!(an.max_abs_diff(nu) < 1e-6, "{an:?} vs {nu:?}");
        }
    }
}
