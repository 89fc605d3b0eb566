//! Minimal reverse-mode automatic differentiation over dense real arrays.
//!
//! A [`Graph`] is a define-by-run tape: each operation evaluates eagerly and
//! appends one node recording its inputs, so nodes are already in topological
//! order and [`Graph::backward`] is a single reverse sweep. Gradients
//! accumulate with `+=` at fan-out and are zeroed explicitly between passes.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Neg(Var),
    Ln(Var),
    Softmax(Var),
    /// Concatenate along the leading axis (vectors join end to end).
    ConcatRows(Vec<Var>),
    /// Build a matrix whose rows are equal-length vectors.
    StackRows(Vec<Var>),
    /// Select one row of a matrix.
    Row(Var, usize),
    /// Select one element, as a length-1 vector.
    Pick(Var, usize),
    Sum(Var),
}

struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    grad: Vec<F>,
    op: Op,
}

impl<F> Node<F> {
    fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }
    fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }
}

/// Append-only computation tape.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{what}: {a:?} vs {b:?}"))
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op) -> Var {
        let grad = vec![F::zero(); value.len()];
        self.nodes.push(Node { shape, value, grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Register a leaf holding a copy of `data`.
    pub fn leaf(&mut self, shape: &[usize], data: &[F]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape.to_vec(), data.to_vec(), Op::Leaf)
    }

    pub fn vector(&mut self, data: &[F]) -> Var {
        self.push(vec![data.len()], data.to_vec(), Op::Leaf)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        let numel = shape.iter().product();
        self.push(shape.to_vec(), vec![F::zero(); numel], Op::Leaf)
    }

    pub fn scalar(&mut self, x: F) -> Var {
        self.push(vec![1], vec![x], Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn value_scalar(&self, v: Var) -> F {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> &[F] {
        &self.nodes[v.0].grad
    }

    /// Matrix product. Rank-1 operands are treated as a single row on the
    /// left and a single column on the right, so `matmul([m×k], [k]) -> [m]`,
    /// `matmul([k], [k×n]) -> [n]` and `matmul([k], [k]) -> [1]` (dot).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = (
            if self.nodes[a.0].shape.len() == 2 { self.nodes[a.0].shape[0] } else { 1 },
            self.nodes[a.0].cols(),
        );
        let (br, bc) = if self.nodes[b.0].shape.len() == 2 {
            (self.nodes[b.0].shape[0], self.nodes[b.0].shape[1])
        } else {
            (self.nodes[b.0].shape[0], 1)
        };
        if ac != br {
            return Err(shape_err("matmul inner extents", &self.nodes[a.0].shape, &self.nodes[b.0].shape));
        }
        let mut out = vec![F::zero(); ar * bc];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for i in 0..ar {
                for k in 0..ac {
                    let aik = av[i * ac + k];
                    if aik == F::zero() {
                        continue;
                    }
                    let brow = &bv[k * bc..(k + 1) * bc];
                    let orow = &mut out[i * bc..(i + 1) * bc];
                    for j in 0..bc {
                        orow[j] += aik * brow[j];
                    }
                }
            }
        }
        // Output rank follows the operands: two rank-1 inputs give a dot
        // product of shape [1]; a single rank-1 input drops that axis.
        let a1 = self.nodes[a.0].shape.len() == 1;
        let b1 = self.nodes[b.0].shape.len() == 1;
        let shape = match (a1, b1) {
            (true, true) => vec![1],
            (true, false) => vec![bc],
            (false, true) => vec![ar],
            (false, false) => vec![ar, bc],
        };
        Ok(self.push(shape, out, Op::MatMul(a, b)))
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(shape_err(what, &self.nodes[a.0].shape, &self.nodes[b.0].shape));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add operands")?;
        let value: Vec<F> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub operands")?;
        let value: Vec<F> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x - y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul operands")?;
        let value: Vec<F> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), value, Op::Mul(a, b)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value: Vec<F> = self.nodes[a.0].value.iter().map(|&x| x.tanh()).collect();
        self.push(self.nodes[a.0].shape.clone(), value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = F::one();
        let value: Vec<F> = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| one / (one + (-x).exp()))
            .collect();
        self.push(self.nodes[a.0].shape.clone(), value, Op::Sigmoid(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value: Vec<F> = self.nodes[a.0].value.iter().map(|&x| -x).collect();
        self.push(self.nodes[a.0].shape.clone(), value, Op::Neg(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value: Vec<F> = self.nodes[a.0].value.iter().map(|&x| x.ln()).collect();
        self.push(self.nodes[a.0].shape.clone(), value, Op::Ln(a))
    }

    /// Numerically stable softmax over a vector.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        if self.nodes[a.0].shape.len() != 1 {
            return Err(Error::Shape(format!(
                "softmax expects a vector, got shape {:?}",
                self.nodes[a.0].shape
            )));
        }
        let xs = &self.nodes[a.0].value;
        if xs.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let max = xs.iter().cloned().fold(xs[0], F::max);
        let exps: Vec<F> = xs.iter().map(|&x| (x - max).exp()).collect();
        let total = exps.iter().fold(F::zero(), |acc, &e| acc + e);
        let value: Vec<F> = exps.iter().map(|&e| e / total).collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), value, Op::Softmax(a)))
    }

    /// Concatenate along the leading axis. Vectors concatenate end to end;
    /// matrices stack rows and must share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero tensors".into()));
        }
        let rank1 = self.nodes[parts[0].0].shape.len() == 1;
        let cols = self.nodes[parts[0].0].cols();
        let mut value = Vec::new();
        let mut rows = 0usize;
        let mut len = 0usize;
        for &p in parts {
            let n = &self.nodes[p.0];
            if !rank1 || n.shape.len() == 2 {
                if n.cols() != cols || n.shape.len() != self.nodes[parts[0].0].shape.len() {
                    return Err(shape_err("concat_rows parts", &self.nodes[parts[0].0].shape, &n.shape));
                }
            }
            rows += n.rows();
            len += n.value.len();
            value.extend_from_slice(&n.value);
        }
        let shape = if rank1 { vec![len] } else { vec![rows, cols] };
        Ok(self.push(shape, value, Op::ConcatRows(parts.to_vec())))
    }

    /// Stack equal-length vectors into a matrix, one vector per row.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::Contract("stack_rows of zero vectors".into()));
        }
        let cols = self.nodes[rows[0].0].cols();
        let mut value = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            let n = &self.nodes[r.0];
            if n.shape.len() != 1 || n.cols() != cols {
                return Err(shape_err("stack_rows parts", &self.nodes[rows[0].0].shape, &n.shape));
            }
            value.extend_from_slice(&n.value);
        }
        Ok(self.push(vec![rows.len(), cols], value, Op::StackRows(rows.to_vec())))
    }

    /// Select row `i` of a matrix as a vector (embedding lookup).
    pub fn row(&mut self, m: Var, i: usize) -> Result<Var> {
        let n = &self.nodes[m.0];
        if n.shape.len() != 2 {
            return Err(Error::Shape(format!("row() expects a matrix, got {:?}", n.shape)));
        }
        if i >= n.shape[0] {
            return Err(Error::Contract(format!("row {i} out of {} rows", n.shape[0])));
        }
        let cols = n.shape[1];
        let value = n.value[i * cols..(i + 1) * cols].to_vec();
        Ok(self.push(vec![cols], value, Op::Row(m, i)))
    }

    /// Select element `i` of a vector as a length-1 vector.
    pub fn pick(&mut self, v: Var, i: usize) -> Result<Var> {
        let n = &self.nodes[v.0];
        if n.shape.len() != 1 {
            return Err(Error::Shape(format!("pick() expects a vector, got {:?}", n.shape)));
        }
        if i >= n.value.len() {
            return Err(Error::Contract(format!("index {i} out of {}", n.value.len())));
        }
        let value = vec![n.value[i]];
        Ok(self.push(vec![1], value, Op::Pick(v, i)))
    }

    pub fn sum(&mut self, v: Var) -> Var {
        let total = self.nodes[v.0].value.iter().fold(F::zero(), |acc, &x| acc + x);
        self.push(vec![1], vec![total], Op::Sum(v))
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            for g in &mut n.grad {
                *g = F::zero();
            }
        }
    }

    /// Reverse sweep from a scalar loss. Every node reachable from `loss`
    /// receives `d loss / d node`, accumulated over all paths; grads of
    /// unreachable nodes are left untouched (zero after [`zero_grads`]).
    ///
    /// [`zero_grads`]: Graph::zero_grads
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.nodes[loss.0].grad[0] = self.nodes[loss.0].grad[0] + F::one();
        for i in (0..=loss.0).rev() {
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ar = if self.nodes[a.0].shape.len() == 2 { self.nodes[a.0].shape[0] } else { 1 };
                    let ac = self.nodes[a.0].cols();
                    let bc = if self.nodes[b.0].shape.len() == 2 { self.nodes[b.0].shape[1] } else { 1 };
                    // a.grad += g · bᵀ ; b.grad += aᵀ · g
                    for r in 0..ar {
                        for k in 0..ac {
                            let mut acc = F::zero();
                            for j in 0..bc {
                                acc += self.nodes[i].grad[r * bc + j] * self.nodes[b.0].value[k * bc + j];
                            }
                            self.nodes[a.0].grad[r * ac + k] += acc;
                        }
                    }
                    for k in 0..ac {
                        for j in 0..bc {
                            let mut acc = F::zero();
                            for r in 0..ar {
                                acc += self.nodes[a.0].value[r * ac + k] * self.nodes[i].grad[r * bc + j];
                            }
                            self.nodes[b.0].grad[k * bc + j] += acc;
                        }
                    }
                }
                Op::Add(a, b) => {
                    for j in 0..self.nodes[i].grad.len() {
                        let g = self.nodes[i].grad[j];
                        self.nodes[a.0].grad[j] += g;
                        self.nodes[b.0].grad[j] += g;
                    }
                }
                Op::Sub(a, b) => {
                    for j in 0..self.nodes[i].grad.len() {
                        let g = self.nodes[i].grad[j];
                        self.nodes[a.0].grad[j] += g;
                        self.nodes[b.0].grad[j] -= g;
                    }
                }
                Op::Mul(a, b) => {
                    for j in 0..self.nodes[i].grad.len() {
                        let g = self.nodes[i].grad[j];
                        let av = self.nodes[a.0].value[j];
                        let bv = self.nodes[b.0].value[j];
                        self.nodes[a.0].grad[j] += g * bv;
                        self.nodes[b.0].grad[j] += g * av;
                    }
                }
                Op::Tanh(a) => {
                    for j in 0..self.nodes[i].grad.len() {
                        let y = self.nodes[i].value[j];
                        let g = self.nodes[i].grad[j];
                        self.nodes[a.0].grad[j] += g * (F::one() - y * y);
                    }
                }
                Op::Sigmoid(a) => {
                    for j in 0..self.nodes[i].grad.len() {
                        let y = self.nodes[i].value[j];
                        let g = self.nodes[i].grad[j];
                        self.nodes[a.0].grad[j] += g * y * (F::one() - y);
                    }
                }
                Op::Neg(a) => {
                    for j in 0..self.nodes[i].grad.len() {
                        let g = self.nodes[i].grad[j];
                        self.nodes[a.0].grad[j] -= g;
                    }
                }
                Op::Ln(a) => {
                    for j in 0..self.nodes[i].grad.len() {
                        let g = self.nodes[i].grad[j];
                        let x = self.nodes[a.0].value[j];
                        self.nodes[a.0].grad[j] += g / x;
                    }
                }
                Op::Softmax(a) => {
                    // dx_i = y_i (g_i − Σ_j g_j y_j)
                    let mut dot = F::zero();
                    for j in 0..self.nodes[i].grad.len() {
                        dot += self.nodes[i].grad[j] * self.nodes[i].value[j];
                    }
                    for j in 0..self.nodes[i].grad.len() {
                        let y = self.nodes[i].value[j];
                        let g = self.nodes[i].grad[j];
                        self.nodes[a.0].grad[j] += y * (g - dot);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0usize;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        for j in 0..len {
                            let g = self.nodes[i].grad[offset + j];
                            self.nodes[p.0].grad[j] += g;
                        }
                        offset += len;
                    }
                }
                Op::StackRows(rows) => {
                    let cols = self.nodes[i].cols();
                    for (r, p) in rows.into_iter().enumerate() {
                        for j in 0..cols {
                            let g = self.nodes[i].grad[r * cols + j];
                            self.nodes[p.0].grad[j] += g;
                        }
                    }
                }
                Op::Row(m, r) => {
                    let cols = self.nodes[i].value.len();
                    for j in 0..cols {
                        let g = self.nodes[i].grad[j];
                        self.nodes[m.0].grad[r * cols + j] += g;
                    }
                }
                Op::Pick(v, idx) => {
                    let g = self.nodes[i].grad[0];
                    self.nodes[v.0].grad[idx] += g;
                }
                Op::Sum(v) => {
                    let g = self.nodes[i].grad[0];
                    for j in 0..self.nodes[v.0].grad.len() {
                        self.nodes[v.0].grad[j] += g;
                    }
                }
            }
        }
        Ok(())
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Outcome of checking one named parameter group against central finite
/// differences.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct FinDiffReport {
    pub checks: Vec<ParamCheck>,
    pub step: f64,
    pub tol: f64,
}

impl FinDiffReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.checks.iter().filter(|c| !c.pass)
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// A differentiable objective exposed entry-by-entry for finite differencing:
/// named parameter groups with get/set access plus re-evaluation of the loss
/// at the current values.
pub trait LossProbe<F: Scalar> {
    fn groups(&self) -> Vec<(String, usize)>;
    fn get(&self, group: usize, index: usize) -> F;
    fn set(&mut self, group: usize, index: usize, value: F);
    fn loss(&mut self) -> Result<f64>;
}

/// Compare analytic gradients against central finite differences.
///
/// `analytic[k][j]` must hold the analytic gradient for entry `j` of group
/// `k`. Each entry is perturbed by ±`step` in turn and restored exactly.
pub fn finite_diff_check<F: Scalar>(
    probe: &mut impl LossProbe<F>,
    analytic: &[Vec<f64>],
    step: f64,
    tol: f64,
) -> Result<FinDiffReport> {
    if step <= 0.0 {
        return Err(Error::Contract("finite difference step must be positive".into()));
    }
    let groups = probe.groups();
    let mut checks = Vec::with_capacity(groups.len());
    for (k, (name, len)) in groups.into_iter().enumerate() {
        let mut max_rel = 0.0f64;
        let mut worst = 0usize;
        for j in 0..len {
            let orig = probe.get(k, j);
            probe.set(k, j, orig + F::lit(step));
            let up = probe.loss()?;
            probe.set(k, j, orig - F::lit(step));
            let down = probe.loss()?;
            probe.set(k, j, orig);
            let numeric = (up - down) / (2.0 * step);
            let e = rel_err(analytic[k][j], numeric);
            if e > max_rel {
                max_rel = e;
                worst = j;
            }
        }
        checks.push(ParamCheck { name, max_rel_err: max_rel, worst_index: worst, pass: max_rel <= tol });
    }
    Ok(FinDiffReport { checks, step, tol })
}
