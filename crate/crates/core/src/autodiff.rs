//! Define-by-run reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation as it is evaluated. Nodes are appended
//! in evaluation order, so parents always precede children and a backward
//! pass is a single reverse sweep. Constants carry no adjoint storage.
//!
//! Cholesky-based nodes ([`Tape::chol_solve`], [`Tape::logdet`],
//! [`Tape::quad_form`]) keep their forward factor and use the identities
//! `d log|K| = tr(K⁻¹ dK)` and `d(K⁻¹B) = −K⁻¹ dK K⁻¹ B + K⁻¹ dB` instead of
//! differentiating through the factorization.

use ndarray::{Array2, Axis, Zip};

use crate::error::{IgnError, Result};
use crate::linalg::{self, CholeskyFactor, DEFAULT_JITTER_SCHEDULE};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    MatMul,
    Transpose,
    Scale,
    ScaleConst,
    AddRowBroadcast,
    AddScaledIdentity,
    Relu,
    Exp,
    Log,
    Sum,
    SqDist,
    CholSolve,
    LogDet,
    Diag,
    QuadForm,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    /// 1×1 scalar times matrix.
    Scale(usize, usize),
    ScaleConst(f64, usize),
    /// Matrix plus a 1×n row added to every row.
    AddRowBroadcast(usize, usize),
    /// Square matrix plus 1×1 scalar times the identity.
    AddScaledIdentity(usize, usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    SqDist(usize, usize),
    CholSolve {
        k: usize,
        b: usize,
        factor: CholeskyFactor,
    },
    LogDet {
        k: usize,
        factor: CholeskyFactor,
    },
    Diag(usize),
    QuadForm {
        k: usize,
        v: usize,
        solved: Array2<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Scale(..) => OpKind::Scale,
            Op::ScaleConst(..) => OpKind::ScaleConst,
            Op::AddRowBroadcast(..) => OpKind::AddRowBroadcast,
            Op::AddScaledIdentity(..) => OpKind::AddScaledIdentity,
            Op::Relu(..) => OpKind::Relu,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Sum(..) => OpKind::Sum,
            Op::SqDist(..) => OpKind::SqDist,
            Op::CholSolve { .. } => OpKind::CholSolve,
            Op::LogDet { .. } => OpKind::LogDet,
            Op::Diag(..) => OpKind::Diag,
            Op::QuadForm { .. } => OpKind::QuadForm,
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Array2<f64>,
    /// Leaf flagged trainable, or any ancestor is.
    needs_grad: bool,
    /// Trainable leaf.
    requires_grad: bool,
}

/// Append-only operation record.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    jitter_schedule: Vec<f64>,
    jitter_escalations: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to trainable leaves.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` is unreachable from the loss or a constant.
    pub fn get(&self, v: Var) -> Array2<f64> {
        match self.grads.get(v.index).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[v.index]),
        }
    }

    pub fn has(&self, v: Var) -> bool {
        matches!(self.grads.get(v.index), Some(Some(_)))
    }
}

fn dim_err(op: &'static str, a: &Array2<f64>, b: &Array2<f64>) -> IgnError {
    IgnError::Dimension {
        op,
        left: a.dim(),
        right: b.dim(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_jitter_schedule(DEFAULT_JITTER_SCHEDULE.to_vec())
    }

    pub fn with_jitter_schedule(jitter_schedule: Vec<f64>) -> Self {
        Tape {
            nodes: Vec::new(),
            jitter_schedule,
            jitter_escalations: 0,
        }
    }

    pub fn jitter_schedule(&self) -> &[f64] {
        &self.jitter_schedule
    }

    /// Number of factorizations that needed more than the first jitter.
    pub fn jitter_escalations(&self) -> usize {
        self.jitter_escalations
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.index].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.index].value[[0, 0]]
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.index].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Parent indices of a node, in argument order.
    pub fn parents(&self, v: Var) -> Vec<usize> {
        op_parents(&self.nodes[v.index].op)
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        let needs_grad = op_parents(&op).iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            requires_grad: false,
        });
        Var {
            index: self.nodes.len() - 1,
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: true,
            requires_grad: true,
        });
        Var {
            index: self.nodes.len() - 1,
        }
    }

    /// Leaf that receives no adjoint.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: false,
            requires_grad: false,
        });
        Var {
            index: self.nodes.len() - 1,
        }
    }

    /// Leaf with a caller-chosen trainable flag.
    pub fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> Var {
        if requires_grad {
            self.param(value)
        } else {
            self.constant(value)
        }
    }

    pub fn scalar_constant(&mut self, v: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), v))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(dim_err(op, va, vb));
        }
        Ok(())
    }

    fn is_scalar(&self, op: &'static str, s: Var) -> Result<()> {
        let v = self.value(s);
        if v.dim() != (1, 1) {
            return Err(IgnError::Dimension {
                op,
                left: v.dim(),
                right: (1, 1),
            });
        }
        Ok(())
    }

    fn is_square(&self, op: &'static str, k: Var) -> Result<usize> {
        let v = self.value(k);
        if v.nrows() != v.ncols() {
            return Err(IgnError::Dimension {
                op,
                left: v.dim(),
                right: (v.ncols(), v.nrows()),
            });
        }
        Ok(v.nrows())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(Op::Add(a.index, b.index), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("subtract", a, b)?;
        let v = self.value(a) - self.value(b);
        Ok(self.push(Op::Sub(a.index, b.index), v))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("elementwise-multiply", a, b)?;
        let v = self.value(a) * self.value(b);
        Ok(self.push(Op::Mul(a.index, b.index), v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(dim_err("matmul", va, vb));
        }
        let v = va.dot(vb);
        Ok(self.push(Op::MatMul(a.index, b.index), v))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(Op::Transpose(a.index), v)
    }

    /// `s · M` for a 1×1 `s`.
    pub fn scale(&mut self, s: Var, m: Var) -> Result<Var> {
        self.is_scalar("scalar-multiply", s)?;
        let sv = self.scalar(s);
        let v = self.value(m) * sv;
        Ok(self.push(Op::Scale(s.index, m.index), v))
    }

    pub fn scale_const(&mut self, c: f64, m: Var) -> Var {
        let v = self.value(m) * c;
        self.push(Op::ScaleConst(c, m.index), v)
    }

    /// Adds the 1×n row `bias` to every row of `m`.
    pub fn add_row_broadcast(&mut self, m: Var, bias: Var) -> Result<Var> {
        let (vm, vb) = (self.value(m), self.value(bias));
        if vb.nrows() != 1 || vb.ncols() != vm.ncols() {
            return Err(dim_err("broadcast-add", vm, vb));
        }
        let v = vm + vb;
        Ok(self.push(Op::AddRowBroadcast(m.index, bias.index), v))
    }

    /// `K + s·I` for square `K` and 1×1 `s`.
    pub fn add_scaled_identity(&mut self, k: Var, s: Var) -> Result<Var> {
        self.is_square("add-scaled-identity", k)?;
        self.is_scalar("add-scaled-identity", s)?;
        let sv = self.scalar(s);
        let mut v = self.value(k).clone();
        v.diag_mut().mapv_inplace(|d| d + sv);
        Ok(self.push(Op::AddScaledIdentity(k.index, s.index), v))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(Op::Relu(a.index), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(Op::Exp(a.index), v)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(Op::Log(a.index), v)
    }

    /// Sum of all entries, as 1×1.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(Op::Sum(a.index), v)
    }

    /// Pairwise squared distances between rows: `D_ij = ‖a_i − b_j‖²`.
    ///
    /// Uses `‖a‖² + ‖b‖² − 2aᵀb` clamped at zero. When `a` and `b` are the
    /// same node the result is exactly symmetric with a zero diagonal.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.ncols() {
            return Err(dim_err("row-wise squared-distance", va, vb));
        }
        let v = if a == b {
            self_sq_dist(va)
        } else {
            cross_sq_dist(va, vb)
        };
        Ok(self.push(Op::SqDist(a.index, b.index), v))
    }

    fn factor(&mut self, k: &Array2<f64>) -> Result<CholeskyFactor> {
        let f = linalg::cholesky(&k.view(), &self.jitter_schedule)?;
        if f.jitter_used() > self.jitter_schedule[0] {
            self.jitter_escalations += 1;
        }
        Ok(f)
    }

    /// `K⁻¹ B` via Cholesky (K symmetrized, jittered per schedule).
    pub fn chol_solve(&mut self, k: Var, b: Var) -> Result<Var> {
        let n = self.is_square("cholesky-solve", k)?;
        if self.value(b).nrows() != n {
            return Err(dim_err("cholesky-solve", self.value(k), self.value(b)));
        }
        let kv = self.value(k).clone();
        let factor = self.factor(&kv)?;
        let x = factor.solve(&self.value(b).view())?;
        Ok(self.push(
            Op::CholSolve {
                k: k.index,
                b: b.index,
                factor,
            },
            x,
        ))
    }

    /// `log|K|` via Cholesky, as 1×1.
    pub fn logdet(&mut self, k: Var) -> Result<Var> {
        self.is_square("log-determinant", k)?;
        let kv = self.value(k).clone();
        let factor = self.factor(&kv)?;
        let v = Array2::from_elem((1, 1), factor.logdet());
        Ok(self.push(Op::LogDet { k: k.index, factor }, v))
    }

    /// Diagonal of a square matrix as an n×1 column.
    pub fn diag(&mut self, k: Var) -> Result<Var> {
        let n = self.is_square("diagonal-extract", k)?;
        let v = self.value(k).diag().to_owned().into_shape_with_order((n, 1)).unwrap();
        Ok(self.push(Op::Diag(k.index), v))
    }

    /// `tr(Vᵀ K⁻¹ V)` as 1×1; for a column `v` this is `vᵀK⁻¹v`.
    pub fn quad_form(&mut self, k: Var, v: Var) -> Result<Var> {
        let n = self.is_square("quadratic-form", k)?;
        if self.value(v).nrows() != n {
            return Err(dim_err("quadratic-form", self.value(k), self.value(v)));
        }
        let kv = self.value(k).clone();
        let factor = self.factor(&kv)?;
        let solved = factor.solve(&self.value(v).view())?;
        let q = (self.value(v) * &solved).sum();
        Ok(self.push(
            Op::QuadForm {
                k: k.index,
                v: v.index,
                solved,
            },
            Array2::from_elem((1, 1), q),
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.dim() != (1, 1) {
            return Err(IgnError::contract(format!(
                "backward requires a 1x1 loss, got {:?}",
                lv.dim()
            )));
        }
        let n = loss.index + 1;
        let mut adj: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.index].needs_grad {
            adj[loss.index] = Some(Array2::ones((1, 1)));
        }

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut adj);
        }

        // Non-leaf adjoints were consumed above; what remains belongs to leaves.
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (i, a) in adj.into_iter().enumerate() {
            if self.nodes[i].requires_grad {
                grads[i] = Some(a.unwrap_or_else(|| Array2::zeros(self.nodes[i].value.dim())));
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.dim()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &Array2<f64>, adj: &mut [Option<Array2<f64>>]) {
        let nodes = &self.nodes;
        let needs = |p: usize| nodes[p].needs_grad;
        let mut acc = |p: usize, contrib: Array2<f64>| {
            match &mut adj[p] {
                Some(existing) => *existing += &contrib,
                slot @ None => *slot = Some(contrib),
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
                if needs(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
                if needs(*b) {
                    acc(*b, -g);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g * &nodes[*b].value);
                }
                if needs(*b) {
                    acc(*b, g * &nodes[*a].value);
                }
            }
            Op::MatMul(a, b) => {
                if needs(*a) {
                    acc(*a, g.dot(&nodes[*b].value.t()));
                }
                if needs(*b) {
                    acc(*b, nodes[*a].value.t().dot(g));
                }
            }
            Op::Transpose(a) => {
                if needs(*a) {
                    acc(*a, g.t().to_owned());
                }
            }
            Op::Scale(s, m) => {
                let sv = nodes[*s].value[[0, 0]];
                if needs(*s) {
                    let ds = (g * &nodes[*m].value).sum();
                    acc(*s, Array2::from_elem((1, 1), ds));
                }
                if needs(*m) {
                    acc(*m, g * sv);
                }
            }
            Op::ScaleConst(c, m) => {
                if needs(*m) {
                    acc(*m, g * *c);
                }
            }
            Op::AddRowBroadcast(m, bias) => {
                if needs(*m) {
                    acc(*m, g.clone());
                }
                if needs(*bias) {
                    acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::AddScaledIdentity(k, s) => {
                if needs(*k) {
                    acc(*k, g.clone());
                }
                if needs(*s) {
                    acc(*s, Array2::from_elem((1, 1), g.diag().sum()));
                }
            }
            Op::Relu(a) => {
                if needs(*a) {
                    let mut d = g.clone();
                    Zip::from(&mut d)
                        .and(&nodes[*a].value)
                        .for_each(|d, &x| {
                            if x <= 0.0 {
                                *d = 0.0
                            }
                        });
                    acc(*a, d);
                }
            }
            Op::Exp(a) => {
                if needs(*a) {
                    acc(*a, g * &nodes[i].value);
                }
            }
            Op::Log(a) => {
                if needs(*a) {
                    acc(*a, g / &nodes[*a].value);
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    acc(*a, Array2::from_elem(nodes[*a].value.dim(), g[[0, 0]]));
                }
            }
            Op::SqDist(a, b) => {
                // ∂D_ij/∂a_i = 2(a_i − b_j), ∂D_ij/∂b_j = 2(b_j − a_i).
                let va = &nodes[*a].value;
                let vb = &nodes[*b].value;
                if needs(*a) {
                    let row = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let da = (va * &row - g.dot(vb)) * 2.0;
                    acc(*a, da);
                }
                if needs(*b) {
                    let col = g.sum_axis(Axis(0)).insert_axis(Axis(1));
                    let db = (vb * &col - g.t().dot(va)) * 2.0;
                    acc(*b, db);
                }
            }
            Op::CholSolve { k, b, factor } => {
                let x = &nodes[i].value;
                let gb = factor.solve(&g.view()).expect("factor shape fixed at record time");
                if needs(*k) {
                    let mut dk = gb.dot(&x.t());
                    dk += &x.dot(&gb.t());
                    dk.mapv_inplace(|v| -0.5 * v);
                    acc(*k, dk);
                }
                if needs(*b) {
                    acc(*b, gb);
                }
            }
            Op::LogDet { k, factor } => {
                if needs(*k) {
                    acc(*k, factor.inverse() * g[[0, 0]]);
                }
            }
            Op::Diag(k) => {
                if needs(*k) {
                    let n = nodes[*k].value.nrows();
                    let mut d = Array2::zeros((n, n));
                    for j in 0..n {
                        d[[j, j]] = g[[j, 0]];
                    }
                    acc(*k, d);
                }
            }
            Op::QuadForm { k, v, solved } => {
                let gs = g[[0, 0]];
                if needs(*k) {
                    acc(*k, solved.dot(&solved.t()) * (-gs));
                }
                if needs(*v) {
                    acc(*v, solved * (2.0 * gs));
                }
            }
        }
    }
}

fn op_parents(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::MatMul(a, b)
        | Op::Scale(a, b)
        | Op::AddRowBroadcast(a, b)
        | Op::AddScaledIdentity(a, b)
        | Op::SqDist(a, b) => vec![*a, *b],
        Op::CholSolve { k, b, .. } => vec![*k, *b],
        Op::QuadForm { k, v, .. } => vec![*k, *v],
        Op::LogDet { k, .. } => vec![*k],
        Op::Transpose(a)
        | Op::ScaleConst(_, a)
        | Op::Relu(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Sum(a)
        | Op::Diag(a) => vec![*a],
    }
}

fn row_sq_norms(a: &Array2<f64>) -> Vec<f64> {
    a.rows().into_iter().map(|r| r.dot(&r)).collect()
}

pub(crate) fn cross_sq_dist(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let na = row_sq_norms(a);
    let nb = row_sq_norms(b);
    let mut d = a.dot(&b.t());
    for ((i, j), v) in d.indexed_iter_mut() {
        *v = (na[i] + nb[j] - 2.0 * *v).max(0.0);
    }
    d
}

pub(crate) fn self_sq_dist(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let na = row_sq_norms(a);
    let g = a.dot(&a.t());
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (na[i] + na[j] - 2.0 * g[[i, j]]).max(0.0);
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn rand_spd(n: usize, rng: &mut impl Rng) -> Array2<f64> {
        let a = rand_mat(n, n, rng);
        let mut k = a.dot(&a.t());
        for i in 0..n {
            k[[i, i]] += n as f64;
        }
        k
    }

    /// Central differences of `f` over every entry of `inputs[which]`.
    fn fd_check<F>(inputs: &[Array2<f64>], f: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let loss = f(&mut tape, &vars);
        let grads = tape.backward(loss).unwrap();
        let eval = |xs: &[Array2<f64>]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
            let l = f(&mut t, &vs);
            t.scalar(l)
        };
        let eps = 1e-5;
        for (w, input) in inputs.iter().enumerate() {
            let g = grads.get(vars[w]);
            assert_eq!(g.dim(), input.dim());
            for idx in 0..input.len() {
                let (r, c) = (idx / input.ncols(), idx % input.ncols());
                let mut plus = inputs.to_vec();
                plus[w][[r, c]] += eps;
                let mut minus = inputs.to_vec();
                minus[w][[r, c]] -= eps;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let ad = g[[r, c]];
                let err = (fd - ad).abs();
                assert!(
                    err < 1e-7 || err / fd.abs().max(ad.abs()) < 1e-4,
                    "input {w} entry ({r},{c}): ad {ad} fd {fd}"
                );
            }
        }
    }

    #[test]
    fn add_and_identity_matmul_values() {
        let mut t = Tape::new();
        let a = t.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = t.constant(array![[0.5, 0.5], [-1.0, 2.0]]);
        let s = t.add(a, b).unwrap();
        assert_eq!(t.value(s), &array![[1.5, 2.5], [2.0, 6.0]]);

        let i = t.constant(Array2::eye(3));
        let m = t.constant(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let p = t.matmul(i, m).unwrap();
        assert_eq!(t.value(p), t.value(m));
    }

    #[test]
    fn nonconforming_matmul_is_dimension_error() {
        let mut t = Tape::new();
        let a = t.constant(Array2::zeros((2, 3)));
        let b = t.constant(Array2::zeros((2, 3)));
        match t.matmul(a, b) {
            Err(IgnError::Dimension { op, left, right }) => {
                assert_eq!(op, "matmul");
                assert_eq!(left, (2, 3));
                assert_eq!(right, (2, 3));
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let w = t.param(array![[1.0, 2.0], [3.0, 4.0]]);
        let sq = t.mul(w, w).unwrap();
        let l = t.sum(sq);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(w), array![[2.0, 4.0], [6.0, 8.0]]);
    }

    #[test]
    fn logdet_gradient_is_inverse() {
        let mut t = Tape::new();
        let k = t.param(array![[2.0, 0.0], [0.0, 3.0]]);
        let l = t.logdet(k).unwrap();
        let g = t.backward(l).unwrap().get(k);
        assert!((g[[0, 0]] - 0.5).abs() < 1e-15);
        assert!((g[[1, 1]] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(g[[0, 1]], 0.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let a = t.param(Array2::zeros((2, 2)));
        assert!(matches!(t.backward(a), Err(IgnError::Contract(_))));
    }

    #[test]
    fn unreachable_and_constant_get_zero() {
        let mut t = Tape::new();
        let a = t.param(array![[1.0]]);
        let unused = t.param(array![[5.0, 6.0]]);
        let c = t.constant(array![[2.0]]);
        let p = t.mul(a, c).unwrap();
        let g = t.backward(p).unwrap();
        assert_eq!(g.get(a), array![[2.0]]);
        assert_eq!(g.get(unused), array![[0.0, 0.0]]);
        assert!(!g.has(c));
        assert_eq!(g.get(c), array![[0.0]]);
    }

    #[test]
    fn parents_precede_children() {
        let mut t = Tape::new();
        let a = t.param(array![[1.0, 2.0]]);
        let b = t.transpose(a);
        let c = t.matmul(a, b).unwrap();
        let d = t.exp(c);
        for v in [b, c, d] {
            assert!(t.parents(v).iter().all(|&p| p < v.index()));
        }
        assert_eq!(t.kind(c), OpKind::MatMul);
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_mat(3, 2, &mut rng);
        let b = rand_mat(3, 2, &mut rng);
        fd_check(&[a.clone(), b.clone()], |t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            let d = t.sub(s, v[1]).unwrap();
            let m = t.mul(d, v[1]).unwrap();
            let e = t.exp(m);
            let r = t.relu(e);
            let sc = t.scale_const(0.3, r);
            let lg = t.log(sc);
            t.sum(lg)
        });
    }

    #[test]
    fn relu_away_from_kink() {
        let a = array![[0.5, -0.7], [1.2, -0.1]];
        fd_check(&[a], |t, v| {
            let r = t.relu(v[0]);
            let sq = t.mul(r, r).unwrap();
            t.sum(sq)
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = rand_mat(3, 4, &mut rng);
        let b = rand_mat(4, 2, &mut rng);
        let bias = rand_mat(1, 2, &mut rng);
        let s = rand_mat(1, 1, &mut rng);
        fd_check(&[a, b, bias, s], |t, v| {
            let p = t.matmul(v[0], v[1]).unwrap();
            let q = t.add_row_broadcast(p, v[2]).unwrap();
            let r = t.scale(v[3], q).unwrap();
            let rt = t.transpose(r);
            let g = t.matmul(rt, r).unwrap();
            let h = t.add_scaled_identity(g, v[3]).unwrap();
            let d = t.diag(h).unwrap();
            let e = t.mul(d, d).unwrap();
            t.sum(e)
        });
    }

    #[test]
    fn sq_dist_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = rand_mat(4, 3, &mut rng);
        let b = rand_mat(2, 3, &mut rng);
        let w = rand_mat(4, 2, &mut rng);
        fd_check(&[a.clone(), b, w.clone()], |t, v| {
            let d = t.sq_dist(v[0], v[1]).unwrap();
            let m = t.mul(d, v[2]).unwrap();
            t.sum(m)
        });
        let w2 = rand_mat(4, 4, &mut rng);
        fd_check(&[a, w2], |t, v| {
            let d = t.sq_dist(v[0], v[0]).unwrap();
            let e = t.scale_const(-0.7, d);
            let k = t.exp(e);
            let m = t.mul(k, v[1]).unwrap();
            t.sum(m)
        });
    }

    #[test]
    fn self_sq_dist_is_exactly_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mat(7, 3, &mut rng);
        let d = self_sq_dist(&a);
        assert_eq!(d, d.t());
        assert!(d.diag().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cholesky_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let k = rand_spd(4, &mut rng);
        let b = rand_mat(4, 2, &mut rng);
        let w = rand_mat(4, 2, &mut rng);
        fd_check(&[k.clone(), b.clone(), w], |t, v| {
            let x = t.chol_solve(v[0], v[1]).unwrap();
            let m = t.mul(x, v[2]).unwrap();
            t.sum(m)
        });
        fd_check(&[k.clone()], |t, v| t.logdet(v[0]).unwrap());
        fd_check(&[k, b], |t, v| t.quad_form(v[0], v[1]).unwrap());
    }

    #[test]
    fn repeated_backward_is_bitwise_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = Tape::new();
        let k = t.param(rand_spd(5, &mut rng));
        let b = t.param(rand_mat(5, 1, &mut rng));
        let q = t.quad_form(k, b).unwrap();
        let l = t.logdet(k).unwrap();
        let s = t.add(q, l).unwrap();
        let g1 = t.backward(s).unwrap();
        let g2 = t.backward(s).unwrap();
        assert_eq!(g1.get(k), g2.get(k));
        assert_eq!(g1.get(b), g2.get(b));
    }

    #[test]
    fn gradient_is_linear_in_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut t = Tape::new();
        let k = t.param(rand_spd(4, &mut rng));
        let b = t.param(rand_mat(4, 1, &mut rng));
        let l1 = t.quad_form(k, b).unwrap();
        let l2 = t.logdet(k).unwrap();
        let s = t.add(l1, l2).unwrap();
        let gs = t.backward(s).unwrap().get(k);
        let g1 = t.backward(l1).unwrap().get(k);
        let g2 = t.backward(l2).unwrap().get(k);
        let diff = &gs - &(g1 + g2);
        assert!(diff.iter().all(|v| v.abs() < 1e-13));
    }
}
