//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order. [`Graph::backward`] consumes the graph, so each tape is
//! differentiated at most once.

use super::matrix::{dot, softmax, Matrix};
use super::params::{ParamId, ParameterStore};
use crate::error::{CdapError, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    ScaleRows(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Column(Var, usize),
    RowSoftmax(Var),
    LogSoftmax(Var),
    RowDot(Var, Var),
    RowSqDist(Var, Var),
    NegSqEuclidean(Var, Var),
    Sqrt(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Matrix<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    Log(Var),
    KlRows {
        a: Var,
        b: Var,
        temperature: T,
        p: Matrix<T>,
        q: Matrix<T>,
        log_ratio: Matrix<T>,
    },
    Sum(Var),
    PickSum(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The tape.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `var`; `None` when `var` did not
    /// require gradients or did not influence the loss.
    pub fn wrt(&self, var: Var) -> Option<&Matrix<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for every parameter bound to the graph. Parameters that did not
    /// participate in the loss are omitted (their gradient is zero).
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Matrix<T>)> {
        self.params
            .iter()
            .filter_map(|&(id, var)| self.wrt(var).map(|g| (id, g)))
    }

    /// Gradient for a specific parameter.
    pub fn param(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.params
            .iter()
            .find(|(pid, _)| *pid == id)
            .and_then(|&(_, var)| self.wrt(var))
    }
}

fn shape_err(op: &'static str, left: (usize, usize), right: (usize, usize)) -> CdapError {
    CdapError::Shape { op, left, right }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// A tensor that never receives gradients.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A free leaf that receives gradients (used for gradient checks).
    pub fn input(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Input, true)
    }

    /// Binds a snapshot of a stored parameter to this graph.
    pub fn param(&mut self, store: &ParameterStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("add", sa, sb));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("sub", sa, sb));
        }
        let mut value = self.value(a).clone();
        for (x, &y) in value.as_mut_slice().iter_mut().zip(self.value(b).as_slice()) {
            *x -= y;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Adds a 1×c row to every row of an m×c matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(shape_err("add_row", sa, sr));
        }
        let mut value = self.value(a).clone();
        let r = self.value(row).as_slice().to_vec();
        for i in 0..sa.0 {
            for (x, &b) in value.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Multiplies row `i` of an m×d matrix by `weights[i]` (an m×1 column).
    pub fn scale_rows(&mut self, a: Var, weights: Var) -> Result<Var> {
        let (sa, sw) = (self.shape(a), self.shape(weights));
        if sw != (sa.0, 1) {
            return Err(shape_err("scale_rows", sa, sw));
        }
        let mut value = self.value(a).clone();
        for i in 0..sa.0 {
            let w = self.value(weights)[(i, 0)];
            value.row_mut(i).iter_mut().for_each(|x| *x *= w);
        }
        let rg = self.rg(a) || self.rg(weights);
        Ok(self.push(value, Op::ScaleRows(a, weights), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| CdapError::contract("concat_cols of zero tensors"))?;
        let rows = self.shape(*first).0;
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(shape_err("concat_cols", self.shape(*first), s));
            }
            cols += s.1;
        }
        let mut value = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p).row(i);
                value.row_mut(i)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| CdapError::contract("concat_rows of zero tensors"))?;
        let cols = self.shape(*first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.1 != cols {
                return Err(shape_err("concat_rows", self.shape(*first), s));
            }
            rows += s.0;
            data.extend_from_slice(self.value(p).as_slice());
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Selects rows (with repetition allowed).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(shape_err("gather_rows", (rows, cols), (bad, 0)));
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(self.value(a).row(i));
        }
        let value = Matrix::from_vec(indices.len(), cols, data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::GatherRows(a, indices.to_vec()), rg))
    }

    /// Column `j` as an m×1 matrix.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if j >= cols {
            return Err(shape_err("column", (rows, cols), (0, j)));
        }
        let data = (0..rows).map(|i| self.value(a)[(i, j)]).collect();
        let value = Matrix::from_vec(rows, 1, data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Column(a, j), rg))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = Matrix::zeros(src.rows(), src.cols());
        for i in 0..src.rows() {
            value.row_mut(i).copy_from_slice(&softmax(src.row(i)));
        }
        let rg = self.rg(a);
        self.push(value, Op::RowSoftmax(a), rg)
    }

    /// `row_softmax(a / temperature)`.
    pub fn scaled_softmax(&mut self, a: Var, temperature: T) -> Var {
        let scaled = self.scale(a, T::one() / temperature);
        self.row_softmax(scaled)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = Matrix::zeros(src.rows(), src.cols());
        for i in 0..src.rows() {
            let row = src.row(i);
            let lse = log_sum_exp(row);
            for (o, &x) in value.row_mut(i).iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmax(a), rg)
    }

    /// Row-wise inner products of two m×d matrices, as m×1.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("row_dot", sa, sb));
        }
        let data = (0..sa.0)
            .map(|i| dot(self.value(a).row(i), self.value(b).row(i)))
            .collect();
        let value = Matrix::from_vec(sa.0, 1, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::RowDot(a, b), rg))
    }

    /// Row-wise squared Euclidean distances of two m×d matrices, as m×1.
    pub fn row_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("row_sq_dist", sa, sb));
        }
        let data = (0..sa.0)
            .map(|i| sq_dist(self.value(a).row(i), self.value(b).row(i)))
            .collect();
        let value = Matrix::from_vec(sa.0, 1, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::RowSqDist(a, b), rg))
    }

    /// Negative squared distances from a 1×d row to each row of a k×d matrix, as 1×k.
    pub fn neg_sq_euclidean(&mut self, row: Var, matrix: Var) -> Result<Var> {
        let (sr, sm) = (self.shape(row), self.shape(matrix));
        if sr.0 != 1 || sr.1 != sm.1 {
            return Err(shape_err("neg_sq_euclidean", sr, sm));
        }
        let x = self.value(row).as_slice();
        let data = (0..sm.0)
            .map(|k| -sq_dist(x, self.value(matrix).row(k)))
            .collect();
        let value = Matrix::from_vec(1, sm.0, data)?;
        let rg = self.rg(row) || self.rg(matrix);
        Ok(self.push(value, Op::NegSqEuclidean(row, matrix), rg))
    }

    /// Element-wise square root. Inputs must be strictly positive for a finite gradient.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::sqrt);
        let rg = self.rg(a);
        self.push(value, Op::Sqrt(a), rg)
    }

    /// Row-wise layer normalization with 1×d scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gamma), self.shape(beta));
        if sg != (1, sx.1) || sb != (1, sx.1) {
            return Err(shape_err("layer_norm", sx, sg));
        }
        let d = T::from_usize(sx.1).unwrap_or_else(T::one);
        let src = self.value(x);
        let g = self.value(gamma).as_slice();
        let b = self.value(beta).as_slice();
        let mut normalized = Matrix::zeros(sx.0, sx.1);
        let mut value = Matrix::zeros(sx.0, sx.1);
        let mut inv_std = Vec::with_capacity(sx.0);
        for i in 0..sx.0 {
            let row = src.row(i);
            let mean = row.iter().copied().sum::<T>() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..sx.1 {
                let xhat = (row[j] - mean) * inv;
                normalized[(i, j)] = xhat;
                value[(i, j)] = g[j] * xhat + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::ln);
        let rg = self.rg(a);
        self.push(value, Op::Log(a), rg)
    }

    /// `Σ_rows KL(softmax(a/T) ‖ softmax(b))`, as 1×1.
    pub fn kl_term(&mut self, a: Var, b: Var, temperature: T) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("kl_term", sa, sb));
        }
        let mut p = Matrix::zeros(sa.0, sa.1);
        let mut q = Matrix::zeros(sa.0, sa.1);
        let mut log_ratio = Matrix::zeros(sa.0, sa.1);
        let mut total = T::zero();
        for i in 0..sa.0 {
            let scaled: Vec<T> = self.value(a).row(i).iter().map(|&x| x / temperature).collect();
            let lse_a = log_sum_exp(&scaled);
            let b_row = self.value(b).row(i);
            let lse_b = log_sum_exp(b_row);
            for j in 0..sa.1 {
                let log_p = scaled[j] - lse_a;
                let log_q = b_row[j] - lse_b;
                let pj = log_p.exp();
                p[(i, j)] = pj;
                q[(i, j)] = log_q.exp();
                log_ratio[(i, j)] = log_p - log_q;
                total += pj * (log_p - log_q);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Matrix::scalar(total),
            Op::KlRows {
                a,
                b,
                temperature,
                p,
                q,
                log_ratio,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// `Σ_i a[i, targets[i]]`, as 1×1.
    pub fn pick_sum(&mut self, a: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if targets.len() != rows || targets.iter().any(|&t| t >= cols) {
            return Err(shape_err("pick_sum", (rows, cols), (targets.len(), cols)));
        }
        let total = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| self.value(a)[(i, t)])
            .sum();
        let rg = self.rg(a);
        Ok(self.push(Matrix::scalar(total), Op::PickSum(a, targets.to_vec()), rg))
    }

    /// `Σ_i weight_i · term_i` over 1×1 terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            if self.shape(v) != (1, 1) {
                return Err(shape_err("weighted_sum", self.shape(v), (1, 1)));
            }
            let scaled = self.scale(v, w);
            acc = Some(match acc {
                None => scaled,
                Some(prev) => self.add(prev, scaled)?,
            });
        }
        acc.ok_or_else(|| CdapError::contract("weighted_sum of zero terms"))
    }

    /// Back-propagates from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(CdapError::contract("loss is not on this tape"));
        }
        if self.shape(loss) != (1, 1) {
            return Err(CdapError::contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        // Constant nodes never hold gradients.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, node: &Node<T>, up: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) -> Result<()> {
        let two = T::one() + T::one();
        match &node.op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let g = up.matmul_nt(self.value(*b))?;
                    accumulate(grads, *a, g);
                }
                if self.rg(*b) {
                    let g = self.value(*a).matmul_tn(up)?;
                    accumulate(grads, *b, g);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.rg(*a) {
                    let g = up.matmul(self.value(*b))?;
                    accumulate(grads, *a, g);
                }
                if self.rg(*b) {
                    let g = up.matmul_tn(self.value(*a))?;
                    accumulate(grads, *b, g);
                }
            }
            Op::Add(a, b) => {
                accumulate_if(self, grads, *a, || up.clone());
                accumulate_if(self, grads, *b, || up.clone());
            }
            Op::Sub(a, b) => {
                accumulate_if(self, grads, *a, || up.clone());
                accumulate_if(self, grads, *b, || up.map(|x| -x));
            }
            Op::AddRow(a, row) => {
                accumulate_if(self, grads, *a, || up.clone());
                accumulate_if(self, grads, *row, || {
                    let mut g = Matrix::zeros(1, up.cols());
                    for i in 0..up.rows() {
                        for (o, &u) in g.as_mut_slice().iter_mut().zip(up.row(i)) {
                            *o += u;
                        }
                    }
                    g
                });
            }
            Op::Scale(a, factor) => {
                let f = *factor;
                accumulate_if(self, grads, *a, || up.map(|x| x * f));
            }
            Op::ScaleRows(a, w) => {
                let av = self.value(*a);
                let wv = self.value(*w);
                accumulate_if(self, grads, *a, || {
                    let mut g = up.clone();
                    for i in 0..g.rows() {
                        let s = wv[(i, 0)];
                        g.row_mut(i).iter_mut().for_each(|x| *x *= s);
                    }
                    g
                });
                accumulate_if(self, grads, *w, || {
                    let data = (0..up.rows()).map(|i| dot(up.row(i), av.row(i))).collect();
                    Matrix::from_vec(up.rows(), 1, data).expect("column shape")
                });
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    if self.rg(p) {
                        let mut g = Matrix::zeros(rows, cols);
                        for i in 0..rows {
                            g.row_mut(i).copy_from_slice(&up.row(i)[offset..offset + cols]);
                        }
                        accumulate(grads, p, g);
                    }
                    offset += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    if self.rg(p) {
                        let slice = &up.as_slice()[offset * cols..(offset + rows) * cols];
                        accumulate(grads, p, Matrix::from_vec(rows, cols, slice.to_vec())?);
                    }
                    offset += rows;
                }
            }
            Op::GatherRows(a, indices) => {
                accumulate_if(self, grads, *a, || {
                    let (rows, cols) = self.shape(*a);
                    let mut g = Matrix::zeros(rows, cols);
                    for (k, &i) in indices.iter().enumerate() {
                        for (o, &u) in g.row_mut(i).iter_mut().zip(up.row(k)) {
                            *o += u;
                        }
                    }
                    g
                });
            }
            Op::Column(a, j) => {
                accumulate_if(self, grads, *a, || {
                    let (rows, cols) = self.shape(*a);
                    let mut g = Matrix::zeros(rows, cols);
                    for i in 0..rows {
                        g[(i, *j)] = up[(i, 0)];
                    }
                    g
                });
            }
            Op::RowSoftmax(a) => {
                let y = &node.value;
                accumulate_if(self, grads, *a, || {
                    let mut g = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let inner = dot(up.row(i), y.row(i));
                        for j in 0..y.cols() {
                            g[(i, j)] = y[(i, j)] * (up[(i, j)] - inner);
                        }
                    }
                    g
                });
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                accumulate_if(self, grads, *a, || {
                    let mut g = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let total: T = up.row(i).iter().copied().sum();
                        for j in 0..y.cols() {
                            g[(i, j)] = up[(i, j)] - y[(i, j)].exp() * total;
                        }
                    }
                    g
                });
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate_if(self, grads, *a, || scale_by_column(bv, up));
                accumulate_if(self, grads, *b, || scale_by_column(av, up));
            }
            Op::RowSqDist(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut diff = av.clone();
                for (x, &y) in diff.as_mut_slice().iter_mut().zip(bv.as_slice()) {
                    *x = two * (*x - y);
                }
                let g = scale_by_column(&diff, up);
                accumulate_if(self, grads, *b, || g.map(|x| -x));
                accumulate_if(self, grads, *a, || g);
            }
            Op::NegSqEuclidean(row, matrix) => {
                let x = self.value(*row).as_slice();
                let m = self.value(*matrix);
                // ∂(−‖x−m_k‖²)/∂x = −2(x−m_k), ∂/∂m_k = 2(x−m_k)
                let mut gm = Matrix::zeros(m.rows(), m.cols());
                let mut gx = Matrix::zeros(1, m.cols());
                for k in 0..m.rows() {
                    let u = up[(0, k)];
                    for j in 0..m.cols() {
                        let d = two * (x[j] - m[(k, j)]) * u;
                        gm[(k, j)] = d;
                        gx[(0, j)] -= d;
                    }
                }
                accumulate_if(self, grads, *row, || gx);
                accumulate_if(self, grads, *matrix, || gm);
            }
            Op::Sqrt(a) => {
                let y = &node.value;
                accumulate_if(self, grads, *a, || {
                    let mut g = up.clone();
                    for (o, &yv) in g.as_mut_slice().iter_mut().zip(y.as_slice()) {
                        *o /= two * yv;
                    }
                    g
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (rows, cols) = normalized.shape();
                let g = self.value(*gamma).as_slice();
                accumulate_if(self, grads, *gamma, || {
                    let mut out = Matrix::zeros(1, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            out[(0, j)] += up[(i, j)] * normalized[(i, j)];
                        }
                    }
                    out
                });
                accumulate_if(self, grads, *beta, || {
                    let mut out = Matrix::zeros(1, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            out[(0, j)] += up[(i, j)];
                        }
                    }
                    out
                });
                accumulate_if(self, grads, *x, || {
                    let d = T::from_usize(cols).unwrap_or_else(T::one);
                    let mut out = Matrix::zeros(rows, cols);
                    for i in 0..rows {
                        let dxhat: Vec<T> = (0..cols).map(|j| up[(i, j)] * g[j]).collect();
                        let sum_dxhat: T = dxhat.iter().copied().sum();
                        let sum_dxhat_xhat = dot(&dxhat, normalized.row(i));
                        for j in 0..cols {
                            out[(i, j)] = inv_std[i] / d
                                * (d * dxhat[j] - sum_dxhat - normalized[(i, j)] * sum_dxhat_xhat);
                        }
                    }
                    out
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                accumulate_if(self, grads, *a, || {
                    let mut g = up.clone();
                    for (o, &x) in g.as_mut_slice().iter_mut().zip(av.as_slice()) {
                        if x <= T::zero() {
                            *o = T::zero();
                        }
                    }
                    g
                });
            }
            Op::Log(a) => {
                let av = self.value(*a);
                accumulate_if(self, grads, *a, || {
                    let mut g = up.clone();
                    for (o, &x) in g.as_mut_slice().iter_mut().zip(av.as_slice()) {
                        *o /= x;
                    }
                    g
                });
            }
            Op::KlRows {
                a,
                b,
                temperature,
                p,
                q,
                log_ratio,
            } => {
                let u = up[(0, 0)];
                let (rows, cols) = p.shape();
                accumulate_if(self, grads, *a, || {
                    let mut g = Matrix::zeros(rows, cols);
                    for i in 0..rows {
                        let mean = dot(p.row(i), log_ratio.row(i));
                        for j in 0..cols {
                            g[(i, j)] = u * p[(i, j)] * (log_ratio[(i, j)] - mean) / *temperature;
                        }
                    }
                    g
                });
                accumulate_if(self, grads, *b, || {
                    let mut g = Matrix::zeros(rows, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            g[(i, j)] = u * (q[(i, j)] - p[(i, j)]);
                        }
                    }
                    g
                });
            }
            Op::Sum(a) => {
                let (rows, cols) = self.shape(*a);
                let u = up[(0, 0)];
                accumulate_if(self, grads, *a, || Matrix::filled(rows, cols, u));
            }
            Op::PickSum(a, targets) => {
                let (rows, cols) = self.shape(*a);
                let u = up[(0, 0)];
                accumulate_if(self, grads, *a, || {
                    let mut g = Matrix::zeros(rows, cols);
                    for (i, &t) in targets.iter().enumerate() {
                        g[(i, t)] = u;
                    }
                    g
                });
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_if<T: Scalar>(
    graph: &Graph<T>,
    grads: &mut [Option<Matrix<T>>],
    v: Var,
    g: impl FnOnce() -> Matrix<T>,
) {
    if graph.rg(v) {
        accumulate(grads, v, g());
    }
}

/// Row `i` of `m` multiplied by `column[i]`.
fn scale_by_column<T: Scalar>(m: &Matrix<T>, column: &Matrix<T>) -> Matrix<T> {
    let mut g = m.clone();
    for i in 0..g.rows() {
        let s = column[(i, 0)];
        g.row_mut(i).iter_mut().for_each(|x| *x *= s);
    }
    g
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}
