//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Every operation evaluates eagerly and appends a node to the [`Tape`].
//! Node identifiers are handed out in creation order, which is a valid
//! topological order, so [`Tape::backward`] simply walks the node list from
//! the loss back to the first node and accumulates contributions additively.
//!
//! Sparse operands (graph adjacencies) are constants: they are held behind
//! an `Arc` and never receive gradients.

use std::sync::Arc;

use crate::error::{PkefError, Result};
use crate::math::dense::{dot, DenseMatrix};
use crate::math::sparse::{spmm, spmm_transpose, SparseMatrix};
use crate::math::vector::{log_sigmoid, projection_coef, sigmoid, softmax_into, EPS_NORM};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Spmm(Arc<SparseMatrix>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMulT(Var, Var),
    AddRow(Var, Var),
    SoftmaxRows(Var),
    Col(Var, usize),
    MulCol(Var, Var),
    ConcatCols(Var, Var),
    SumCols(Var),
    /// Row-wise projection of the first operand onto the second. `coefs`
    /// holds the per-row scalar; `stop` freezes it during backward.
    ProjectRows {
        a: Var,
        b: Var,
        coefs: Vec<f64>,
        stop: bool,
    },
    LogSigmoid(Var),
    Mean(Var),
    Sum(Var),
    SumSquares(Var),
    GatherRows(Var, Arc<Vec<usize>>),
    RowBlock(Var, usize),
    VStack(Var, Var),
    MulScalar(Var, Var),
}

struct Node {
    value: DenseMatrix,
    op: Op,
}

/// Recorded computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Replacement coefficients for stop-gradient projections, consumed in
    /// creation order.
    frozen: Option<std::collections::VecDeque<Vec<f64>>>,
}

/// Gradients of a scalar with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; all zeros when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> DenseMatrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                DenseMatrix::zeros(r, c)
            }
        }
    }

    /// Gradient for `v` if any contribution reached it.
    pub fn try_get(&self, v: Var) -> Option<&DenseMatrix> {
        self.grads[v.0].as_ref()
    }

    /// Moves the gradient of `v` out, leaving nothing behind.
    pub fn take(&mut self, v: Var) -> DenseMatrix {
        let (r, c) = self.shapes[v.0];
        self.grads[v.0].take().unwrap_or_else(|| DenseMatrix::zeros(r, c))
    }
}

fn accumulate(slot: &mut Option<DenseMatrix>, contribution: DenseMatrix) {
    match slot {
        Some(g) => g.add_assign(&contribution),
        None => *slot = Some(contribution),
    }
}

fn check_same(op: &'static str, a: &DenseMatrix, b: &DenseMatrix) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(PkefError::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A tape whose stop-gradient projections use `coefs` (one vector per
    /// projection, in creation order) instead of computing their own.
    /// Evaluating with the coefficients of a base point gives the function
    /// whose gradient the base tape reports.
    pub fn with_frozen_coefficients(coefs: Vec<Vec<f64>>) -> Self {
        Tape {
            nodes: Vec::new(),
            frozen: Some(coefs.into()),
        }
    }

    /// Coefficients of every stop-gradient projection, in creation order.
    pub fn stopped_coefficients(&self) -> Vec<Vec<f64>> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::ProjectRows { coefs, stop: true, .. } => Some(coefs.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DenseMatrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    /// Input node: a parameter or constant data.
    pub fn leaf(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn spmm(&mut self, a: &Arc<SparseMatrix>, x: Var) -> Result<Var> {
        let value = spmm(a, self.value(x))?;
        Ok(self.push(value, Op::Spmm(Arc::clone(a), x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let value = self.value(a).add(self.value(b));
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Sum of a non-empty list of same-shaped nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (first, rest) = terms
            .split_first()
            .ok_or_else(|| PkefError::Usage("add_all on empty list".into()))?;
        let mut acc = *first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        let value = self.value(a).sub(self.value(b));
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        let value = self.value(a).hadamard(self.value(b));
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        self.push(value, Op::Scale(a, factor))
    }

    /// `x · wᵀ` with `x: n×m`, `w: p×m`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let value = self.value(x).matmul_t(self.value(w))?;
        Ok(self.push(value, Op::MatMulT(x, w)))
    }

    /// Adds a `1×m` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(PkefError::shape(
                "add_row",
                format!("{:?} + row {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(bv.values()) {
                *o += b;
            }
        }
        Ok(self.push(value, Op::AddRow(x, bias)))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut value = DenseMatrix::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            softmax_into(xv.row(r), value.row_mut(r));
        }
        self.push(value, Op::SoftmaxRows(x))
    }

    /// Column `j` of `x` as an `n×1` node.
    pub fn col(&mut self, x: Var, j: usize) -> Result<Var> {
        let xv = self.value(x);
        if j >= xv.cols() {
            return Err(PkefError::shape("col", format!("column {j} of {:?}", xv.shape())));
        }
        let vals: Vec<f64> = (0..xv.rows()).map(|r| xv.get(r, j)).collect();
        Ok(self.push(DenseMatrix::column_vector(&vals), Op::Col(x, j)))
    }

    /// Scales row `i` of `x` by `c[i]` (`c` is `n×1`).
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (xv, cv) = (self.value(x), self.value(c));
        if cv.cols() != 1 || cv.rows() != xv.rows() {
            return Err(PkefError::shape(
                "mul_col",
                format!("{:?} scaled by {:?}", xv.shape(), cv.shape()),
            ));
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            let s = cv.get(r, 0);
            for o in value.row_mut(r) {
                *o *= s;
            }
        }
        Ok(self.push(value, Op::MulCol(x, c)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(PkefError::shape(
                "concat_cols",
                format!("{:?} || {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut value = DenseMatrix::zeros(av.rows(), av.cols() + bv.cols());
        for r in 0..av.rows() {
            let row = value.row_mut(r);
            row[..av.cols()].copy_from_slice(av.row(r));
            row[av.cols()..].copy_from_slice(bv.row(r));
        }
        Ok(self.push(value, Op::ConcatCols(a, b)))
    }

    /// Per-row sum, giving an `n×1` node.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let vals: Vec<f64> = (0..xv.rows()).map(|r| xv.row(r).iter().sum()).collect();
        self.push(DenseMatrix::column_vector(&vals), Op::SumCols(x))
    }

    /// Row-wise inner product of two same-shaped nodes, `n×1`.
    pub fn dot_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = self.mul(a, b)?;
        Ok(self.sum_cols(m))
    }

    /// Row-wise projection of `a` onto `b`: row `i` becomes
    /// `((aᵢ·bᵢ)/|bᵢ|²) bᵢ`, or zero when `|bᵢ| < EPS_NORM`. With `stop` the
    /// scalar coefficient is a constant for backward.
    pub fn project_rows(&mut self, a: Var, b: Var, stop: bool) -> Result<Var> {
        check_same("project_rows", self.value(a), self.value(b))?;
        let rows = self.value(a).rows();
        let replay = match (&mut self.frozen, stop) {
            (Some(q), true) => match q.pop_front() {
                Some(c) if c.len() == rows => Some(c),
                _ => return Err(PkefError::Usage("frozen coefficients do not match the projections".into())),
            },
            _ => None,
        };
        let (av, bv) = (self.value(a), self.value(b));
        let mut coefs = Vec::with_capacity(av.rows());
        let mut value = DenseMatrix::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            let c = match &replay {
                Some(f) => f[r],
                None => projection_coef(av.row(r), bv.row(r)),
            };
            coefs.push(c);
            for (o, x) in value.row_mut(r).iter_mut().zip(bv.row(r)) {
                *o = c * x;
            }
        }
        Ok(self.push(value, Op::ProjectRows { a, b, coefs, stop }))
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(log_sigmoid);
        self.push(value, Op::LogSigmoid(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.values().len();
        if n == 0 {
            return Err(PkefError::Usage("mean of empty node".into()));
        }
        let value = DenseMatrix::filled(1, 1, xv.sum() / n as f64);
        Ok(self.push(value, Op::Mean(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = DenseMatrix::filled(1, 1, self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    /// `‖x‖²` as a `1×1` node.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let value = DenseMatrix::filled(1, 1, self.value(x).sum_squares());
        self.push(value, Op::SumSquares(x))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(PkefError::shape(
                "gather_rows",
                format!("row {bad} of {:?}", xv.shape()),
            ));
        }
        let value = xv.gather_rows(&idx);
        Ok(self.push(value, Op::GatherRows(x, idx)))
    }

    /// Contiguous rows `[start, start + len)` of `x`.
    pub fn row_block(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.rows() {
            return Err(PkefError::shape(
                "row_block",
                format!("rows {start}..{} of {:?}", start + len, xv.shape()),
            ));
        }
        let value = xv.row_block(start, len);
        Ok(self.push(value, Op::RowBlock(x, start)))
    }

    /// Stacks `top` over `bottom`.
    pub fn vstack(&mut self, top: Var, bottom: Var) -> Result<Var> {
        let value = DenseMatrix::vstack(self.value(top), self.value(bottom))?;
        Ok(self.push(value, Op::VStack(top, bottom)))
    }

    /// Multiplies every entry of `x` by the `1×1` node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.shape() != (1, 1) {
            return Err(PkefError::shape("mul_scalar", format!("scalar has shape {:?}", sv.shape())));
        }
        let value = self.value(x).scale(sv.get(0, 0));
        Ok(self.push(value, Op::MulScalar(x, s)))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(PkefError::Usage(format!(
                "backward needs a scalar loss, got {shape:?}"
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<DenseMatrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(DenseMatrix::filled(1, 1, 1.0));

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Spmm(a, x) => accumulate(&mut grads[x.0], spmm_transpose(a, &g)),
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads[a.0], g.hadamard(self.value(*b)));
                    accumulate(&mut grads[b.0], g.hadamard(self.value(*a)));
                }
                Op::Scale(a, f) => accumulate(&mut grads[a.0], g.scale(*f)),
                Op::MatMulT(x, w) => {
                    let gx = g.matmul(self.value(*w))?;
                    let gw = g.transpose().matmul(self.value(*x))?;
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[w.0], gw);
                }
                Op::AddRow(x, b) => {
                    let mut gb = DenseMatrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gb.values_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads[x.0], g.clone());
                    accumulate(&mut grads[b.0], gb);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut gx = DenseMatrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let inner = dot(g.row(r), y.row(r));
                        for ((o, gv), yv) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = yv * (gv - inner);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Col(x, j) => {
                    let (r, c) = self.value(*x).shape();
                    let mut gx = DenseMatrix::zeros(r, c);
                    for row in 0..r {
                        gx.set(row, *j, g.get(row, 0));
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::MulCol(x, c) => {
                    let (xv, cv) = (self.value(*x), self.value(*c));
                    let mut gx = g.clone();
                    let mut gc = DenseMatrix::zeros(cv.rows(), 1);
                    for r in 0..xv.rows() {
                        let s = cv.get(r, 0);
                        gc.set(r, 0, dot(g.row(r), xv.row(r)));
                        for o in gx.row_mut(r) {
                            *o *= s;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[c.0], gc);
                }
                Op::ConcatCols(a, b) => {
                    let ac = self.value(*a).cols();
                    let bc = self.value(*b).cols();
                    let mut ga = DenseMatrix::zeros(g.rows(), ac);
                    let mut gb = DenseMatrix::zeros(g.rows(), bc);
                    for r in 0..g.rows() {
                        ga.row_mut(r).copy_from_slice(&g.row(r)[..ac]);
                        gb.row_mut(r).copy_from_slice(&g.row(r)[ac..]);
                    }
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::SumCols(x) => {
                    let (r, c) = self.value(*x).shape();
                    let mut gx = DenseMatrix::zeros(r, c);
                    for row in 0..r {
                        let s = g.get(row, 0);
                        gx.row_mut(row).fill(s);
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::ProjectRows { a, b, coefs, stop } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = DenseMatrix::zeros(av.rows(), av.cols());
                    let mut gb = DenseMatrix::zeros(bv.rows(), bv.cols());
                    for r in 0..av.rows() {
                        let (ar, br, gr) = (av.row(r), bv.row(r), g.row(r));
                        let bb = dot(br, br);
                        if bb.sqrt() < EPS_NORM {
                            continue;
                        }
                        let c = coefs[r];
                        let gbr = gb.row_mut(r);
                        for (o, gv) in gbr.iter_mut().zip(gr) {
                            *o += c * gv;
                        }
                        if !*stop {
                            // d(coef)/da = b/|b|², d(coef)/db = a/|b|² - 2 coef b/|b|²
                            let gcoef = dot(gr, br);
                            let gar = ga.row_mut(r);
                            for (o, bvv) in gar.iter_mut().zip(br) {
                                *o += gcoef * bvv / bb;
                            }
                            for ((o, avv), bvv) in gbr.iter_mut().zip(ar).zip(br) {
                                *o += gcoef * (avv - 2.0 * c * bvv) / bb;
                            }
                        }
                    }
                    if !*stop {
                        accumulate(&mut grads[a.0], ga);
                    }
                    accumulate(&mut grads[b.0], gb);
                }
                Op::LogSigmoid(x) => {
                    let gx = self.value(*x).zip_map(&g, |xv, gv| gv * sigmoid(-xv));
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Mean(x) => {
                    let (r, c) = self.value(*x).shape();
                    let s = g.get(0, 0) / (r * c) as f64;
                    accumulate(&mut grads[x.0], DenseMatrix::filled(r, c, s));
                }
                Op::Sum(x) => {
                    let (r, c) = self.value(*x).shape();
                    accumulate(&mut grads[x.0], DenseMatrix::filled(r, c, g.get(0, 0)));
                }
                Op::SumSquares(x) => {
                    let s = 2.0 * g.get(0, 0);
                    accumulate(&mut grads[x.0], self.value(*x).scale(s));
                }
                Op::GatherRows(x, idx) => {
                    let (r, c) = self.value(*x).shape();
                    let mut gx = DenseMatrix::zeros(r, c);
                    for (o, &i) in idx.iter().enumerate() {
                        for (dst, src) in gx.row_mut(i).iter_mut().zip(g.row(o)) {
                            *dst += src;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::RowBlock(x, start) => {
                    let (r, c) = self.value(*x).shape();
                    let mut gx = DenseMatrix::zeros(r, c);
                    for row in 0..g.rows() {
                        gx.row_mut(start + row).copy_from_slice(g.row(row));
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::VStack(top, bottom) => {
                    let split = self.value(*top).rows();
                    accumulate(&mut grads[top.0], g.row_block(0, split));
                    accumulate(&mut grads[bottom.0], g.row_block(split, g.rows() - split));
                }
                Op::MulScalar(x, s) => {
                    let sv = self.value(*s).get(0, 0);
                    let gs = dot(g.values(), self.value(*x).values());
                    accumulate(&mut grads[x.0], g.scale(sv));
                    accumulate(&mut grads[s.0], DenseMatrix::filled(1, 1, gs));
                }
            }
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}
