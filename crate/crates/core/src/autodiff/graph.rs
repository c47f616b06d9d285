//! Tape of recorded operations and the reverse sweep over it.

use std::rc::Rc;

use crate::math::{gemm, kl_term, log_prob_term, SeqTensor};

use super::{AutodiffError, ParamId, ParamStore};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    ConcatCols(Rc<[Var]>),
    SliceCols(Var, usize),
    ConcatRows(Rc<[Var]>),
    SliceRows(Var, usize),
    GatherRows(Var, Rc<[Option<usize>]>),
    SegmentMean(Var, Rc<[usize]>),
    SegmentSum(Var, Rc<[usize]>),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    SquaredError(Var, Var),
    GaussianKl([Var; 4]),
    GaussianLogProb([Var; 3]),
}

#[derive(Debug)]
struct Node {
    value: SeqTensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf (input or parameter node).
    /// `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<SeqTensor> {
        let (r, c) = self.shapes[var.0];
        self.grads[var.0]
            .as_ref()
            .map(|g| SeqTensor::from_raw(r, c, g.clone()))
    }

    /// Adds parameter gradients into the store's accumulators. Frozen
    /// parameters are skipped.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, var) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                store.accumulate_grad(id, g);
            }
        }
    }
}

/// Records a forward computation for exactly one backward pass.
///
/// Every op checks shapes up front and rejects non-finite outputs, naming the
/// op that produced them.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn shape_err(op: &'static str, a: &SeqTensor, b: &SeqTensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &SeqTensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.nodes[var.0].value.shape()
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.data()[0]
    }

    fn push(
        &mut self,
        value: SeqTensor,
        op: Op,
        needs_grad: bool,
        name: &'static str,
    ) -> Result<Var, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite {
                op: name,
                node: self.nodes.len(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: SeqTensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported in [`Gradients::get`].
    pub fn input(&mut self, value: SeqTensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reads a parameter from the store. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let needs_grad = !store.is_frozen(id);
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies a value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, var: Var) -> Var {
        let v = self.value(var).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(shape_err("matmul", va, vb));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(
            SeqTensor::from_raw(m, n, out),
            Op::MatMul(a, b),
            ng,
            "matmul",
        )
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va, vb));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = SeqTensor::from_raw(va.rows(), va.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, op, ng, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_same(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_same(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_same(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    fn row_broadcast(
        &mut self,
        a: Var,
        row: Var,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, AutodiffError> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(shape_err(name, va, vr));
        }
        let r = vr.data();
        let data = va
            .iter_rows()
            .flat_map(|x| x.iter().zip(r).map(|(&x, &y)| f(x, y)))
            .collect();
        let value = SeqTensor::from_raw(va.rows(), va.cols(), data);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, op, ng, name)
    }

    /// Adds a `1 × C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        self.row_broadcast(a, row, "add_row", Op::AddRow(a, row), |x, y| x + y)
    }

    /// Multiplies every row of `a` elementwise by a `1 × C` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        self.row_broadcast(a, row, "mul_row", Op::MulRow(a, row), |x, y| x * y)
    }

    fn unary(
        &mut self,
        a: Var,
        name: &'static str,
        op: Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var, AutodiffError> {
        let value = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(value, op, ng, name)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, AutodiffError> {
        self.unary(a, "scale", Op::Scale(a, k), |x| k * x)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var, AutodiffError> {
        self.unary(a, "add_scalar", Op::AddScalar(a), |x| x + k)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(a, "tanh", Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(a, "sigmoid", Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(a, "exp", Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(a, "log", Op::Log(a), f64::ln)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(a, "softplus", Op::Softplus(a), softplus)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = parts.first().ok_or(AutodiffError::InvalidArgument {
            op: "concat_cols",
            detail: "no inputs".into(),
        })?;
        let rows = self.value(*first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), self.value(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            SeqTensor::from_raw(rows, cols, data),
            Op::ConcatCols(parts.into()),
            ng,
            "concat_cols",
        )
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let va = self.value(a);
        if start >= end || end > va.cols() {
            return Err(AutodiffError::InvalidArgument {
                op: "slice_cols",
                detail: format!("range {start}..{end} for {} columns", va.cols()),
            });
        }
        let data = va
            .iter_rows()
            .flat_map(|r| r[start..end].iter().copied())
            .collect();
        let value = SeqTensor::from_raw(va.rows(), end - start, data);
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start), ng, "slice_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = parts.first().ok_or(AutodiffError::InvalidArgument {
            op: "concat_rows",
            detail: "no inputs".into(),
        })?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        for &p in parts {
            let vp = self.value(p);
            if vp.cols() != cols {
                return Err(shape_err("concat_rows", self.value(*first), vp));
            }
            data.extend_from_slice(vp.data());
        }
        let rows = data.len() / cols;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            SeqTensor::from_raw(rows, cols, data),
            Op::ConcatRows(parts.into()),
            ng,
            "concat_rows",
        )
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let value =
            self.value(a)
                .slice_rows(start, end)
                .map_err(|e| AutodiffError::InvalidArgument {
                    op: "slice_rows",
                    detail: e.to_string(),
                })?;
        let ng = self.ng(a);
        self.push(value, Op::SliceRows(a, start), ng, "slice_rows")
    }

    /// Row `i` of the output is row `index[i]` of `a`, or zeros for `None`.
    pub fn gather_rows(&mut self, a: Var, index: &[Option<usize>]) -> Result<Var, AutodiffError> {
        let va = self.value(a);
        if index.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_rows",
                detail: "empty index".into(),
            });
        }
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= va.rows()) {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_rows",
                detail: format!("row {bad} out of range for {} rows", va.rows()),
            });
        }
        let cols = va.cols();
        let mut data = Vec::with_capacity(index.len() * cols);
        for i in index {
            match i {
                Some(i) => data.extend_from_slice(va.row(*i)),
                None => data.extend(std::iter::repeat_n(0.0, cols)),
            }
        }
        let value = SeqTensor::from_raw(index.len(), cols, data);
        let ng = self.ng(a);
        self.push(value, Op::GatherRows(a, index.into()), ng, "gather_rows")
    }

    fn check_segments(
        &self,
        op: &'static str,
        a: Var,
        lengths: &[usize],
    ) -> Result<(), AutodiffError> {
        let total: usize = lengths.iter().sum();
        if lengths.is_empty() || lengths.contains(&0) || total != self.value(a).rows() {
            return Err(AutodiffError::InvalidArgument {
                op,
                detail: format!(
                    "segment lengths summing to {total} (min 1 each) for {} rows",
                    self.value(a).rows()
                ),
            });
        }
        Ok(())
    }

    fn segment_reduce(
        &mut self,
        a: Var,
        lengths: &[usize],
        mean: bool,
    ) -> Result<Var, AutodiffError> {
        let name = if mean { "segment_mean" } else { "segment_sum" };
        self.check_segments(name, a, lengths)?;
        let va = self.value(a);
        let cols = va.cols();
        let mut data = vec![0.0; lengths.len() * cols];
        let mut row = 0;
        for (s, &len) in lengths.iter().enumerate() {
            let out = &mut data[s * cols..(s + 1) * cols];
            for r in row..row + len {
                add_into(out, va.row(r));
            }
            if mean {
                out.iter_mut().for_each(|v| *v /= len as f64);
            }
            row += len;
        }
        let value = SeqTensor::from_raw(lengths.len(), cols, data);
        let op = if mean {
            Op::SegmentMean(a, lengths.into())
        } else {
            Op::SegmentSum(a, lengths.into())
        };
        let ng = self.ng(a);
        self.push(value, op, ng, name)
    }

    /// Mean over consecutive row segments of the given lengths.
    pub fn segment_mean(&mut self, a: Var, lengths: &[usize]) -> Result<Var, AutodiffError> {
        self.segment_reduce(a, lengths, true)
    }

    /// Sum over consecutive row segments of the given lengths.
    pub fn segment_sum(&mut self, a: Var, lengths: &[usize]) -> Result<Var, AutodiffError> {
        self.segment_reduce(a, lengths, false)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(SeqTensor::scalar(s), Op::Sum(a), ng, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let va = self.value(a);
        let s = va.sum() / va.len() as f64;
        let ng = self.ng(a);
        self.push(SeqTensor::scalar(s), Op::Mean(a), ng, "mean")
    }

    /// Per-row sums as an `N × 1` column.
    pub fn row_sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let va = self.value(a);
        let data = va.iter_rows().map(|r| r.iter().sum()).collect();
        let value = SeqTensor::from_raw(va.rows(), 1, data);
        let ng = self.ng(a);
        self.push(value, Op::RowSum(a), ng, "row_sum")
    }

    /// `Σ (a − b)²` as a scalar.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("squared_error", va, vb));
        }
        let s = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let ng = self.ng(a) || self.ng(b);
        self.push(
            SeqTensor::scalar(s),
            Op::SquaredError(a, b),
            ng,
            "squared_error",
        )
    }

    /// Elementwise closed-form KL(N(mq, e^lq) ‖ N(mp, e^lp)).
    pub fn gaussian_kl(
        &mut self,
        mq: Var,
        lq: Var,
        mp: Var,
        lp: Var,
    ) -> Result<Var, AutodiffError> {
        let shape = self.shape(mq);
        for v in [lq, mp, lp] {
            if self.shape(v) != shape {
                return Err(shape_err("gaussian_kl", self.value(mq), self.value(v)));
            }
        }
        let data = (0..self.value(mq).len())
            .map(|i| {
                kl_term(
                    self.value(mq).data()[i],
                    self.value(lq).data()[i],
                    self.value(mp).data()[i],
                    self.value(lp).data()[i],
                )
            })
            .collect();
        let ng = [mq, lq, mp, lp].iter().any(|&v| self.ng(v));
        self.push(
            SeqTensor::from_raw(shape.0, shape.1, data),
            Op::GaussianKl([mq, lq, mp, lp]),
            ng,
            "gaussian_kl",
        )
    }

    /// Elementwise diagonal-Gaussian log density.
    pub fn gaussian_log_prob(
        &mut self,
        x: Var,
        mean: Var,
        log_std: Var,
    ) -> Result<Var, AutodiffError> {
        let shape = self.shape(x);
        for v in [mean, log_std] {
            if self.shape(v) != shape {
                return Err(shape_err("gaussian_log_prob", self.value(x), self.value(v)));
            }
        }
        let data = (0..self.value(x).len())
            .map(|i| {
                log_prob_term(
                    self.value(x).data()[i],
                    self.value(mean).data()[i],
                    self.value(log_std).data()[i],
                )
            })
            .collect();
        let ng = [x, mean, log_std].iter().any(|&v| self.ng(v));
        self.push(
            SeqTensor::from_raw(shape.0, shape.1, data),
            Op::GaussianLogProb([x, mean, log_std]),
            ng,
            "gaussian_log_prob",
        )
    }

    /// Reverse sweep from a scalar loss. May run once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, AutodiffError> {
        if self.backward_done {
            return Err(AutodiffError::DoubleBackward);
        }
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Input | Op::Param(_) | Op::Constant);
            if is_leaf {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout, &mut grads);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) if n.needs_grad => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            params,
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let (rows, cols) = node.value.shape();
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].needs_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                f(buf);
            }
        };
        let val = |v: Var| nodes[v.0].value.data();

        match &node.op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                // dA = dC · Bᵀ ; dB = Aᵀ · dC
                acc(*a, &mut |buf| {
                    gemm(m, n, k, g, false, vb.data(), true, buf, 1.0)
                });
                acc(*b, &mut |buf| {
                    gemm(k, m, n, va.data(), true, g, false, buf, 1.0)
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| {
                    buf.iter_mut().zip(g).for_each(|(d, s)| *d -= s)
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |buf| {
                    for ((d, gi), bi) in buf.iter_mut().zip(g).zip(vb) {
                        *d += gi * bi;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((d, gi), ai) in buf.iter_mut().zip(g).zip(va) {
                        *d += gi * ai;
                    }
                });
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*row, &mut |buf| {
                    for gr in g.chunks_exact(cols) {
                        add_into(buf, gr);
                    }
                });
            }
            Op::MulRow(a, row) => {
                let (va, vr) = (val(*a), val(*row));
                acc(*a, &mut |buf| {
                    for (br, gr) in buf.chunks_exact_mut(cols).zip(g.chunks_exact(cols)) {
                        for ((d, gi), ri) in br.iter_mut().zip(gr).zip(vr) {
                            *d += gi * ri;
                        }
                    }
                });
                acc(*row, &mut |buf| {
                    for (ar, gr) in va.chunks_exact(cols).zip(g.chunks_exact(cols)) {
                        for ((d, gi), ai) in buf.iter_mut().zip(gr).zip(ar) {
                            *d += gi * ai;
                        }
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |buf| {
                buf.iter_mut().zip(g).for_each(|(d, s)| *d += k * s)
            }),
            Op::AddScalar(a) => acc(*a, &mut |buf| add_into(buf, g)),
            Op::Tanh(a) => acc(*a, &mut |buf| {
                for ((d, gi), yi) in buf.iter_mut().zip(g).zip(y) {
                    *d += gi * (1.0 - yi * yi);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |buf| {
                for ((d, gi), yi) in buf.iter_mut().zip(g).zip(y) {
                    *d += gi * yi * (1.0 - yi);
                }
            }),
            Op::Exp(a) => acc(*a, &mut |buf| {
                for ((d, gi), yi) in buf.iter_mut().zip(g).zip(y) {
                    *d += gi * yi;
                }
            }),
            Op::Log(a) => {
                let x = val(*a);
                acc(*a, &mut |buf| {
                    for ((d, gi), xi) in buf.iter_mut().zip(g).zip(x) {
                        *d += gi / xi;
                    }
                })
            }
            Op::Softplus(a) => {
                let x = val(*a);
                acc(*a, &mut |buf| {
                    for ((d, gi), xi) in buf.iter_mut().zip(g).zip(x) {
                        *d += gi * sigmoid(*xi);
                    }
                })
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts.iter() {
                    let pc = nodes[p.0].value.cols();
                    acc(*p, &mut |buf| {
                        for r in 0..rows {
                            add_into(
                                &mut buf[r * pc..(r + 1) * pc],
                                &g[r * cols + offset..r * cols + offset + pc],
                            );
                        }
                    });
                    offset += pc;
                }
            }
            Op::SliceCols(a, start) => {
                let ac = nodes[a.0].value.cols();
                acc(*a, &mut |buf| {
                    for r in 0..rows {
                        add_into(
                            &mut buf[r * ac + start..r * ac + start + cols],
                            &g[r * cols..(r + 1) * cols],
                        );
                    }
                })
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts.iter() {
                    let len = nodes[p.0].value.len();
                    acc(*p, &mut |buf| add_into(buf, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceRows(a, start) => acc(*a, &mut |buf| {
                add_into(&mut buf[start * cols..start * cols + g.len()], g)
            }),
            Op::GatherRows(a, index) => acc(*a, &mut |buf| {
                for (r, src) in index.iter().enumerate() {
                    if let Some(s) = src {
                        add_into(
                            &mut buf[s * cols..(s + 1) * cols],
                            &g[r * cols..(r + 1) * cols],
                        );
                    }
                }
            }),
            Op::SegmentMean(a, lengths) | Op::SegmentSum(a, lengths) => {
                let mean = matches!(node.op, Op::SegmentMean(..));
                acc(*a, &mut |buf| {
                    let mut row = 0;
                    for (s, &len) in lengths.iter().enumerate() {
                        let w = if mean { 1.0 / len as f64 } else { 1.0 };
                        let gs = &g[s * cols..(s + 1) * cols];
                        for r in row..row + len {
                            for (d, gi) in buf[r * cols..(r + 1) * cols].iter_mut().zip(gs) {
                                *d += w * gi;
                            }
                        }
                        row += len;
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |buf| buf.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                acc(*a, &mut |buf| buf.iter_mut().for_each(|d| *d += g[0] / n))
            }
            Op::RowSum(a) => {
                let ac = nodes[a.0].value.cols();
                acc(*a, &mut |buf| {
                    for (br, gi) in buf.chunks_exact_mut(ac).zip(g) {
                        br.iter_mut().for_each(|d| *d += gi);
                    }
                })
            }
            Op::SquaredError(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |buf| {
                    for ((d, x), t) in buf.iter_mut().zip(va).zip(vb) {
                        *d += 2.0 * g[0] * (x - t);
                    }
                });
                acc(*b, &mut |buf| {
                    for ((d, x), t) in buf.iter_mut().zip(va).zip(vb) {
                        *d -= 2.0 * g[0] * (x - t);
                    }
                });
            }
            Op::GaussianKl([mq, lq, mp, lp]) => {
                let (vmq, vlq, vmp, vlp) = (val(*mq), val(*lq), val(*mp), val(*lp));
                let len = vmq.len();
                // per element: δ = mp − mq, w = e^{−2lp}, r² = e^{2(lq − lp)}
                let mut d_mean = vec![0.0; len];
                let mut d_lq = vec![0.0; len];
                let mut d_lp = vec![0.0; len];
                for i in 0..len {
                    let delta = vmp[i] - vmq[i];
                    let w = (-2.0 * vlp[i]).exp();
                    let r2 = (2.0 * (vlq[i] - vlp[i])).exp();
                    d_mean[i] = g[i] * delta * w;
                    d_lq[i] = g[i] * (r2 - 1.0);
                    d_lp[i] = g[i] * (1.0 - r2 - delta * delta * w);
                }
                acc(*mq, &mut |buf| {
                    buf.iter_mut().zip(&d_mean).for_each(|(d, s)| *d -= s)
                });
                acc(*mp, &mut |buf| add_into(buf, &d_mean));
                acc(*lq, &mut |buf| add_into(buf, &d_lq));
                acc(*lp, &mut |buf| add_into(buf, &d_lp));
            }
            Op::GaussianLogProb([x, m, l]) => {
                let (vx, vm, vl) = (val(*x), val(*m), val(*l));
                let len = vx.len();
                let mut d_x = vec![0.0; len];
                let mut d_l = vec![0.0; len];
                for i in 0..len {
                    let z = (vx[i] - vm[i]) * (-vl[i]).exp();
                    d_x[i] = -g[i] * z * (-vl[i]).exp();
                    d_l[i] = g[i] * (z * z - 1.0);
                }
                acc(*x, &mut |buf| add_into(buf, &d_x));
                acc(*m, &mut |buf| {
                    buf.iter_mut().zip(&d_x).for_each(|(d, s)| *d -= s)
                });
                acc(*l, &mut |buf| add_into(buf, &d_l));
            }
        }
    }
}
