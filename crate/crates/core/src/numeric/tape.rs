//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation is evaluated eagerly and appended to the tape together
//! with the references it needs for its vector-Jacobian product. Parameters
//! are read in place from a [`ParamStore`]; they are never copied onto the
//! tape.

use std::rc::Rc;

use super::tensor::Tensor;
use super::{NumericError, ParamId, ParamStore};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row-sparse constant matrix used for neighbourhood aggregation.
#[derive(Clone, Debug, Default)]
pub struct SparseRows {
    pub cols: usize,
    /// `(column, weight)` pairs for every row.
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        let d = x.cols();
        let mut out = Tensor::zeros(self.rows.len(), d);
        for (r, entries) in self.rows.iter().enumerate() {
            let o = out.row_mut(r);
            for &(c, w) in entries {
                for (ov, &xv) in o.iter_mut().zip(x.row(c)) {
                    *ov += w * xv;
                }
            }
        }
        out
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    LeakyRelu(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    Spmm(Rc<SparseRows>, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    SumSq(Var),
    PickSum(Var, Rc<Vec<usize>>),
    StopGrad,
    StraightThrough(Var),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: ParamGrads,
}

impl Gradients {
    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id)
    }

    pub fn into_param_grads(self) -> ParamGrads {
        self.params
    }
}

/// Per-parameter gradient accumulator, indexed like the owning store.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn new(len: usize) -> Self {
        Self {
            grads: vec![None; len],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn set(&mut self, id: ParamId, t: Tensor) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        self.grads[id.0] = Some(t);
    }

    pub fn remove(&mut self, id: ParamId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn accumulate(&mut self, other: &ParamGrads) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.axpy(1.0, t),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.grads.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Records a forward computation for one backward pass.
pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericError {
    NumericError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free input whose gradient can be read back with [`Gradients::var`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let out = self.value(a).matmul_bt(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulBt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let out = self.value(a).mul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds the `1 x n` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NumericError> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(mismatch("add_row", x, b));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(a, bias), rg))
    }

    /// `x · w + bias` with a `1 x n` bias row.
    pub fn affine(&mut self, x: Var, w: Var, bias: Var) -> Result<Var, NumericError> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, bias)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Multiplies every entry of `a` by the `1 x 1` tensor `s`.
    pub fn scale_by(&mut self, s: Var, a: Var) -> Result<Var, NumericError> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(mismatch("scale_by", sv, self.value(a)));
        }
        let out = self.value(a).scale(sv.item());
        let rg = self.rg(s) || self.rg(a);
        Ok(self.push(out, Op::ScaleBy(s, a), rg))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(a);
        self.push(out, Op::LeakyRelu(a, slope), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Elementwise `ln σ(x)`, evaluated without overflow.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(log_sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::LogSigmoid(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).softmax_rows();
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            out.row_mut(r)
                .copy_from_slice(&super::tensor::log_softmax(x.row(r)));
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmaxRows(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&tensors)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice_rows(start, end);
        let rg = self.rg(a);
        self.push(out, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice_cols(start, end);
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let out = self.value(a).gather_rows(&idx);
        let rg = self.rg(a);
        self.push(out, Op::GatherRows(a, idx), rg)
    }

    pub fn spmm(&mut self, s: Rc<SparseRows>, a: Var) -> Result<Var, NumericError> {
        let x = self.value(a);
        if s.cols != x.rows() {
            return Err(NumericError::ShapeMismatch {
                op: "spmm",
                left: vec![s.rows.len(), s.cols],
                right: x.shape().to_vec(),
            });
        }
        let out = s.apply(x);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Spmm(s, a), rg))
    }

    /// Row-wise layer normalisation with learned `1 x n` gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NumericError> {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let n = xv.cols();
        if g.len() != n || b.len() != n {
            return Err(mismatch("layer_norm", xv, g));
        }
        let mut xhat = Tensor::zeros(xv.rows(), n);
        let mut out = Tensor::zeros(xv.rows(), n);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            let xh = xhat.row_mut(r);
            for (h, &v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * inv;
            }
            let o = out.row_mut(r);
            for c in 0..n {
                o[c] = g.data()[c] * xhat.get(r, c) + b.data()[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    /// Sum of squared entries, i.e. the squared Frobenius norm.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().map(|v| v * v).sum());
        let rg = self.rg(a);
        self.push(out, Op::SumSq(a), rg)
    }

    /// Squared euclidean distance between two equally shaped tensors.
    pub fn sq_l2_dist(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let d = self.sub(a, b)?;
        Ok(self.sum_sq(d))
    }

    /// `Σ_r a[r, cols[r]]` as a scalar.
    pub fn pick_sum(&mut self, a: Var, cols: Rc<Vec<usize>>) -> Result<Var, NumericError> {
        let x = self.value(a);
        if cols.len() != x.rows() || cols.iter().any(|&c| c >= x.cols()) {
            return Err(NumericError::ShapeMismatch {
                op: "pick_sum",
                left: x.shape().to_vec(),
                right: vec![cols.len()],
            });
        }
        let total = cols.iter().enumerate().map(|(r, &c)| x.get(r, c)).sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(total), Op::PickSum(a, cols), rg))
    }

    /// Identity forward; contributes no gradient backward.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(out, Op::StopGrad, false)
    }

    /// `a + sg(target - a)`: the value is exactly `target`, while the
    /// gradient reaches `a` unchanged.
    pub fn straight_through(&mut self, a: Var, target: Tensor) -> Result<Var, NumericError> {
        let x = self.value(a);
        if x.shape() != target.shape() {
            return Err(mismatch("straight_through", x, &target));
        }
        let rg = self.rg(a);
        Ok(self.push(target, Op::StraightThrough(a), rg))
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let mut params = ParamGrads::new(self.store.len());
        for (pid, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                params.grads[pid] = grads[v.0].take();
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), NumericError> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param(_) | Op::StopGrad => {}
            Op::StraightThrough(a) => {
                if self.rg(*a) {
                    acc(grads, *a, g.clone());
                }
            }
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let ga = g.matmul_bt(self.value(*b))?;
                    acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = self.value(*a).matmul_at(g)?;
                    acc(grads, *b, gb);
                }
            }
            Op::MatMulBt(a, b) => {
                if self.rg(*a) {
                    let ga = g.matmul(self.value(*b))?;
                    acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = g.matmul_at(self.value(*a))?;
                    acc(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    acc(grads, *b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(grads, *a, g.mul(self.value(*b))?);
                }
                if self.rg(*b) {
                    acc(grads, *b, g.mul(self.value(*a))?);
                }
            }
            Op::AddRow(a, bias) => {
                if self.rg(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.rg(*bias) {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(grads, *bias, gb);
                }
            }
            Op::Scale(a, s) => acc(grads, *a, g.scale(*s)),
            Op::ScaleBy(s, a) => {
                let sv = self.value(*s).item();
                if self.rg(*s) {
                    let gs = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(x, y)| x * y)
                        .sum();
                    acc(grads, *s, Tensor::scalar(gs));
                }
                if self.rg(*a) {
                    acc(grads, *a, g.scale(sv));
                }
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let ga = g.zip_map(x, "leaky_relu", |gv, xv| if xv > 0.0 { gv } else { slope * gv })?;
                acc(grads, *a, ga);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let ga = g.zip_map(x, "relu", |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                acc(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let y = node.value.as_ref().expect("sigmoid value");
                acc(grads, *a, g.zip_map(y, "sigmoid", |gv, yv| gv * yv * (1.0 - yv))?);
            }
            Op::LogSigmoid(a) => {
                let x = self.value(*a);
                acc(grads, *a, g.zip_map(x, "log_sigmoid", |gv, xv| gv * sigmoid(-xv))?);
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.as_ref().expect("softmax value");
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dotv: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (&yv, &gv)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yv * (gv - dotv);
                    }
                }
                acc(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let y = node.value.as_ref().expect("log_softmax value");
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let total: f64 = gr.iter().sum();
                    for (o, (&yv, &gv)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = gv - yv.exp() * total;
                    }
                }
                acc(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        acc(grads, p, g.slice_cols(start, start + w));
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.rg(p) {
                        acc(grads, p, g.slice_rows(start, start + h));
                    }
                    start += h;
                }
            }
            Op::SliceRows(a, start) => {
                let x = self.value(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                let c = x.cols();
                ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                let w = g.cols();
                for r in 0..x.rows() {
                    ga.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                }
                acc(grads, *a, ga);
            }
            Op::GatherRows(a, idx_list) => {
                let x = self.value(*a);
                let slot = &mut grads[a.0];
                let ga = slot.get_or_insert_with(|| Tensor::zeros(x.rows(), x.cols()));
                for (k, &i) in idx_list.iter().enumerate() {
                    for (o, &v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
            }
            Op::Spmm(s, a) => {
                let x = self.value(*a);
                let slot = &mut grads[a.0];
                let ga = slot.get_or_insert_with(|| Tensor::zeros(x.rows(), x.cols()));
                for (r, entries) in s.rows.iter().enumerate() {
                    let gr = g.row(r);
                    for &(c, w) in entries {
                        for (o, &v) in ga.row_mut(c).iter_mut().zip(gr) {
                            *o += w * v;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                let n = xhat.cols();
                if self.rg(*gamma) {
                    let mut gg = Tensor::zeros(1, n);
                    for r in 0..g.rows() {
                        for c in 0..n {
                            gg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                    acc(grads, *gamma, gg);
                }
                if self.rg(*beta) {
                    let mut gb = Tensor::zeros(1, n);
                    for r in 0..g.rows() {
                        for (o, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(grads, *beta, gb);
                }
                if self.rg(*x) {
                    let mut gx = Tensor::zeros(g.rows(), n);
                    let nf = n as f64;
                    for r in 0..g.rows() {
                        let dxhat: Vec<f64> = (0..n).map(|c| g.get(r, c) * gv.data()[c]).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum();
                        let inv = inv_std[r];
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = inv / nf * (nf * dxhat[c] - s1 - xhat.get(r, c) * s2);
                        }
                    }
                    acc(grads, *x, gx);
                }
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                acc(grads, *a, Tensor::filled(x.rows(), x.cols(), g.item()));
            }
            Op::SumSq(a) => {
                let s = 2.0 * g.item();
                acc(grads, *a, self.value(*a).scale(s));
            }
            Op::PickSum(a, cols) => {
                let x = self.value(*a);
                let gv = g.item();
                let slot = &mut grads[a.0];
                let ga = slot.get_or_insert_with(|| Tensor::zeros(x.rows(), x.cols()));
                for (r, &c) in cols.iter().enumerate() {
                    let v = ga.get(r, c);
                    ga.set(r, c, v + gv);
                }
            }
        }
        Ok(())
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
