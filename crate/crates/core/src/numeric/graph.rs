//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Graph`] is an append-only list of nodes; every operation reads only
//! earlier nodes, so the tape is acyclic by construction and the reverse pass
//! is a single sweep from the loss back to index 0. Gradient contributions are
//! accumulated in that fixed order, which keeps results bit-reproducible.

use std::sync::Arc;

use super::kernels::{cosine_backward, cosine_parts, log_sum_exp, softmax_into, swish, swish_grad};
use super::tensor::{as_matrix, dot, matmul_at_raw, matmul_bt_raw, matmul_raw, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name: name.into(), value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Backward rule for an operation defined outside this module.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the upstream gradient of the output.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Swish(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    Sum(Var),
    Mean(Var),
    WeightedSum(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    IndexAddRows(Var, Vec<usize>),
    ScaleRows(Var, Var),
    GatherElems(Var, Vec<(usize, usize)>),
    ConcatRows(Vec<Var>),
    Cosine(Var, Var),
    RowCosine(Var, Var),
    CrossEntropy(Var, Vec<usize>),
    Custom(Arc<dyn CustomOp>, Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Single-writer computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Row view: 1-D tensors are a single row.
fn row_view(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [n] => (1, *n),
        [] => (1, 1),
        _ => (t.rows(), t.cols()),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix("matmul", self.value(a))?;
        let (k2, n) = as_matrix("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k` (the usual `x Wᵀ` linear map).
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix("matmul_bt", self.value(a))?;
        let (n, k2) = as_matrix("matmul_bt", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul_bt", format!("[{m}, {k}] x [{n}, {k2}]^T")));
        }
        let out = matmul_bt_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulBt(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| c * x);
        self.push(out, Op::Scale(a, c))
    }

    pub fn swish(&mut self, a: Var) -> Var {
        let out = self.map(a, swish);
        self.push(out, Op::Swish(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x * x);
        self.push(out, Op::Square(a))
    }

    /// Softmax over each row (a 1-D tensor is one row).
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (rows, cols) = row_view(t);
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            softmax_into(&t.data()[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Log-sum-exp of each row, producing a vector of length `rows`.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (rows, cols) = row_view(t);
        let out = (0..rows).map(|r| log_sum_exp(&t.data()[r * cols..(r + 1) * cols])).collect();
        self.push(Tensor::from_parts(vec![rows], out), Op::LogSumExpRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// `Σ_j a_j c_j` with constant coefficients.
    pub fn weighted_sum(&mut self, a: Var, coeffs: Vec<f64>) -> Result<Var> {
        let t = self.value(a);
        if coeffs.len() != t.len() {
            return Err(Error::shape("weighted_sum", format!("{} coeffs for {} values", coeffs.len(), t.len())));
        }
        let s = dot(t.data(), &coeffs);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(a, coeffs)))
    }

    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = as_matrix("gather_rows", t)?;
        if index.is_empty() {
            return Err(Error::shape("gather_rows", "empty index"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of {rows}")));
        }
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in &index {
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::from_parts(vec![index.len(), cols], out);
        Ok(self.push(value, Op::GatherRows(a, index)))
    }

    /// Adds row `j` of `src` into row `index[j]` of a zero matrix with `rows` rows.
    pub fn index_add_rows(&mut self, src: Var, index: Vec<usize>, rows: usize) -> Result<Var> {
        let t = self.value(src);
        let (n, cols) = as_matrix("index_add_rows", t)?;
        if index.len() != n {
            return Err(Error::shape("index_add_rows", format!("{} indices for {n} rows", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("index_add_rows", format!("row {bad} out of {rows}")));
        }
        let mut out = vec![0.0; rows * cols];
        for (j, &i) in index.iter().enumerate() {
            for (o, &v) in out[i * cols..(i + 1) * cols].iter_mut().zip(t.row(j)) {
                *o += v;
            }
        }
        let value = Tensor::from_parts(vec![rows, cols], out);
        Ok(self.push(value, Op::IndexAddRows(src, index)))
    }

    /// Multiplies row `j` of `a` by `w[j]`.
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Result<Var> {
        let t = self.value(a);
        let (n, cols) = as_matrix("scale_rows", t)?;
        let wt = self.value(w);
        if wt.shape() != [n] {
            return Err(Error::shape("scale_rows", format!("weights {:?} for {n} rows", wt.shape())));
        }
        let mut out = t.data().to_vec();
        for j in 0..n {
            let s = wt.data()[j];
            for o in &mut out[j * cols..(j + 1) * cols] {
                *o *= s;
            }
        }
        let value = Tensor::from_parts(vec![n, cols], out);
        Ok(self.push(value, Op::ScaleRows(a, w)))
    }

    /// Picks `a[i, j]` for each `(i, j)`, producing a vector.
    pub fn gather_elems(&mut self, a: Var, at: Vec<(usize, usize)>) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = as_matrix("gather_elems", t)?;
        if at.is_empty() {
            return Err(Error::shape("gather_elems", "empty index"));
        }
        if at.iter().any(|&(i, j)| i >= rows || j >= cols) {
            return Err(Error::shape("gather_elems", "index out of range"));
        }
        let out = at.iter().map(|&(i, j)| t.at(i, j)).collect();
        let value = Tensor::from_parts(vec![at.len()], out);
        Ok(self.push(value, Op::GatherElems(a, at)))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let (_, cols) = as_matrix("concat_rows", self.value(first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in &parts {
            let (r, c) = as_matrix("concat_rows", self.value(p))?;
            if c != cols {
                return Err(Error::shape("concat_rows", format!("width {c} vs {cols}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::from_parts(vec![rows, cols], out);
        Ok(self.push(value, Op::ConcatRows(parts)))
    }

    /// Cosine similarity of two equally sized tensors, flattened.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::shape("cosine", "length mismatch"));
        }
        let c = cosine_parts(self.value(a).data(), self.value(b).data()).0;
        Ok(self.push(Tensor::scalar(c), Op::Cosine(a, b)))
    }

    /// Row-wise cosine similarity of two `n×d` matrices, producing a vector.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_cosine", a, b)?;
        let (n, _) = as_matrix("row_cosine", self.value(a))?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out = (0..n).map(|r| cosine_parts(ta.row(r), tb.row(r)).0).collect();
        Ok(self.push(Tensor::from_parts(vec![n], out), Op::RowCosine(a, b)))
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let t = self.value(logits);
        let (rows, cols) = as_matrix("cross_entropy", t)?;
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", format!("{} targets for {rows} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= cols) {
            return Err(Error::shape("cross_entropy", format!("target {bad} out of {cols} classes")));
        }
        let mut total = 0.0;
        for (r, &c) in targets.iter().enumerate() {
            total += log_sum_exp(t.row(r)) - t.at(r, c);
        }
        let value = Tensor::scalar(total / rows as f64);
        Ok(self.push(value, Op::CrossEntropy(logits, targets)))
    }

    /// Records an externally defined operation whose forward value has
    /// already been computed.
    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: Vec<Var>, value: Tensor) -> Var {
        self.push(value, Op::Custom(op, inputs))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", lv.shape())));
        }
        if !lv.all_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        grads.accumulate(self, store);
        Ok(grads)
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let da = matmul_bt_raw(g.data(), tb.data(), m, n, k);
                let db = matmul_at_raw(ta.data(), g.data(), m, k, n);
                accumulate(grads, *a, ta.shape(), da);
                accumulate(grads, *b, tb.shape(), db);
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[0];
                let da = matmul_raw(g.data(), tb.data(), m, n, k);
                let db = matmul_at_raw(g.data(), ta.data(), m, n, k);
                accumulate(grads, *a, ta.shape(), da);
                accumulate(grads, *b, tb.shape(), db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.shape(), g.data().to_vec());
                accumulate(grads, *b, g.shape(), g.data().to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.shape(), g.data().to_vec());
                accumulate(grads, *b, g.shape(), g.data().iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                let db = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                accumulate(grads, *a, g.shape(), da);
                accumulate(grads, *b, g.shape(), db);
            }
            Op::Scale(a, c) => {
                accumulate(grads, *a, g.shape(), g.data().iter().map(|x| c * x).collect());
            }
            Op::Swish(a) => {
                let ta = self.value(*a);
                let da = g.data().iter().zip(ta.data()).map(|(gv, &x)| gv * swish_grad(x)).collect();
                accumulate(grads, *a, g.shape(), da);
            }
            Op::Square(a) => {
                let ta = self.value(*a);
                let da = g.data().iter().zip(ta.data()).map(|(gv, &x)| 2.0 * x * gv).collect();
                accumulate(grads, *a, g.shape(), da);
            }
            Op::SoftmaxRows(a) => {
                let (rows, cols) = row_view(out);
                let mut da = vec![0.0; out.len()];
                for r in 0..rows {
                    let s = &out.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let inner = dot(s, gr);
                    for j in 0..cols {
                        da[r * cols + j] = s[j] * (gr[j] - inner);
                    }
                }
                accumulate(grads, *a, out.shape(), da);
            }
            Op::LogSumExpRows(a) => {
                let ta = self.value(*a);
                let (rows, cols) = row_view(ta);
                let mut da = vec![0.0; ta.len()];
                for r in 0..rows {
                    let dst = &mut da[r * cols..(r + 1) * cols];
                    softmax_into(&ta.data()[r * cols..(r + 1) * cols], dst);
                    for d in dst.iter_mut() {
                        *d *= g.data()[r];
                    }
                }
                accumulate(grads, *a, ta.shape(), da);
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                accumulate(grads, *a, ta.shape(), vec![g.item(); ta.len()]);
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                accumulate(grads, *a, ta.shape(), vec![g.item() / ta.len() as f64; ta.len()]);
            }
            Op::WeightedSum(a, coeffs) => {
                let ta = self.value(*a);
                accumulate(grads, *a, ta.shape(), coeffs.iter().map(|c| c * g.item()).collect());
            }
            Op::GatherRows(a, index) => {
                let ta = self.value(*a);
                let cols = ta.cols();
                let mut da = vec![0.0; ta.len()];
                for (j, &r) in index.iter().enumerate() {
                    for (d, &gv) in da[r * cols..(r + 1) * cols].iter_mut().zip(g.row(j)) {
                        *d += gv;
                    }
                }
                accumulate(grads, *a, ta.shape(), da);
            }
            Op::IndexAddRows(src, index) => {
                let ts = self.value(*src);
                let mut ds = Vec::with_capacity(ts.len());
                for &r in index {
                    ds.extend_from_slice(g.row(r));
                }
                accumulate(grads, *src, ts.shape(), ds);
            }
            Op::ScaleRows(a, w) => {
                let (ta, tw) = (self.value(*a), self.value(*w));
                let cols = ta.cols();
                let mut da = g.data().to_vec();
                let mut dw = vec![0.0; tw.len()];
                for j in 0..tw.len() {
                    let s = tw.data()[j];
                    for d in &mut da[j * cols..(j + 1) * cols] {
                        *d *= s;
                    }
                    dw[j] = dot(g.row(j), ta.row(j));
                }
                accumulate(grads, *a, ta.shape(), da);
                accumulate(grads, *w, tw.shape(), dw);
            }
            Op::GatherElems(a, at) => {
                let ta = self.value(*a);
                let cols = ta.cols();
                let mut da = vec![0.0; ta.len()];
                for (k, &(r, c)) in at.iter().enumerate() {
                    da[r * cols + c] += g.data()[k];
                }
                accumulate(grads, *a, ta.shape(), da);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let n = tp.len();
                    accumulate(grads, p, tp.shape(), g.data()[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Cosine(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut da = vec![0.0; ta.len()];
                let mut db = vec![0.0; tb.len()];
                cosine_backward(ta.data(), tb.data(), g.item(), &mut da, &mut db);
                accumulate(grads, *a, ta.shape(), da);
                accumulate(grads, *b, tb.shape(), db);
            }
            Op::RowCosine(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let cols = ta.cols();
                let mut da = vec![0.0; ta.len()];
                let mut db = vec![0.0; tb.len()];
                for r in 0..ta.rows() {
                    let span = r * cols..(r + 1) * cols;
                    let (dar, dbr) = (&mut da[span.clone()], &mut db[span]);
                    cosine_backward(ta.row(r), tb.row(r), g.data()[r], dar, dbr);
                }
                accumulate(grads, *a, ta.shape(), da);
                accumulate(grads, *b, tb.shape(), db);
            }
            Op::CrossEntropy(logits, targets) => {
                let t = self.value(*logits);
                let (rows, cols) = (t.rows(), t.cols());
                let scale = g.item() / rows as f64;
                let mut d = vec![0.0; t.len()];
                for (r, &c) in targets.iter().enumerate() {
                    let dst = &mut d[r * cols..(r + 1) * cols];
                    softmax_into(t.row(r), dst);
                    dst[c] -= 1.0;
                    for v in dst.iter_mut() {
                        *v *= scale;
                    }
                }
                accumulate(grads, *logits, t.shape(), d);
            }
            Op::Custom(op, inputs) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let dins = op.backward(&vals, out, g);
                debug_assert_eq!(dins.len(), inputs.len(), "{} returned wrong arity", op.name());
                for (&v, d) in inputs.iter().zip(dins) {
                    let shape = self.value(v).shape().to_vec();
                    accumulate(grads, v, &shape, d.into_data());
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(Tensor::from_parts(shape.to_vec(), delta)),
    }
}

/// Gradients of one reverse sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds the gradient of every parameter leaf into its store entry.
    pub fn accumulate(&self, graph: &Graph, store: &mut ParamStore) {
        for (i, node) in graph.nodes.iter().enumerate().take(self.grads.len()) {
            if let (Op::Param(id), Some(g)) = (&node.op, &self.grads[i]) {
                for (acc, d) in store.get_mut(*id).grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += d;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let mut store = ParamStore::new();
        let p = store.add("p", t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let mut g = Graph::new();
        let v = g.param(&store, p);
        let loss = g.sum(v);
        g.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.grad(p).data(), &[1.0; 6]);
    }

    #[test]
    fn squared_norm_gives_twice_p() {
        let mut store = ParamStore::new();
        let p = store.add("p", t(&[3], &[1.0, -2.0, 0.25]));
        let mut g = Graph::new();
        let v = g.param(&store, p);
        let sq = g.square(v);
        let loss = g.sum(sq);
        g.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.grad(p).data(), &[2.0, -4.0, 0.5]);
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let mut store = ParamStore::new();
        let p = store.add("p", t(&[2], &[1.0, 2.0]));
        for _ in 0..2 {
            let mut g = Graph::new();
            let v = g.param(&store, p);
            let loss = g.sum(v);
            g.backward_into(loss, &mut store).unwrap();
        }
        assert_eq!(store.grad(p).data(), &[2.0, 2.0]);
        store.zero_grads();
        assert_eq!(store.grad(p).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let v = g.constant(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(v), Err(Error::Shape { .. })));
    }

    #[test]
    fn shape_errors_surface() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[0.0; 6]));
        let b = g.constant(t(&[2, 3], &[0.0; 6]));
        assert!(g.matmul(a, b).is_err());
        assert!(g.matmul_bt(a, b).is_ok());
        let c = g.constant(t(&[3], &[0.0; 3]));
        assert!(g.add(a, c).is_err());
        assert!(g.cross_entropy(a, vec![0, 3]).is_err());
    }

    #[test]
    fn matmul_grad_of_sum() {
        // d sum(AB)/dA = ones · Bᵀ
        let mut store = ParamStore::new();
        let a = store.add("a", t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = t(&[3, 2], &[0.5, -1.0, 2.0, 0.0, 1.0, 3.0]);
        let mut g = Graph::new();
        let va = g.param(&store, a);
        let vb = g.constant(b.clone());
        let prod = g.matmul(va, vb).unwrap();
        let loss = g.sum(prod);
        g.backward_into(loss, &mut store).unwrap();
        let row_sums: Vec<f64> = (0..3).map(|r| b.row(r).iter().sum()).collect();
        let expected: Vec<f64> = row_sums.iter().chain(&row_sums).copied().collect();
        assert_eq!(store.grad(a).data(), expected.as_slice());
    }
}
