use std::collections::BTreeMap;

use super::ops::{self, gelu, gelu_grad, row_moments, sigmoid, simplex_cap_row, softmax_row};
use super::tensor::{dot, matmul_nn, matmul_nt, matmul_tn, norm};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{dim_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a task-aware additive mask over a token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskLayout {
    pub len: usize,
    pub query_pos: usize,
    /// Positions of ICD tokens (contiguous, ascending).
    pub icd_positions: Vec<usize>,
    pub scale: f64,
    /// Literal reading: the query-coupling branch sits on row `query_pos`
    /// over ICD columns, where the causal rule overrides it.
    pub literal_query_branch: bool,
}

impl MaskLayout {
    fn is_icd(&self, i: usize) -> bool {
        self.icd_positions.binary_search(&i).is_ok()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    Scale(NodeId, f64),
    ScaleBy(NodeId, NodeId),
    AddScalar(NodeId),
    Sigmoid(NodeId),
    Gelu(NodeId),
    NegLogCapped(NodeId, f64),
    Sum(NodeId),
    SqNorm(NodeId),
    Softmax(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize),
    SliceRows(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
    Cosine(NodeId, NodeId),
    TaskMask { cos: NodeId, nlt: NodeId, alpha: NodeId, layout: MaskLayout },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, excluded: Vec<Vec<usize>> },
    KlUniformRows { x: NodeId, rows: Vec<usize> },
    SimplexCap(NodeId, f64),
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the
/// node index is a topological order and backward walks it in reverse.
#[derive(Default)]
pub struct Graph {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
    params: BTreeMap<ParamId, NodeId>,
    skipped_rows: usize,
}

/// Gradients of one scalar output with respect to every node on the tape.
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node[id.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.values[id.0].item()
    }

    /// Rows skipped by `kl_uniform_rows` because no entry was finite.
    pub fn skipped_rows(&self) -> usize {
        self.skipped_rows
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        NodeId(self.values.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.needs_grad[i.0])
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a parameter; one node per parameter per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let n = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, n);
        n
    }

    pub fn param_node(&self, id: ParamId) -> Option<NodeId> {
        self.params.get(&id).copied()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    /// a * b^T
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return dim_err(format!("matmul_t needs equal widths, got {} and {}", va.cols(), vb.cols()));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.rows());
        let mut out = vec![0.0; m * n];
        matmul_nt(va.data(), vb.data(), &mut out, m, k, n);
        let v = Tensor::matrix(m, n, out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::MatMulT(a, b), ng))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        let ng = self.ng(&[a]);
        self.push(v, Op::Transpose(a), ng)
    }

    fn zip(&mut self, a: NodeId, b: NodeId, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return dim_err(format!("{what}: shapes {:?} and {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::matrix(va.rows(), va.cols(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    fn broadcast_row(&self, a: NodeId, r: NodeId, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vr) = (self.value(a), self.value(r));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return dim_err(format!("{what}: row {:?} against {:?}", vr.shape(), va.shape()));
        }
        let c = va.cols();
        let data = va.data().iter().enumerate().map(|(i, &x)| f(x, vr.data()[i % c])).collect();
        Tensor::matrix(va.rows(), c, data)
    }

    /// a (m x n) + r (1 x n), broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, r: NodeId) -> Result<NodeId> {
        let v = self.broadcast_row(a, r, "add_row", |x, y| x + y)?;
        let ng = self.ng(&[a, r]);
        Ok(self.push(v, Op::AddRow(a, r), ng))
    }

    pub fn mul_row(&mut self, a: NodeId, r: NodeId) -> Result<NodeId> {
        let v = self.broadcast_row(a, r, "mul_row", |x, y| x * y)?;
        let ng = self.ng(&[a, r]);
        Ok(self.push(v, Op::MulRow(a, r), ng))
    }

    /// a (m x n) * c (m x 1), broadcast over columns.
    pub fn mul_col(&mut self, a: NodeId, c: NodeId) -> Result<NodeId> {
        let (va, vc) = (self.value(a), self.value(c));
        if vc.cols() != 1 || vc.rows() != va.rows() {
            return dim_err(format!("mul_col: column {:?} against {:?}", vc.shape(), va.shape()));
        }
        let n = va.cols();
        let data = va.data().iter().enumerate().map(|(i, &x)| x * vc.data()[i / n]).collect();
        let v = Tensor::matrix(va.rows(), n, data)?;
        let ng = self.ng(&[a, c]);
        Ok(self.push(v, Op::MulCol(a, c), ng))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale(a, s), ng)
    }

    /// a * s for a 1 x 1 node s.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return dim_err("scale_by needs a 1x1 scale");
        }
        let sv = self.value(s).item();
        let v = self.value(a).map(|x| x * sv);
        let ng = self.ng(&[a, s]);
        Ok(self.push(v, Op::ScaleBy(a, s), ng))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x + s);
        let ng = self.ng(&[a]);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(&[a]);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        let ng = self.ng(&[a]);
        self.push(v, Op::Gelu(a), ng)
    }

    /// min(-ln x, cap), elementwise; zero gradient where the cap binds.
    pub fn neg_log_capped(&mut self, a: NodeId, cap: f64) -> NodeId {
        let v = self.value(a).map(|x| (-x.ln()).min(cap));
        let ng = self.ng(&[a]);
        self.push(v, Op::NegLogCapped(a, cap), ng)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn sq_norm(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sq_norm();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::SqNorm(a), ng)
    }

    /// Row-wise softmax; `-inf` entries become exact zeros.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::masked_softmax(self.value(a), 1)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::Softmax(a), ng))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let v = ops::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(v, Op::LayerNorm { x, gain, bias, eps }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return dim_err("concat_cols: row counts differ");
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let v = Tensor::matrix(rows, cols, data)?;
        let ng = self.ng(parts);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return dim_err("concat_rows: column counts differ");
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::matrix(data.len() / cols, cols, data)?;
        let ng = self.ng(parts);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        if len == 0 || start + len > va.cols() {
            return dim_err(format!("slice_cols {start}..{} of {} columns", start + len, va.cols()));
        }
        let mut data = Vec::with_capacity(va.rows() * len);
        for i in 0..va.rows() {
            data.extend_from_slice(&va.row_slice(i)[start..start + len]);
        }
        let v = Tensor::matrix(va.rows(), len, data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::SliceCols(a, start), ng))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        if len == 0 || start + len > va.rows() {
            return dim_err(format!("slice_rows {start}..{} of {} rows", start + len, va.rows()));
        }
        let c = va.cols();
        let v = Tensor::matrix(len, c, va.data()[start * c..(start + len) * c].to_vec())?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::SliceRows(a, start), ng))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let va = self.value(a);
        if idx.is_empty() || idx.iter().any(|&i| i >= va.rows()) {
            return dim_err(format!("gather_rows: bad indices for {} rows", va.rows()));
        }
        let mut data = Vec::with_capacity(idx.len() * va.cols());
        for &i in idx {
            data.extend_from_slice(va.row_slice(i));
        }
        let v = Tensor::matrix(idx.len(), va.cols(), data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::GatherRows(a, idx.to_vec()), ng))
    }

    /// Pairwise cosine similarity between rows of `a` and rows of `b`.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return dim_err("cosine: widths differ");
        }
        let na: Vec<f64> = (0..va.rows()).map(|i| norm(va.row_slice(i))).collect();
        let nb: Vec<f64> = (0..vb.rows()).map(|j| norm(vb.row_slice(j))).collect();
        if na.iter().chain(&nb).any(|&n| n == 0.0) {
            return Err(Error::DegenerateVector("cosine similarity of a zero embedding".into()));
        }
        let mut data = Vec::with_capacity(va.rows() * vb.rows());
        for i in 0..va.rows() {
            for j in 0..vb.rows() {
                data.push(dot(va.row_slice(i), vb.row_slice(j)) / (na[i] * nb[j]));
            }
        }
        let v = Tensor::matrix(va.rows(), vb.rows(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Cosine(a, b), ng))
    }

    /// Task-aware additive mask from a cosine matrix, a column of
    /// `-log t` values and the scalar `alpha`.
    pub fn task_mask(&mut self, cos: NodeId, nlt: NodeId, alpha: NodeId, layout: MaskLayout) -> Result<NodeId> {
        let n = layout.len;
        let (vc, vn, va) = (self.value(cos), self.value(nlt), self.value(alpha));
        if vc.rows() != n || vc.cols() != n || vn.rows() != n || vn.cols() != 1 || va.len() != 1 {
            return dim_err("task_mask: operand shapes do not match the layout");
        }
        let a = va.item();
        let mut m = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let v = if j > i {
                    f64::NEG_INFINITY
                } else if layout.is_icd(i) && layout.is_icd(j) {
                    vc.get(i, j) * layout.scale * vn.get(i, 0)
                } else if !layout.literal_query_branch && layout.is_icd(i) && j == layout.query_pos {
                    a * vc.get(i, j) * layout.scale * vn.get(i, 0)
                } else {
                    0.0
                };
                m.set(i, j, v);
            }
        }
        let ng = self.ng(&[cos, nlt, alpha]);
        Ok(self.push(m, Op::TaskMask { cos, nlt, alpha, layout }, ng))
    }

    /// Mean negative log-likelihood of `targets`, one per logits row.
    /// `excluded[r]` lists columns removed from row r before normalizing.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], excluded: &[Vec<usize>]) -> Result<NodeId> {
        let vl = self.value(logits);
        if targets.len() != vl.rows() || excluded.len() != vl.rows() {
            return dim_err("cross_entropy: need one target and one exclusion list per row");
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= vl.cols() {
                return Err(Error::Validation(format!("target {t} outside a vocabulary of {}", vl.cols())));
            }
            if excluded[r].contains(&t) {
                return Err(Error::Validation(format!("target {t} is masked at step {r}")));
            }
            let lp = ops::log_softmax_masked(vl.row_slice(r), &excluded[r])?;
            total -= lp[t];
        }
        let v = Tensor::scalar(total / targets.len() as f64);
        let ng = self.ng(&[logits]);
        Ok(self.push(
            v,
            Op::CrossEntropy { logits, targets: targets.to_vec(), excluded: excluded.to_vec() },
            ng,
        ))
    }

    /// Sum over the listed rows of KL(softmax(finite entries) || uniform).
    pub fn kl_uniform_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let vx = self.value(x);
        let mut total = 0.0;
        let mut skipped = 0;
        for &r in rows {
            if r >= vx.rows() {
                return dim_err(format!("kl row {r} out of range"));
            }
            match row_kl(vx.row_slice(r)) {
                Some((kl, _)) => total += kl,
                None => skipped += 1,
            }
        }
        self.skipped_rows += skipped;
        if skipped > 0 {
            log::warn!("sparsity loss skipped {skipped} fully masked rows");
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::KlUniformRows { x, rows: rows.to_vec() }, ng))
    }

    /// Row-wise radial projection of simplex points onto `sum f^2 <= theta`.
    pub fn simplex_cap(&mut self, a: NodeId, theta: f64) -> NodeId {
        let va = self.value(a);
        let c = va.cols();
        let mut v = va.clone();
        for i in 0..va.rows() {
            simplex_cap_row(va.row_slice(i), theta, &mut v.data_mut()[i * c..(i + 1) * c]);
        }
        let ng = self.ng(&[a]);
        self.push(v, Op::SimplexCap(a, theta), ng)
    }

    pub fn backward(&self, output: NodeId) -> Result<Grads> {
        if self.value(output).len() != 1 {
            return dim_err("backward needs a scalar output");
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[output.0] = Some(Tensor::scalar(1.0));
        for i in (0..=output.0).rev() {
            if !self.needs_grad[i] || matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads { by_node: grads })
    }

    /// Gradient for every parameter in `store` (zeros where unused).
    pub fn param_grads(&self, grads: &Grads, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                self.params
                    .get(&id)
                    .and_then(|n| grads.get(*n).cloned())
                    .unwrap_or_else(|| {
                        let t = store.get(id);
                        Tensor::zeros(t.rows(), t.cols())
                    })
            })
            .collect()
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Tensor>], id: NodeId) -> Option<&'a mut [f64]> {
        if !self.needs_grad[id.0] {
            return None;
        }
        let v = &self.values[id.0];
        let g = grads[id.0].get_or_insert_with(|| Tensor::zeros(v.rows(), v.cols()));
        Some(g.data_mut())
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        let out = &self.values[i];
        match &self.ops[i] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if let Some(s) = self.slot(grads, *a) {
                    matmul_nt(gd, vb.data(), s, m, n, k);
                }
                if let Some(s) = self.slot(grads, *b) {
                    matmul_tn(va.data(), gd, s, m, k, n);
                }
            }
            Op::MatMulT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.rows());
                if let Some(s) = self.slot(grads, *a) {
                    matmul_nn(gd, vb.data(), s, m, n, k);
                }
                if let Some(s) = self.slot(grads, *b) {
                    matmul_tn(gd, va.data(), s, m, n, k);
                }
            }
            Op::Transpose(a) => {
                let gt = g.transpose();
                if let Some(s) = self.slot(grads, *a) {
                    add_into(s, gt.data());
                }
            }
            Op::Add(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    add_into(s, gd);
                }
                if let Some(s) = self.slot(grads, *b) {
                    add_into(s, gd);
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    add_into(s, gd);
                }
                if let Some(s) = self.slot(grads, *b) {
                    for (x, &y) in s.iter_mut().zip(gd) {
                        *x -= y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if let Some(s) = self.slot(grads, *a) {
                    for k in 0..s.len() {
                        s[k] += gd[k] * vb.data()[k];
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for k in 0..s.len() {
                        s[k] += gd[k] * va.data()[k];
                    }
                }
            }
            Op::AddRow(a, r) => {
                let c = out.cols();
                if let Some(s) = self.slot(grads, *a) {
                    add_into(s, gd);
                }
                if let Some(s) = self.slot(grads, *r) {
                    for (k, &v) in gd.iter().enumerate() {
                        s[k % c] += v;
                    }
                }
            }
            Op::MulRow(a, r) => {
                let c = out.cols();
                let (va, vr) = (self.value(*a), self.value(*r));
                if let Some(s) = self.slot(grads, *a) {
                    for k in 0..s.len() {
                        s[k] += gd[k] * vr.data()[k % c];
                    }
                }
                if let Some(s) = self.slot(grads, *r) {
                    for (k, &v) in gd.iter().enumerate() {
                        s[k % c] += v * va.data()[k];
                    }
                }
            }
            Op::MulCol(a, col) => {
                let c = out.cols();
                let (va, vc) = (self.value(*a), self.value(*col));
                if let Some(s) = self.slot(grads, *a) {
                    for k in 0..s.len() {
                        s[k] += gd[k] * vc.data()[k / c];
                    }
                }
                if let Some(s) = self.slot(grads, *col) {
                    for (k, &v) in gd.iter().enumerate() {
                        s[k / c] += v * va.data()[k];
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(s) = self.slot(grads, *a) {
                    for (x, &y) in s.iter_mut().zip(gd) {
                        *x += f * y;
                    }
                }
            }
            Op::ScaleBy(a, sc) => {
                let sv = self.value(*sc).item();
                let va = self.value(*a);
                if let Some(s) = self.slot(grads, *a) {
                    for (x, &y) in s.iter_mut().zip(gd) {
                        *x += sv * y;
                    }
                }
                if let Some(s) = self.slot(grads, *sc) {
                    s[0] += dot(gd, va.data());
                }
            }
            Op::AddScalar(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    add_into(s, gd);
                }
            }
            Op::Sigmoid(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    for (k, x) in s.iter_mut().enumerate() {
                        let y = out.data()[k];
                        *x += gd[k] * y * (1.0 - y);
                    }
                }
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                if let Some(s) = self.slot(grads, *a) {
                    for (k, x) in s.iter_mut().enumerate() {
                        *x += gd[k] * gelu_grad(va.data()[k]);
                    }
                }
            }
            Op::NegLogCapped(a, cap) => {
                let va = self.value(*a);
                if let Some(s) = self.slot(grads, *a) {
                    for (k, x) in s.iter_mut().enumerate() {
                        let t = va.data()[k];
                        if -t.ln() < *cap {
                            *x -= gd[k] / t;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    for x in s.iter_mut() {
                        *x += gd[0];
                    }
                }
            }
            Op::SqNorm(a) => {
                let va = self.value(*a);
                if let Some(s) = self.slot(grads, *a) {
                    for (x, &v) in s.iter_mut().zip(va.data()) {
                        *x += 2.0 * gd[0] * v;
                    }
                }
            }
            Op::Softmax(a) => {
                let c = out.cols();
                if let Some(s) = self.slot(grads, *a) {
                    for r in 0..out.rows() {
                        let p = out.row_slice(r);
                        let gr = &gd[r * c..(r + 1) * c];
                        let inner = dot(p, gr);
                        for k in 0..c {
                            s[r * c + k] += p[k] * (gr[k] - inner);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (vx, vg) = (self.value(*x), self.value(*gain));
                let c = vx.cols();
                let nf = c as f64;
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let mut dx = vec![0.0; vx.len()];
                for r in 0..vx.rows() {
                    let row = vx.row_slice(r);
                    let (mean, inv) = row_moments(row, *eps);
                    let gr = &gd[r * c..(r + 1) * c];
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = (0..c).map(|k| gr[k] * vg.data()[k]).collect();
                    let m1 = dxhat.iter().sum::<f64>() / nf;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for k in 0..c {
                        dgain[k] += gr[k] * xhat[k];
                        dbias[k] += gr[k];
                        dx[r * c + k] = inv * (dxhat[k] - m1 - xhat[k] * m2);
                    }
                }
                if let Some(s) = self.slot(grads, *x) {
                    add_into(s, &dx);
                }
                if let Some(s) = self.slot(grads, *gain) {
                    add_into(s, &dgain);
                }
                if let Some(s) = self.slot(grads, *bias) {
                    add_into(s, &dbias);
                }
            }
            Op::ConcatCols(parts) => {
                let c = out.cols();
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if let Some(s) = self.slot(grads, p) {
                        for r in 0..out.rows() {
                            add_into(&mut s[r * pc..(r + 1) * pc], &gd[r * c + off..r * c + off + pc]);
                        }
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(s) = self.slot(grads, p) {
                        add_into(s, &gd[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::SliceCols(a, start) => {
                let ac = self.value(*a).cols();
                let c = out.cols();
                if let Some(s) = self.slot(grads, *a) {
                    for r in 0..out.rows() {
                        add_into(&mut s[r * ac + start..r * ac + start + c], &gd[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let c = out.cols();
                if let Some(s) = self.slot(grads, *a) {
                    add_into(&mut s[start * c..start * c + gd.len()], gd);
                }
            }
            Op::GatherRows(a, idx) => {
                let c = out.cols();
                if let Some(s) = self.slot(grads, *a) {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut s[src * c..(src + 1) * c], &gd[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::Cosine(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let d = va.cols();
                let na: Vec<f64> = (0..va.rows()).map(|i| norm(va.row_slice(i))).collect();
                let nb: Vec<f64> = (0..vb.rows()).map(|j| norm(vb.row_slice(j))).collect();
                let nbr = vb.rows();
                let mut da = vec![0.0; va.len()];
                let mut db = vec![0.0; vb.len()];
                for i in 0..va.rows() {
                    for j in 0..nbr {
                        let gij = gd[i * nbr + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let cij = out.get(i, j);
                        let (ai, bj) = (va.row_slice(i), vb.row_slice(j));
                        let inv = 1.0 / (na[i] * nb[j]);
                        for k in 0..d {
                            da[i * d + k] += gij * (bj[k] * inv - cij * ai[k] / (na[i] * na[i]));
                            db[j * d + k] += gij * (ai[k] * inv - cij * bj[k] / (nb[j] * nb[j]));
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *a) {
                    add_into(s, &da);
                }
                if let Some(s) = self.slot(grads, *b) {
                    add_into(s, &db);
                }
            }
            Op::TaskMask { cos, nlt, alpha, layout } => {
                let n = layout.len;
                let (vc, vn) = (self.value(*cos), self.value(*nlt));
                let a = self.value(*alpha).item();
                let mut dc = vec![0.0; n * n];
                let mut dn = vec![0.0; n];
                let mut da = 0.0;
                for i in 0..n {
                    if !layout.is_icd(i) {
                        continue;
                    }
                    let nl = vn.get(i, 0);
                    for j in 0..=i {
                        let gij = gd[i * n + j];
                        if layout.is_icd(j) {
                            dc[i * n + j] += gij * layout.scale * nl;
                            dn[i] += gij * vc.get(i, j) * layout.scale;
                        } else if !layout.literal_query_branch && j == layout.query_pos {
                            dc[i * n + j] += gij * a * layout.scale * nl;
                            dn[i] += gij * a * vc.get(i, j) * layout.scale;
                            da += gij * vc.get(i, j) * layout.scale * nl;
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *cos) {
                    add_into(s, &dc);
                }
                if let Some(s) = self.slot(grads, *nlt) {
                    add_into(s, &dn);
                }
                if let Some(s) = self.slot(grads, *alpha) {
                    s[0] += da;
                }
            }
            Op::CrossEntropy { logits, targets, excluded } => {
                let vl = self.value(*logits);
                let c = vl.cols();
                let scale = gd[0] / targets.len() as f64;
                if let Some(s) = self.slot(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        let lp = ops::log_softmax_masked(vl.row_slice(r), &excluded[r])?;
                        for k in 0..c {
                            if lp[k].is_finite() {
                                s[r * c + k] += scale * lp[k].exp();
                            }
                        }
                        s[r * c + t] -= scale;
                    }
                }
            }
            Op::KlUniformRows { x, rows } => {
                let vx = self.value(*x);
                let c = vx.cols();
                if let Some(s) = self.slot(grads, *x) {
                    for &r in rows {
                        if let Some((_, p)) = row_kl(vx.row_slice(r)) {
                            let ent: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum();
                            for k in 0..c {
                                if p[k] > 0.0 {
                                    s[r * c + k] += gd[0] * p[k] * (p[k].ln() - ent);
                                }
                            }
                        }
                    }
                }
            }
            Op::SimplexCap(a, theta) => {
                let va = self.value(*a);
                let c = va.cols();
                let u = 1.0 / c as f64;
                let cap = (theta - u).max(0.0);
                if let Some(s) = self.slot(grads, *a) {
                    for r in 0..va.rows() {
                        let f = va.row_slice(r);
                        let gr = &gd[r * c..(r + 1) * c];
                        let v: Vec<f64> = f.iter().map(|x| x - u).collect();
                        let r2: f64 = v.iter().map(|x| x * x).sum();
                        if r2 <= cap {
                            add_into(&mut s[r * c..(r + 1) * c], gr);
                        } else {
                            let rn = r2.sqrt();
                            let k = cap.sqrt() / rn;
                            let vg = dot(&v, gr);
                            for j in 0..c {
                                s[r * c + j] += k * (gr[j] - v[j] * vg / r2);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// KL to uniform over the finite entries of a row, plus the softmax.
fn row_kl(row: &[f64]) -> Option<(f64, Vec<f64>)> {
    let mut p = vec![0.0; row.len()];
    softmax_row(row, &mut p).ok()?;
    let m = row.iter().filter(|v| v.is_finite()).count() as f64;
    let kl = p.iter().filter(|&&v| v > 0.0).map(|&v| v * (v * m).ln()).sum();
    Some((kl, p))
}
