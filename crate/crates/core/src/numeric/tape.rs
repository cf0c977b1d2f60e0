// Reverse-mode tape over rank-2 tensors.
//
// Every op pushes a node holding its forward value plus whatever it needs for
// the vector-Jacobian product. Leaves are either constants or registered
// parameters; gradients flow only through nodes that depend on a parameter.

use std::collections::BTreeMap;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Caller-chosen identifier of a trainable parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Gradients keyed by parameter, one entry per registered parameter.
pub type Gradients = BTreeMap<ParamId, Tensor>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    MaskedSoftmax(Var),
    MeanRows(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<f64>, count: usize },
    CandidateCe { scores: Var, sets: Vec<(usize, Vec<usize>)>, temperature: f64, probs: Vec<Vec<f64>> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
}

impl GradTape {
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
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Registers a trainable parameter. Each id may be registered once.
    pub fn param(&mut self, id: ParamId, t: Tensor) -> Var {
        assert!(!self.params.contains_key(&id), "parameter {id:?} registered twice");
        let v = self.push(t, Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::tensor::matmul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::tensor::matmul_bt(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMulBt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("add", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.len() != ta.cols() {
            return Err(Error::dim("add_row", format!("{:?} + row {:?}", ta.shape(), tr.shape())));
        }
        let mut out = ta.clone();
        let r = tr.data().to_vec();
        for i in 0..out.rows() {
            for (v, b) in out.row_mut(i).iter_mut().zip(&r) {
                *v += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| kernels::gelu(x)).collect())
            .expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows(), tx.cols());
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::dim("layer_norm", format!("width {cols} vs affine {:?}", self.value(gamma).shape())));
        }
        let (out, xhat, rstd) =
            kernels::layer_norm(tx.data(), self.value(gamma).data(), self.value(beta).data(), rows, cols);
        let out = Tensor::matrix(rows, cols, out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.cols() {
            return Err(Error::dim("slice_cols", format!("[{start}, {}) of {} columns", start + len, t.cols())));
        }
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let out = Tensor::matrix(t.rows(), len, data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceCols { x, start }, ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.rows() {
            return Err(Error::dim("slice_rows", format!("[{start}, {}) of {} rows", start + len, t.rows())));
        }
        let c = t.cols();
        let out = Tensor::matrix(len, c, t.data()[start * c..(start + len) * c].to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceRows { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(Error::dim("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(x).gather_rows(idx)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, ng))
    }

    /// Row-wise softmax over visible entries (row-major mask).
    pub fn masked_softmax(&mut self, x: Var, visible: &[bool]) -> Result<Var> {
        let out = super::functions::masked_softmax_rows(self.value(x), visible)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::MaskedSoftmax(x), ng))
    }

    /// Column means, as a `1 × cols` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        let ng = self.ng(x);
        self.push(Tensor::row_vector(out), Op::MeanRows(x), ng)
    }

    /// Mean token cross-entropy over unmasked rows; yields a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let loss = super::functions::cross_entropy(self.value(logits), targets, mask)?;
        let t = self.value(logits);
        let (n, v) = (t.rows(), t.cols());
        let mut probs = vec![0.0; n * v];
        let mut count = 0;
        for r in 0..n {
            if !mask[r] {
                continue;
            }
            count += 1;
            let row = t.row(r);
            let lse = kernels::log_sum_exp(row);
            for c in 0..v {
                probs[r * v + c] = (row[c] - lse).exp();
            }
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs, count },
            ng,
        ))
    }

    /// Temperature-scaled cross-entropy of each correct index against its
    /// candidate set, averaged over sets. `scores` is a `1 × M` row; each set
    /// is `(correct, candidates)` with `correct` among the candidates.
    pub fn candidate_cross_entropy(
        &mut self,
        scores: Var,
        sets: &[(usize, Vec<usize>)],
        temperature: f64,
    ) -> Result<Var> {
        if sets.is_empty() {
            return Err(Error::Invalid("attention loss needs at least one candidate set".into()));
        }
        if !(temperature > 0.0) {
            return Err(Error::Invalid(format!("temperature must be positive, got {temperature}")));
        }
        let s = self.value(scores).data();
        let m = s.len();
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(sets.len());
        for (correct, cand) in sets {
            if cand.is_empty() {
                return Err(Error::Invalid("empty candidate set".into()));
            }
            if let Some(&bad) = cand.iter().find(|&&i| i >= m) {
                return Err(Error::IndexOutOfRange { index: bad, len: m });
            }
            let pos = cand
                .iter()
                .position(|i| i == correct)
                .ok_or_else(|| Error::Invalid(format!("correct index {correct} missing from its candidate set")))?;
            let z: Vec<f64> = cand.iter().map(|&i| s[i] / temperature).collect();
            let lse = kernels::log_sum_exp(&z);
            total += lse - z[pos];
            probs.push(z.iter().map(|v| (v - lse).exp()).collect());
        }
        let loss = total / sets.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("attention loss"));
        }
        let ng = self.ng(scores);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CandidateCe { scores, sets: sets.to_vec(), temperature, probs },
            ng,
        ))
    }

    /// Reverse pass from a scalar node. Returns a gradient for every
    /// registered parameter (zeros where the loss does not depend on it).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::dim("backward", format!("loss must be scalar, got {:?}", lt.shape())));
        }
        if !lt.all_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut out = Gradients::new();
        for (&id, &v) in &self.params {
            let shape = self.value(v).shape().to_vec();
            let g = match grads.get(v.0).and_then(|g| g.clone()) {
                Some(g) => Tensor::new(shape, g)?,
                None => Tensor::zeros(&shape),
            };
            out.insert(id, g);
        }
        Ok(out)
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if want(*a) {
                    let da = acc(grads, *a, m * k);
                    kernels::gemm_bt(g, tb.data(), da, m, n, k);
                }
                if want(*b) {
                    let db = acc(grads, *b, k * n);
                    kernels::gemm_at(ta.data(), g, db, k, m, n);
                }
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if want(*a) {
                    let da = acc(grads, *a, m * k);
                    kernels::gemm(g, tb.data(), da, m, n, k);
                }
                if want(*b) {
                    let db = acc(grads, *b, n * k);
                    kernels::gemm_at(g, ta.data(), db, n, m, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if want(v) {
                        add_into(acc(grads, v, g.len()), g);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if want(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if want(*row) {
                    let cols = self.value(*row).len();
                    let dr = acc(grads, *row, cols);
                    for chunk in g.chunks(cols) {
                        add_into(dr, chunk);
                    }
                }
            }
            Op::Scale(a, s) => {
                if want(*a) {
                    for (d, gv) in acc(grads, *a, g.len()).iter_mut().zip(g) {
                        *d += s * gv;
                    }
                }
            }
            Op::Gelu(a) => {
                if want(*a) {
                    let x = self.value(*a).data();
                    for ((d, gv), &xv) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(x) {
                        *d += gv * kernels::gelu_grad(xv);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let cols = self.value(*gamma).len();
                let rows = g.len() / cols;
                let gam = self.value(*gamma).data();
                if want(*gamma) {
                    let dg = acc(grads, *gamma, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if want(*beta) {
                    let db = acc(grads, *beta, cols);
                    for chunk in g.chunks(cols) {
                        add_into(db, chunk);
                    }
                }
                if want(*x) {
                    let dx = acc(grads, *x, rows * cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            let d = g[r * cols + c] * gam[c];
                            sum_d += d;
                            sum_dx += d * xhat[r * cols + c];
                        }
                        for c in 0..cols {
                            let d = g[r * cols + c] * gam[c];
                            dx[r * cols + c] += rstd[r] / n * (n * d - sum_d - xhat[r * cols + c] * sum_dx);
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if want(*x) {
                    let tx = self.value(*x);
                    let (rows, cols) = (tx.rows(), tx.cols());
                    let len = g.len() / rows.max(1);
                    let dx = acc(grads, *x, rows * cols);
                    for r in 0..rows {
                        add_into(&mut dx[r * cols + start..r * cols + start + len], &g[r * len..(r + 1) * len]);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if want(*x) {
                    let tx = self.value(*x);
                    let cols = tx.cols();
                    let dx = acc(grads, *x, tx.len());
                    add_into(&mut dx[start * cols..start * cols + g.len()], g);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if want(p) {
                        let dp = acc(grads, p, rows * w);
                        for r in 0..rows {
                            add_into(&mut dp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if want(p) {
                        add_into(acc(grads, p, n), &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::GatherRows { x, idx } => {
                if want(*x) {
                    let tx = self.value(*x);
                    let cols = tx.cols();
                    let dx = acc(grads, *x, tx.len());
                    for (j, &i) in idx.iter().enumerate() {
                        add_into(&mut dx[i * cols..(i + 1) * cols], &g[j * cols..(j + 1) * cols]);
                    }
                }
            }
            Op::MaskedSoftmax(x) => {
                if want(*x) {
                    let y = &node.value;
                    let cols = y.cols();
                    let dx = acc(grads, *x, y.len());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let inner = kernels::dot(yr, gr);
                        for c in 0..cols {
                            dx[r * cols + c] += yr[c] * (gr[c] - inner);
                        }
                    }
                }
            }
            Op::MeanRows(x) => {
                if want(*x) {
                    let tx = self.value(*x);
                    let (rows, cols) = (tx.rows(), tx.cols());
                    let dx = acc(grads, *x, rows * cols);
                    let inv = 1.0 / rows as f64;
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] += g[c] * inv;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, mask, probs, count } => {
                if want(*logits) {
                    let t = self.value(*logits);
                    let v = t.cols();
                    let scale = g[0] / *count as f64;
                    let dl = acc(grads, *logits, t.len());
                    for (r, (&tg, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        for c in 0..v {
                            dl[r * v + c] += scale * probs[r * v + c];
                        }
                        dl[r * v + tg] -= scale;
                    }
                }
            }
            Op::CandidateCe { scores, sets, temperature, probs } => {
                if want(*scores) {
                    let m = self.value(*scores).len();
                    let scale = g[0] / (sets.len() as f64 * temperature);
                    let ds = acc(grads, *scores, m);
                    for ((correct, cand), p) in sets.iter().zip(probs) {
                        for (&i, &pi) in cand.iter().zip(p) {
                            ds[i] += scale * pi;
                        }
                        ds[*correct] -= scale;
                    }
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_twice_the_weight() {
        // ‖W‖² as the self inner product of the flattened weight.
        let w = Tensor::matrix(1, 4, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let mut tape = GradTape::new();
        let wv = tape.param(ParamId(0), w.clone());
        let loss = tape.matmul_bt(wv, wv).unwrap();
        let g = tape.backward(loss).unwrap();
        let expected: Vec<f64> = w.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(g[&ParamId(0)].data(), expected.as_slice());
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut tape = GradTape::new();
        let a = tape.param(ParamId(0), Tensor::scalar(2.0));
        let _b = tape.param(ParamId(1), Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let loss = tape.scale(a, 3.0);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g[&ParamId(0)].data(), &[3.0]);
        assert!(g[&ParamId(1)].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = GradTape::new();
        let a = tape.param(ParamId(0), Tensor::zeros(&[2, 2]));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn candidate_loss_requires_correct_in_set() {
        let mut tape = GradTape::new();
        let s = tape.constant(Tensor::row_vector(vec![1.0, 2.0, 3.0]));
        assert!(tape.candidate_cross_entropy(s, &[(0, vec![1, 2])], 1.0).is_err());
        assert!(tape.candidate_cross_entropy(s, &[], 1.0).is_err());
    }
}
