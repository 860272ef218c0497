//! Tape-based reverse-mode differentiation over a fixed set of matrix
//! operators.
//!
//! Every forward computation is recorded as a node on a [`Tape`]. A call to
//! [`Tape::backward`] walks the nodes in reverse and accumulates adjoints into
//! a [`Grads`] table. Values are rank-2 [`Tensor`]s; row vectors broadcast
//! with [`Tape::add_row`] / [`Tape::mul_row`] and column vectors with
//! [`Tape::mul_col`].
//!
//! A tape is confined to one thread. Values read off it are plain tensors and
//! can be sent anywhere.

use super::tensor::Tensor;

/// Additive-mask sentinel that drives a softmax weight to exactly zero once
/// the row maximum has been subtracted.
pub const MASKED: f64 = -1e30;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct AttentionCache {
    cells: Vec<Vec<usize>>,
    heads: usize,
    /// Per cell, `heads × tokens` softmax weights.
    probs: Vec<Vec<f64>>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    ClampMax(Var, f64),
    SoftmaxRows(Var, f64),
    LayerNormRows(Var, Vec<f64>),
    WeightedGather(Var, Vec<Vec<(usize, f64)>>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    RowSums(Var),
    Sum(Var),
    Transpose(Var),
    RowDot(Var, Var),
    RowCosine(Var, Var, Vec<Option<(f64, f64)>>),
    Attention(Var, Var, Var, Box<AttentionCache>),
    SoftmaxXent(Var, Vec<(usize, usize, f64)>, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the differentiated scalar with respect to `v`, if any
    /// path connects them.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
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
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input. Gradients never flow into it, which also makes this
    /// the stop-gradient operator: `tape.constant(tape.value(x).clone())`.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Stop-gradient: same value, no backward path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let g = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let g = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let g = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), g)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let g = self.ng(a) || self.ng(b);
        self.push(value, Op::Div(a, b), g)
    }

    /// `x[n×m] + row[1×m]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        assert_eq!(rv.rows(), 1, "add_row expects a row vector");
        assert_eq!(xv.cols(), rv.cols(), "add_row width");
        let mut value = xv.clone();
        let r = rv.data().to_vec();
        for i in 0..value.rows() {
            for (a, b) in value.row_slice_mut(i).iter_mut().zip(&r) {
                *a += b;
            }
        }
        let g = self.ng(x) || self.ng(row);
        self.push(value, Op::AddRow(x, row), g)
    }

    /// `x[n×m] ⊙ row[1×m]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        assert_eq!(rv.rows(), 1, "mul_row expects a row vector");
        assert_eq!(xv.cols(), rv.cols(), "mul_row width");
        let mut value = xv.clone();
        let r = rv.data().to_vec();
        for i in 0..value.rows() {
            for (a, b) in value.row_slice_mut(i).iter_mut().zip(&r) {
                *a *= b;
            }
        }
        let g = self.ng(x) || self.ng(row);
        self.push(value, Op::MulRow(x, row), g)
    }

    /// `x[n×m] ⊙ col[n×1]`: scales row `i` by `col[i]`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let (xv, cv) = (self.value(x), self.value(col));
        assert_eq!(cv.cols(), 1, "mul_col expects a column vector");
        assert_eq!(xv.rows(), cv.rows(), "mul_col height");
        let mut value = xv.clone();
        for i in 0..value.rows() {
            let s = cv.data()[i];
            value.row_slice_mut(i).iter_mut().for_each(|a| *a *= s);
        }
        let g = self.ng(x) || self.ng(col);
        self.push(value, Op::MulCol(x, col), g)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        let g = self.ng(x);
        self.push(value, Op::Scale(x, s), g)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v + s);
        let g = self.ng(x);
        self.push(value, Op::AddScalar(x), g)
    }

    /// `1 − x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let g = self.ng(x);
        self.push(value, Op::Sigmoid(x), g)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let g = self.ng(x);
        self.push(value, Op::Relu(x), g)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let g = self.ng(x);
        self.push(value, Op::Tanh(x), g)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        let g = self.ng(x);
        self.push(value, Op::Exp(x), g)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::ln);
        let g = self.ng(x);
        self.push(value, Op::Ln(x), g)
    }

    /// `ln(1 + eˣ)`, evaluated stably.
    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).map(softplus);
        let g = self.ng(x);
        self.push(value, Op::Softplus(x), g)
    }

    /// `min(x, cap)`; the gradient is zero where the cap binds.
    pub fn clamp_max(&mut self, x: Var, cap: f64) -> Var {
        let value = self.value(x).map(|v| v.min(cap));
        let g = self.ng(x);
        self.push(value, Op::ClampMax(x, cap), g)
    }

    /// Row-wise `softmax(x / temperature)`. Entries at [`MASKED`] map to
    /// exactly zero as long as the row holds at least one unmasked entry.
    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Var {
        assert!(temperature > 0.0, "softmax temperature must be positive");
        let xv = self.value(x);
        let mut value = xv.clone();
        for i in 0..value.rows() {
            softmax_in_place(value.row_slice_mut(i), temperature);
        }
        let g = self.ng(x);
        self.push(value, Op::SoftmaxRows(x, temperature), g)
    }

    /// Row-wise normalization to zero mean and unit population variance,
    /// with `eps` added to the variance. No affine part.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let mut value = xv.clone();
        let mut inv_std = Vec::with_capacity(value.rows());
        for i in 0..value.rows() {
            let row = value.row_slice_mut(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * s);
            inv_std.push(s);
        }
        let g = self.ng(x);
        self.push(value, Op::LayerNormRows(x, inv_std), g)
    }

    /// `out[i] = Σ_(j, w) w · src[j]` over the weighted lists in `rows`.
    /// An empty list yields a zero row.
    pub fn weighted_gather(&mut self, src: Var, rows: Vec<Vec<(usize, f64)>>) -> Var {
        let sv = self.value(src);
        let d = sv.cols();
        assert!(!rows.is_empty(), "weighted_gather needs at least one output row");
        let mut value = Tensor::zeros(rows.len(), d);
        for (i, list) in rows.iter().enumerate() {
            let out = value.row_slice_mut(i);
            for &(j, w) in list {
                for (o, s) in out.iter_mut().zip(sv.row_slice(j)) {
                    *o += w * s;
                }
            }
        }
        let g = self.ng(src);
        self.push(value, Op::WeightedGather(src, rows), g)
    }

    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Var {
        let rows = idx.iter().map(|&j| vec![(j, 1.0)]).collect();
        self.weighted_gather(src, rows)
    }

    /// Neighbor mean: `out[i] = mean_{j ∈ lists[i]} src[j]`, zero for an
    /// empty list.
    pub fn mean_gather(&mut self, src: Var, lists: &[Vec<usize>]) -> Var {
        let rows = lists
            .iter()
            .map(|l| {
                let w = if l.is_empty() { 0.0 } else { 1.0 / l.len() as f64 };
                l.iter().map(|&j| (j, w)).collect()
            })
            .collect();
        self.weighted_gather(src, rows)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.rows(), n, "concat_cols heights");
                data.extend_from_slice(v.row_slice(i));
            }
        }
        let g = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(n, total, data), Op::ConcatCols(parts.to_vec()), g)
    }

    /// Stacks `parts` vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let d = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), d, "concat_rows widths");
            data.extend_from_slice(v.data());
            n += v.rows();
        }
        let g = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(n, d, data), Op::ConcatRows(parts.to_vec()), g)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        assert!(start < end && end <= xv.cols(), "slice_cols bounds");
        let n = xv.rows();
        let mut data = Vec::with_capacity(n * (end - start));
        for i in 0..n {
            data.extend_from_slice(&xv.row_slice(i)[start..end]);
        }
        let g = self.ng(x);
        self.push(Tensor::from_vec(n, end - start, data), Op::SliceCols(x, start), g)
    }

    /// Per-row sum: `[n×m] → [n×1]`.
    pub fn row_sums(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = (0..xv.rows()).map(|i| xv.row_slice(i).iter().sum()).collect::<Vec<_>>();
        let g = self.ng(x);
        self.push(Tensor::col(&data), Op::RowSums(x), g)
    }

    /// Sum of every entry: `→ [1×1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let g = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let g = self.ng(x);
        self.push(value, Op::Transpose(x), g)
    }

    /// Per-row dot product: `[n×m], [n×m] → [n×1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(av.same_shape(bv), "row_dot shapes");
        let data = (0..av.rows())
            .map(|i| av.row_slice(i).iter().zip(bv.row_slice(i)).map(|(x, y)| x * y).sum())
            .collect::<Vec<f64>>();
        let g = self.ng(a) || self.ng(b);
        self.push(Tensor::col(&data), Op::RowDot(a, b), g)
    }

    /// Per-row cosine similarity `[n×m], [n×m] → [n×1]`. A row pair whose
    /// norm product falls below `eps` gets cosine 0 and no gradient.
    pub fn row_cosine(&mut self, a: Var, b: Var, eps: f64) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(av.same_shape(bv), "row_cosine shapes");
        let mut out = Vec::with_capacity(av.rows());
        let mut norms = Vec::with_capacity(av.rows());
        for i in 0..av.rows() {
            let (ra, rb) = (av.row_slice(i), bv.row_slice(i));
            let na = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na * nb < eps {
                out.push(0.0);
                norms.push(None);
            } else {
                let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                out.push(dot / (na * nb));
                norms.push(Some((na, nb)));
            }
        }
        let g = self.ng(a) || self.ng(b);
        self.push(Tensor::col(&out), Op::RowCosine(a, b, norms), g)
    }

    /// Masked multi-head scaled dot-product attention, batched over cells.
    ///
    /// For cell `c`, the bank is the rows `cells[c]` of `keys` / `values`
    /// with additive logits `masks[c]` (0 or [`MASKED`]). Head `h` attends
    /// with columns `h·dk/heads..` of the query and keys and writes columns
    /// `h·dv/heads..` of the output. A cell with an empty bank yields a zero
    /// row. Callers must reject banks whose every entry is masked.
    pub fn attention(
        &mut self,
        query: Var,
        keys: Var,
        values: Var,
        cells: Vec<Vec<usize>>,
        masks: Vec<Vec<f64>>,
        heads: usize,
    ) -> Var {
        let (qv, kv, vv) = (self.value(query), self.value(keys), self.value(values));
        let dk = qv.cols();
        let dv = vv.cols();
        assert_eq!(kv.cols(), dk, "attention key width");
        assert_eq!(kv.rows(), vv.rows(), "attention key/value rows");
        assert_eq!(qv.rows(), cells.len(), "attention: one token list per query row");
        assert_eq!(cells.len(), masks.len(), "attention: one mask per cell");
        assert!(heads > 0 && dk % heads == 0 && dv % heads == 0, "attention head split");
        let (hk, hv) = (dk / heads, dv / heads);
        let scale = 1.0 / (hk as f64).sqrt();
        let mut out = Tensor::zeros(cells.len(), dv);
        let mut probs = Vec::with_capacity(cells.len());
        for (c, toks) in cells.iter().enumerate() {
            assert_eq!(toks.len(), masks[c].len(), "attention mask length");
            let s = toks.len();
            let mut p = vec![0.0; heads * s];
            if s == 0 {
                probs.push(p);
                continue;
            }
            assert!(
                masks[c].iter().any(|&m| m > MASKED / 2.0),
                "attention over a fully masked bank"
            );
            let q = qv.row_slice(c);
            for h in 0..heads {
                let ph = &mut p[h * s..(h + 1) * s];
                for (t, &tok) in toks.iter().enumerate() {
                    let k = &kv.row_slice(tok)[h * hk..(h + 1) * hk];
                    let dot: f64 = q[h * hk..(h + 1) * hk].iter().zip(k).map(|(a, b)| a * b).sum();
                    ph[t] = dot * scale + masks[c][t];
                }
                softmax_in_place(ph, 1.0);
                let orow = &mut out.row_slice_mut(c)[h * hv..(h + 1) * hv];
                for (t, &tok) in toks.iter().enumerate() {
                    if ph[t] == 0.0 {
                        continue;
                    }
                    let v = &vv.row_slice(tok)[h * hv..(h + 1) * hv];
                    for (o, x) in orow.iter_mut().zip(v) {
                        *o += ph[t] * x;
                    }
                }
            }
            probs.push(p);
        }
        let g = self.ng(query) || self.ng(keys) || self.ng(values);
        let cache = AttentionCache { cells, heads, probs };
        self.push(out, Op::Attention(query, keys, values, Box::new(cache)), g)
    }

    /// Attention weights recorded by an [`Tape::attention`] node, as
    /// `heads × tokens` for `cell`.
    pub fn attention_weights(&self, v: Var, cell: usize) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention(_, _, _, cache) => cache.probs.get(cell).map(Vec::as_slice),
            _ => None,
        }
    }

    /// Weighted softmax cross-entropy `Σ w · −ln softmax(logits[row])[target]`
    /// over `(row, target, weight)` triples, as a `[1×1]` scalar.
    pub fn softmax_xent(&mut self, logits: Var, targets: Vec<(usize, usize, f64)>) -> Var {
        let lv = self.value(logits);
        let c = lv.cols();
        let mut probs = Tensor::zeros(lv.rows(), c);
        let mut loss = 0.0;
        for i in 0..lv.rows() {
            let row = probs.row_slice_mut(i);
            row.copy_from_slice(lv.row_slice(i));
            softmax_in_place(row, 1.0);
        }
        for &(r, t, w) in &targets {
            assert!(t < c, "cross-entropy target {t} out of {c} classes");
            let row = lv.row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += w * (lse - row[t]);
        }
        let g = self.ng(logits);
        self.push(Tensor::scalar(loss), Op::SoftmaxXent(logits, targets, probs), g)
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward expects a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(dout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(dout);
                continue;
            }
            self.backprop_node(node, &dout, &mut grads);
            grads[idx] = Some(dout);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, dout: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    self.acc(grads, *a, dout.matmul_t(bv));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, av.t_matmul(dout));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, dout.clone());
                self.acc(grads, *b, dout.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, dout.clone());
                self.acc(grads, *b, dout.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    self.acc(grads, *a, dout.zip_map(bv, |g, x| g * x));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, dout.zip_map(av, |g, x| g * x));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.ng(*a) {
                    self.acc(grads, *a, dout.zip_map(bv, |g, x| g / x));
                }
                if self.ng(*b) {
                    // d(a/b)/db = −y/b
                    let t = y.zip_map(bv, |yy, x| -yy / x);
                    self.acc(grads, *b, dout.zip_map(&t, |g, x| g * x));
                }
            }
            Op::AddRow(x, row) => {
                self.acc(grads, *x, dout.clone());
                if self.ng(*row) {
                    self.acc(grads, *row, col_sums(dout));
                }
            }
            Op::MulRow(x, row) => {
                let (xv, rv) = (self.value(*x), self.value(*row));
                if self.ng(*x) {
                    let mut g = dout.clone();
                    for i in 0..g.rows() {
                        for (a, b) in g.row_slice_mut(i).iter_mut().zip(rv.data()) {
                            *a *= b;
                        }
                    }
                    self.acc(grads, *x, g);
                }
                if self.ng(*row) {
                    self.acc(grads, *row, col_sums(&dout.zip_map(xv, |g, v| g * v)));
                }
            }
            Op::MulCol(x, col) => {
                let (xv, cv) = (self.value(*x), self.value(*col));
                if self.ng(*x) {
                    let mut g = dout.clone();
                    for i in 0..g.rows() {
                        let s = cv.data()[i];
                        g.row_slice_mut(i).iter_mut().for_each(|a| *a *= s);
                    }
                    self.acc(grads, *x, g);
                }
                if self.ng(*col) {
                    let data: Vec<f64> = (0..xv.rows())
                        .map(|i| dout.row_slice(i).iter().zip(xv.row_slice(i)).map(|(g, v)| g * v).sum())
                        .collect();
                    self.acc(grads, *col, Tensor::col(&data));
                }
            }
            Op::Scale(x, s) => self.acc(grads, *x, dout.map(|g| g * s)),
            Op::AddScalar(x) => self.acc(grads, *x, dout.clone()),
            Op::Sigmoid(x) => self.acc(grads, *x, dout.zip_map(y, |g, s| g * s * (1.0 - s))),
            Op::Relu(x) => {
                let xv = self.value(*x);
                self.acc(grads, *x, dout.zip_map(xv, |g, v| if v > 0.0 { g } else { 0.0 }));
            }
            Op::Tanh(x) => self.acc(grads, *x, dout.zip_map(y, |g, t| g * (1.0 - t * t))),
            Op::Exp(x) => self.acc(grads, *x, dout.zip_map(y, |g, e| g * e)),
            Op::Ln(x) => {
                let xv = self.value(*x);
                self.acc(grads, *x, dout.zip_map(xv, |g, v| g / v));
            }
            Op::Softplus(x) => {
                let xv = self.value(*x);
                self.acc(grads, *x, dout.zip_map(xv, |g, v| g * sigmoid(v)));
            }
            Op::ClampMax(x, cap) => {
                let xv = self.value(*x);
                self.acc(grads, *x, dout.zip_map(xv, |g, v| if v < *cap { g } else { 0.0 }));
            }
            Op::SoftmaxRows(x, t) => {
                let mut g = dout.clone();
                for i in 0..g.rows() {
                    let yr = y.row_slice(i);
                    let dot: f64 = g.row_slice(i).iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (gv, &yv) in g.row_slice_mut(i).iter_mut().zip(yr) {
                        *gv = yv * (*gv - dot) / t;
                    }
                }
                self.acc(grads, *x, g);
            }
            Op::LayerNormRows(x, inv_std) => {
                let d = y.cols() as f64;
                let mut g = dout.clone();
                for i in 0..g.rows() {
                    let yr = y.row_slice(i);
                    let gr = dout.row_slice(i);
                    let mg = gr.iter().sum::<f64>() / d;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d;
                    for (k, gv) in g.row_slice_mut(i).iter_mut().enumerate() {
                        *gv = inv_std[i] * (gr[k] - mg - yr[k] * mgy);
                    }
                }
                self.acc(grads, *x, g);
            }
            Op::WeightedGather(src, rows) => {
                let sv = self.value(*src);
                let mut g = Tensor::zeros(sv.rows(), sv.cols());
                for (i, list) in rows.iter().enumerate() {
                    let dr = dout.row_slice(i);
                    for &(j, w) in list {
                        for (a, b) in g.row_slice_mut(j).iter_mut().zip(dr) {
                            *a += w * b;
                        }
                    }
                }
                self.acc(grads, *src, g);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        let n = dout.rows();
                        let mut data = Vec::with_capacity(n * w);
                        for i in 0..n {
                            data.extend_from_slice(&dout.row_slice(i)[offset..offset + w]);
                        }
                        self.acc(grads, p, Tensor::from_vec(n, w, data));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let d = dout.cols();
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).rows();
                    if self.ng(p) {
                        self.acc(grads, p, Tensor::from_vec(n, d, dout.data()[offset * d..(offset + n) * d].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let mut g = Tensor::zeros(xv.rows(), xv.cols());
                let w = dout.cols();
                for i in 0..g.rows() {
                    g.row_slice_mut(i)[*start..*start + w].copy_from_slice(dout.row_slice(i));
                }
                self.acc(grads, *x, g);
            }
            Op::RowSums(x) => {
                let xv = self.value(*x);
                let mut g = Tensor::zeros(xv.rows(), xv.cols());
                for i in 0..g.rows() {
                    let d = dout.data()[i];
                    g.row_slice_mut(i).iter_mut().for_each(|v| *v = d);
                }
                self.acc(grads, *x, g);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                let mut g = xv.clone();
                g.fill(dout.item());
                self.acc(grads, *x, g);
            }
            Op::Transpose(x) => self.acc(grads, *x, dout.transpose()),
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut g = bv.clone();
                    for i in 0..g.rows() {
                        let d = dout.data()[i];
                        g.row_slice_mut(i).iter_mut().for_each(|v| *v *= d);
                    }
                    self.acc(grads, *a, g);
                }
                if self.ng(*b) {
                    let mut g = av.clone();
                    for i in 0..g.rows() {
                        let d = dout.data()[i];
                        g.row_slice_mut(i).iter_mut().for_each(|v| *v *= d);
                    }
                    self.acc(grads, *b, g);
                }
            }
            Op::RowCosine(a, b, norms) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                for (i, n) in norms.iter().enumerate() {
                    let Some((na, nb)) = *n else { continue };
                    let c = y.data()[i];
                    let d = dout.data()[i];
                    let (ra, rb) = (av.row_slice(i), bv.row_slice(i));
                    for (k, g) in ga.row_slice_mut(i).iter_mut().enumerate() {
                        *g = d * (rb[k] / (na * nb) - c * ra[k] / (na * na));
                    }
                    for (k, g) in gb.row_slice_mut(i).iter_mut().enumerate() {
                        *g = d * (ra[k] / (na * nb) - c * rb[k] / (nb * nb));
                    }
                }
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::Attention(q, k, v, cache) => self.backprop_attention(*q, *k, *v, cache, dout, grads),
            Op::SoftmaxXent(logits, targets, probs) => {
                let mut g = Tensor::zeros(probs.rows(), probs.cols());
                let d = dout.item();
                for &(r, t, w) in targets {
                    let pr = probs.row_slice(r);
                    let gr = g.row_slice_mut(r);
                    for (k, gv) in gr.iter_mut().enumerate() {
                        *gv += d * w * (pr[k] - if k == t { 1.0 } else { 0.0 });
                    }
                }
                self.acc(grads, *logits, g);
            }
        }
    }

    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        cache: &AttentionCache,
        dout: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let heads = cache.heads;
        let (hk, hv) = (qv.cols() / heads, vv.cols() / heads);
        let scale = 1.0 / (hk as f64).sqrt();
        let mut gq = Tensor::zeros(qv.rows(), qv.cols());
        let mut gk = Tensor::zeros(kv.rows(), kv.cols());
        let mut gv = Tensor::zeros(vv.rows(), vv.cols());
        for (c, toks) in cache.cells.iter().enumerate() {
            let s = toks.len();
            if s == 0 {
                continue;
            }
            let p = &cache.probs[c];
            let qrow = qv.row_slice(c);
            for h in 0..heads {
                let ph = &p[h * s..(h + 1) * s];
                let dy = &dout.row_slice(c)[h * hv..(h + 1) * hv];
                let mut dp = vec![0.0; s];
                for (t, &tok) in toks.iter().enumerate() {
                    let vrow = &vv.row_slice(tok)[h * hv..(h + 1) * hv];
                    dp[t] = dy.iter().zip(vrow).map(|(a, b)| a * b).sum();
                    if ph[t] != 0.0 {
                        let gvr = &mut gv.row_slice_mut(tok)[h * hv..(h + 1) * hv];
                        for (g, d) in gvr.iter_mut().zip(dy) {
                            *g += ph[t] * d;
                        }
                    }
                }
                let mix: f64 = ph.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for (t, &tok) in toks.iter().enumerate() {
                    let dl = ph[t] * (dp[t] - mix) * scale;
                    if dl == 0.0 {
                        continue;
                    }
                    let krow = &kv.row_slice(tok)[h * hk..(h + 1) * hk];
                    let gqr = &mut gq.row_slice_mut(c)[h * hk..(h + 1) * hk];
                    for (g, kk) in gqr.iter_mut().zip(krow) {
                        *g += dl * kk;
                    }
                    let gkr = &mut gk.row_slice_mut(tok)[h * hk..(h + 1) * hk];
                    for (g, qq) in gkr.iter_mut().zip(&qrow[h * hk..(h + 1) * hk]) {
                        *g += dl * qq;
                    }
                }
            }
        }
        self.acc(grads, q, gq);
        self.acc(grads, k, gk);
        self.acc(grads, v, gv);
    }
}

fn col_sums(t: &Tensor) -> Tensor {
    let mut out = vec![0.0; t.cols()];
    for i in 0..t.rows() {
        for (o, v) in out.iter_mut().zip(t.row_slice(i)) {
            *o += v;
        }
    }
    Tensor::row(&out)
}

pub(crate) fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max) / temperature;
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v / temperature - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
