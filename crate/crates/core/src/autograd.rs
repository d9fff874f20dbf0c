//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation as it is evaluated. Leaves are either
//! constants or parameters; only nodes that (transitively) depend on a
//! parameter take part in the backward sweep. Leaves may borrow their value,
//! so binding a frozen model to a graph costs no copies.

use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'a, F> {
    Owned(Tensor<F>),
    Borrowed(&'a Tensor<F>),
}

impl<F> Value<'_, F> {
    fn get(&self) -> &Tensor<F> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    Relu(Var),
    Log(Var),
    ClampMin(Var, F),
    Softmax(Var),
    SoftTopK {
        x: Var,
        temperature: F,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor<F>,
        rstd: Vec<F>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    Reshape(Var),
    Element {
        x: Var,
        row: usize,
        col: usize,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor<F>,
    },
}

struct Node<'a, F> {
    value: Value<'a, F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Recorded computation.
pub struct Graph<'a, F> {
    nodes: Vec<Node<'a, F>>,
}

impl<F: Scalar> Default for Graph<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

impl<'a, F: Scalar> Graph<'a, F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value<'a, F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Value::Owned(value), op, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(Value::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor<F>) -> Var {
        self.push(Value::Borrowed(value), Op::Leaf, false)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push(Value::Owned(value), Op::Leaf, true)
    }

    pub fn param_ref(&mut self, value: &'a Tensor<F>) -> Var {
        self.push(Value::Borrowed(value), Op::Leaf, true)
    }

    /// Leaf bound by reference, trainable or not.
    pub fn leaf_ref(&mut self, value: &'a Tensor<F>, trainable: bool) -> Var {
        self.push(Value::Borrowed(value), Op::Leaf, trainable)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        self.nodes[v.0].value.get()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar_value(&self, v: Var) -> F {
        let t = self.value(v);
        assert_eq!(t.shape(), (1, 1), "not a scalar node");
        t.get(0, 0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push_op(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push_op(out, Op::MatMulT(a, b), &[a, b])
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push_op(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push_op(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push_op(out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(tr.shape(), (1, ta.cols()), "add_row expects a 1 x cols bias");
        let mut out = ta.clone();
        for r in 0..out.rows() {
            for (x, &b) in out.row_mut(r).iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        self.push_op(out, Op::AddRow(a, row), &[a, row])
    }

    /// Multiplies `a` by the `1 × 1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let factor = self.scalar_value(s);
        let out = self.value(a).map(|x| x * factor);
        self.push_op(out, Op::MulScalar(a, s), &[a, s])
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push_op(out, Op::Scale(a, factor), &[a])
    }

    /// GPT-2 style GELU (tanh approximation).
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = F::of(GELU_C);
        let k = F::of(0.044_715);
        let half = F::of(0.5);
        let out = self
            .value(a)
            .map(|x| half * x * (F::one() + (c * (x + k * x * x * x)).tanh()));
        self.push_op(out, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(F::zero()));
        self.push_op(out, Op::Relu(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.ln());
        self.push_op(out, Op::Log(a), &[a])
    }

    /// `max(a, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: F) -> Var {
        let out = self.value(a).map(|x| x.max(floor));
        self.push_op(out, Op::ClampMin(a, floor), &[a])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(t.rows(), t.cols());
        for r in 0..t.rows() {
            let p = crate::tensor::softmax(t.row(r));
            out.row_mut(r).copy_from_slice(&p);
        }
        self.push_op(out, Op::Softmax(a), &[a])
    }

    /// Row-wise softmax where row `i` only sees columns `j <= i + offset`.
    ///
    /// Masked entries come out as exact zeros, so the backward pass is the
    /// plain softmax backward.
    pub fn causal_softmax(&mut self, a: Var, offset: usize) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(t.rows(), t.cols());
        for r in 0..t.rows() {
            let visible = (r + offset + 1).min(t.cols());
            let p = crate::tensor::softmax(&t.row(r)[..visible]);
            out.row_mut(r)[..visible].copy_from_slice(&p);
        }
        self.push_op(out, Op::Softmax(a), &[a])
    }

    /// Row-wise layer normalization with `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let tx = self.value(x);
        let (tg, tb) = (self.value(gain), self.value(bias));
        let n = tx.cols();
        assert_eq!(tg.shape(), (1, n), "layer_norm gain shape");
        assert_eq!(tb.shape(), (1, n), "layer_norm bias shape");
        let nf = F::of(n as f64);
        let eps = F::of(LN_EPS);
        let mut xhat = Tensor::zeros(tx.rows(), n);
        let mut out = Tensor::zeros(tx.rows(), n);
        let mut rstd = Vec::with_capacity(tx.rows());
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let rs = F::one() / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat.set(r, c, h);
                out.set(r, c, h * tg.data()[c] + tb.data()[c]);
            }
        }
        self.push_op(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Tensor::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push_op(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_cols(start, len);
        self.push_op(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_rows(start, len);
        self.push_op(out, Op::SliceRows { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows(), rows, "concat_cols row mismatch");
                out.row_mut(r)[offset..offset + t.cols()].copy_from_slice(t.row(r));
                offset += t.cols();
            }
        }
        self.push_op(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        self.push_op(
            Tensor::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push_op(out, Op::Transpose(x), &[x])
    }

    /// [`soft_top_k`](crate::tensor::soft_top_k) over all entries of `x`.
    pub fn soft_top_k(&mut self, x: Var, k: usize, temperature: f64) -> Var {
        let t = self.value(x);
        let w = crate::tensor::soft_top_k(t.data(), k, temperature);
        let out = Tensor::from_vec(t.rows(), t.cols(), w);
        let temperature = F::of(temperature);
        self.push_op(out, Op::SoftTopK { x, temperature }, &[x])
    }

    /// Same data, read as `rows × cols`.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.len(), rows * cols, "reshape changes the element count");
        let out = Tensor::from_vec(rows, cols, t.data().to_vec());
        self.push_op(out, Op::Reshape(x), &[x])
    }

    /// The `1 × 1` node holding `x[row, col]`.
    pub fn element(&mut self, x: Var, row: usize, col: usize) -> Var {
        let out = Tensor::scalar(self.value(x).get(row, col));
        self.push_op(out, Op::Element { x, row, col }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push_op(out, Op::Sum(x), &[x])
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let t = self.value(logits);
        assert_eq!(t.rows(), targets.len(), "one target per logit row");
        let mut probs = Tensor::zeros(t.rows(), t.cols());
        let mut total = F::zero();
        for (r, &target) in targets.iter().enumerate() {
            let row = t.row(r);
            let lse = crate::tensor::log_sum_exp(row);
            total += lse - row[target];
            for (c, &x) in row.iter().enumerate() {
                probs.set(r, c, (x - lse).exp());
            }
        }
        let loss = total / F::of(targets.len() as f64);
        self.push_op(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be a scalar");
        let mut grads: Vec<Option<Tensor<F>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::scalar(F::one()));
        }
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !matches!(node.op, Op::Leaf) {
                self.propagate(idx, &upstream, &mut grads);
            }
            grads[idx] = Some(upstream);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, up: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.wants(a) {
                    let g = up.matmul_t(self.value(b));
                    self.accumulate(grads, a, g);
                }
                if self.wants(b) {
                    let g = self.value(a).t_matmul(up);
                    self.accumulate(grads, b, g);
                }
            }
            &Op::MatMulT(a, b) => {
                // out = a · bᵀ
                if self.wants(a) {
                    let g = up.matmul(self.value(b));
                    self.accumulate(grads, a, g);
                }
                if self.wants(b) {
                    let g = up.t_matmul(self.value(a));
                    self.accumulate(grads, b, g);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, up.clone());
                self.accumulate(grads, b, up.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, up.clone());
                if self.wants(b) {
                    self.accumulate(grads, b, up.map(|x| -x));
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let g = elementwise(up, self.value(b), |u, y| u * y);
                    self.accumulate(grads, a, g);
                }
                if self.wants(b) {
                    let g = elementwise(up, self.value(a), |u, x| u * x);
                    self.accumulate(grads, b, g);
                }
            }
            &Op::AddRow(a, row) => {
                self.accumulate(grads, a, up.clone());
                if self.wants(row) {
                    let mut g = Tensor::zeros(1, up.cols());
                    for r in 0..up.rows() {
                        for (acc, &u) in g.data_mut().iter_mut().zip(up.row(r)) {
                            *acc += u;
                        }
                    }
                    self.accumulate(grads, row, g);
                }
            }
            &Op::MulScalar(a, s) => {
                let factor = self.scalar_value(s);
                if self.wants(a) {
                    self.accumulate(grads, a, up.map(|u| u * factor));
                }
                if self.wants(s) {
                    let dot = up
                        .data()
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(&u, &x)| u * x)
                        .sum();
                    self.accumulate(grads, s, Tensor::scalar(dot));
                }
            }
            &Op::Scale(a, factor) => {
                self.accumulate(grads, a, up.map(|u| u * factor));
            }
            &Op::Gelu(a) => {
                let c = F::of(GELU_C);
                let k = F::of(0.044_715);
                let half = F::of(0.5);
                let three = F::of(3.0);
                let g = elementwise(up, self.value(a), |u, x| {
                    let t = (c * (x + k * x * x * x)).tanh();
                    let dt = (F::one() - t * t) * c * (F::one() + three * k * x * x);
                    u * (half * (F::one() + t) + half * x * dt)
                });
                self.accumulate(grads, a, g);
            }
            &Op::Relu(a) => {
                let g = elementwise(up, self.value(a), |u, x| {
                    if x > F::zero() {
                        u
                    } else {
                        F::zero()
                    }
                });
                self.accumulate(grads, a, g);
            }
            &Op::Log(a) => {
                let g = elementwise(up, self.value(a), |u, x| u / x);
                self.accumulate(grads, a, g);
            }
            &Op::ClampMin(a, floor) => {
                let g = elementwise(up, self.value(a), |u, x| {
                    if x >= floor {
                        u
                    } else {
                        F::zero()
                    }
                });
                self.accumulate(grads, a, g);
            }
            &Op::Softmax(a) => {
                let p = node.value.get();
                let mut g = Tensor::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    let (pr, ur) = (p.row(r), up.row(r));
                    let dot: F = pr.iter().zip(ur).map(|(&pi, &ui)| pi * ui).sum();
                    for (c, out) in g.row_mut(r).iter_mut().enumerate() {
                        *out = pr[c] * (ur[c] - dot);
                    }
                }
                self.accumulate(grads, a, g);
            }
            &Op::SoftTopK { x, temperature } => {
                // The threshold moves with x so that the weights keep summing to k.
                let w = node.value.get();
                let slope: Vec<F> = w.data().iter().map(|&v| v * (F::one() - v)).collect();
                let total: F = slope.iter().copied().sum();
                let dot: F = slope.iter().zip(up.data()).map(|(&s, &u)| s * u).sum();
                let shift = if total > F::zero() { dot / total } else { F::zero() };
                let data = slope
                    .iter()
                    .zip(up.data())
                    .map(|(&s, &u)| s * (u - shift) / temperature)
                    .collect();
                self.accumulate(grads, x, Tensor::from_vec(w.rows(), w.cols(), data));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let tg = self.value(*gain);
                let n = xhat.cols();
                let nf = F::of(n as f64);
                if self.wants(*x) {
                    let mut gx = Tensor::zeros(xhat.rows(), n);
                    for r in 0..xhat.rows() {
                        let (ur, hr) = (up.row(r), xhat.row(r));
                        let mut mean_d = F::zero();
                        let mut mean_dh = F::zero();
                        for c in 0..n {
                            let d = ur[c] * tg.data()[c];
                            mean_d += d;
                            mean_dh += d * hr[c];
                        }
                        mean_d = mean_d / nf;
                        mean_dh = mean_dh / nf;
                        for c in 0..n {
                            let d = ur[c] * tg.data()[c];
                            gx.set(r, c, rstd[r] * (d - mean_d - hr[c] * mean_dh));
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.wants(*gain) {
                    let mut gg = Tensor::zeros(1, n);
                    for r in 0..xhat.rows() {
                        for c in 0..n {
                            gg.data_mut()[c] += up.get(r, c) * xhat.get(r, c);
                        }
                    }
                    self.accumulate(grads, *gain, gg);
                }
                if self.wants(*bias) {
                    let mut gb = Tensor::zeros(1, n);
                    for r in 0..xhat.rows() {
                        for (acc, &u) in gb.data_mut().iter_mut().zip(up.row(r)) {
                            *acc += u;
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::Gather { table, ids } => {
                if self.wants(*table) {
                    let t = self.value(*table);
                    let mut g = Tensor::zeros(t.rows(), t.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (acc, &u) in g.row_mut(id).iter_mut().zip(up.row(r)) {
                            *acc += u;
                        }
                    }
                    self.accumulate(grads, *table, g);
                }
            }
            &Op::SliceCols { x, start } => {
                let t = self.value(x);
                let mut g = Tensor::zeros(t.rows(), t.cols());
                for r in 0..up.rows() {
                    g.row_mut(r)[start..start + up.cols()].copy_from_slice(up.row(r));
                }
                self.accumulate(grads, x, g);
            }
            &Op::SliceRows { x, start } => {
                let t = self.value(x);
                let mut g = Tensor::zeros(t.rows(), t.cols());
                let w = t.cols();
                g.data_mut()[start * w..(start + up.rows()) * w].copy_from_slice(up.data());
                self.accumulate(grads, x, g);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        self.accumulate(grads, p, up.slice_cols(offset, w));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.wants(p) {
                        self.accumulate(grads, p, up.slice_rows(offset, h));
                    }
                    offset += h;
                }
            }
            &Op::Transpose(x) => {
                self.accumulate(grads, x, up.transpose());
            }
            &Op::Reshape(x) => {
                let (r, c) = self.value(x).shape();
                self.accumulate(grads, x, Tensor::from_vec(r, c, up.data().to_vec()));
            }
            &Op::Element { x, row, col } => {
                let t = self.value(x);
                let mut g = Tensor::zeros(t.rows(), t.cols());
                g.set(row, col, up.get(0, 0));
                self.accumulate(grads, x, g);
            }
            &Op::Sum(x) => {
                let t = self.value(x);
                self.accumulate(grads, x, Tensor::full(t.rows(), t.cols(), up.get(0, 0)));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = up.get(0, 0) / F::of(targets.len() as f64);
                let mut g = probs.clone();
                for (r, &target) in targets.iter().enumerate() {
                    let v = g.get(r, target);
                    g.set(r, target, v - F::one());
                }
                g.scale_assign(scale);
                self.accumulate(grads, *logits, g);
            }
        }
    }
}

fn elementwise<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` was unreachable.
    pub fn take_or_zeros(&mut self, v: Var, like: &Tensor<F>) -> Tensor<F> {
        self.take(v)
            .unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_loss_has_unit_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.5));
        let grads = g.backward(x);
        assert_eq!(grads.get(x).unwrap().get(0, 0), 1.0);
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_the_input() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::row_vector(vec![1.0, 2.0]));
        let sq = g.mul(x, x);
        let loss = g.sum(sq);
        let grads = g.backward(loss);
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::row_vector(vec![1.0, 2.0]));
        let x = g.param(Tensor::row_vector(vec![0.5, -1.0]));
        let prod = g.mul(c, x);
        let loss = g.sum(prod);
        let grads = g.backward(loss);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn causal_softmax_zeroes_future_columns() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]));
        let p = g.causal_softmax(x, 0);
        let t = g.value(p);
        assert_eq!(t.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(t.get(1, 2), 0.0);
        assert!((t.get(1, 0) + t.get(1, 1) - 1.0).abs() < 1e-15);
    }

    /// Central differences over every primitive through a scalar loss.
    #[test]
    fn primitives_match_finite_differences() {
        let base = vec![
            Tensor::<f64>::from_rows(&[vec![0.3, -0.2, 0.5], vec![0.1, 0.7, -0.4]]),
            Tensor::from_rows(&[vec![0.2, -0.1], vec![0.4, 0.3], vec![-0.5, 0.6]]),
            Tensor::row_vector(vec![1.1, 0.9, 1.2]),
            Tensor::row_vector(vec![0.05, -0.02, 0.01]),
        ];
        let build = |g: &mut Graph<'_, f64>, p: &[Var]| -> Var {
            let ln = g.layer_norm(p[0], p[2], p[3]);
            let h = g.matmul(ln, p[1]);
            let a = g.gelu(h);
            let t = g.transpose(a);
            let s = g.softmax(t);
            let mm = g.matmul_t(s, s);
            let e = g.element(mm, 0, 1);
            let r = g.relu(h);
            let sc = g.mul_scalar(r, e);
            let cc = g.concat_cols(&[sc, h]);
            let sl = g.slice_cols(cc, 1, 2);
            let logits = g.concat_rows(&[sl, a]);
            let cs = g.causal_softmax(logits, 0);
            let lg = g.clamp_min(cs, 1e-6);
            let lg = g.log(lg);
            let tot = g.sum(lg);
            let tot = g.scale(tot, 0.1);
            let ce = g.cross_entropy(logits, &[1, 0, 1, 1]);
            let gath = g.gather(p[1], &[2, 0, 2]);
            let rs = g.reshape(gath, 1, 6);
            let rs = g.softmax(rs);
            let rs = g.element(rs, 0, 4);
            let tk = g.soft_top_k(h, 2, 0.7);
            let tk = g.element(tk, 1, 0);
            let rs = g.add(rs, tk);
            let gs = g.sum(gath);
            let gs = g.add(gs, rs);
            let x1 = g.add(ce, tot);
            g.sub(x1, gs)
        };
        let eval = |ts: &[Tensor<f64>]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
            let loss = build(&mut g, &vars);
            g.scalar_value(loss)
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = base.iter().map(|t| g.param_ref(t)).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let h = 1e-6;
        for (i, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).unwrap();
            for j in 0..base[i].len() {
                let mut plus = base.clone();
                plus[i].data_mut()[j] += h;
                let mut minus = base.clone();
                minus[i].data_mut()[j] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[j];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "tensor {i} entry {j}: analytic {a} numeric {numeric}"
                );
            }
        }
    }
}
