use std::sync::Arc;

use super::kernels::{self, gemm, LayerNormStats};
use super::special::{digamma, sigmoid, sign};
use super::{AttentionMask, Backend, NumericsError, Result, Tensor};
use crate::sampler::RngStream;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fused operation with a hand-written adjoint.
///
/// `backward` returns one entry per input, `None` for inputs that receive no
/// gradient (for example stop-gradient draws).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Softmax(Var),
    LayerNorm {
        gain: Var,
        bias: Var,
        x: Var,
        stats: LayerNormStats,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
    },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Ln(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    LnGamma(Var),
    Sum(Var),
    Mean(Var),
    Dropout(Var, Vec<f64>),
    MaskedScores {
        q: Var,
        k: Var,
        mask: Arc<AttentionMask>,
        scale: f64,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so [`Tape::backward`] can replay adjoints.
///
/// Single-threaded by construction; build one tape per example.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requested them.
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`; zeros for detached leaves or leaves the output
    /// never touched.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.leaves[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
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

    /// Adds a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn var(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn get(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a fused op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(value, Op::Custom(inputs.to_vec(), op), inputs)
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_node = &self.nodes[output.0];
        if !out_node.value.is_scalar() {
            return Err(NumericsError::NonScalarOutput(out_node.value.shape().to_vec()));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if out_node.needs_grad {
            grads[output.0] = Some(vec![1.0]);
        }
        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = node.op {
                leaves[idx] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { leaves, shapes })
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.wants(v) {
            return None;
        }
        let len = self.val(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn acc_map(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], f: impl Fn(usize, f64) -> f64) {
        if let Some(buf) = self.acc(grads, v) {
            for (i, (b, &gi)) in buf.iter_mut().zip(g).enumerate() {
                *b += f(i, gi);
            }
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_map(grads, *a, g, |_, gi| gi);
                self.acc_map(grads, *b, g, |_, gi| gi);
            }
            Op::Sub(a, b) => {
                self.acc_map(grads, *a, g, |_, gi| gi);
                self.acc_map(grads, *b, g, |_, gi| -gi);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                self.acc_map(grads, *a, g, |i, gi| gi * bv[i]);
                self.acc_map(grads, *b, g, |i, gi| gi * av[i]);
            }
            Op::Scale(a, c) => self.acc_map(grads, *a, g, |_, gi| gi * c),
            Op::AddScalar(a) => self.acc_map(grads, *a, g, |_, gi| gi),
            Op::AddRow(a, bias) => {
                self.acc_map(grads, *a, g, |_, gi| gi);
                let cols = node.value.cols();
                if let Some(buf) = self.acc(grads, *bias) {
                    for row in g.chunks(cols) {
                        for (b, gi) in buf.iter_mut().zip(row) {
                            *b += gi;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(buf) = self.acc(grads, *a) {
                    gemm(m, n, k, g, false, bv.data(), true, buf, 1.0);
                }
                if let Some(buf) = self.acc(grads, *b) {
                    gemm(k, m, n, av.data(), true, g, false, buf, 1.0);
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if let Some(buf) = self.acc(grads, *a) {
                    gemm(m, n, k, g, false, bv.data(), false, buf, 1.0);
                }
                if let Some(buf) = self.acc(grads, *b) {
                    gemm(n, m, k, g, true, av.data(), false, buf, 1.0);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.val(*a).rows(), self.val(*a).cols());
                if let Some(buf) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let cols = node.value.cols();
                if let Some(buf) = self.acc(grads, *a) {
                    for ((brow, grow), yrow) in buf.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((b, gi), yi) in brow.iter_mut().zip(grow).zip(yrow) {
                            *b += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { gain, bias, x, stats } => {
                let cols = node.value.cols();
                let gv = self.val(*gain).data();
                if let Some(buf) = self.acc(grads, *gain) {
                    for (grow, nrow) in g.chunks(cols).zip(stats.normalized.chunks(cols)) {
                        for ((b, gi), ni) in buf.iter_mut().zip(grow).zip(nrow) {
                            *b += gi * ni;
                        }
                    }
                }
                if let Some(buf) = self.acc(grads, *bias) {
                    for grow in g.chunks(cols) {
                        for (b, gi) in buf.iter_mut().zip(grow) {
                            *b += gi;
                        }
                    }
                }
                if let Some(buf) = self.acc(grads, *x) {
                    for (r, (grow, nrow)) in g.chunks(cols).zip(stats.normalized.chunks(cols)).enumerate() {
                        let dxhat: Vec<f64> = grow.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dn = dxhat.iter().zip(nrow).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        let rstd = stats.inv_std[r];
                        for c in 0..cols {
                            buf[r * cols + c] += rstd * (dxhat[c] - mean_d - nrow[c] * mean_dn);
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, kernel } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let (t, cin, cout) = (xv.rows(), xv.cols(), wv.cols());
                let kc = kernel * cin;
                if self.wants(*w) {
                    let cols = kernels::im2col(xv.data(), t, cin, *kernel);
                    if let Some(buf) = self.acc(grads, *w) {
                        gemm(kc, t, cout, &cols, true, g, false, buf, 1.0);
                    }
                }
                if self.wants(*x) {
                    let mut dcols = vec![0.0; t * kc];
                    gemm(t, cout, kc, g, false, wv.data(), true, &mut dcols, 0.0);
                    let dx = kernels::col2im(&dcols, t, cin, *kernel);
                    self.acc_map(grads, *x, &dx, |_, v| v);
                }
                if let Some(buf) = self.acc(grads, *b) {
                    for row in g.chunks(cout) {
                        for (bb, gi) in buf.iter_mut().zip(row) {
                            *bb += gi;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => self.acc_map(grads, *a, g, |i, gi| gi * y[i] * (1.0 - y[i])),
            Op::Tanh(a) => self.acc_map(grads, *a, g, |i, gi| gi * (1.0 - y[i] * y[i])),
            Op::Relu(a) => {
                let xv = self.val(*a).data();
                self.acc_map(grads, *a, g, |i, gi| if xv[i] > 0.0 { gi } else { 0.0 })
            }
            Op::Softplus(a) => {
                let xv = self.val(*a).data();
                self.acc_map(grads, *a, g, |i, gi| gi * sigmoid(xv[i]))
            }
            Op::Ln(a) => {
                let xv = self.val(*a).data();
                self.acc_map(grads, *a, g, |i, gi| gi / xv[i].max(f64::MIN_POSITIVE))
            }
            Op::Exp(a) => {
                let xv = self.val(*a).data();
                self.acc_map(grads, *a, g, |i, gi| if xv[i] < 700.0 { gi * y[i] } else { 0.0 })
            }
            Op::Abs(a) => {
                let xv = self.val(*a).data();
                self.acc_map(grads, *a, g, |i, gi| gi * sign(xv[i]))
            }
            Op::Square(a) => {
                let xv = self.val(*a).data();
                self.acc_map(grads, *a, g, |i, gi| 2.0 * gi * xv[i])
            }
            Op::LnGamma(a) => {
                let xv = self.val(*a).data();
                self.acc_map(grads, *a, g, |i, gi| gi * digamma(xv[i]))
            }
            Op::Sum(a) => self.acc_map(grads, *a, &vec![g[0]; self.val(*a).len()], |_, gi| gi),
            Op::Mean(a) => {
                let n = self.val(*a).len() as f64;
                self.acc_map(grads, *a, &vec![g[0] / n; self.val(*a).len()], |_, gi| gi)
            }
            Op::Dropout(a, mult) => self.acc_map(grads, *a, g, |i, gi| gi * mult[i]),
            Op::MaskedScores { q, k, mask, scale } => {
                let (qv, kv) = (self.val(*q), self.val(*k));
                let (m, d, n) = (qv.rows(), qv.cols(), kv.rows());
                let gs: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(idx, gi)| if mask.allowed(idx / n, idx % n) { gi * scale } else { 0.0 })
                    .collect();
                if let Some(buf) = self.acc(grads, *q) {
                    gemm(m, n, d, &gs, false, kv.data(), false, buf, 1.0);
                }
                if let Some(buf) = self.acc(grads, *k) {
                    gemm(n, m, d, &gs, true, qv.data(), false, buf, 1.0);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.val(*p).len();
                    self.acc_map(grads, *p, &g[offset..offset + len], |_, gi| gi);
                    offset += len;
                }
            }
            Op::SliceRows(a, start) => {
                let cols = node.value.cols();
                if let Some(buf) = self.acc(grads, *a) {
                    for (b, gi) in buf[start * cols..].iter_mut().zip(g) {
                        *b += gi;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let pc = self.val(*p).cols();
                    if let Some(buf) = self.acc(grads, *p) {
                        for (r, brow) in buf.chunks_mut(pc).enumerate() {
                            for (c, b) in brow.iter_mut().enumerate() {
                                *b += g[r * total + offset + c];
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::SliceCols(a, start) => {
                let len = node.value.cols();
                let cols = self.val(*a).cols();
                if let Some(buf) = self.acc(grads, *a) {
                    for (r, grow) in g.chunks(len).enumerate() {
                        for (c, gi) in grow.iter().enumerate() {
                            buf[r * cols + start + c] += gi;
                        }
                    }
                }
            }
            Op::Gather(table, ids) => {
                let cols = node.value.cols();
                if let Some(buf) = self.acc(grads, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            buf[id * cols + c] += g[i * cols + c];
                        }
                    }
                }
            }
            Op::Custom(inputs, op) => {
                let grad_out = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.val(*v)).collect();
                let adjoints = op.backward(&grad_out, &values, &node.value);
                debug_assert_eq!(adjoints.len(), inputs.len(), "custom op {}", op.name());
                for (v, adj) in inputs.iter().zip(adjoints) {
                    if let Some(adj) = adj {
                        self.acc_map(grads, *v, adj.data(), |_, gi| gi);
                    }
                }
            }
        }
    }
}

impl Backend for Tape {
    type V = Var;

    fn input(&mut self, t: Tensor) -> Var {
        self.var(t)
    }
    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.get(*v)
    }
    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = kernels::add(self.get(*a), self.get(*b))?;
        Ok(self.push(y, Op::Add(*a, *b), &[*a, *b]))
    }
    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = kernels::sub(self.get(*a), self.get(*b))?;
        Ok(self.push(y, Op::Sub(*a, *b), &[*a, *b]))
    }
    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = kernels::mul(self.get(*a), self.get(*b))?;
        Ok(self.push(y, Op::Mul(*a, *b), &[*a, *b]))
    }
    fn scale(&mut self, a: &Var, c: f64) -> Var {
        let y = kernels::scale(self.get(*a), c);
        self.push(y, Op::Scale(*a, c), &[*a])
    }
    fn add_scalar(&mut self, a: &Var, c: f64) -> Var {
        let y = kernels::add_scalar(self.get(*a), c);
        self.push(y, Op::AddScalar(*a), &[*a])
    }
    fn add_row(&mut self, a: &Var, bias: &Var) -> Result<Var> {
        let y = kernels::add_row(self.get(*a), self.get(*bias))?;
        Ok(self.push(y, Op::AddRow(*a, *bias), &[*a, *bias]))
    }
    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = kernels::matmul(self.get(*a), self.get(*b))?;
        Ok(self.push(y, Op::MatMul(*a, *b), &[*a, *b]))
    }
    fn matmul_nt(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = kernels::matmul_nt(self.get(*a), self.get(*b))?;
        Ok(self.push(y, Op::MatMulNt(*a, *b), &[*a, *b]))
    }
    fn transpose(&mut self, a: &Var) -> Result<Var> {
        let y = kernels::transpose(self.get(*a))?;
        Ok(self.push(y, Op::Transpose(*a), &[*a]))
    }
    fn softmax(&mut self, a: &Var) -> Var {
        let y = kernels::softmax_rows(self.get(*a));
        self.push(y, Op::Softmax(*a), &[*a])
    }
    fn layer_norm(&mut self, x: &Var, gain: &Var, bias: &Var) -> Result<Var> {
        let (y, stats) = kernels::layer_norm(self.get(*x), self.get(*gain), self.get(*bias))?;
        let op = Op::LayerNorm {
            gain: *gain,
            bias: *bias,
            x: *x,
            stats,
        };
        Ok(self.push(y, op, &[*x, *gain, *bias]))
    }
    fn conv1d(&mut self, x: &Var, w: &Var, b: &Var, kernel: usize) -> Result<Var> {
        let y = kernels::conv1d(self.get(*x), self.get(*w), self.get(*b), kernel)?;
        let op = Op::Conv1d {
            x: *x,
            w: *w,
            b: *b,
            kernel,
        };
        Ok(self.push(y, op, &[*x, *w, *b]))
    }
    fn sigmoid(&mut self, a: &Var) -> Var {
        let y = kernels::sigmoid_map(self.get(*a));
        self.push(y, Op::Sigmoid(*a), &[*a])
    }
    fn tanh(&mut self, a: &Var) -> Var {
        let y = kernels::tanh_map(self.get(*a));
        self.push(y, Op::Tanh(*a), &[*a])
    }
    fn relu(&mut self, a: &Var) -> Var {
        let y = kernels::relu(self.get(*a));
        self.push(y, Op::Relu(*a), &[*a])
    }
    fn softplus(&mut self, a: &Var) -> Var {
        let y = kernels::softplus_map(self.get(*a));
        self.push(y, Op::Softplus(*a), &[*a])
    }
    fn ln(&mut self, a: &Var) -> Var {
        let y = kernels::ln(self.get(*a));
        self.push(y, Op::Ln(*a), &[*a])
    }
    fn exp(&mut self, a: &Var) -> Var {
        let y = kernels::exp(self.get(*a));
        self.push(y, Op::Exp(*a), &[*a])
    }
    fn abs(&mut self, a: &Var) -> Var {
        let y = kernels::abs(self.get(*a));
        self.push(y, Op::Abs(*a), &[*a])
    }
    fn square(&mut self, a: &Var) -> Var {
        let y = kernels::square(self.get(*a));
        self.push(y, Op::Square(*a), &[*a])
    }
    fn ln_gamma(&mut self, a: &Var) -> Var {
        let y = kernels::ln_gamma_map(self.get(*a));
        self.push(y, Op::LnGamma(*a), &[*a])
    }
    fn sum(&mut self, a: &Var) -> Var {
        let y = kernels::sum(self.get(*a));
        self.push(y, Op::Sum(*a), &[*a])
    }
    fn mean(&mut self, a: &Var) -> Var {
        let y = kernels::mean(self.get(*a));
        self.push(y, Op::Mean(*a), &[*a])
    }
    fn dropout(&mut self, a: &Var, p: f64, rng: &mut RngStream) -> Result<Var> {
        let (y, mult) = kernels::dropout(self.get(*a), p, rng)?;
        Ok(self.push(y, Op::Dropout(*a, mult), &[*a]))
    }
    fn masked_scores(&mut self, q: &Var, k: &Var, mask: &Arc<AttentionMask>, scale: f64) -> Result<Var> {
        let y = kernels::masked_scores(self.get(*q), self.get(*k), mask, scale)?;
        let op = Op::MaskedScores {
            q: *q,
            k: *k,
            mask: Arc::clone(mask),
            scale,
        };
        Ok(self.push(y, op, &[*q, *k]))
    }
    fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|v| self.get(*v)).collect();
        let y = kernels::concat_rows(&refs)?;
        Ok(self.push(y, Op::ConcatRows(parts.to_vec()), parts))
    }
    fn slice_rows(&mut self, a: &Var, start: usize, len: usize) -> Result<Var> {
        let y = kernels::slice_rows(self.get(*a), start, len)?;
        Ok(self.push(y, Op::SliceRows(*a, start), &[*a]))
    }
    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|v| self.get(*v)).collect();
        let y = kernels::concat_cols(&refs)?;
        Ok(self.push(y, Op::ConcatCols(parts.to_vec()), parts))
    }
    fn slice_cols(&mut self, a: &Var, start: usize, len: usize) -> Result<Var> {
        let y = kernels::slice_cols(self.get(*a), start, len)?;
        Ok(self.push(y, Op::SliceCols(*a, start), &[*a]))
    }
    fn gather_rows(&mut self, table: &Var, ids: &[usize]) -> Result<Var> {
        let y = kernels::gather_rows(self.get(*table), ids)?;
        Ok(self.push(y, Op::Gather(*table, ids.to_vec()), &[*table]))
    }
}
