use std::sync::Arc;

use super::{dim_err, kernels, Tensor, TensorError};
use crate::exec::Exec;

/// Handle to a node on one [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    MeanRows(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::MeanRows(_) => "mean_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is already topologically sorted.
///
/// A graph is confined to one thread; independent graphs (one per sample in
/// a batch) may run concurrently while sharing parameter tensors through
/// `Arc`.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    exec: Exec,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(dim_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose matmuls use `exec` for their row loop.
    pub fn with_exec(exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.shared_leaf(Arc::new(value), requires_grad)
    }

    /// Leaf that shares storage with the caller (e.g. model parameters).
    pub fn shared_leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; `None` before any backward pass
    /// reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            requires_grad,
            grad: None,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 {
            return Err(dim_err("matmul", "both operands must be rank 2"));
        }
        let (m, k) = ta.dims2()?;
        let (k2, n) = tb.dims2()?;
        if k != k2 {
            return Err(dim_err("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let data = kernels::matmul(self.exec, ta.data(), tb.data(), m, k, n);
        self.push(Tensor::matrix(m, n, data)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(dim_err("transpose", "operand must be rank 2"));
        }
        let out = t.transpose()?;
        self.push(out, Op::Transpose(a), &[a])
    }

    fn zip_with(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// `x [m×n] + b` with `b` of shape `[n]` or `[1×n]` added to every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (m, n) = tx.dims2()?;
        if tb.numel() != n || tb.rows() != 1 {
            return Err(dim_err(
                "add_row",
                format!("bias {:?} for rows of width {n}", tb.shape()),
            ));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(tb.data()) {
                *v += bv;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let _ = m;
        self.push(out, Op::AddRow(x, b), &[x, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect())?;
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(dim_err("mean", "empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        let shape = t.shape();
        if axis >= shape.len() {
            return Err(dim_err(
                "softmax",
                format!("axis {axis} for rank {}", shape.len()),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let out = Tensor::new(shape.to_vec(), out)?;
        self.push(
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        )
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        if eps <= 0.0 {
            return Err(TensorError::Contract("layer_norm eps must be > 0".into()));
        }
        let t = self.value(x);
        let d = *t
            .shape()
            .last()
            .ok_or_else(|| dim_err("layer_norm", "scalar input"))?;
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.numel() != d || tb.numel() != d {
            return Err(dim_err(
                "layer_norm",
                format!("affine params {:?}/{:?} for width {d}", tg.shape(), tb.shape()),
            ));
        }
        let rows = t.numel() / d.max(1);
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * std_normal_cdf(v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::Gelu(x), &[x])
    }

    /// Rows of `x` in `idx` order. Repeated indices are allowed; their
    /// gradients add up on the source row.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(dim_err("gather_rows", "operand must be rank 2"));
        }
        let out = t.gather_rows(idx)?;
        self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err("concat_rows", "no operands"))?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.cols() != c {
                return Err(dim_err(
                    "concat_rows",
                    format!("{:?} in a stack of width {c}", t.shape()),
                ));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows, c, data)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err("concat_cols", "no operands"))?;
        let r = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.rows() != r {
                return Err(dim_err(
                    "concat_cols",
                    format!("{:?} next to {r} rows", t.shape()),
                ));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::matrix(r, total, data)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.rank() != 2 || start + len > t.cols() {
            return Err(dim_err(
                "slice_cols",
                format!("{start}..{} of {:?}", start + len, t.shape()),
            ));
        }
        let (r, c) = t.dims2()?;
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
        }
        let out = Tensor::matrix(r, len, data)?;
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    /// Column means of `x [m×n]` as `[1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (m, n) = t.dims2()?;
        if m == 0 {
            return Err(dim_err("mean_rows", "no rows"));
        }
        let mut data = vec![0.0; n];
        for i in 0..m {
            for (d, v) in data.iter_mut().zip(t.row(i)) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|d| *d /= m as f64);
        let out = Tensor::matrix(1, n, data)?;
        self.push(out, Op::MeanRows(x), &[x])
    }

    /// `-log softmax(logits)[label]` for a single row of logits.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var, TensorError> {
        let t = self.value(logits);
        let (r, c) = t.dims2()?;
        if r != 1 {
            return Err(dim_err("cross_entropy", "expects one row of logits"));
        }
        if label >= c {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: label,
                len: c,
            });
        }
        let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = t.data().iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let loss = total.ln() + max - t.data()[label];
        let probs = exps.iter().map(|e| e / total).collect();
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            &[logits],
        )
    }

    /// Back-propagates from a scalar `loss`. Gradients of leaves that
    /// require grad are added to whatever is already stored, so calling this
    /// twice without [`Graph::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::Contract("loss is not on this graph".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));
        let mut leaf_grads = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let gd = g.data();
            let mut acc = |v: Var, delta: Vec<f64>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(t) => t.data_mut().iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => {
                        *slot = Some(
                            Tensor::new(self.nodes[v.0].value.shape().to_vec(), delta)
                                .expect("gradient shape matches its node"),
                        )
                    }
                }
            };
            let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
            match &node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                Op::MatMul(a, b) => {
                    let (m, k) = val(*a).dims2()?;
                    let n = val(*b).cols();
                    if self.nodes[a.0].requires_grad {
                        acc(*a, kernels::matmul_nt(self.exec, gd, val(*b).data(), m, n, k));
                    }
                    if self.nodes[b.0].requires_grad {
                        acc(*b, kernels::matmul_tn(self.exec, val(*a).data(), gd, m, k, n));
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = val(*a).dims2()?;
                    acc(*a, kernels::transpose(gd, c, r));
                }
                Op::Add(a, b) => {
                    acc(*a, gd.to_vec());
                    acc(*b, gd.to_vec());
                }
                Op::Sub(a, b) => {
                    acc(*a, gd.to_vec());
                    acc(*b, gd.iter().map(|v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(*a).data(), val(*b).data());
                    acc(*a, gd.iter().zip(tb).map(|(g, y)| g * y).collect());
                    acc(*b, gd.iter().zip(ta).map(|(g, x)| g * x).collect());
                }
                Op::AddRow(x, b) => {
                    let n = val(*b).numel();
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    acc(*x, gd.to_vec());
                    acc(*b, db);
                }
                Op::Scale(x, c) => acc(*x, gd.iter().map(|g| g * c).collect()),
                Op::Sum(x) => acc(*x, vec![gd[0]; val(*x).numel()]),
                Op::Mean(x) => {
                    let n = val(*x).numel();
                    acc(*x, vec![gd[0] / n as f64; n]);
                }
                Op::Softmax {
                    x,
                    outer,
                    len,
                    inner,
                } => {
                    let y = node.value.data();
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..*outer {
                        for ii in 0..*inner {
                            let at = |j: usize| (o * len + j) * inner + ii;
                            let dot: f64 = (0..*len).map(|j| gd[at(j)] * y[at(j)]).sum();
                            for j in 0..*len {
                                dx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                            }
                        }
                    }
                    acc(*x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gam = val(*gamma).data();
                    let d = gam.len();
                    let mut dx = vec![0.0; xhat.len()];
                    let mut dg = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for (r, rs) in rstd.iter().enumerate() {
                        let go = &gd[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = go[j] * gam[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                            dg[j] += go[j] * xh[j];
                            dbeta[j] += go[j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let dxh = go[j] * gam[j];
                            dx[r * d + j] = rs * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    acc(*x, dx);
                    acc(*gamma, dg);
                    acc(*beta, dbeta);
                }
                Op::Gelu(x) => {
                    let dx = val(*x)
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&v, g)| g * (std_normal_cdf(v) + v * std_normal_pdf(v)))
                        .collect();
                    acc(*x, dx);
                }
                Op::GatherRows { x, idx } => {
                    let c = val(*x).cols();
                    let mut dx = vec![0.0; val(*x).numel()];
                    for (k, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            dx[src * c + j] += gd[k * c + j];
                        }
                    }
                    acc(*x, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = val(p).numel();
                        acc(p, gd[off..off + n].to_vec());
                        off += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = val(p).dims2()?;
                        let mut dp = Vec::with_capacity(r * c);
                        for i in 0..r {
                            dp.extend_from_slice(&gd[i * total + off..i * total + off + c]);
                        }
                        acc(p, dp);
                        off += c;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (r, c) = val(*x).dims2()?;
                    let len = node.value.cols();
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        dx[i * c + start..i * c + start + len]
                            .copy_from_slice(&gd[i * len..(i + 1) * len]);
                    }
                    acc(*x, dx);
                }
                Op::MeanRows(x) => {
                    let (m, n) = val(*x).dims2()?;
                    let mut dx = Vec::with_capacity(m * n);
                    for _ in 0..m {
                        dx.extend(gd.iter().map(|g| g / m as f64));
                    }
                    acc(*x, dx);
                }
                Op::CrossEntropy {
                    logits,
                    label,
                    probs,
                } => {
                    let mut dl: Vec<f64> = probs.iter().map(|p| p * gd[0]).collect();
                    dl[*label] -= gd[0];
                    acc(*logits, dl);
                }
            }
        }

        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(t) => t
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}
