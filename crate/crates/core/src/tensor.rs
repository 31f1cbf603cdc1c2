//! Dense tensors plus a tape-based reverse-mode autodiff engine.
//!
//! A [`ComputationRecord`] is an append-only log of differentiable
//! operations. Each operation pushes a node holding its output tensor and a
//! back-reference to its inputs; [`ComputationRecord::backward`] sweeps the
//! log once in reverse, accumulating gradients into every node that
//! requires them. A record and the tensors it references form a
//! single-threaded unit of work.

use crate::error::{Result, SclError};
use crate::scalar::Scalar;

/// Dense row-major tensor of rank 1-4.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(SclError::Dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(SclError::NonFinite("tensor construction".into()));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    /// Rank-1 scalar holder (shape `[1]`).
    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks this tensor as a gradient leaf; allocates the grad buffer.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![S::zero(); self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at2(&self, i: usize, j: usize) -> S {
        self.data[i * self.shape[1] + j]
    }

    /// Lossy precision cast (f32 <-> f64) through f64.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| T::from_f64(v.to_f64_lossy()))
                .collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// View of the same data under a new shape with equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor<S>> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(SclError::Dim(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        })
    }

    fn is2d(&self) -> bool {
        self.shape.len() == 2
    }
}

/// Handle to a node inside a [`ComputationRecord`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    AddRowBias { x: NodeId, bias: NodeId },
    Relu { x: NodeId },
    L2NormalizeRows { x: NodeId, eps: S },
    SoftmaxRows { x: NodeId },
    FocalLossMean { logits: NodeId, labels: Vec<usize>, gamma: S },
    ScaleTemp { x: NodeId, log_temp: NodeId, max: S },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Sum { x: NodeId },
    Scale { x: NodeId, c: S },
}

struct Node<S> {
    tensor: Tensor<S>,
    op: Op<S>,
}

/// Ordered log of executed differentiable operations.
pub struct ComputationRecord<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for ComputationRecord<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ComputationRecord<S> {
    pub fn new() -> Self {
        ComputationRecord { nodes: Vec::new() }
    }

    /// Inserts an input tensor. Gradients flow into it iff it was marked
    /// with [`Tensor::with_grad`].
    pub fn leaf(&mut self, tensor: Tensor<S>) -> NodeId {
        self.push(tensor, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].tensor
    }

    /// Gradient of the last `backward` target with respect to this node.
    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.nodes[id.0].tensor.grad()
    }

    fn push(&mut self, tensor: Tensor<S>, op: Op<S>) -> NodeId {
        self.nodes.push(Node { tensor, op });
        NodeId(self.nodes.len() - 1)
    }

    fn push_result(&mut self, shape: Vec<usize>, data: Vec<S>, op: Op<S>, name: &str) -> Result<NodeId> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(SclError::NonFinite(format!("output of {name}")));
        }
        let requires = self.op_inputs(&op).iter().any(|i| self.nodes[i.0].tensor.requires_grad);
        let mut t = Tensor {
            shape,
            data,
            requires_grad: requires,
            grad: None,
        };
        if requires {
            t.grad = Some(vec![S::zero(); t.data.len()]);
        }
        Ok(self.push(t, op))
    }

    fn op_inputs(&self, op: &Op<S>) -> Vec<NodeId> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::AddRowBias { x, bias } => vec![*x, *bias],
            Op::ScaleTemp { x, log_temp, .. } => vec![*x, *log_temp],
            Op::Transpose { x }
            | Op::Relu { x }
            | Op::L2NormalizeRows { x, .. }
            | Op::SoftmaxRows { x }
            | Op::Sum { x }
            | Op::Scale { x, .. } => vec![*x],
            Op::FocalLossMean { logits, .. } => vec![*logits],
        }
    }

    // ---- forward operations -------------------------------------------------

    /// `A[m,k] x B[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is2d() || !tb.is2d() || ta.cols() != tb.rows() {
            return Err(SclError::Dim(format!(
                "matmul {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        self.push_result(vec![m, n], out, Op::MatMul { a, b }, "matmul")
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        if !t.is2d() {
            return Err(SclError::Dim(format!("transpose of rank-{} tensor", t.shape().len())));
        }
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data[i * n + j];
            }
        }
        self.push_result(vec![n, m], out, Op::Transpose { x }, "transpose")
    }

    /// `X[m,n] + b[n]` broadcast per row.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if !tx.is2d() || tb.shape().len() != 1 || tb.shape()[0] != tx.cols() {
            return Err(SclError::Dim(format!(
                "add_row_bias {:?} + {:?}",
                tx.shape(),
                tb.shape()
            )));
        }
        let (m, n) = (tx.rows(), tx.cols());
        let mut out = tx.data.clone();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += tb.data[j];
            }
        }
        self.push_result(vec![m, n], out, Op::AddRowBias { x, bias }, "add_row_bias")
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let out: Vec<S> = t.data.iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect();
        let shape = t.shape.clone();
        self.push_result(shape, out, Op::Relu { x }, "relu")
    }

    /// Each row divided by `sqrt(sum of squares + eps)`.
    pub fn l2_normalize_rows(&mut self, x: NodeId, eps: S) -> Result<NodeId> {
        let t = self.value(x);
        if !t.is2d() {
            return Err(SclError::Dim("l2_normalize_rows expects rank 2".into()));
        }
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &t.data[i * n..(i + 1) * n];
            let norm = (row.iter().map(|&v| v * v).sum::<S>() + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = row[j] / norm;
            }
        }
        self.push_result(vec![m, n], out, Op::L2NormalizeRows { x, eps }, "l2_normalize_rows")
    }

    /// Numerically stable (max-subtracted) row softmax.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        if !t.is2d() {
            return Err(SclError::Dim("softmax_rows expects rank 2".into()));
        }
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &t.data[i * n..(i + 1) * n];
            softmax_row_into(row, &mut out[i * n..(i + 1) * n]);
        }
        self.push_result(vec![m, n], out, Op::SoftmaxRows { x }, "softmax_rows")
    }

    /// Mean over rows of `-(1 - p_y)^gamma * log(p_y)` with `p = softmax(row)`.
    pub fn focal_loss_mean(&mut self, logits: NodeId, labels: &[usize], gamma: S) -> Result<NodeId> {
        let t = self.value(logits);
        if !t.is2d() {
            return Err(SclError::Dim("focal_loss_mean expects rank-2 logits".into()));
        }
        let (m, n) = (t.rows(), t.cols());
        if labels.len() != m || m == 0 {
            return Err(SclError::Contract(format!(
                "focal_loss_mean: {} labels for {} rows",
                labels.len(),
                m
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(SclError::Contract(format!(
                "focal_loss_mean: label {bad} out of range [0, {n})"
            )));
        }
        let mut total = S::zero();
        for i in 0..m {
            let row = &t.data[i * n..(i + 1) * n];
            total += focal_row(row, labels[i], gamma);
        }
        let mean = total / S::from_f64(m as f64);
        self.push_result(
            vec![1],
            vec![mean],
            Op::FocalLossMean {
                logits,
                labels: labels.to_vec(),
                gamma,
            },
            "focal_loss_mean",
        )
    }

    /// `X * t` with `t = min(exp(log_temp), max)`; `log_temp` is a `[1]` node.
    pub fn scale_temp(&mut self, x: NodeId, log_temp: NodeId, max: S) -> Result<NodeId> {
        let tl = self.value(log_temp);
        if tl.numel() != 1 {
            return Err(SclError::Dim("scale_temp: log_temp must be a scalar node".into()));
        }
        let t = tl.data[0].exp().min(max);
        let tx = self.value(x);
        let out: Vec<S> = tx.data.iter().map(|&v| v * t).collect();
        let shape = tx.shape.clone();
        self.push_result(shape, out, Op::ScaleTemp { x, log_temp, max }, "scale_temp")
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(SclError::Dim(format!("add {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let out: Vec<S> = ta.data.iter().zip(&tb.data).map(|(&u, &v)| u + v).collect();
        let shape = ta.shape.clone();
        self.push_result(shape, out, Op::Add { a, b }, "add")
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(SclError::Dim(format!("mul {:?} * {:?}", ta.shape(), tb.shape())));
        }
        let out: Vec<S> = ta.data.iter().zip(&tb.data).map(|(&u, &v)| u * v).collect();
        let shape = ta.shape.clone();
        self.push_result(shape, out, Op::Mul { a, b }, "mul")
    }

    /// Reduces a tensor to the scalar sum of its elements.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let s: S = t.data.iter().copied().sum();
        self.push_result(vec![1], vec![s], Op::Sum { x }, "sum")
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, x: NodeId, c: S) -> Result<NodeId> {
        let t = self.value(x);
        let out: Vec<S> = t.data.iter().map(|&v| v * c).collect();
        let shape = t.shape.clone();
        self.push_result(shape, out, Op::Scale { x, c }, "scale")
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar loss node. After this call every leaf
    /// inserted with `with_grad` holds its gradient; leaves not on the path
    /// to `loss` hold zero.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(SclError::Contract(format!(
                "backward target must be scalar, got shape {:?}",
                self.nodes[loss.0].tensor.shape()
            )));
        }
        // Reset accumulators on every node that participates in gradients.
        for node in &mut self.nodes {
            if node.tensor.requires_grad {
                node.tensor.grad = Some(vec![S::zero(); node.tensor.data.len()]);
            }
        }
        if !self.nodes[loss.0].tensor.requires_grad {
            return Ok(());
        }
        if let Some(g) = self.nodes[loss.0].tensor.grad.as_mut() {
            g[0] = S::one();
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tensor.requires_grad {
                continue;
            }
            let upstream = match self.nodes[i].tensor.grad.clone() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            self.propagate(&op, i, &upstream);
        }
        Ok(())
    }

    fn add_grad(&mut self, id: NodeId, delta: &[S]) {
        let node = &mut self.nodes[id.0];
        if !node.tensor.requires_grad {
            return;
        }
        let g = node.tensor.grad.get_or_insert_with(|| vec![S::zero(); node.tensor.data.len()]);
        for (gi, &d) in g.iter_mut().zip(delta) {
            *gi += d;
        }
    }

    fn propagate(&mut self, op: &Op<S>, out_idx: usize, g: &[S]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = G * B^T
                let mut ga = vec![S::zero(); m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        for p in 0..k {
                            ga[i * k + p] += gij * tb.data[p * n + j];
                        }
                    }
                }
                // dB = A^T * G
                let mut gb = vec![S::zero(); k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = ta.data[i * k + p];
                        for j in 0..n {
                            gb[p * n + j] += aip * g[i * n + j];
                        }
                    }
                }
                self.add_grad(a, &ga);
                self.add_grad(b, &gb);
            }
            Op::Transpose { x } => {
                let t = &self.nodes[out_idx].tensor;
                let (n, m) = (t.rows(), t.cols());
                let mut gx = vec![S::zero(); m * n];
                for i in 0..n {
                    for j in 0..m {
                        gx[j * n + i] = g[i * m + j];
                    }
                }
                self.add_grad(x, &gx);
            }
            Op::AddRowBias { x, bias } => {
                let (m, n) = {
                    let t = &self.nodes[out_idx].tensor;
                    (t.rows(), t.cols())
                };
                self.add_grad(x, g);
                let mut gb = vec![S::zero(); n];
                for i in 0..m {
                    for j in 0..n {
                        gb[j] += g[i * n + j];
                    }
                }
                self.add_grad(bias, &gb);
            }
            Op::Relu { x } => {
                let tx = &self.nodes[x.0].tensor;
                let gx: Vec<S> = tx
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > S::zero() { gi } else { S::zero() })
                    .collect();
                self.add_grad(x, &gx);
            }
            Op::L2NormalizeRows { x, eps } => {
                let tx = &self.nodes[x.0].tensor;
                let (m, n) = (tx.rows(), tx.cols());
                let mut gx = vec![S::zero(); m * n];
                for i in 0..m {
                    let row = &tx.data[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let norm = (row.iter().map(|&v| v * v).sum::<S>() + eps).sqrt();
                    let dot: S = row.iter().zip(gr).map(|(&v, &gi)| v * gi).sum();
                    let n3 = norm * norm * norm;
                    for j in 0..n {
                        gx[i * n + j] = gr[j] / norm - row[j] * dot / n3;
                    }
                }
                self.add_grad(x, &gx);
            }
            Op::SoftmaxRows { x } => {
                let p = &self.nodes[out_idx].tensor;
                let (m, n) = (p.rows(), p.cols());
                let mut gx = vec![S::zero(); m * n];
                for i in 0..m {
                    let pr = &p.data[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: S = pr.iter().zip(gr).map(|(&v, &gi)| v * gi).sum();
                    for j in 0..n {
                        gx[i * n + j] = pr[j] * (gr[j] - dot);
                    }
                }
                self.add_grad(x, &gx);
            }
            Op::FocalLossMean {
                logits,
                ref labels,
                gamma,
            } => {
                let tl = &self.nodes[logits.0].tensor;
                let (m, n) = (tl.rows(), tl.cols());
                let upstream = g[0] / S::from_f64(m as f64);
                let mut gx = vec![S::zero(); m * n];
                let mut p = vec![S::zero(); n];
                for i in 0..m {
                    let row = &tl.data[i * n..(i + 1) * n];
                    softmax_row_into(row, &mut p);
                    let y = labels[i];
                    let u = p[y];
                    let om = S::one() - u;
                    // d/dz_j of -(1-u)^g ln u  =  coef * (delta_jy - p_j)
                    let coef = if gamma == S::zero() {
                        -S::one()
                    } else if om <= S::zero() {
                        S::zero()
                    } else {
                        gamma * u * om.powf(gamma - S::one()) * u.ln() - om.powf(gamma)
                    };
                    for j in 0..n {
                        let delta = if j == y { S::one() } else { S::zero() };
                        gx[i * n + j] = upstream * coef * (delta - p[j]);
                    }
                }
                self.add_grad(logits, &gx);
            }
            Op::ScaleTemp { x, log_temp, max } => {
                let s = self.nodes[log_temp.0].tensor.data[0];
                let raw = s.exp();
                let t = raw.min(max);
                let tx = &self.nodes[x.0].tensor;
                let gx: Vec<S> = g.iter().map(|&gi| gi * t).collect();
                // dt/ds = t while unclamped, 0 once the clamp is active
                let gs = if raw < max {
                    t * tx.data.iter().zip(g).map(|(&v, &gi)| v * gi).sum::<S>()
                } else {
                    S::zero()
                };
                self.add_grad(x, &gx);
                self.add_grad(log_temp, &[gs]);
            }
            Op::Add { a, b } => {
                self.add_grad(a, g);
                self.add_grad(b, g);
            }
            Op::Mul { a, b } => {
                let ga: Vec<S> = self.nodes[b.0].tensor.data.iter().zip(g).map(|(&v, &gi)| v * gi).collect();
                let gb: Vec<S> = self.nodes[a.0].tensor.data.iter().zip(g).map(|(&v, &gi)| v * gi).collect();
                self.add_grad(a, &ga);
                self.add_grad(b, &gb);
            }
            Op::Sum { x } => {
                let n = self.nodes[x.0].tensor.numel();
                let gx = vec![g[0]; n];
                self.add_grad(x, &gx);
            }
            Op::Scale { x, c } => {
                let gx: Vec<S> = g.iter().map(|&gi| gi * c).collect();
                self.add_grad(x, &gx);
            }
        }
    }
}

/// Plain triple-loop matrix product, `A[m,k] x B[k,n]`.
pub fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

/// Max-subtracted softmax of one row, written into `out`.
pub fn softmax_row_into<S: Scalar>(row: &[S], out: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// Focal term of one row: `-(1 - p_y)^gamma * ln p_y`, computed from
/// log-softmax for stability.
pub fn focal_row<S: Scalar>(row: &[S], label: usize, gamma: S) -> S {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
    let logp = row[label] - lse;
    let p = logp.exp();
    let om = S::one() - p;
    if gamma == S::zero() {
        -logp
    } else if om <= S::zero() {
        S::zero()
    } else {
        -om.powf(gamma) * logp
    }
}
