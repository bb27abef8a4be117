//! Wengert tape: operations are recorded in execution order during the
//! forward pass and replayed in reverse to accumulate vector-Jacobian
//! products. A tape owns its tensors; independent tapes may run in parallel
//! workers but a single tape is never shared.

use super::{kernels, Tensor};

/// Index of a tensor on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    Relu(TensorId),
    Sigmoid(TensorId),
    Exp(TensorId),
    Log(TensorId),
    RowSoftmax(TensorId),
    GatherRows(TensorId, Vec<usize>),
    MeanPoolRows(TensorId),
    /// Per-column index of the first maximal row, saved for the backward pass.
    MaxPoolRows(TensorId, Vec<usize>),
    Sum(TensorId),
    FrobeniusSq(TensorId),
    Reshape(TensorId),
    ConcatRows(Vec<TensorId>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a leaf. Its `grad_enabled` flag decides whether
    /// it receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        let requires_grad = value.grad_enabled();
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Convenience for non-differentiable inputs (adjacency matrices, masks).
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        let mut v = value;
        v.grad_enabled = false;
        self.push(v, Op::Leaf, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> TensorId {
        assert!(
            !self.backward_done,
            "tape already consumed by backward; build a fresh tape to re-execute"
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn req(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── Forward operations ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, k) = (self.value(a).rows(), self.value(a).cols());
        let (k2, n) = (self.value(b).rows(), self.value(b).cols());
        assert_eq!(
            k, k2,
            "matmul: inner dimensions differ ({m}x{k} vs {k2}x{n})"
        );
        let mut out = vec![0.0; m * n];
        kernels::matmul(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let req = self.req(a) || self.req(b);
        self.push(Tensor::new(vec![m, n], out), Op::Matmul(a, b), req)
    }

    pub fn transpose(&mut self, x: TensorId) -> TensorId {
        let (m, n) = (self.value(x).rows(), self.value(x).cols());
        let mut out = vec![0.0; m * n];
        kernels::transpose(self.value(x).data(), &mut out, m, n);
        let req = self.req(x);
        self.push(Tensor::new(vec![n, m], out), Op::Transpose(x), req)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.elementwise_binary("add", a, b)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.elementwise_binary("sub", a, b)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.elementwise_binary("mul", a, b)
    }

    fn elementwise_binary(&mut self, name: &str, a: TensorId, b: TensorId) -> TensorId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.shape(),
            vb.shape(),
            "{name}: shape mismatch {:?} vs {:?}",
            va.shape(),
            vb.shape()
        );
        let data: Vec<f64> = match name {
            "add" => va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(x, y)| x + y)
                .collect(),
            "sub" => va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(x, y)| x - y)
                .collect(),
            "mul" => va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(x, y)| x * y)
                .collect(),
            _ => unreachable!(),
        };
        let shape = va.shape().to_vec();
        let op = match name {
            "add" => Op::Add(a, b),
            "sub" => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        let req = self.req(a) || self.req(b);
        self.push(Tensor::new(shape, data), op, req)
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * c).collect());
        let req = self.req(x);
        self.push(out, Op::Scale(x, c), req)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|a| a.max(0.0)).collect(),
        );
        let req = self.req(x);
        self.push(out, Op::Relu(x), req)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| kernels::sigmoid(a)).collect(),
        );
        let req = self.req(x);
        self.push(out, Op::Sigmoid(x), req)
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|a| a.exp()).collect(),
        );
        let req = self.req(x);
        self.push(out, Op::Exp(x), req)
    }

    pub fn log(&mut self, x: TensorId) -> TensorId {
        let v = self.value(x);
        assert!(
            v.data().iter().all(|&a| a > 0.0),
            "log: input contains a non-positive value (min {})",
            v.data().iter().fold(f64::INFINITY, |m, &a| m.min(a))
        );
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|a| a.ln()).collect(),
        );
        let req = self.req(x);
        self.push(out, Op::Log(x), req)
    }

    pub fn row_softmax(&mut self, x: TensorId) -> TensorId {
        let v = self.value(x);
        let (m, n) = (v.rows(), v.cols());
        let mut out = vec![0.0; m * n];
        kernels::row_softmax(v.data(), &mut out, m, n);
        let req = self.req(x);
        self.push(Tensor::new(vec![m, n], out), Op::RowSoftmax(x), req)
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(&mut self, x: TensorId, indices: &[usize]) -> TensorId {
        let v = self.value(x);
        let (m, n) = (v.rows(), v.cols());
        assert!(!indices.is_empty(), "gather_rows: empty index list");
        for &i in indices {
            assert!(
                i < m,
                "gather_rows: row index {i} out of bounds for {m}x{n}"
            );
        }
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            out.extend_from_slice(v.row(i));
        }
        let req = self.req(x);
        self.push(
            Tensor::new(vec![indices.len(), n], out),
            Op::GatherRows(x, indices.to_vec()),
            req,
        )
    }

    pub fn mean_pool_rows(&mut self, x: TensorId) -> TensorId {
        let v = self.value(x);
        let (m, n) = (v.rows(), v.cols());
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += v.at(i, j);
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        // Mean of a single row must reproduce that row exactly: x/1 == x.
        let req = self.req(x);
        self.push(Tensor::new(vec![1, n], out), Op::MeanPoolRows(x), req)
    }

    /// Column-wise max over rows. Ties route the gradient to the first
    /// (lowest-index) maximal row.
    pub fn max_pool_rows(&mut self, x: TensorId) -> TensorId {
        let v = self.value(x);
        let (m, n) = (v.rows(), v.cols());
        let mut out = vec![f64::NEG_INFINITY; n];
        let mut argmax = vec![0usize; n];
        for j in 0..n {
            for i in 0..m {
                let val = v.at(i, j);
                if val > out[j] {
                    out[j] = val;
                    argmax[j] = i;
                }
            }
        }
        let req = self.req(x);
        self.push(
            Tensor::new(vec![1, n], out),
            Op::MaxPoolRows(x, argmax),
            req,
        )
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let total: f64 = self.value(x).data().iter().sum();
        let req = self.req(x);
        self.push(Tensor::scalar(total), Op::Sum(x), req)
    }

    pub fn frobenius_sq(&mut self, x: TensorId) -> TensorId {
        let total: f64 = self.value(x).data().iter().map(|a| a * a).sum();
        let req = self.req(x);
        self.push(Tensor::scalar(total), Op::FrobeniusSq(x), req)
    }

    /// Reinterprets the row-major buffer under a new shape of equal size.
    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> TensorId {
        let v = self.value(x);
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            v.numel(),
            "reshape: cannot view {:?} as {:?}",
            v.shape(),
            shape
        );
        let out = Tensor::new(shape, v.data().to_vec());
        let req = self.req(x);
        self.push(out, Op::Reshape(x), req)
    }

    /// Stacks tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_rows: empty input list");
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(
                v.cols(),
                cols,
                "concat_rows: column mismatch {:?} vs {cols}",
                v.shape()
            );
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let req = parts.iter().any(|&p| self.req(p));
        self.push(
            Tensor::new(vec![rows, cols], data),
            Op::ConcatRows(parts.to_vec()),
            req,
        )
    }

    // ── Backward pass ───────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. A tape can be consumed exactly once;
    /// a second call is rejected because the recorded values may no longer
    /// correspond to any live parameter state.
    pub fn backward(&mut self, loss: TensorId) {
        assert!(
            !self.backward_done,
            "backward called twice on the same tape"
        );
        assert!(!self.nodes.is_empty(), "backward on an empty tape");
        assert!(
            self.value(loss).is_scalar(),
            "backward requires a scalar loss, got shape {:?}",
            self.value(loss).shape()
        );
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(grad_out) = self.grads[idx].take() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            self.propagate(idx, &op, &grad_out);
            self.grads[idx] = Some(grad_out);
        }
    }

    fn accumulate(&mut self, id: TensorId, contribution: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            None => self.grads[id.0] = Some(contribution.to_vec()),
        }
    }

    fn propagate(&mut self, out_idx: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if self.req(*a) {
                    // dA = G * B^T
                    let b_val = self.value(*b).data();
                    let mut b_t = vec![0.0; k * n];
                    kernels::transpose(b_val, &mut b_t, k, n);
                    let mut da = vec![0.0; m * k];
                    kernels::matmul(g, &b_t, &mut da, m, n, k);
                    self.accumulate(*a, &da);
                }
                if self.req(*b) {
                    // dB = A^T * G
                    let a_val = self.value(*a).data();
                    let mut a_t = vec![0.0; m * k];
                    kernels::transpose(a_val, &mut a_t, m, k);
                    let mut db = vec![0.0; k * n];
                    kernels::matmul(&a_t, g, &mut db, k, m, n);
                    self.accumulate(*b, &db);
                }
            }
            Op::Transpose(x) => {
                let (n, m) = {
                    let v = &self.nodes[out_idx].value;
                    (v.rows(), v.cols())
                };
                let mut dx = vec![0.0; m * n];
                kernels::transpose(g, &mut dx, n, m);
                self.accumulate(*x, &dx);
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul(a, b) => {
                if self.req(*a) {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    self.accumulate(*a, &db);
                }
                if self.req(*b) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(gv, av)| gv * av)
                        .collect();
                    self.accumulate(*b, &da);
                }
            }
            Op::Scale(x, c) => {
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accumulate(*x, &dx);
            }
            Op::Relu(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Sigmoid(x) => {
                let s = self.nodes[out_idx].value.data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(s)
                    .map(|(gv, &sv)| gv * sv * (1.0 - sv))
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Exp(x) => {
                let e = self.nodes[out_idx].value.data();
                let dx: Vec<f64> = g.iter().zip(e).map(|(gv, &ev)| gv * ev).collect();
                self.accumulate(*x, &dx);
            }
            Op::Log(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, &xv)| gv / xv)
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::RowSoftmax(x) => {
                // dx_ij = y_ij * (g_ij - sum_k g_ik y_ik)
                let y = self.nodes[out_idx].value.clone();
                let (m, n) = (y.rows(), y.cols());
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let dot: f64 = (0..n).map(|j| g[i * n + j] * y.at(i, j)).sum();
                    for j in 0..n {
                        dx[i * n + j] = y.at(i, j) * (g[i * n + j] - dot);
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::GatherRows(x, indices) => {
                let (m, n) = (self.value(*x).rows(), self.value(*x).cols());
                let mut dx = vec![0.0; m * n];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..n {
                        dx[i * n + j] += g[r * n + j];
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::MeanPoolRows(x) => {
                let (m, n) = (self.value(*x).rows(), self.value(*x).cols());
                let inv = 1.0 / m as f64;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = g[j] * inv;
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::MaxPoolRows(x, argmax) => {
                let (m, n) = (self.value(*x).rows(), self.value(*x).cols());
                let mut dx = vec![0.0; m * n];
                for (j, &i) in argmax.iter().enumerate() {
                    dx[i * n + j] += g[j];
                }
                self.accumulate(*x, &dx);
            }
            Op::Sum(x) => {
                let dx = vec![g[0]; self.value(*x).numel()];
                self.accumulate(*x, &dx);
            }
            Op::FrobeniusSq(x) => {
                let dx: Vec<f64> = self
                    .value(*x)
                    .data()
                    .iter()
                    .map(|&xv| 2.0 * g[0] * xv)
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Reshape(x) => {
                self.accumulate(*x, g);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let numel = self.value(p).numel();
                    self.accumulate(p, &g[offset..offset + numel]);
                    offset += numel;
                }
            }
        }
    }

    /// Gradient of the loss with respect to a leaf. Grad-enabled leaves that
    /// did not participate in the loss receive zeros.
    pub fn grad(&self, id: TensorId) -> Tensor {
        assert!(self.backward_done, "grad queried before backward");
        let v = self.value(id);
        match &self.grads[id.0] {
            Some(g) => Tensor::new(v.shape().to_vec(), g.clone()),
            None => Tensor::new(v.shape().to_vec(), vec![0.0; v.numel()]),
        }
    }
}
