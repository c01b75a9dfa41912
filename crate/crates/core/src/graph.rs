//! Reverse-mode automatic differentiation on a small explicit tape.
//!
//! Nodes are appended in evaluation order, so the tape index order is a
//! topological order and the backward sweep is a single reverse pass. The op
//! set is exactly what the encoder, emulator, and training losses need;
//! numerically delicate reductions (row-wise log-sum-exp, unit
//! normalization) are fused ops with hand-written adjoints.

use crate::error::{CoreError, Result};

/// Dense row-major tensor of `f64` values. A scalar has an empty shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data mismatch"
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected rank-2 tensor");
        (self.shape[0], self.shape[1])
    }

    fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected rank-3 tensor");
        (self.shape[0], self.shape[1], self.shape[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    AddRowBias(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Silu(NodeId),
    Abs(NodeId),
    Conv1dCirc {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        zero_pad: bool,
    },
    GlobalAvgPool(NodeId),
    NormalizeRows(NodeId),
    RowsDot(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    LogSumExpRows(NodeId),
    MeanAll(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One forward pass worth of tape. Build a fresh graph per training step.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant input; no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; gradients accumulate here.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(va.shape(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let out = Tensor::from_vec(va.shape(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(va.shape(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scalar_mul(&mut self, a: NodeId, s: f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data.iter().map(|x| x * s).collect();
        let out = Tensor::from_vec(va.shape(), data);
        let rg = self.rg(a);
        self.push(out, Op::ScalarMul(a, s), rg)
    }

    /// `(B, n) + (n)` broadcast over rows.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let (rows, cols) = vx.dims2();
        assert_eq!(vb.shape(), [cols], "bias shape mismatch");
        let mut data = vx.data.clone();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += vb.data[c];
            }
        }
        let out = Tensor::from_vec(vx.shape(), data);
        let rg = self.rg(x) || self.rg(bias);
        self.push(out, Op::AddRowBias(x, bias), rg)
    }

    /// `(a, m) x (m, n) -> (a, n)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ar, ac) = va.dims2();
        let (br, bc) = vb.dims2();
        assert_eq!(ac, br, "matmul inner dimension mismatch");
        let mut out = vec![0.0; ar * bc];
        for i in 0..ar {
            for kk in 0..ac {
                let aik = va.data[i * ac + kk];
                if aik == 0.0 {
                    continue;
                }
                let brow = &vb.data[kk * bc..(kk + 1) * bc];
                let orow = &mut out[i * bc..(i + 1) * bc];
                for j in 0..bc {
                    orow[j] += aik * brow[j];
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(&[ar, bc], out), Op::MatMul(a, b), rg)
    }

    /// `(a, m) x (n, m)^T -> (a, n)`: pairwise row dot products.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ar, ac) = va.dims2();
        let (br, bc) = vb.dims2();
        assert_eq!(ac, bc, "matmul_nt inner dimension mismatch");
        let mut out = vec![0.0; ar * br];
        for i in 0..ar {
            let arow = &va.data[i * ac..(i + 1) * ac];
            for j in 0..br {
                let brow = &vb.data[j * bc..(j + 1) * bc];
                out[i * br + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(&[ar, br], out), Op::MatMulNT(a, b), rg)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va
            .data
            .iter()
            .map(|&x| {
                let s = 1.0 / (1.0 + (-x).exp());
                x * s
            })
            .collect();
        let out = Tensor::from_vec(va.shape(), data);
        let rg = self.rg(a);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data.iter().map(|x| x.abs()).collect();
        let out = Tensor::from_vec(va.shape(), data);
        let rg = self.rg(a);
        self.push(out, Op::Abs(a), rg)
    }

    /// 1-D convolution over the last axis with odd kernel, centered padding.
    /// `x: (B, Cin, L)`, `w: (Cout, Cin, k)`, `b: (Cout)`; `L` must be a
    /// multiple of `stride`. Padding is circular unless `zero_pad` is set.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        zero_pad: bool,
    ) -> NodeId {
        let (vx, vw, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        let (batch, cin, len) = vx.dims3();
        let (cout, wcin, k) = vw.dims3();
        assert_eq!(cin, wcin, "conv channel mismatch");
        assert_eq!(vb.shape(), [cout], "conv bias mismatch");
        assert!(k % 2 == 1, "conv kernel must be odd");
        assert!(stride >= 1 && len % stride == 0, "conv stride must divide L");
        let lout = len / stride;
        let pad = (k / 2) as isize;

        let mut out = vec![0.0; batch * cout * lout];
        for bb in 0..batch {
            for co in 0..cout {
                let orow = &mut out[(bb * cout + co) * lout..(bb * cout + co + 1) * lout];
                orow.fill(vb.data[co]);
                for ci in 0..cin {
                    let xrow = &vx.data[(bb * cin + ci) * len..(bb * cin + ci + 1) * len];
                    let wrow = &vw.data[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                    for (kk, &wv) in wrow.iter().enumerate() {
                        if wv == 0.0 {
                            continue;
                        }
                        let off = kk as isize - pad;
                        for (lo, o) in orow.iter_mut().enumerate() {
                            let li = lo as isize * stride as isize + off;
                            let xv = sample_pad(xrow, li, len, zero_pad);
                            *o += wv * xv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            Tensor::from_vec(&[batch, cout, lout], out),
            Op::Conv1dCirc {
                x,
                w,
                b,
                stride,
                zero_pad,
            },
            rg,
        )
    }

    /// `(B, C, L) -> (B, C)` mean over the time axis.
    pub fn global_avg_pool(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let (batch, c, len) = va.dims3();
        let mut out = vec![0.0; batch * c];
        for bc in 0..batch * c {
            out[bc] = va.data[bc * len..(bc + 1) * len].iter().sum::<f64>() / len as f64;
        }
        let rg = self.rg(a);
        self.push(Tensor::from_vec(&[batch, c], out), Op::GlobalAvgPool(a), rg)
    }

    /// Scale each row of `(B, p)` to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let (rows, cols) = va.dims2();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &va.data[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm > 0.0, "cannot normalize a zero row");
            for c in 0..cols {
                out[r * cols + c] = row[c] / norm;
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::from_vec(va.shape(), out), Op::NormalizeRows(a), rg)
    }

    /// Row-wise dot product `(B, p), (B, p) -> (B, 1)`.
    pub fn rows_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "rows_dot shape mismatch");
        let (rows, cols) = va.dims2();
        let out = (0..rows)
            .map(|r| {
                va.data[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(&vb.data[r * cols..(r + 1) * cols])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(&[rows, 1], out), Op::RowsDot(a, b), rg)
    }

    /// Columns `[start, start+len)` of a `(B, n)` tensor.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = &self.nodes[a.0].value;
        let (rows, cols) = va.dims2();
        assert!(start + len <= cols, "slice out of range");
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&va.data[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(a);
        self.push(
            Tensor::from_vec(&[rows, len], out),
            Op::SliceCols(a, start, len),
            rg,
        )
    }

    /// Concatenate `(B, n_i)` tensors along the column axis.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.nodes[parts[0].0].value.dims2().0;
        let total: usize = parts
            .iter()
            .map(|p| {
                let (r, c) = self.nodes[p.0].value.dims2();
                assert_eq!(r, rows, "concat row mismatch");
                c
            })
            .sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let v = &self.nodes[p.0].value;
                let c = v.dims2().1;
                out.extend_from_slice(&v.data[r * c..(r + 1) * c]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(
            Tensor::from_vec(&[rows, total], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    /// Row-wise `log(sum(exp(x)))`, max-shifted for stability: `(B, n) -> (B, 1)`.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let (rows, cols) = va.dims2();
        assert!(cols >= 1, "logsumexp over empty rows");
        let out = (0..rows)
            .map(|r| {
                let row = &va.data[r * cols..(r + 1) * cols];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
                m + s.ln()
            })
            .collect();
        let rg = self.rg(a);
        self.push(Tensor::from_vec(&[rows, 1], out), Op::LogSumExpRows(a), rg)
    }

    /// Mean of all entries; returns a scalar node.
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let mean = va.data.iter().sum::<f64>() / va.numel().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(mean), Op::MeanAll(a), rg)
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        assert!(!terms.is_empty(), "weighted sum of nothing");
        let mut acc = self.scalar_mul(terms[0].0, terms[0].1);
        for &(id, w) in &terms[1..] {
            let scaled = self.scalar_mul(id, w);
            acc = self.add(acc, scaled);
        }
        acc
    }

    /// Reverse sweep from a scalar `loss` node. Returns per-node gradients;
    /// a non-finite accumulated gradient aborts with the offending node id.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !g.is_finite() {
                return Err(CoreError::NonFiniteGradient { node: i });
            }
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(*a, grads, |ga| axpy(1.0, &g.data, ga));
                self.add_grad(*b, grads, |gb| axpy(1.0, &g.data, gb));
            }
            Op::Sub(a, b) => {
                self.add_grad(*a, grads, |ga| axpy(1.0, &g.data, ga));
                self.add_grad(*b, grads, |gb| axpy(-1.0, &g.data, gb));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                self.add_grad(*a, grads, |ga| {
                    for ((o, gv), bv) in ga.iter_mut().zip(&g.data).zip(&vb.data) {
                        *o += gv * bv;
                    }
                });
                self.add_grad(*b, grads, |gb| {
                    for ((o, gv), av) in gb.iter_mut().zip(&g.data).zip(&va.data) {
                        *o += gv * av;
                    }
                });
            }
            Op::ScalarMul(a, s) => {
                self.add_grad(*a, grads, |ga| axpy(*s, &g.data, ga));
            }
            Op::AddRowBias(x, bias) => {
                let (rows, cols) = self.nodes[x.0].value.dims2();
                self.add_grad(*x, grads, |gx| axpy(1.0, &g.data, gx));
                self.add_grad(*bias, grads, |gb| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += g.data[r * cols + c];
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (ar, ac) = va.dims2();
                let bc = vb.dims2().1;
                // dA = G B^T
                self.add_grad(*a, grads, |ga| {
                    for i in 0..ar {
                        for j in 0..ac {
                            let mut s = 0.0;
                            let grow = &g.data[i * bc..(i + 1) * bc];
                            let brow = &vb.data[j * bc..(j + 1) * bc];
                            for kk in 0..bc {
                                s += grow[kk] * brow[kk];
                            }
                            ga[i * ac + j] += s;
                        }
                    }
                });
                // dB = A^T G
                self.add_grad(*b, grads, |gb| {
                    for i in 0..ar {
                        let grow = &g.data[i * bc..(i + 1) * bc];
                        for j in 0..ac {
                            let aij = va.data[i * ac + j];
                            if aij == 0.0 {
                                continue;
                            }
                            let gbrow = &mut gb[j * bc..(j + 1) * bc];
                            for kk in 0..bc {
                                gbrow[kk] += aij * grow[kk];
                            }
                        }
                    }
                });
            }
            Op::MatMulNT(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (ar, ac) = va.dims2();
                let br = vb.dims2().0;
                // out[i, j] = <a_i, b_j>
                self.add_grad(*a, grads, |ga| {
                    for i in 0..ar {
                        for j in 0..br {
                            let gij = g.data[i * br + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let brow = &vb.data[j * ac..(j + 1) * ac];
                            let garow = &mut ga[i * ac..(i + 1) * ac];
                            for kk in 0..ac {
                                garow[kk] += gij * brow[kk];
                            }
                        }
                    }
                });
                self.add_grad(*b, grads, |gb| {
                    for i in 0..ar {
                        let arow = &va.data[i * ac..(i + 1) * ac];
                        for j in 0..br {
                            let gij = g.data[i * br + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let gbrow = &mut gb[j * ac..(j + 1) * ac];
                            for kk in 0..ac {
                                gbrow[kk] += gij * arow[kk];
                            }
                        }
                    }
                });
            }
            Op::Silu(a) => {
                let va = &self.nodes[a.0].value;
                self.add_grad(*a, grads, |ga| {
                    for ((o, gv), &x) in ga.iter_mut().zip(&g.data).zip(&va.data) {
                        let s = 1.0 / (1.0 + (-x).exp());
                        *o += gv * s * (1.0 + x * (1.0 - s));
                    }
                });
            }
            Op::Abs(a) => {
                let va = &self.nodes[a.0].value;
                self.add_grad(*a, grads, |ga| {
                    for ((o, gv), &x) in ga.iter_mut().zip(&g.data).zip(&va.data) {
                        *o += gv * sign(x);
                    }
                });
            }
            Op::Conv1dCirc {
                x,
                w,
                b,
                stride,
                zero_pad,
            } => {
                let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let (batch, cin, len) = vx.dims3();
                let (cout, _, k) = vw.dims3();
                let lout = len / stride;
                let pad = (k / 2) as isize;
                self.add_grad(*x, grads, |gx| {
                    for bb in 0..batch {
                        for co in 0..cout {
                            let grow = &g.data[(bb * cout + co) * lout..(bb * cout + co + 1) * lout];
                            for ci in 0..cin {
                                let gxrow = &mut gx[(bb * cin + ci) * len..(bb * cin + ci + 1) * len];
                                let wrow = &vw.data[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                                for (kk, &wv) in wrow.iter().enumerate() {
                                    if wv == 0.0 {
                                        continue;
                                    }
                                    let off = kk as isize - pad;
                                    for (lo, &gv) in grow.iter().enumerate() {
                                        let li = lo as isize * *stride as isize + off;
                                        scatter_pad(gxrow, li, len, *zero_pad, gv * wv);
                                    }
                                }
                            }
                        }
                    }
                });
                self.add_grad(*w, grads, |gw| {
                    for bb in 0..batch {
                        for co in 0..cout {
                            let grow = &g.data[(bb * cout + co) * lout..(bb * cout + co + 1) * lout];
                            for ci in 0..cin {
                                let xrow = &vx.data[(bb * cin + ci) * len..(bb * cin + ci + 1) * len];
                                let gwrow = &mut gw[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                                for (kk, gwv) in gwrow.iter_mut().enumerate() {
                                    let off = kk as isize - pad;
                                    let mut s = 0.0;
                                    for (lo, &gv) in grow.iter().enumerate() {
                                        let li = lo as isize * *stride as isize + off;
                                        s += gv * sample_pad(xrow, li, len, *zero_pad);
                                    }
                                    *gwv += s;
                                }
                            }
                        }
                    }
                });
                self.add_grad(*b, grads, |gb| {
                    for bb in 0..batch {
                        for co in 0..cout {
                            let grow = &g.data[(bb * cout + co) * lout..(bb * cout + co + 1) * lout];
                            gb[co] += grow.iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::GlobalAvgPool(a) => {
                let va = &self.nodes[a.0].value;
                let (_, _, len) = va.dims3();
                let inv = 1.0 / len as f64;
                self.add_grad(*a, grads, |ga| {
                    for (bc, &gv) in g.data.iter().enumerate() {
                        let garow = &mut ga[bc * len..(bc + 1) * len];
                        for o in garow.iter_mut() {
                            *o += gv * inv;
                        }
                    }
                });
            }
            Op::NormalizeRows(a) => {
                let va = &self.nodes[a.0].value;
                let (rows, cols) = va.dims2();
                let vy = &node.value;
                self.add_grad(*a, grads, |ga| {
                    for r in 0..rows {
                        let xrow = &va.data[r * cols..(r + 1) * cols];
                        let yrow = &vy.data[r * cols..(r + 1) * cols];
                        let grow = &g.data[r * cols..(r + 1) * cols];
                        let norm = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let gy: f64 = grow.iter().zip(yrow).map(|(gv, yv)| gv * yv).sum();
                        let garow = &mut ga[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            garow[c] += (grow[c] - yrow[c] * gy) / norm;
                        }
                    }
                });
            }
            Op::RowsDot(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (rows, cols) = va.dims2();
                self.add_grad(*a, grads, |ga| {
                    for r in 0..rows {
                        let gv = g.data[r];
                        let brow = &vb.data[r * cols..(r + 1) * cols];
                        let garow = &mut ga[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            garow[c] += gv * brow[c];
                        }
                    }
                });
                self.add_grad(*b, grads, |gb| {
                    for r in 0..rows {
                        let gv = g.data[r];
                        let arow = &va.data[r * cols..(r + 1) * cols];
                        let gbrow = &mut gb[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            gbrow[c] += gv * arow[c];
                        }
                    }
                });
            }
            Op::SliceCols(a, start, len) => {
                let cols = self.nodes[a.0].value.dims2().1;
                let rows = self.nodes[a.0].value.dims2().0;
                self.add_grad(*a, grads, |ga| {
                    for r in 0..rows {
                        for c in 0..*len {
                            ga[r * cols + start + c] += g.data[r * len + c];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.dims2().0;
                let total = node.value.dims2().1;
                let mut offset = 0;
                for p in parts {
                    let c = self.nodes[p.0].value.dims2().1;
                    let off = offset;
                    self.add_grad(*p, grads, |gp| {
                        for r in 0..rows {
                            for j in 0..c {
                                gp[r * c + j] += g.data[r * total + off + j];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::LogSumExpRows(a) => {
                let va = &self.nodes[a.0].value;
                let (rows, cols) = va.dims2();
                let vy = &node.value;
                self.add_grad(*a, grads, |ga| {
                    for r in 0..rows {
                        let gv = g.data[r];
                        let lse = vy.data[r];
                        let xrow = &va.data[r * cols..(r + 1) * cols];
                        let garow = &mut ga[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            garow[c] += gv * (xrow[c] - lse).exp();
                        }
                    }
                });
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.numel().max(1) as f64;
                let gv = g.data[0] / n;
                self.add_grad(*a, grads, |ga| {
                    for o in ga.iter_mut() {
                        *o += gv;
                    }
                });
            }
        }
    }

    fn add_grad(
        &self,
        target: NodeId,
        grads: &mut [Option<Tensor>],
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let slot = &mut grads[target.0];
        let g = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[target.0].value.shape()));
        f(&mut g.data);
    }
}

#[inline]
fn sample_pad(row: &[f64], idx: isize, len: usize, zero_pad: bool) -> f64 {
    if idx >= 0 && (idx as usize) < len {
        row[idx as usize]
    } else if zero_pad {
        0.0
    } else {
        row[idx.rem_euclid(len as isize) as usize]
    }
}

#[inline]
fn scatter_pad(row: &mut [f64], idx: isize, len: usize, zero_pad: bool, v: f64) {
    if idx >= 0 && (idx as usize) < len {
        row[idx as usize] += v;
    } else if !zero_pad {
        row[idx.rem_euclid(len as isize) as usize] += v;
    }
}

#[inline]
fn axpy(s: f64, src: &[f64], dst: &mut [f64]) {
    for (d, x) in dst.iter_mut().zip(src) {
        *d += s * x;
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-node gradients from a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of a trainable leaf, zeros if it never received one.
    pub fn of_param(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape),
        }
    }
}
