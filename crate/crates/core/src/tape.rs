//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! One tape lives for one forward/backward cycle. Operations append
//! nodes in topological (recording) order; `backward` replays them in
//! reverse exactly once and accumulates gradients into every node that
//! requires them. Tensors on the tape are immutable; gradient slots are
//! the only mutable state and are written only during `backward`.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::lif::Surrogate;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Value(usize);

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Conv2d { input: usize, kernel: usize, geom: ConvGeom },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    /// out = mul * a + add, elementwise with scalar coefficients
    Affine { a: usize, mul: f64 },
    Relu { a: usize },
    Detach { a: usize },
    GlobalAvgPool { a: usize },
    MeanAxis { a: usize, axis: usize },
    Sum { a: usize },
    Softmax { a: usize },
    LogSoftmax { a: usize },
    NllLoss { logp: usize, labels: Vec<usize> },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Spike { u: usize, v_th: f64, sg: Surrogate },
    ScaleCols { m: usize, s: usize },
    AddRowBias { m: usize, b: usize },
    AssembleKernel { entries: Vec<usize>, k: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Affine { .. } => "affine",
            Op::Relu { .. } => "relu",
            Op::Detach { .. } => "detach",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Sum { .. } => "sum",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::NllLoss { .. } => "nll_loss",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Spike { .. } => "spike",
            Op::ScaleCols { .. } => "scale_cols",
            Op::AddRowBias { .. } => "add_row_bias",
            Op::AssembleKernel { .. } => "assemble_kernel",
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf (parameter or input that wants gradients).
    pub fn leaf(&mut self, t: Tensor) -> Value {
        self.push(t, true, Op::Leaf)
    }

    /// A non-differentiable leaf (data, labels, fixed state).
    pub fn constant(&mut self, t: Tensor) -> Value {
        self.push(t, false, Op::Leaf)
    }

    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of a node after `backward`; `None` if the node does not
    /// participate in differentiation.
    pub fn grad(&self, v: Value) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// First node holding a non-finite value, with its op name.
    pub fn first_nonfinite(&self) -> Option<(Value, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (Value(i), n.op.name()))
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Value {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Value(self.nodes.len() - 1)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    // ── Operations ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul expects [m,k]x[k,n], got {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(
            Tensor::new(vec![m, n], data)?,
            ng,
            Op::Matmul { a: a.0, b: b.0 },
        ))
    }

    pub fn conv2d(
        &mut self,
        input: Value,
        kernel: Value,
        stride: usize,
        pad: usize,
    ) -> Result<Value> {
        let si = self.value(input).shape().to_vec();
        let sk = self.value(kernel).shape().to_vec();
        if si.len() != 4 || sk.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d expects rank-4 input and kernel, got {si:?} and {sk:?}"
            )));
        }
        if sk[2] != sk[3] {
            return Err(Error::Dimension(format!("non-square kernel {sk:?}")));
        }
        let k = sk[2];
        if !matches!(k, 1 | 3) || !matches!(stride, 1 | 2) || pad > 1 {
            return Err(Error::Config(format!(
                "unsupported conv2d config: k={k} stride={stride} pad={pad}"
            )));
        }
        if si[1] != sk[1] {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: input {si:?} vs kernel {sk:?}"
            )));
        }
        let geom = ConvGeom::new(si[0], si[1], si[2], si[3], sk[0], k, stride, pad)
            .ok_or_else(|| {
                Error::Config(format!(
                    "conv2d output empty for input {si:?}, k={k}, stride={stride}, pad={pad}"
                ))
            })?;
        let data = kernels::conv2d_forward(self.value(input).data(), self.value(kernel).data(), &geom);
        let shape = vec![geom.batch, geom.c_out, geom.out_h, geom.out_w];
        let ng = self.needs(input.0) || self.needs(kernel.0);
        Ok(self.push(
            Tensor::new(shape, data)?,
            ng,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                geom,
            },
        ))
    }

    fn binary_same_shape(&mut self, a: Value, b: Value, name: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!(
                "{name} expects equal shapes, got {sa:?} and {sb:?}"
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary_same_shape(a, b, "add")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Tensor::new(shape, data)?, ng, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary_same_shape(a, b, "sub")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Tensor::new(shape, data)?, ng, Op::Sub { a: a.0, b: b.0 }))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary_same_shape(a, b, "mul")?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Tensor::new(shape, data)?, ng, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn mul_scalar(&mut self, a: Value, s: f64) -> Value {
        self.affine(a, s, 0.0)
    }

    /// out = mul * a + add (elementwise, scalar coefficients).
    pub fn affine(&mut self, a: Value, mul: f64, add: f64) -> Value {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| mul * x + add).collect();
        let shape = self.value(a).shape().to_vec();
        let ng = self.needs(a.0);
        self.push(
            Tensor::new(shape, data).expect("shape preserved"),
            ng,
            Op::Affine { a: a.0, mul },
        )
    }

    pub fn relu(&mut self, a: Value) -> Value {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let shape = self.value(a).shape().to_vec();
        let ng = self.needs(a.0);
        self.push(
            Tensor::new(shape, data).expect("shape preserved"),
            ng,
            Op::Relu { a: a.0 },
        )
    }

    /// Value-identical tensor that blocks gradient flow to its operand.
    pub fn detach(&mut self, a: Value) -> Value {
        let t = self.value(a).clone();
        self.push(t, false, Op::Detach { a: a.0 })
    }

    /// [N,C,H,W] -> [N,C], arithmetic mean over the spatial axes.
    pub fn global_avg_pool(&mut self, a: Value) -> Result<Value> {
        let s = self.value(a).shape();
        if s.len() != 4 {
            return Err(Error::Dimension(format!(
                "global_avg_pool expects rank-4, got {s:?}"
            )));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let src = self.value(a).data();
        let mut data = vec![0.0; n * c];
        for i in 0..n * c {
            let mut acc = 0.0;
            for j in 0..hw {
                acc += src[i * hw + j];
            }
            data[i] = acc / hw as f64;
        }
        let ng = self.needs(a.0);
        Ok(self.push(
            Tensor::new(vec![n, c], data)?,
            ng,
            Op::GlobalAvgPool { a: a.0 },
        ))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: Value, axis: usize) -> Result<Value> {
        let s = self.value(a).shape().to_vec();
        if axis >= s.len() {
            return Err(Error::Dimension(format!(
                "mean_axis axis {axis} out of range for shape {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += src[(o * len + l) * inner + i];
                }
            }
        }
        for v in &mut data {
            *v /= len as f64;
        }
        let mut out_shape: Vec<usize> = s[..axis].to_vec();
        out_shape.extend_from_slice(&s[axis + 1..]);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let ng = self.needs(a.0);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            ng,
            Op::MeanAxis { a: a.0, axis },
        ))
    }

    /// Sum of all elements, as a [1] tensor.
    pub fn sum(&mut self, a: Value) -> Value {
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.needs(a.0);
        self.push(Tensor::scalar(s), ng, Op::Sum { a: a.0 })
    }

    /// Row-wise softmax of a rank-2 tensor, max-subtracted for stability.
    pub fn softmax(&mut self, a: Value) -> Result<Value> {
        let (rows, cols, data) = self.rowwise_softmax(a, false)?;
        let ng = self.needs(a.0);
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            ng,
            Op::Softmax { a: a.0 },
        ))
    }

    pub fn log_softmax(&mut self, a: Value) -> Result<Value> {
        let (rows, cols, data) = self.rowwise_softmax(a, true)?;
        let ng = self.needs(a.0);
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            ng,
            Op::LogSoftmax { a: a.0 },
        ))
    }

    fn rowwise_softmax(&self, a: Value, log: bool) -> Result<(usize, usize, Vec<f64>)> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!(
                "softmax expects rank-2 logits, got {s:?}"
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &x in row {
                denom += (x - max).exp();
            }
            let log_denom = denom.ln();
            for (j, &x) in row.iter().enumerate() {
                data[r * cols + j] = if log {
                    x - max - log_denom
                } else {
                    (x - max - log_denom).exp()
                };
            }
        }
        Ok((rows, cols, data))
    }

    /// Mean over rows of -logp[row, label[row]].
    pub fn nll_loss(&mut self, logp: Value, labels: &[usize]) -> Result<Value> {
        let s = self.value(logp).shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "nll_loss expects [batch,classes] with {} labels, got {s:?}",
                labels.len()
            )));
        }
        let cols = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {cols} classes"
            )));
        }
        let src = self.value(logp).data();
        let mut acc = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            acc -= src[r * cols + l];
        }
        let v = acc / labels.len() as f64;
        let ng = self.needs(logp.0);
        Ok(self.push(
            Tensor::scalar(v),
            ng,
            Op::NllLoss {
                logp: logp.0,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Per-channel batch normalization over [N,C,H,W].
    ///
    /// Training mode normalizes with batch statistics (biased variance)
    /// and folds them into the running stats with momentum
    /// [`BN_MOMENTUM`], using the unbiased variance for the running
    /// value. Eval mode normalizes with the running stats.
    pub fn batch_norm(
        &mut self,
        x: Value,
        gamma: Value,
        beta: Value,
        running_mean: &mut [f64],
        running_var: &mut [f64],
        training: bool,
    ) -> Result<Value> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::Dimension(format!(
                "batch_norm expects rank-4, got {s:?}"
            )));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Dimension(format!(
                "batch_norm channel mismatch: x has {c} channels, gamma {} / beta {}",
                self.value(gamma).numel(),
                self.value(beta).numel()
            )));
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Dimension("batch_norm running stats length".into()));
        }
        if training && n < 2 {
            return Err(Error::Statistics(format!(
                "batch_norm training mode needs batch >= 2, got {n}"
            )));
        }
        let m = (n * hw) as f64;
        let src = self.value(x).data();
        let (mean, var): (Vec<f64>, Vec<f64>) = if training {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut acc = 0.0;
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    for i in 0..hw {
                        acc += src[base + i];
                    }
                }
                mean[ch] = acc / m;
                let mut vacc = 0.0;
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    for i in 0..hw {
                        let d = src[base + i] - mean[ch];
                        vacc += d * d;
                    }
                }
                var[ch] = vacc / m;
            }
            for ch in 0..c {
                let unbiased = var[ch] * m / (m - 1.0);
                running_mean[ch] = (1.0 - BN_MOMENTUM) * running_mean[ch] + BN_MOMENTUM * mean[ch];
                running_var[ch] = (1.0 - BN_MOMENTUM) * running_var[ch] + BN_MOMENTUM * unbiased;
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gdata = self.value(gamma).data().to_vec();
        let bdata = self.value(beta).data().to_vec();
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let scale = gdata[ch] * inv_std[ch];
                let shift = bdata[ch] - mean[ch] * scale;
                for i in 0..hw {
                    out[base + i] = src[base + i] * scale + shift;
                }
            }
        }
        let ng = self.needs(x.0) || self.needs(gamma.0) || self.needs(beta.0);
        Ok(self.push(
            Tensor::new(s, out)?,
            ng,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean,
                inv_std,
                training,
            },
        ))
    }

    /// Heaviside firing: 1 where u > v_th, else 0. Backward substitutes
    /// the configured surrogate derivative evaluated at u.
    pub fn spike(&mut self, u: Value, v_th: f64, sg: Surrogate) -> Value {
        let data: Vec<f64> = self
            .value(u)
            .data()
            .iter()
            .map(|&x| if x > v_th { 1.0 } else { 0.0 })
            .collect();
        let shape = self.value(u).shape().to_vec();
        let ng = self.needs(u.0);
        self.push(
            Tensor::new(shape, data).expect("shape preserved"),
            ng,
            Op::Spike { u: u.0, v_th, sg },
        )
    }

    /// out[i,j] = m[i,j] * s[j]; multiplying a matrix by diag(s) on the right.
    pub fn scale_cols(&mut self, m: Value, s: Value) -> Result<Value> {
        let sm = self.value(m).shape().to_vec();
        let ss = self.value(s).shape();
        if sm.len() != 2 || ss.len() != 1 || ss[0] != sm[1] {
            return Err(Error::Dimension(format!(
                "scale_cols expects [m,r] x [r], got {sm:?} x {ss:?}"
            )));
        }
        let (rows, cols) = (sm[0], sm[1]);
        let mdata = self.value(m).data();
        let sdata = self.value(s).data();
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[i * cols + j] = mdata[i * cols + j] * sdata[j];
            }
        }
        let ng = self.needs(m.0) || self.needs(s.0);
        Ok(self.push(
            Tensor::new(sm, data)?,
            ng,
            Op::ScaleCols { m: m.0, s: s.0 },
        ))
    }

    /// Broadcast-add a bias row vector to every row of a rank-2 tensor.
    pub fn add_row_bias(&mut self, m: Value, b: Value) -> Result<Value> {
        let sm = self.value(m).shape().to_vec();
        let sb = self.value(b).shape();
        if sm.len() != 2 || sb.len() != 1 || sb[0] != sm[1] {
            return Err(Error::Dimension(format!(
                "add_row_bias expects [m,n] + [n], got {sm:?} + {sb:?}"
            )));
        }
        let (rows, cols) = (sm[0], sm[1]);
        let mdata = self.value(m).data();
        let bdata = self.value(b).data();
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[i * cols + j] = mdata[i * cols + j] + bdata[j];
            }
        }
        let ng = self.needs(m.0) || self.needs(b.0);
        Ok(self.push(
            Tensor::new(sm, data)?,
            ng,
            Op::AddRowBias { m: m.0, b: b.0 },
        ))
    }

    /// Build a [CO,CI,K,K] conv kernel from k*k matrices of shape
    /// [CI,CO] (row-major over (ky,kx)); each entry is written transposed
    /// into its spatial slice.
    pub fn assemble_kernel(&mut self, entries: &[Value], k: usize) -> Result<Value> {
        if entries.len() != k * k {
            return Err(Error::Config(format!(
                "assemble_kernel wants {} entries for k={k}, got {}",
                k * k,
                entries.len()
            )));
        }
        let s0 = self.value(entries[0]).shape().to_vec();
        if s0.len() != 2 {
            return Err(Error::Dimension(format!(
                "assemble_kernel entries must be rank-2, got {s0:?}"
            )));
        }
        for &e in entries {
            if self.value(e).shape() != s0.as_slice() {
                return Err(Error::Config(format!(
                    "assemble_kernel entry shape mismatch: {:?} vs {s0:?}",
                    self.value(e).shape()
                )));
            }
        }
        let (ci, co) = (s0[0], s0[1]);
        let mut data = vec![0.0; co * ci * k * k];
        for (idx, &e) in entries.iter().enumerate() {
            let (ky, kx) = (idx / k, idx % k);
            let src = self.value(e).data();
            for a in 0..ci {
                for b in 0..co {
                    data[((b * ci + a) * k + ky) * k + kx] = src[a * co + b];
                }
            }
        }
        let ng = entries.iter().any(|e| self.needs(e.0));
        Ok(self.push(
            Tensor::new(vec![co, ci, k, k], data)?,
            ng,
            Op::AssembleKernel {
                entries: entries.iter().map(|e| e.0).collect(),
                k,
            },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. A tape replays backward at most
    /// once; a second call is rejected.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        if self.backward_done {
            return Err(Error::Config(
                "backward already replayed on this tape; record a new tape".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        for node in &mut self.nodes {
            if node.needs_grad {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        if let Some(g) = self.nodes[loss.0].grad.as_mut() {
            g[0] = 1.0;
        } else {
            // loss does not depend on any differentiable leaf
            return Ok(());
        }
        for i in (0..self.nodes.len()).rev() {
            let (left, right) = self.nodes.split_at_mut(i);
            let node = &right[0];
            let g = match node.grad.as_ref() {
                Some(g) => g,
                None => continue,
            };
            match &node.op {
                Op::Leaf | Op::Detach { .. } => {}
                Op::Matmul { a, b } => {
                    let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                    let k = left[*a].value.shape()[1];
                    if left[*a].needs_grad {
                        let da = kernels::matmul_nt(g, left[*b].value.data(), m, n, k);
                        acc(&mut left[*a], &da);
                    }
                    if left[*b].needs_grad {
                        // d_b [k,n] = a^T [k,m] * g [m,n]
                        let db = kernels::matmul_tn(left[*a].value.data(), g, k, m, n);
                        acc(&mut left[*b], &db);
                    }
                }
                Op::Conv2d { input, kernel, geom } => {
                    let (d_in, d_ker) = kernels::conv2d_backward(
                        left[*input].value.data(),
                        left[*kernel].value.data(),
                        g,
                        geom,
                    );
                    if left[*input].needs_grad {
                        acc(&mut left[*input], &d_in);
                    }
                    if left[*kernel].needs_grad {
                        acc(&mut left[*kernel], &d_ker);
                    }
                }
                Op::Add { a, b } => {
                    let g = g.clone();
                    if left[*a].needs_grad {
                        acc(&mut left[*a], &g);
                    }
                    if left[*b].needs_grad {
                        acc(&mut left[*b], &g);
                    }
                }
                Op::Sub { a, b } => {
                    if left[*a].needs_grad {
                        acc(&mut left[*a], g);
                    }
                    if left[*b].needs_grad {
                        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                        acc(&mut left[*b], &neg);
                    }
                }
                Op::Mul { a, b } => {
                    if left[*a].needs_grad {
                        let da: Vec<f64> = g
                            .iter()
                            .zip(left[*b].value.data())
                            .map(|(x, y)| x * y)
                            .collect();
                        acc(&mut left[*a], &da);
                    }
                    if left[*b].needs_grad {
                        let db: Vec<f64> = g
                            .iter()
                            .zip(left[*a].value.data())
                            .map(|(x, y)| x * y)
                            .collect();
                        acc(&mut left[*b], &db);
                    }
                }
                Op::Affine { a, mul } => {
                    if left[*a].needs_grad {
                        let da: Vec<f64> = g.iter().map(|x| mul * x).collect();
                        acc(&mut left[*a], &da);
                    }
                }
                Op::Relu { a } => {
                    if left[*a].needs_grad {
                        // subgradient 0 at exactly 0
                        let da: Vec<f64> = g
                            .iter()
                            .zip(left[*a].value.data())
                            .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                            .collect();
                        acc(&mut left[*a], &da);
                    }
                }
                Op::GlobalAvgPool { a } => {
                    if left[*a].needs_grad {
                        let s = left[*a].value.shape();
                        let hw = s[2] * s[3];
                        let mut da = vec![0.0; left[*a].value.numel()];
                        for i in 0..g.len() {
                            let gv = g[i] / hw as f64;
                            for j in 0..hw {
                                da[i * hw + j] = gv;
                            }
                        }
                        acc(&mut left[*a], &da);
                    }
                }
                Op::MeanAxis { a, axis } => {
                    if left[*a].needs_grad {
                        let s = left[*a].value.shape();
                        let outer: usize = s[..*axis].iter().product();
                        let len = s[*axis];
                        let inner: usize = s[*axis + 1..].iter().product();
                        let mut da = vec![0.0; left[*a].value.numel()];
                        for o in 0..outer {
                            for l in 0..len {
                                for i in 0..inner {
                                    da[(o * len + l) * inner + i] =
                                        g[o * inner + i] / len as f64;
                                }
                            }
                        }
                        acc(&mut left[*a], &da);
                    }
                }
                Op::Sum { a } => {
                    if left[*a].needs_grad {
                        let da = vec![g[0]; left[*a].value.numel()];
                        acc(&mut left[*a], &da);
                    }
                }
                Op::Softmax { a } => {
                    if left[*a].needs_grad {
                        let y = node.value.data();
                        let (rows, cols) = (node.value.shape()[0], node.value.shape()[1]);
                        let mut da = vec![0.0; y.len()];
                        for r in 0..rows {
                            let base = r * cols;
                            let dot: f64 = (0..cols).map(|j| g[base + j] * y[base + j]).sum();
                            for j in 0..cols {
                                da[base + j] = y[base + j] * (g[base + j] - dot);
                            }
                        }
                        acc(&mut left[*a], &da);
                    }
                }
                Op::LogSoftmax { a } => {
                    if left[*a].needs_grad {
                        let logp = node.value.data();
                        let (rows, cols) = (node.value.shape()[0], node.value.shape()[1]);
                        let mut da = vec![0.0; logp.len()];
                        for r in 0..rows {
                            let base = r * cols;
                            let gsum: f64 = (0..cols).map(|j| g[base + j]).sum();
                            for j in 0..cols {
                                da[base + j] = g[base + j] - logp[base + j].exp() * gsum;
                            }
                        }
                        acc(&mut left[*a], &da);
                    }
                }
                Op::NllLoss { logp, labels } => {
                    if left[*logp].needs_grad {
                        let cols = left[*logp].value.shape()[1];
                        let scale = -g[0] / labels.len() as f64;
                        let mut da = vec![0.0; left[*logp].value.numel()];
                        for (r, &l) in labels.iter().enumerate() {
                            da[r * cols + l] = scale;
                        }
                        acc(&mut left[*logp], &da);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    training,
                } => {
                    let s = left[*x].value.shape();
                    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let m = (n * hw) as f64;
                    let xd = left[*x].value.data();
                    let gam = left[*gamma].value.data();
                    // per-channel reductions
                    let mut sum_g = vec![0.0; c];
                    let mut sum_gx = vec![0.0; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            for idx in 0..hw {
                                let xhat = (xd[base + idx] - mean[ch]) * inv_std[ch];
                                sum_g[ch] += g[base + idx];
                                sum_gx[ch] += g[base + idx] * xhat;
                            }
                        }
                    }
                    if left[*x].needs_grad {
                        // training mode differentiates through the batch
                        // statistics; eval stats are constants
                        let mut da = vec![0.0; xd.len()];
                        for b in 0..n {
                            for ch in 0..c {
                                let base = (b * c + ch) * hw;
                                let k = gam[ch] * inv_std[ch];
                                for idx in 0..hw {
                                    let xhat = (xd[base + idx] - mean[ch]) * inv_std[ch];
                                    da[base + idx] = if *training {
                                        k * (g[base + idx]
                                            - sum_g[ch] / m
                                            - xhat * sum_gx[ch] / m)
                                    } else {
                                        k * g[base + idx]
                                    };
                                }
                            }
                        }
                        acc(&mut left[*x], &da);
                    }
                    if left[*gamma].needs_grad {
                        acc(&mut left[*gamma], &sum_gx);
                    }
                    if left[*beta].needs_grad {
                        acc(&mut left[*beta], &sum_g);
                    }
                }
                Op::Spike { u, v_th, sg } => {
                    if left[*u].needs_grad {
                        let da: Vec<f64> = g
                            .iter()
                            .zip(left[*u].value.data())
                            .map(|(gv, &up)| gv * sg.grad(up, *v_th))
                            .collect();
                        acc(&mut left[*u], &da);
                    }
                }
                Op::ScaleCols { m, s } => {
                    let (rows, cols) = (node.value.shape()[0], node.value.shape()[1]);
                    if left[*m].needs_grad {
                        let sd = left[*s].value.data();
                        let mut dm = vec![0.0; rows * cols];
                        for i in 0..rows {
                            for j in 0..cols {
                                dm[i * cols + j] = g[i * cols + j] * sd[j];
                            }
                        }
                        acc(&mut left[*m], &dm);
                    }
                    if left[*s].needs_grad {
                        let md = left[*m].value.data();
                        let mut ds = vec![0.0; cols];
                        for i in 0..rows {
                            for j in 0..cols {
                                ds[j] += g[i * cols + j] * md[i * cols + j];
                            }
                        }
                        acc(&mut left[*s], &ds);
                    }
                }
                Op::AddRowBias { m, b } => {
                    let (rows, cols) = (node.value.shape()[0], node.value.shape()[1]);
                    if left[*m].needs_grad {
                        acc(&mut left[*m], g);
                    }
                    if left[*b].needs_grad {
                        let mut db = vec![0.0; cols];
                        for i in 0..rows {
                            for j in 0..cols {
                                db[j] += g[i * cols + j];
                            }
                        }
                        acc(&mut left[*b], &db);
                    }
                }
                Op::AssembleKernel { entries, k } => {
                    let sk = node.value.shape();
                    let (co, ci) = (sk[0], sk[1]);
                    for (idx, &e) in entries.iter().enumerate() {
                        if !left[e].needs_grad {
                            continue;
                        }
                        let (ky, kx) = (idx / k, idx % k);
                        let mut de = vec![0.0; ci * co];
                        for a in 0..ci {
                            for b in 0..co {
                                de[a * co + b] = g[((b * ci + a) * k + ky) * k + kx];
                            }
                        }
                        acc(&mut left[e], &de);
                    }
                }
            }
        }
        Ok(())
    }
}

fn acc(node: &mut Node, contrib: &[f64]) {
    let g = node
        .grad
        .get_or_insert_with(|| vec![0.0; node.value.numel()]);
    debug_assert_eq!(g.len(), contrib.len());
    for (dst, src) in g.iter_mut().zip(contrib) {
        *dst += src;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testsupport::fd_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randt(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, 1.0, &mut rng)
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let c = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let v = tape.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let c = tape.matmul(a, v).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let inputs = vec![randt(&[3, 3], 1), randt(&[3, 3], 2)];
        fd_check(
            &inputs,
            |tape, vals| {
                let c = tape.matmul(vals[0], vals[1]).unwrap();
                tape.sum(c)
            },
            1e-6,
        );
    }

    #[test]
    fn conv2d_gradient_matches_finite_differences() {
        let inputs = vec![randt(&[2, 3, 8, 8], 3), randt(&[4, 3, 3, 3], 4)];
        fd_check(
            &inputs,
            |tape, vals| {
                let c = tape.conv2d(vals[0], vals[1], 1, 1).unwrap();
                tape.sum(c)
            },
            1e-5,
        );
    }

    #[test]
    fn conv2d_strided_gradient() {
        let inputs = vec![randt(&[2, 2, 7, 7], 5), randt(&[3, 2, 3, 3], 6)];
        fd_check(
            &inputs,
            |tape, vals| {
                let c = tape.conv2d(vals[0], vals[1], 2, 1).unwrap();
                tape.sum(c)
            },
            1e-5,
        );
    }

    #[test]
    fn add_backward_flows_unchanged() {
        let inputs = vec![randt(&[4, 5], 7), randt(&[4, 5], 8)];
        fd_check(
            &inputs,
            |tape, vals| {
                let c = tape.add(vals[0], vals[1]).unwrap();
                tape.sum(c)
            },
            1e-8,
        );
    }

    #[test]
    fn relu_values_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        // subgradient at exactly 0 is 0
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn detach_blocks_gradient_exactly() {
        let mut tape = Tape::new();
        let x = tape.leaf(randt(&[3, 3], 9));
        let d = tape.detach(x);
        let y = tape.mul(d, d).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.value(d).data(), tape.value(x).data());
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap());
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = tape.constant(Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
        let y = tape.softmax(big).unwrap();
        let d = tape.value(y).data();
        assert!(d[0].is_finite() && d[1].is_finite());
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(randt(&[5, 7], 11));
        let y = tape.softmax(x).unwrap();
        let d = tape.value(y).data();
        for r in 0..5 {
            let s: f64 = d[r * 7..(r + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let inputs = vec![randt(&[3, 4], 12)];
        fd_check(
            &inputs,
            |tape, vals| {
                let y = tape.softmax(vals[0]).unwrap();
                // weighted sum so the gradient is not trivially zero
                let w = tape.constant(Tensor::new(
                    vec![3, 4],
                    (0..12).map(|i| (i as f64 * 0.37).sin()).collect(),
                ).unwrap());
                let p = tape.mul(y, w).unwrap();
                tape.sum(p)
            },
            1e-6,
        );
    }

    #[test]
    fn log_softmax_gradient_matches_finite_differences() {
        let inputs = vec![randt(&[3, 4], 13)];
        fd_check(
            &inputs,
            |tape, vals| {
                let y = tape.log_softmax(vals[0]).unwrap();
                let w = tape.constant(Tensor::new(
                    vec![3, 4],
                    (0..12).map(|i| (i as f64 * 0.73).cos()).collect(),
                ).unwrap());
                let p = tape.mul(y, w).unwrap();
                tape.sum(p)
            },
            1e-6,
        );
    }

    #[test]
    fn gap_constant_input_and_hand_case() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[2, 3, 4, 4], 2.5));
        let y = tape.global_avg_pool(c).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 2.5).abs() < 1e-15));

        let x = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);
    }

    #[test]
    fn reductions_gradient_matches_finite_differences() {
        fd_check(
            &[randt(&[2, 3, 4, 4], 14)],
            |tape, vals| {
                let y = tape.global_avg_pool(vals[0]).unwrap();
                tape.sum(y)
            },
            1e-8,
        );
        fd_check(
            &[randt(&[3, 4, 5], 15)],
            |tape, vals| {
                let y = tape.mean_axis(vals[0], 1).unwrap();
                tape.sum(y)
            },
            1e-8,
        );
    }

    #[test]
    fn nll_loss_gradient_matches_finite_differences() {
        fd_check(
            &[randt(&[4, 6], 16)],
            |tape, vals| {
                let lp = tape.log_softmax(vals[0]).unwrap();
                tape.nll_loss(lp, &[0, 3, 5, 2]).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn nll_loss_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.nll_loss(x, &[0, 3]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn batch_norm_normalizes_in_training_mode() {
        let mut tape = Tape::new();
        let x = tape.constant(randt(&[4, 3, 5, 5], 17));
        let gamma = tape.constant(Tensor::full(&[3], 1.0));
        let beta = tape.constant(Tensor::zeros(&[3]));
        let mut rm = vec![0.0; 3];
        let mut rv = vec![1.0; 3];
        let y = tape
            .batch_norm(x, gamma, beta, &mut rm, &mut rv, true)
            .unwrap();
        let d = tape.value(y).data();
        let hw = 25;
        for ch in 0..3 {
            let mut mean = 0.0;
            let mut var = 0.0;
            let m = (4 * hw) as f64;
            for b in 0..4 {
                for i in 0..hw {
                    mean += d[(b * 3 + ch) * hw + i];
                }
            }
            mean /= m;
            for b in 0..4 {
                for i in 0..hw {
                    let v = d[(b * 3 + ch) * hw + i] - mean;
                    var += v * v;
                }
            }
            var /= m;
            assert!(mean.abs() <= 1e-6, "channel mean {mean}");
            assert!((var - 1.0).abs() <= 1e-4, "channel var {var}");
        }
    }

    #[test]
    fn batch_norm_identity_on_standard_input() {
        // gamma=1, beta=0, zero-mean unit-variance input: output ~ input
        let n = 8;
        let hw = 16;
        let mut data = Vec::with_capacity(n * hw);
        for i in 0..n * hw {
            data.push(if i % 2 == 0 { 1.0 } else { -1.0 });
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![n, 1, 4, 4], data.clone()).unwrap());
        let gamma = tape.constant(Tensor::full(&[1], 1.0));
        let beta = tape.constant(Tensor::zeros(&[1]));
        let mut rm = vec![0.0];
        let mut rv = vec![1.0];
        let y = tape
            .batch_norm(x, gamma, beta, &mut rm, &mut rv, true)
            .unwrap();
        for (a, b) in tape.value(y).data().iter().zip(&data) {
            assert!((a - b).abs() <= 1e-3);
        }
    }

    #[test]
    fn batch_norm_rejects_batch_of_one_in_training() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let gamma = tape.constant(Tensor::full(&[2], 1.0));
        let beta = tape.constant(Tensor::zeros(&[2]));
        let mut rm = vec![0.0; 2];
        let mut rv = vec![1.0; 2];
        let err = tape
            .batch_norm(x, gamma, beta, &mut rm, &mut rv, true)
            .unwrap_err();
        assert!(matches!(err, Error::Statistics(_)));
    }

    #[test]
    fn batch_norm_gradient_matches_finite_differences() {
        let inputs = vec![randt(&[3, 2, 4, 4], 18), randt(&[2], 19), randt(&[2], 20)];
        fd_check(
            &inputs,
            |tape, vals| {
                let mut rm = vec![0.0; 2];
                let mut rv = vec![1.0; 2];
                let y = tape
                    .batch_norm(vals[0], vals[1], vals[2], &mut rm, &mut rv, true)
                    .unwrap();
                let w = tape.constant(Tensor::new(
                    vec![3, 2, 4, 4],
                    (0..96).map(|i| (i as f64 * 0.11).sin()).collect(),
                ).unwrap());
                let p = tape.mul(y, w).unwrap();
                tape.sum(p)
            },
            1e-4,
        );
    }

    #[test]
    fn scale_cols_gradient_matches_finite_differences() {
        let inputs = vec![randt(&[4, 3], 21), randt(&[3], 22)];
        fd_check(
            &inputs,
            |tape, vals| {
                let y = tape.scale_cols(vals[0], vals[1]).unwrap();
                let w = tape.constant(Tensor::new(
                    vec![4, 3],
                    (0..12).map(|i| (i as f64 * 0.19).cos()).collect(),
                ).unwrap());
                let p = tape.mul(y, w).unwrap();
                tape.sum(p)
            },
            1e-7,
        );
    }

    #[test]
    fn add_row_bias_gradient_matches_finite_differences() {
        let inputs = vec![randt(&[4, 3], 23), randt(&[3], 24)];
        fd_check(
            &inputs,
            |tape, vals| {
                let y = tape.add_row_bias(vals[0], vals[1]).unwrap();
                tape.sum(y)
            },
            1e-8,
        );
    }

    #[test]
    fn assemble_kernel_layout_and_gradient() {
        let mut tape = Tape::new();
        let entries: Vec<Value> = (0..9)
            .map(|i| tape.leaf(randt(&[2, 3], 100 + i)))
            .collect();
        let ker = tape.assemble_kernel(&entries, 3).unwrap();
        assert_eq!(tape.value(ker).shape(), &[3, 2, 3, 3]);
        // spot-check a transposed entry: kernel[co,ci,ky,kx] == entry_{ky,kx}[ci,co]
        let e4 = tape.value(entries[4]).clone();
        let kd = tape.value(ker).data().to_vec();
        for ci in 0..2 {
            for co in 0..3 {
                assert_eq!(kd[((co * 2 + ci) * 3 + 1) * 3 + 1], e4.at2(ci, co));
            }
        }
        let inputs: Vec<Tensor> = (0..9).map(|i| randt(&[2, 3], 100 + i)).collect();
        fd_check(
            &inputs,
            |tape, vals| {
                let ker = tape.assemble_kernel(vals, 3).unwrap();
                let x = tape.constant(randt(&[1, 2, 4, 4], 200));
                let y = tape.conv2d(x, ker, 1, 1).unwrap();
                tape.sum(y)
            },
            1e-6,
        );
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(randt(&[2, 2], 25));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        let err = tape.backward(s).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn finite_values_for_bounded_inputs() {
        // |x| <= 1e3 through every op keeps values finite
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::uniform(&[4, 6], 1e3, &mut rng);
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let r = tape.relu(v);
        let sm = tape.softmax(r).unwrap();
        let ls = tape.log_softmax(v).unwrap();
        let m = tape.mul(sm, ls).unwrap();
        let s = tape.sum(m);
        assert!(tape.first_nonfinite().is_none());
        tape.backward(s).unwrap();
        assert!(tape.grad(v).unwrap().iter().all(|g| g.is_finite()));
    }
}
