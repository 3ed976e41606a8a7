//! Dense tensors with reverse-mode automatic differentiation on a dynamic
//! tape.
//!
//! All values are 64-bit floats. A [`Tape`] owns every tensor created on it;
//! operations return [`TensorId`] handles. Gradients are kept for every node
//! that participates in differentiation, so gradients of interior activations
//! (not just leaves) can be read back after [`Tape::backward`]. A tape is
//! consumed by exactly one backward pass.

use crate::error::{Error, Result};

/// Handle to a tensor living on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    AddRowBias { a: usize, bias: usize },
    Relu { a: usize },
    Gelu { a: usize },
    Sigmoid { a: usize },
    SoftmaxRows { a: usize },
    LayerNormRows { x: usize, gain: usize, bias: usize, eps: f64 },
    MeanRows { a: usize },
    SumAll { a: usize },
    SliceCols { a: usize, start: usize, len: usize },
    ConcatCols { parts: Vec<usize> },
    GatherRows { a: usize, idx: Vec<usize> },
    Reshape { a: usize },
    CrossEntropy { logits: usize, label: usize },
    SelectElement { a: usize, idx: usize },
    BceWithLogitsMean { logits: usize, targets: Vec<f64> },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// Ordered record of primitive operations; one reverse sweep computes all
/// gradients in exact reverse topological (creation) order.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
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
            consumed: false,
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            needs_grad,
            op,
        });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    /// Create a leaf tensor. `requires_grad` leaves receive gradients after
    /// `backward`, as does every interior node downstream of one.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> TensorId {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "leaf data does not match shape"
        );
        self.push(shape, data, requires_grad, Op::Leaf)
    }

    pub fn shape(&self, t: TensorId) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn data(&self, t: TensorId) -> &[f64] {
        &self.nodes[t.0].data
    }

    /// Gradient of the last backward pass w.r.t. `t`, if `t` participated.
    pub fn grad(&self, t: TensorId) -> Option<&[f64]> {
        self.grads[t.0].as_deref()
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn dims2(&self, t: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[t.0].shape;
        if s.len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: s.clone(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut out, m, k, n);
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(vec![m, n], out, ng, Op::MatMul { a: a.0, b: b.0 }))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "transpose")?;
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.needs(&[a.0]);
        Ok(self.push(vec![n, m], out, ng, Op::Transpose { a: a.0 }))
    }

    fn same_shape(&self, a: TensorId, b: TensorId, op: &'static str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "add")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs(&[a.0, b.0]);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, ng, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "sub")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let ng = self.needs(&[a.0, b.0]);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, ng, Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape(a, b, "mul")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.needs(&[a.0, b.0]);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, ng, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let ng = self.needs(&[a.0]);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, ng, Op::Scale { a: a.0, c })
    }

    /// `a` is (R, C); `bias` is a length-C vector added to every row.
    pub fn add_row_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (r, c) = self.dims2(a, "add_row_bias")?;
        if self.nodes[bias.0].data.len() != c {
            return Err(Error::Shape {
                op: "add_row_bias",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let mut data = self.nodes[a.0].data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += self.nodes[bias.0].data[j];
            }
        }
        let ng = self.needs(&[a.0, bias.0]);
        Ok(self.push(vec![r, c], data, ng, Op::AddRowBias { a: a.0, bias: bias.0 }))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x.max(0.0)).collect();
        let ng = self.needs(&[a.0]);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, ng, Op::Relu { a: a.0 })
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| gelu_val(x)).collect();
        let ng = self.needs(&[a.0]);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, ng, Op::Gelu { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| sigmoid(x)).collect();
        let ng = self.needs(&[a.0]);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, ng, Op::Sigmoid { a: a.0 })
    }

    /// Softmax along the last axis. 1-D input is treated as a single row.
    /// Numerically stabilized by max subtraction; rejects non-finite input.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let ndim = self.nodes[a.0].shape.len();
        if axis + 1 != ndim {
            return Err(Error::contract(format!(
                "softmax supports only the last axis (got axis {axis} of {ndim} dims)"
            )));
        }
        self.softmax_rows(a)
    }

    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.nodes[a.0].shape.clone();
        let cols = *shape.last().ok_or_else(|| Error::contract("softmax of 0-d tensor"))?;
        if self.nodes[a.0].data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let mut data = self.nodes[a.0].data.clone();
        for row in data.chunks_mut(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let ng = self.needs(&[a.0]);
        Ok(self.push(shape, data, ng, Op::SoftmaxRows { a: a.0 }))
    }

    /// LayerNorm over the last axis with elementwise affine (gain, bias).
    pub fn layernorm_rows(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        assert!(eps > 0.0, "layernorm eps must be positive");
        let shape = self.nodes[x.0].shape.clone();
        let cols = *shape.last().ok_or_else(|| Error::contract("layernorm of 0-d tensor"))?;
        if self.nodes[gain.0].data.len() != cols || self.nodes[bias.0].data.len() != cols {
            return Err(Error::Shape {
                op: "layernorm",
                lhs: shape,
                rhs: self.nodes[gain.0].shape.clone(),
            });
        }
        let g = self.nodes[gain.0].data.clone();
        let b = self.nodes[bias.0].data.clone();
        let mut data = self.nodes[x.0].data.clone();
        for row in data.chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g[j] + b[j];
            }
        }
        let ng = self.needs(&[x.0, gain.0, bias.0]);
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(
            shape,
            data,
            ng,
            Op::LayerNormRows {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
        ))
    }

    /// (R, C) -> (1, C): mean over rows.
    pub fn mean_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.dims2(a, "mean_rows")?;
        let mut out = vec![0.0; c];
        for row in self.nodes[a.0].data.chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= r as f64;
        }
        let ng = self.needs(&[a.0]);
        Ok(self.push(vec![1, c], out, ng, Op::MeanRows { a: a.0 }))
    }

    /// Sum of all elements, as a scalar (shape []).
    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let ng = self.needs(&[a.0]);
        self.push(vec![], vec![s], ng, Op::SumAll { a: a.0 })
    }

    /// Columns [start, start+len) of a (R, C) matrix.
    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (r, c) = self.dims2(a, "slice_cols")?;
        if start + len > c {
            return Err(Error::contract(format!(
                "slice_cols [{start}, {}) out of {c} columns",
                start + len
            )));
        }
        let src = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let ng = self.needs(&[a.0]);
        Ok(self.push(vec![r, len], out, ng, Op::SliceCols { a: a.0, start, len }))
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of zero parts"));
        }
        let (r, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (rp, cp) = self.dims2(p, "concat_cols")?;
            if rp != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            widths.push(cp);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].data[i * w..(i + 1) * w]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.needs(&ids);
        Ok(self.push(vec![r, total], out, ng, Op::ConcatCols { parts: ids }))
    }

    /// Rows of a (R, C) matrix at the given indices, in the given order.
    pub fn gather_rows(&mut self, a: TensorId, idx: &[usize]) -> Result<TensorId> {
        let (r, c) = self.dims2(a, "gather_rows")?;
        if idx.is_empty() {
            return Err(Error::contract("gather_rows with empty index set"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::contract(format!("gather_rows index {bad} out of {r} rows")));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&self.nodes[a.0].data[i * c..(i + 1) * c]);
        }
        let ng = self.needs(&[a.0]);
        Ok(self.push(
            vec![idx.len(), c],
            out,
            ng,
            Op::GatherRows {
                a: a.0,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Same data, new shape; element count must be preserved.
    pub fn reshape(&mut self, a: TensorId, new_shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = new_shape.iter().product();
        if numel != self.nodes[a.0].data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: new_shape,
            });
        }
        let data = self.nodes[a.0].data.clone();
        let ng = self.needs(&[a.0]);
        Ok(self.push(new_shape, data, ng, Op::Reshape { a: a.0 }))
    }

    /// Softmax cross-entropy of a logit vector against an integer label.
    pub fn cross_entropy(&mut self, logits: TensorId, label: usize) -> Result<TensorId> {
        let z = &self.nodes[logits.0].data;
        if label >= z.len() {
            return Err(Error::contract(format!(
                "label {label} out of range for {} classes",
                z.len()
            )));
        }
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        let loss = lse - z[label];
        let ng = self.needs(&[logits.0]);
        Ok(self.push(
            vec![],
            vec![loss],
            ng,
            Op::CrossEntropy {
                logits: logits.0,
                label,
            },
        ))
    }

    /// One element of a tensor (flat index), as a scalar.
    pub fn select_element(&mut self, a: TensorId, idx: usize) -> Result<TensorId> {
        let d = &self.nodes[a.0].data;
        if idx >= d.len() {
            return Err(Error::contract(format!(
                "select_element index {idx} out of {} elements",
                d.len()
            )));
        }
        let v = d[idx];
        let ng = self.needs(&[a.0]);
        Ok(self.push(vec![], vec![v], ng, Op::SelectElement { a: a.0, idx }))
    }

    /// Mean binary cross-entropy of sigmoid(logits) against soft targets in
    /// [0, 1], computed in the numerically stable logits form.
    pub fn bce_with_logits_mean(&mut self, logits: TensorId, targets: &[f64]) -> Result<TensorId> {
        let z = &self.nodes[logits.0].data;
        if z.len() != targets.len() {
            return Err(Error::Shape {
                op: "bce_with_logits_mean",
                lhs: self.nodes[logits.0].shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        let n = z.len() as f64;
        let loss = z
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let ng = self.needs(&[logits.0]);
        Ok(self.push(
            vec![],
            vec![loss],
            ng,
            Op::BceWithLogitsMean {
                logits: logits.0,
                targets: targets.to_vec(),
            },
        ))
    }

    fn accumulate(&mut self, node: usize, delta: &[f64]) {
        let g = self.grads[node].get_or_insert_with(|| vec![0.0; self.nodes[node].data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    /// Reverse sweep from a scalar loss. Gradients become available through
    /// [`Tape::grad`] for every participating tensor. Consumes the tape:
    /// a second call is a contract error.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.consumed {
            return Err(Error::contract("tape already consumed by a backward pass"));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.consumed = true;
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.grads[i].is_none() {
                continue;
            }
            let gy = self.grads[i].take().unwrap();
            let op = self.nodes[i].op.clone();
            self.backprop(i, &op, &gy);
            self.grads[i] = Some(gy);
        }
        Ok(())
    }

    fn backprop(&mut self, out: usize, op: &Op, gy: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                if self.nodes[*a].needs_grad {
                    // dA = dC * B^T, as row dots so both operands stream
                    // contiguously
                    let bdat = &self.nodes[*b].data;
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &gy[i * n..(i + 1) * n];
                        let darow = &mut da[i * k..(i + 1) * k];
                        for (p, d) in darow.iter_mut().enumerate() {
                            let brow = &bdat[p * n..(p + 1) * n];
                            *d = grow.iter().zip(brow).map(|(g, b)| g * b).sum();
                        }
                    }
                    self.accumulate(*a, &da);
                }
                if self.nodes[*b].needs_grad {
                    // dB = A^T * dC
                    let adat = self.nodes[*a].data.clone();
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = adat[i * k + p];
                            if av != 0.0 {
                                for j in 0..n {
                                    db[p * n + j] += av * gy[i * n + j];
                                }
                            }
                        }
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::Transpose { a } => {
                let (m, n) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                if self.nodes[*a].needs_grad {
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = gy[j * m + i];
                        }
                    }
                    self.accumulate(*a, &da);
                }
            }
            Op::Add { a, b } => {
                if self.nodes[*a].needs_grad {
                    self.accumulate(*a, gy);
                }
                if self.nodes[*b].needs_grad {
                    self.accumulate(*b, gy);
                }
            }
            Op::Sub { a, b } => {
                if self.nodes[*a].needs_grad {
                    self.accumulate(*a, gy);
                }
                if self.nodes[*b].needs_grad {
                    let neg: Vec<f64> = gy.iter().map(|g| -g).collect();
                    self.accumulate(*b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].needs_grad {
                    let da: Vec<f64> = gy
                        .iter()
                        .zip(&self.nodes[*b].data)
                        .map(|(g, y)| g * y)
                        .collect();
                    self.accumulate(*a, &da);
                }
                if self.nodes[*b].needs_grad {
                    let db: Vec<f64> = gy
                        .iter()
                        .zip(&self.nodes[*a].data)
                        .map(|(g, x)| g * x)
                        .collect();
                    self.accumulate(*b, &db);
                }
            }
            Op::Scale { a, c } => {
                if self.nodes[*a].needs_grad {
                    let da: Vec<f64> = gy.iter().map(|g| g * c).collect();
                    self.accumulate(*a, &da);
                }
            }
            Op::AddRowBias { a, bias } => {
                let c = self.nodes[*bias].data.len();
                if self.nodes[*a].needs_grad {
                    self.accumulate(*a, gy);
                }
                if self.nodes[*bias].needs_grad {
                    let mut db = vec![0.0; c];
                    for row in gy.chunks(c) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    self.accumulate(*bias, &db);
                }
            }
            Op::Relu { a } => {
                if self.nodes[*a].needs_grad {
                    let da: Vec<f64> = gy
                        .iter()
                        .zip(&self.nodes[*a].data)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(*a, &da);
                }
            }
            Op::Gelu { a } => {
                if self.nodes[*a].needs_grad {
                    let da: Vec<f64> = gy
                        .iter()
                        .zip(&self.nodes[*a].data)
                        .map(|(g, &x)| g * gelu_grad(x))
                        .collect();
                    self.accumulate(*a, &da);
                }
            }
            Op::Sigmoid { a } => {
                if self.nodes[*a].needs_grad {
                    let da: Vec<f64> = gy
                        .iter()
                        .zip(&self.nodes[out].data)
                        .map(|(g, &y)| g * y * (1.0 - y))
                        .collect();
                    self.accumulate(*a, &da);
                }
            }
            Op::SoftmaxRows { a } => {
                if self.nodes[*a].needs_grad {
                    let cols = *self.nodes[out].shape.last().unwrap();
                    let y = &self.nodes[out].data;
                    let mut da = vec![0.0; y.len()];
                    for (r, chunk) in y.chunks(cols).enumerate() {
                        let gyr = &gy[r * cols..(r + 1) * cols];
                        let dot: f64 = gyr.iter().zip(chunk).map(|(g, p)| g * p).sum();
                        for j in 0..cols {
                            da[r * cols + j] = chunk[j] * (gyr[j] - dot);
                        }
                    }
                    self.accumulate(*a, &da);
                }
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let cols = *self.nodes[out].shape.last().unwrap();
                let xd = self.nodes[*x].data.clone();
                let g = self.nodes[*gain].data.clone();
                let rows = xd.len() / cols;
                let mut dx = vec![0.0; xd.len()];
                let mut dg = vec![0.0; cols];
                let mut db = vec![0.0; cols];
                for r in 0..rows {
                    let row = &xd[r * cols..(r + 1) * cols];
                    let gyr = &gy[r * cols..(r + 1) * cols];
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let gg: Vec<f64> = gyr.iter().zip(&g).map(|(gy, gj)| gy * gj).collect();
                    let mean_gg = gg.iter().sum::<f64>() / cols as f64;
                    let mean_ggx =
                        gg.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for j in 0..cols {
                        dx[r * cols + j] = (gg[j] - mean_gg - xhat[j] * mean_ggx) * inv;
                        dg[j] += gyr[j] * xhat[j];
                        db[j] += gyr[j];
                    }
                }
                if self.nodes[*x].needs_grad {
                    self.accumulate(*x, &dx);
                }
                if self.nodes[*gain].needs_grad {
                    self.accumulate(*gain, &dg);
                }
                if self.nodes[*bias].needs_grad {
                    self.accumulate(*bias, &db);
                }
            }
            Op::MeanRows { a } => {
                if self.nodes[*a].needs_grad {
                    let (r, c) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] = gy[j] / r as f64;
                        }
                    }
                    self.accumulate(*a, &da);
                }
            }
            Op::SumAll { a } => {
                if self.nodes[*a].needs_grad {
                    let da = vec![gy[0]; self.nodes[*a].data.len()];
                    self.accumulate(*a, &da);
                }
            }
            Op::SliceCols { a, start, len } => {
                if self.nodes[*a].needs_grad {
                    let (r, c) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..*len {
                            da[i * c + start + j] = gy[i * len + j];
                        }
                    }
                    self.accumulate(*a, &da);
                }
            }
            Op::ConcatCols { parts } => {
                let total = *self.nodes[out].shape.last().unwrap();
                let rows = self.nodes[out].shape[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].shape[1];
                    if self.nodes[p].needs_grad {
                        let mut dp = vec![0.0; rows * w];
                        for i in 0..rows {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&gy[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(p, &dp);
                    }
                    offset += w;
                }
            }
            Op::Reshape { a } => {
                if self.nodes[*a].needs_grad {
                    self.accumulate(*a, gy);
                }
            }
            Op::GatherRows { a, idx } => {
                if self.nodes[*a].needs_grad {
                    let (r, c) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                    let mut da = vec![0.0; r * c];
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            da[i * c + j] += gy[k * c + j];
                        }
                    }
                    self.accumulate(*a, &da);
                }
            }
            Op::CrossEntropy { logits, label } => {
                if self.nodes[*logits].needs_grad {
                    let z = &self.nodes[*logits].data;
                    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    let mut dz: Vec<f64> = exps.iter().map(|e| e / sum * gy[0]).collect();
                    dz[*label] -= gy[0];
                    self.accumulate(*logits, &dz);
                }
            }
            Op::SelectElement { a, idx } => {
                if self.nodes[*a].needs_grad {
                    let mut da = vec![0.0; self.nodes[*a].data.len()];
                    da[*idx] = gy[0];
                    self.accumulate(*a, &da);
                }
            }
            Op::BceWithLogitsMean { logits, targets } => {
                if self.nodes[*logits].needs_grad {
                    let z = &self.nodes[*logits].data;
                    let n = z.len() as f64;
                    let dz: Vec<f64> = z
                        .iter()
                        .zip(targets)
                        .map(|(&z, &t)| (sigmoid(z) - t) / n * gy[0])
                        .collect();
                    self.accumulate(*logits, &dz);
                }
            }
        }
    }
}

/// out += a (m x k) * b (k x n), row-major.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
