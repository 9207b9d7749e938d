//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every forward operation appends one node to the tape; `backward` replays
//! the nodes in reverse and accumulates vector-Jacobian products. Tensors are
//! dense row-major `f64` arrays of rank 1 or 2, which is all the model needs.

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// A dense tensor recorded on the tape.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
    pub tape_id: Option<TensorId>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Recorded primitive applications. Indices refer to earlier tape nodes.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    /// `x[r, c] + v[c]` at every row r.
    AddRow { x: usize, v: usize },
    /// `x` with `s` (scalar) added at flat position `index`.
    AddAt { x: usize, s: usize, index: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    MatMul { a: usize, b: usize },
    Transpose { x: usize },
    Exp { x: usize },
    Log { x: usize },
    Relu { x: usize },
    Tanh { x: usize },
    Softmax { x: usize },
    LogSoftmax { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    Sum { x: usize },
    Mean { x: usize },
    /// Mean over rows: `[r, c] -> [c]`.
    MeanRows { x: usize },
    L2Norm { x: usize },
    Mse { a: usize, b: usize },
    CrossEntropy { logits: usize, label: usize },
    CrossEntropyRows { logits: usize, labels: Vec<usize> },
    /// Identity forward; upstream gradient is multiplied by `-lambda`.
    GradReverse { x: usize, lambda: f64 },
    GatherRows { src: usize, ids: Vec<usize> },
    SliceFlat { src: usize, offset: usize },
    SliceCols { x: usize, start: usize, width: usize },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    /// Relative-position bias matrix built from row `head` of a bias table.
    RelBias { table: usize, head: usize, len: usize },
    RepeatRows { x: usize, durations: Vec<usize> },
    Reshape { x: usize },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add { a, b } | Op::Mul { a, b } | Op::MatMul { a, b } | Op::Mse { a, b } => {
                vec![*a, *b]
            }
            Op::AddRow { x, v } => vec![*x, *v],
            Op::AddAt { x, s, .. } => vec![*x, *s],
            Op::Scale { x, .. }
            | Op::Transpose { x }
            | Op::Exp { x }
            | Op::Log { x }
            | Op::Relu { x }
            | Op::Tanh { x }
            | Op::Softmax { x }
            | Op::LogSoftmax { x }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::MeanRows { x }
            | Op::L2Norm { x }
            | Op::GradReverse { x, .. }
            | Op::SliceCols { x, .. }
            | Op::RepeatRows { x, .. }
            | Op::Reshape { x } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropy { logits, .. } | Op::CrossEntropyRows { logits, .. } => {
                vec![*logits]
            }
            Op::GatherRows { src, .. } | Op::SliceFlat { src, .. } => vec![*src],
            Op::ConcatRows { parts } | Op::ConcatCols { parts } => parts.clone(),
            Op::RelBias { table, .. } => vec![*table],
        }
    }
}

/// Linear tape of recorded operations. One tape is owned by one logical
/// thread of execution at a time.
pub struct Tape {
    tensors: Vec<Tensor>,
    ops: Vec<Op>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Interpret a rank-1 or rank-2 shape as (rows, cols).
fn rows_cols(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [n] => Ok((1, *n)),
        [r, c] => Ok((*r, *c)),
        other => Err(Error::contract(format!(
            "expected rank-1 or rank-2 tensor, got shape {other:?}"
        ))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            tensors: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    fn push(&mut self, values: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        let id = TensorId(self.tensors.len());
        self.tensors.push(Tensor {
            shape,
            values,
            grad: None,
            requires_grad,
            tape_id: Some(id),
        });
        self.ops.push(op);
        id
    }

    fn out_requires_grad(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.tensors[i].requires_grad)
    }

    fn check(&self, id: TensorId) -> Result<usize> {
        if id.0 < self.tensors.len() {
            Ok(id.0)
        } else {
            Err(Error::CorruptTape(format!(
                "node {} referenced but tape has {} nodes",
                id.0,
                self.tensors.len()
            )))
        }
    }

    /// Record a leaf tensor.
    pub fn leaf(&mut self, values: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        if shape_numel(&shape) != values.len() {
            return Err(Error::contract(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                shape_numel(&shape),
                values.len()
            )));
        }
        Ok(self.push(values, shape, requires_grad, Op::Leaf))
    }

    /// Record a constant (non-differentiable) leaf.
    pub fn constant(&mut self, values: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(values, shape, false)
    }

    pub fn scalar(&mut self, value: f64) -> TensorId {
        self.push(vec![value], vec![1], false, Op::Leaf)
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.tensors[id.0].values
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensors[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.tensors[id.0].grad.as_deref()
    }

    /// Value of a single-element tensor.
    pub fn item(&self, id: TensorId) -> Result<f64> {
        let t = &self.tensors[id.0];
        if t.numel() != 1 {
            return Err(Error::contract(format!(
                "item() needs a scalar, got shape {:?}",
                t.shape
            )));
        }
        Ok(t.values[0])
    }

    fn binary_same_shape(&self, a: TensorId, b: TensorId, op_name: &str) -> Result<()> {
        let (sa, sb) = (&self.tensors[a.0].shape, &self.tensors[b.0].shape);
        if sa != sb {
            return Err(Error::contract(format!(
                "{op_name}: shape mismatch {sa:?} vs {sb:?}"
            )));
        }
        Ok(())
    }

    // ── Forward ops ──────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "add")?;
        let values: Vec<f64> = self.tensors[a.0]
            .values
            .iter()
            .zip(&self.tensors[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.tensors[a.0].shape.clone();
        let rg = self.out_requires_grad(&[a.0, b.0]);
        Ok(self.push(values, shape, rg, Op::Add { a: a.0, b: b.0 }))
    }

    /// Broadcast-add a rank-1 vector to every row of a rank-2 tensor.
    pub fn add_row(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        let (r, c) = rows_cols(&self.tensors[x.0].shape)?;
        let vs = &self.tensors[v.0].shape;
        if vs.len() != 1 || vs[0] != c {
            return Err(Error::contract(format!(
                "add_row: shape mismatch {:?} vs {:?}",
                self.tensors[x.0].shape, vs
            )));
        }
        let mut values = self.tensors[x.0].values.clone();
        for i in 0..r {
            for j in 0..c {
                values[i * c + j] += self.tensors[v.0].values[j];
            }
        }
        let shape = self.tensors[x.0].shape.clone();
        let rg = self.out_requires_grad(&[x.0, v.0]);
        Ok(self.push(values, shape, rg, Op::AddRow { x: x.0, v: v.0 }))
    }

    /// Add a scalar tensor at one flat position of `x`.
    pub fn add_at(&mut self, x: TensorId, s: TensorId, index: usize) -> Result<TensorId> {
        if self.tensors[s.0].numel() != 1 {
            return Err(Error::contract(format!(
                "add_at: addend must be scalar, got shape {:?}",
                self.tensors[s.0].shape
            )));
        }
        if index >= self.tensors[x.0].numel() {
            return Err(Error::contract(format!(
                "add_at: index {} out of range for {} elements",
                index,
                self.tensors[x.0].numel()
            )));
        }
        let mut values = self.tensors[x.0].values.clone();
        values[index] += self.tensors[s.0].values[0];
        let shape = self.tensors[x.0].shape.clone();
        let rg = self.out_requires_grad(&[x.0, s.0]);
        Ok(self.push(values, shape, rg, Op::AddAt { x: x.0, s: s.0, index }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "multiply")?;
        let values: Vec<f64> = self.tensors[a.0]
            .values
            .iter()
            .zip(&self.tensors[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.tensors[a.0].shape.clone();
        let rg = self.out_requires_grad(&[a.0, b.0]);
        Ok(self.push(values, shape, rg, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let values: Vec<f64> = self.tensors[x.0].values.iter().map(|v| v * c).collect();
        let shape = self.tensors[x.0].shape.clone();
        let rg = self.out_requires_grad(&[x.0]);
        Ok(self.push(values, shape, rg, Op::Scale { x: x.0, c }))
    }

    /// `a[m,k] @ b[k,n] -> [m,n]`. Rank-2 only.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.tensors[a.0].shape, &self.tensors[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::contract(format!(
                "matmul: shape mismatch {sa:?} vs {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = &self.tensors[a.0].values;
        let bv = &self.tensors[b.0].values;
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let row = &bv[p * n..(p + 1) * n];
                let out = &mut values[i * n..(i + 1) * n];
                for j in 0..n {
                    out[j] += aip * row[j];
                }
            }
        }
        let rg = self.out_requires_grad(&[a.0, b.0]);
        Ok(self.push(values, vec![m, n], rg, Op::MatMul { a: a.0, b: b.0 }))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let s = &self.tensors[x.0].shape;
        if s.len() != 2 {
            return Err(Error::contract(format!(
                "transpose: expected rank-2 tensor, got shape {s:?}"
            )));
        }
        let (r, c) = (s[0], s[1]);
        let xv = &self.tensors[x.0].values;
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                values[j * r + i] = xv[i * c + j];
            }
        }
        let rg = self.out_requires_grad(&[x.0]);
        Ok(self.push(values, vec![c, r], rg, Op::Transpose { x: x.0 }))
    }

    pub fn exp(&mut self, x: TensorId) -> Result<TensorId> {
        let values: Vec<f64> = self.tensors[x.0].values.iter().map(|v| v.exp()).collect();
        let shape = self.tensors[x.0].shape.clone();
        let rg = self.out_requires_grad(&[x.0]);
        Ok(self.push(values, shape, rg, Op::Exp { x: x.0 }))
    }

    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        let values: Vec<f64> = self.tensors[x.0].values.iter().map(|v| v.ln()).collect();
        let shape = self.tensors[x.0].shape.clone();
        let rg = self.out_requires_grad(&[x.0]);
        Ok(self.push(values, shape, rg, Op::Log { x: x.0 }))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let values: Vec<f64> = self.tensors[x.0].values.iter().map(|v| v.max(0.0)).collect();
        let shape = self.tensors[x.0].shape.clone();
        let rg = self.out_requires_grad(&[x.0]);
        Ok(self.push(values, shape, rg, Op::Relu { x: x.0 }))
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId> {
        let values: Vec<f64> = self.tensors[x.0].values.iter().map(|v| v.tanh()).collect();
        let shape = self.tensors[x.0].shape.clone();
        let rg = self.out_requires_grad(&[x.0]);
        Ok(self.push(values, shape, rg, Op::Tanh { x: x.0 }))
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = rows_cols(&self.tensors[x.0].shape)?;
        let xv = &self.tensors[x.0].values;
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                values[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                values[i * c + j] /= sum;
            }
        }
        let shape = self.tensors[x.0].shape.clone();
        let rg = self.out_requires_grad(&[x.0]);
        Ok(self.push(values, shape, rg, Op::Softmax { x: x.0 }))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = rows_cols(&self.tensors[x.0].shape)?;
        let xv = &self.tensors[x.0].values;
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..c {
                values[i * c + j] = row[j] - lse;
            }
        }
        let shape = self.tensors[x.0].shape.clone();
        let rg = self.out_requires_grad(&[x.0]);
        Ok(self.push(values, shape, rg, Op::LogSoftmax { x: x.0 }))
    }

    /// Row-wise layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> Result<TensorId> {
        let (r, c) = rows_cols(&self.tensors[x.0].shape)?;
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let s = &self.tensors[id.0].shape;
            if s.len() != 1 || s[0] != c {
                return Err(Error::contract(format!(
                    "layer_norm: {name} shape {:?} does not match row width {c}",
                    s
                )));
            }
        }
        let xv = &self.tensors[x.0].values;
        let gv = &self.tensors[gamma.0].values;
        let bv = &self.tensors[beta.0].values;
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                values[i * c + j] = (row[j] - mean) * inv_std * gv[j] + bv[j];
            }
        }
        let shape = self.tensors[x.0].shape.clone();
        let rg = self.out_requires_grad(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            values,
            shape,
            rg,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps },
        ))
    }

    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let v = self.tensors[x.0].values.iter().sum();
        let rg = self.out_requires_grad(&[x.0]);
        Ok(self.push(vec![v], vec![1], rg, Op::Sum { x: x.0 }))
    }

    pub fn mean(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.tensors[x.0].numel();
        if n == 0 {
            return Err(Error::contract("mean: empty tensor".to_string()));
        }
        let v = self.tensors[x.0].values.iter().sum::<f64>() / n as f64;
        let rg = self.out_requires_grad(&[x.0]);
        Ok(self.push(vec![v], vec![1], rg, Op::Mean { x: x.0 }))
    }

    /// Mean over rows: `[r, c] -> [c]`.
    pub fn mean_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = rows_cols(&self.tensors[x.0].shape)?;
        if r == 0 {
            return Err(Error::contract("mean_rows: zero rows".to_string()));
        }
        let xv = &self.tensors[x.0].values;
        let mut values = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                values[j] += xv[i * c + j];
            }
        }
        for v in &mut values {
            *v /= r as f64;
        }
        let rg = self.out_requires_grad(&[x.0]);
        Ok(self.push(values, vec![c], rg, Op::MeanRows { x: x.0 }))
    }

    /// Euclidean norm of all elements. The subgradient at the zero vector is zero.
    pub fn l2_norm(&mut self, x: TensorId) -> Result<TensorId> {
        let v = self.tensors[x.0].values.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rg = self.out_requires_grad(&[x.0]);
        Ok(self.push(vec![v], vec![1], rg, Op::L2Norm { x: x.0 }))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "mse")?;
        let n = self.tensors[a.0].numel();
        if n == 0 {
            return Err(Error::contract("mse: empty tensors".to_string()));
        }
        let v = self.tensors[a.0]
            .values
            .iter()
            .zip(&self.tensors[b.0].values)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n as f64;
        let rg = self.out_requires_grad(&[a.0, b.0]);
        Ok(self.push(vec![v], vec![1], rg, Op::Mse { a: a.0, b: b.0 }))
    }

    /// Cross-entropy of a rank-1 logit vector against a class index.
    pub fn cross_entropy(&mut self, logits: TensorId, label: usize) -> Result<TensorId> {
        let s = &self.tensors[logits.0].shape;
        if s.len() != 1 {
            return Err(Error::contract(format!(
                "cross_entropy: expected rank-1 logits, got shape {s:?}"
            )));
        }
        let c = s[0];
        if label >= c {
            return Err(Error::contract(format!(
                "cross_entropy: label {label} out of range for {c} classes"
            )));
        }
        let row = &self.tensors[logits.0].values;
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let v = lse - row[label];
        let rg = self.out_requires_grad(&[logits.0]);
        Ok(self.push(vec![v], vec![1], rg, Op::CrossEntropy { logits: logits.0, label }))
    }

    /// Mean cross-entropy over the rows of a `[n, classes]` logit matrix.
    pub fn cross_entropy_rows(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let s = &self.tensors[logits.0].shape;
        if s.len() != 2 {
            return Err(Error::contract(format!(
                "cross_entropy_rows: expected rank-2 logits, got shape {s:?}"
            )));
        }
        let (r, c) = (s[0], s[1]);
        if labels.len() != r {
            return Err(Error::contract(format!(
                "cross_entropy_rows: {r} rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::contract(format!(
                "cross_entropy_rows: label {bad} out of range for {c} classes"
            )));
        }
        let xv = &self.tensors[logits.0].values;
        let mut total = 0.0;
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[labels[i]];
        }
        let v = total / r as f64;
        let rg = self.out_requires_grad(&[logits.0]);
        Ok(self.push(
            vec![v],
            vec![1],
            rg,
            Op::CrossEntropyRows { logits: logits.0, labels: labels.to_vec() },
        ))
    }

    /// Gradient reversal: identity forward, upstream gradient scaled by `-lambda`.
    pub fn grad_reverse(&mut self, x: TensorId, lambda: f64) -> Result<TensorId> {
        let values = self.tensors[x.0].values.clone();
        let shape = self.tensors[x.0].shape.clone();
        let rg = self.out_requires_grad(&[x.0]);
        Ok(self.push(values, shape, rg, Op::GradReverse { x: x.0, lambda }))
    }

    /// Gather rows of a rank-2 tensor; gradients scatter-add back.
    pub fn gather_rows(&mut self, src: TensorId, ids: &[usize]) -> Result<TensorId> {
        let s = &self.tensors[src.0].shape;
        if s.len() != 2 {
            return Err(Error::contract(format!(
                "gather_rows: expected rank-2 source, got shape {s:?}"
            )));
        }
        let (n, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::contract(format!(
                "gather_rows: id {bad} out of range for table of {n} rows"
            )));
        }
        let xv = &self.tensors[src.0].values;
        let mut values = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            values.extend_from_slice(&xv[i * d..(i + 1) * d]);
        }
        let rg = self.out_requires_grad(&[src.0]);
        Ok(self.push(
            values,
            vec![ids.len(), d],
            rg,
            Op::GatherRows { src: src.0, ids: ids.to_vec() },
        ))
    }

    /// View a contiguous range of a rank-1 tensor as a new tensor of `shape`.
    pub fn slice_flat(&mut self, src: TensorId, offset: usize, shape: Vec<usize>) -> Result<TensorId> {
        let s = &self.tensors[src.0].shape;
        if s.len() != 1 {
            return Err(Error::contract(format!(
                "slice_flat: expected rank-1 source, got shape {s:?}"
            )));
        }
        let numel = shape_numel(&shape);
        if offset + numel > s[0] {
            return Err(Error::contract(format!(
                "slice_flat: range {offset}..{} exceeds source length {}",
                offset + numel,
                s[0]
            )));
        }
        let values = self.tensors[src.0].values[offset..offset + numel].to_vec();
        let rg = self.out_requires_grad(&[src.0]);
        Ok(self.push(values, shape, rg, Op::SliceFlat { src: src.0, offset }))
    }

    /// Select a contiguous block of columns from a rank-2 tensor.
    pub fn slice_cols(&mut self, x: TensorId, start: usize, width: usize) -> Result<TensorId> {
        let s = &self.tensors[x.0].shape;
        if s.len() != 2 {
            return Err(Error::contract(format!(
                "slice_cols: expected rank-2 tensor, got shape {s:?}"
            )));
        }
        let (r, c) = (s[0], s[1]);
        if start + width > c {
            return Err(Error::contract(format!(
                "slice_cols: columns {start}..{} exceed width {c}",
                start + width
            )));
        }
        let xv = &self.tensors[x.0].values;
        let mut values = Vec::with_capacity(r * width);
        for i in 0..r {
            values.extend_from_slice(&xv[i * c + start..i * c + start + width]);
        }
        let rg = self.out_requires_grad(&[x.0]);
        Ok(self.push(
            values,
            vec![r, width],
            rg,
            Op::SliceCols { x: x.0, start, width },
        ))
    }

    /// Stack rank-2 tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows: empty part list".to_string()));
        }
        let first = &self.tensors[parts[0].0].shape;
        if first.len() != 2 {
            return Err(Error::contract(format!(
                "concat_rows: expected rank-2 parts, got shape {first:?}"
            )));
        }
        let c = first[1];
        let mut rows = 0;
        for p in parts {
            let s = &self.tensors[p.0].shape;
            if s.len() != 2 || s[1] != c {
                return Err(Error::contract(format!(
                    "concat_rows: shape mismatch {first:?} vs {s:?}"
                )));
            }
            rows += s[0];
        }
        let mut values = Vec::with_capacity(rows * c);
        for p in parts {
            values.extend_from_slice(&self.tensors[p.0].values);
        }
        let idxs: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.out_requires_grad(&idxs);
        Ok(self.push(values, vec![rows, c], rg, Op::ConcatRows { parts: idxs }))
    }

    /// Concatenate rank-2 tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols: empty part list".to_string()));
        }
        let first = &self.tensors[parts[0].0].shape;
        if first.len() != 2 {
            return Err(Error::contract(format!(
                "concat_cols: expected rank-2 parts, got shape {first:?}"
            )));
        }
        let r = first[0];
        let mut width = 0;
        for p in parts {
            let s = &self.tensors[p.0].shape;
            if s.len() != 2 || s[0] != r {
                return Err(Error::contract(format!(
                    "concat_cols: shape mismatch {first:?} vs {s:?}"
                )));
            }
            width += s[1];
        }
        let mut values = vec![0.0; r * width];
        let mut col = 0;
        for p in parts {
            let s = &self.tensors[p.0].shape;
            let w = s[1];
            let pv = &self.tensors[p.0].values;
            for i in 0..r {
                values[i * width + col..i * width + col + w]
                    .copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            col += w;
        }
        let idxs: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.out_requires_grad(&idxs);
        Ok(self.push(values, vec![r, width], rg, Op::ConcatCols { parts: idxs }))
    }

    /// Build a `[len, len]` bias matrix from row `head` of a `[heads, 2w+1]`
    /// table: entry (i, j) is the bucket for `clamp(j - i, -w, w)`.
    pub fn rel_bias_matrix(&mut self, table: TensorId, head: usize, len: usize) -> Result<TensorId> {
        let s = &self.tensors[table.0].shape;
        if s.len() != 2 || s[1] % 2 == 0 {
            return Err(Error::contract(format!(
                "rel_bias_matrix: expected [heads, 2w+1] table, got shape {s:?}"
            )));
        }
        if head >= s[0] {
            return Err(Error::contract(format!(
                "rel_bias_matrix: head {head} out of range for {} heads",
                s[0]
            )));
        }
        let cols = s[1];
        let w = (cols - 1) / 2;
        let row = &self.tensors[table.0].values[head * cols..(head + 1) * cols];
        let mut values = vec![0.0; len * len];
        for i in 0..len {
            for j in 0..len {
                let rel = (j as isize - i as isize).clamp(-(w as isize), w as isize);
                values[i * len + j] = row[(rel + w as isize) as usize];
            }
        }
        let rg = self.out_requires_grad(&[table.0]);
        Ok(self.push(
            values,
            vec![len, len],
            rg,
            Op::RelBias { table: table.0, head, len },
        ))
    }

    /// Repeat row i of `x` `durations[i]` times, in order.
    pub fn repeat_rows(&mut self, x: TensorId, durations: &[usize]) -> Result<TensorId> {
        let s = &self.tensors[x.0].shape;
        if s.len() != 2 {
            return Err(Error::contract(format!(
                "repeat_rows: expected rank-2 tensor, got shape {s:?}"
            )));
        }
        let (r, c) = (s[0], s[1]);
        if durations.len() != r {
            return Err(Error::contract(format!(
                "repeat_rows: {r} rows but {} durations",
                durations.len()
            )));
        }
        if durations.iter().any(|&d| d == 0) {
            return Err(Error::contract("repeat_rows: zero duration".to_string()));
        }
        let total: usize = durations.iter().sum();
        let xv = &self.tensors[x.0].values;
        let mut values = Vec::with_capacity(total * c);
        for (i, &d) in durations.iter().enumerate() {
            for _ in 0..d {
                values.extend_from_slice(&xv[i * c..(i + 1) * c]);
            }
        }
        let rg = self.out_requires_grad(&[x.0]);
        Ok(self.push(
            values,
            vec![total, c],
            rg,
            Op::RepeatRows { x: x.0, durations: durations.to_vec() },
        ))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if shape_numel(&shape) != self.tensors[x.0].numel() {
            return Err(Error::contract(format!(
                "reshape: shape mismatch {:?} vs {:?}",
                self.tensors[x.0].shape, shape
            )));
        }
        let values = self.tensors[x.0].values.clone();
        let rg = self.out_requires_grad(&[x.0]);
        Ok(self.push(values, shape, rg, Op::Reshape { x: x.0 }))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Populate gradients of every `requires_grad` tensor with dLoss/dTensor.
    ///
    /// Gradients are zeroed at the start of each call; repeated calls do not
    /// accumulate. Tensors the loss does not depend on end with a zero grad.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let li = self.check(loss)?;
        if self.tensors[li].numel() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.tensors[li].shape
            )));
        }
        for (i, op) in self.ops.iter().enumerate() {
            if op.inputs().into_iter().any(|j| j >= i) {
                return Err(Error::CorruptTape(format!(
                    "node {i} references an input defined at or after it"
                )));
            }
        }
        for t in &mut self.tensors {
            t.grad = None;
        }

        let n = self.tensors.len();
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); n];
        grads[li] = vec![1.0];

        for i in (0..n).rev() {
            if grads[i].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            if self.tensors[i].requires_grad {
                self.tensors[i].grad = Some(g.clone());
            }
            self.accumulate_inputs(i, &g, &mut grads);
        }

        for t in &mut self.tensors {
            if t.requires_grad && t.grad.is_none() {
                t.grad = Some(vec![0.0; t.numel()]);
            }
        }
        Ok(())
    }

    fn accumulate_inputs(&self, i: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        fn acc(grads: &mut [Vec<f64>], idx: usize, numel: usize) -> &mut [f64] {
            if grads[idx].is_empty() {
                grads[idx] = vec![0.0; numel];
            }
            &mut grads[idx]
        }

        let op = self.ops[i].clone();
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                let da = acc(grads, a, g.len());
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
                let db = acc(grads, b, g.len());
                for (d, gv) in db.iter_mut().zip(g) {
                    *d += gv;
                }
            }
            Op::AddRow { x, v } => {
                let (r, c) = rows_cols(&self.tensors[x].shape).unwrap();
                let dx = acc(grads, x, r * c);
                for (d, gv) in dx.iter_mut().zip(g) {
                    *d += gv;
                }
                let dv = acc(grads, v, c);
                for i in 0..r {
                    for j in 0..c {
                        dv[j] += g[i * c + j];
                    }
                }
            }
            Op::AddAt { x, s, index } => {
                let dx = acc(grads, x, g.len());
                for (d, gv) in dx.iter_mut().zip(g) {
                    *d += gv;
                }
                let ds = acc(grads, s, 1);
                ds[0] += g[index];
            }
            Op::Mul { a, b } => {
                let bv = &self.tensors[b].values;
                let da = acc(grads, a, g.len());
                for j in 0..g.len() {
                    da[j] += g[j] * bv[j];
                }
                let av = &self.tensors[a].values;
                let db = acc(grads, b, g.len());
                for j in 0..g.len() {
                    db[j] += g[j] * av[j];
                }
            }
            Op::Scale { x, c } => {
                let dx = acc(grads, x, g.len());
                for j in 0..g.len() {
                    dx[j] += g[j] * c;
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = {
                    let s = &self.tensors[a].shape;
                    (s[0], s[1])
                };
                let nn = self.tensors[b].shape[1];
                let av = &self.tensors[a].values;
                let bv = &self.tensors[b].values;
                // dA = g @ B^T
                let da = acc(grads, a, m * k);
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..nn {
                            s += g[i * nn + j] * bv[p * nn + j];
                        }
                        da[i * k + p] += s;
                    }
                }
                // dB = A^T @ g
                let db = acc(grads, b, k * nn);
                for p in 0..k {
                    for i in 0..m {
                        let aip = av[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for j in 0..nn {
                            db[p * nn + j] += aip * g[i * nn + j];
                        }
                    }
                }
            }
            Op::Transpose { x } => {
                let s = &self.tensors[x].shape;
                let (r, c) = (s[0], s[1]);
                let dx = acc(grads, x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Exp { x } => {
                let yv = &self.tensors[i].values;
                let dx = acc(grads, x, g.len());
                for j in 0..g.len() {
                    dx[j] += g[j] * yv[j];
                }
            }
            Op::Log { x } => {
                let xv = &self.tensors[x].values;
                let dx = acc(grads, x, g.len());
                for j in 0..g.len() {
                    dx[j] += g[j] / xv[j];
                }
            }
            Op::Relu { x } => {
                let xv = &self.tensors[x].values;
                let dx = acc(grads, x, g.len());
                for j in 0..g.len() {
                    if xv[j] > 0.0 {
                        dx[j] += g[j];
                    }
                }
            }
            Op::Tanh { x } => {
                let yv = &self.tensors[i].values;
                let dx = acc(grads, x, g.len());
                for j in 0..g.len() {
                    dx[j] += g[j] * (1.0 - yv[j] * yv[j]);
                }
            }
            Op::Softmax { x } => {
                let (r, c) = rows_cols(&self.tensors[i].shape).unwrap();
                let yv = &self.tensors[i].values;
                let dx = acc(grads, x, r * c);
                for row in 0..r {
                    let y = &yv[row * c..(row + 1) * c];
                    let gg = &g[row * c..(row + 1) * c];
                    let dot: f64 = y.iter().zip(gg).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[row * c + j] += y[j] * (gg[j] - dot);
                    }
                }
            }
            Op::LogSoftmax { x } => {
                let (r, c) = rows_cols(&self.tensors[i].shape).unwrap();
                let yv = &self.tensors[i].values;
                let dx = acc(grads, x, r * c);
                for row in 0..r {
                    let gg = &g[row * c..(row + 1) * c];
                    let gsum: f64 = gg.iter().sum();
                    for j in 0..c {
                        let p = yv[row * c + j].exp();
                        dx[row * c + j] += gg[j] - p * gsum;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (r, c) = rows_cols(&self.tensors[x].shape).unwrap();
                let xv = self.tensors[x].values.clone();
                let gv = self.tensors[gamma].values.clone();
                {
                    let dbeta = acc(grads, beta, c);
                    for row in 0..r {
                        for j in 0..c {
                            dbeta[j] += g[row * c + j];
                        }
                    }
                }
                {
                    let dgamma = acc(grads, gamma, c);
                    for row in 0..r {
                        let xrow = &xv[row * c..(row + 1) * c];
                        let mean = xrow.iter().sum::<f64>() / c as f64;
                        let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        for j in 0..c {
                            dgamma[j] += g[row * c + j] * (xrow[j] - mean) * inv_std;
                        }
                    }
                }
                let dx = acc(grads, x, r * c);
                for row in 0..r {
                    let xrow = &xv[row * c..(row + 1) * c];
                    let grow = &g[row * c..(row + 1) * c];
                    let mean = xrow.iter().sum::<f64>() / c as f64;
                    let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let mut dxhat = vec![0.0; c];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..c {
                        let xhat = (xrow[j] - mean) * inv_std;
                        dxhat[j] = grow[j] * gv[j];
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat;
                    }
                    for j in 0..c {
                        let xhat = (xrow[j] - mean) * inv_std;
                        dx[row * c + j] += inv_std
                            * (dxhat[j] - sum_dxhat / c as f64 - xhat * sum_dxhat_xhat / c as f64);
                    }
                }
            }
            Op::Sum { x } => {
                let numel = self.tensors[x].numel();
                let dx = acc(grads, x, numel);
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }
            Op::Mean { x } => {
                let numel = self.tensors[x].numel();
                let dx = acc(grads, x, numel);
                let s = g[0] / numel as f64;
                for d in dx.iter_mut() {
                    *d += s;
                }
            }
            Op::MeanRows { x } => {
                let (r, c) = rows_cols(&self.tensors[x].shape).unwrap();
                let dx = acc(grads, x, r * c);
                for row in 0..r {
                    for j in 0..c {
                        dx[row * c + j] += g[j] / r as f64;
                    }
                }
            }
            Op::L2Norm { x } => {
                let norm = self.tensors[i].values[0];
                if norm > 0.0 {
                    let xv = &self.tensors[x].values;
                    let dx = acc(grads, x, xv.len());
                    for j in 0..xv.len() {
                        dx[j] += g[0] * xv[j] / norm;
                    }
                } else {
                    acc(grads, x, self.tensors[x].numel());
                }
            }
            Op::Mse { a, b } => {
                let numel = self.tensors[a].numel();
                let av = self.tensors[a].values.clone();
                let bv = self.tensors[b].values.clone();
                let scale = 2.0 * g[0] / numel as f64;
                {
                    let da = acc(grads, a, numel);
                    for j in 0..numel {
                        da[j] += scale * (av[j] - bv[j]);
                    }
                }
                let db = acc(grads, b, numel);
                for j in 0..numel {
                    db[j] -= scale * (av[j] - bv[j]);
                }
            }
            Op::CrossEntropy { logits, label } => {
                let row = &self.tensors[logits].values;
                let c = row.len();
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = row.iter().map(|v| (v - m).exp()).sum();
                let dl = acc(grads, logits, c);
                for j in 0..c {
                    let p = (row[j] - m).exp() / denom;
                    dl[j] += g[0] * (p - if j == label { 1.0 } else { 0.0 });
                }
            }
            Op::CrossEntropyRows { logits, ref labels } => {
                let s = &self.tensors[logits].shape;
                let (r, c) = (s[0], s[1]);
                let xv = self.tensors[logits].values.clone();
                let dl = acc(grads, logits, r * c);
                for row in 0..r {
                    let xr = &xv[row * c..(row + 1) * c];
                    let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = xr.iter().map(|v| (v - m).exp()).sum();
                    for j in 0..c {
                        let p = (xr[j] - m).exp() / denom;
                        dl[row * c + j] +=
                            g[0] / r as f64 * (p - if j == labels[row] { 1.0 } else { 0.0 });
                    }
                }
            }
            Op::GradReverse { x, lambda } => {
                let dx = acc(grads, x, g.len());
                for j in 0..g.len() {
                    dx[j] -= lambda * g[j];
                }
            }
            Op::GatherRows { src, ref ids } => {
                let d = self.tensors[src].shape[1];
                let numel = self.tensors[src].numel();
                let ds = acc(grads, src, numel);
                for (out_row, &src_row) in ids.iter().enumerate() {
                    for j in 0..d {
                        ds[src_row * d + j] += g[out_row * d + j];
                    }
                }
            }
            Op::SliceFlat { src, offset } => {
                let numel = self.tensors[src].numel();
                let ds = acc(grads, src, numel);
                for (j, gv) in g.iter().enumerate() {
                    ds[offset + j] += gv;
                }
            }
            Op::SliceCols { x, start, width } => {
                let s = &self.tensors[x].shape;
                let (r, c) = (s[0], s[1]);
                let dx = acc(grads, x, r * c);
                for row in 0..r {
                    for j in 0..width {
                        dx[row * c + start + j] += g[row * width + j];
                    }
                }
            }
            Op::ConcatRows { ref parts } => {
                let mut row0 = 0;
                for &p in parts {
                    let s = &self.tensors[p].shape;
                    let (pr, c) = (s[0], s[1]);
                    let dp = acc(grads, p, pr * c);
                    for j in 0..pr * c {
                        dp[j] += g[row0 * c + j];
                    }
                    row0 += pr;
                }
            }
            Op::ConcatCols { ref parts } => {
                let r = self.tensors[parts[0]].shape[0];
                let width: usize = parts.iter().map(|&p| self.tensors[p].shape[1]).sum();
                let mut col = 0;
                for &p in parts {
                    let w = self.tensors[p].shape[1];
                    let dp = acc(grads, p, r * w);
                    for row in 0..r {
                        for j in 0..w {
                            dp[row * w + j] += g[row * width + col + j];
                        }
                    }
                    col += w;
                }
            }
            Op::RelBias { table, head, len } => {
                let cols = self.tensors[table].shape[1];
                let w = (cols - 1) / 2;
                let numel = self.tensors[table].numel();
                let dt = acc(grads, table, numel);
                for i2 in 0..len {
                    for j in 0..len {
                        let rel = (j as isize - i2 as isize).clamp(-(w as isize), w as isize);
                        dt[head * cols + (rel + w as isize) as usize] += g[i2 * len + j];
                    }
                }
            }
            Op::RepeatRows { x, ref durations } => {
                let c = self.tensors[x].shape[1];
                let numel = self.tensors[x].numel();
                let dx = acc(grads, x, numel);
                let mut out_row = 0;
                for (i2, &d) in durations.iter().enumerate() {
                    for _ in 0..d {
                        for j in 0..c {
                            dx[i2 * c + j] += g[out_row * c + j];
                        }
                        out_row += 1;
                    }
                }
            }
            Op::Reshape { x } => {
                let dx = acc(grads, x, g.len());
                for (d, gv) in dx.iter_mut().zip(g) {
                    *d += gv;
                }
            }
        }
    }

    /// Test hook: overwrite an op's recorded input index to simulate a
    /// corrupted tape.
    #[cfg(test)]
    pub(crate) fn corrupt_node_for_test(&mut self, node: usize) {
        if let Op::Add { a, .. } = &mut self.ops[node] {
            *a = node + 1;
        }
    }
}
