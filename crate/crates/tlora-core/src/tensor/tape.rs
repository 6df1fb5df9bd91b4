//! Reverse-mode autodiff tape.
//!
//! Operations append nodes in topological order during the forward pass;
//! [`Tape::backward`] replays them in reverse, accumulating vector-Jacobian
//! products into every node that requires gradient. Leaves with
//! `requires_grad = false` never accumulate gradient and their values are
//! never mutated.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{matops, Tensor};

/// Index of a node on a [`Tape`].
pub type NodeId = usize;

/// Train/eval switch. Only dropout behaves differently between the two.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Epsilon inside the layer-norm variance square root.
pub const LN_EPS: f64 = 1e-5;

/// Additive bias for masked attention positions. Large enough that masked
/// scores underflow to exactly zero after max-subtracted softmax, small
/// enough that an all-masked row degrades to a uniform distribution instead
/// of NaN.
pub const MASK_BIAS: f64 = -1e30;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// out[m,n] = a[m,k] · b[k,n]
    Matmul { a: NodeId, b: NodeId },
    /// out[m,n] = a[m,k] · b[n,k]ᵀ
    MatmulNt { a: NodeId, b: NodeId },
    /// Per-batch 2-D matmul over 3-D operands.
    BatchedMatmul {
        a: NodeId,
        b: NodeId,
        transpose_b: bool,
    },
    /// Elementwise sum of equal shapes.
    Add { a: NodeId, b: NodeId },
    /// Row-broadcast bias: out[r,j] = a[r,j] + bias[j].
    AddBias { a: NodeId, bias: NodeId },
    /// Uniform scaling by a single-element tensor (the α gradient path).
    Scale { a: NodeId, s: NodeId },
    /// Uniform scaling by a compile-time constant (no gradient for c).
    ScaleConst { a: NodeId, c: f64 },
    /// GELU, tanh approximation.
    Gelu { a: NodeId },
    Softmax { a: NodeId, axis: usize },
    /// Normalization over the last axis with gain and bias vectors.
    LayerNorm {
        a: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    /// Row gather: out[i] = table[ids[i]].
    EmbeddingLookup { table: NodeId, ids: Vec<usize> },
    /// Inverted dropout; the pre-scaled mask is recorded for backward.
    Dropout { a: NodeId, mask: Vec<f64> },
    /// Mean negative log-softmax of the true class over the batch.
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
    /// Frobenius inner product: scalar Σᵢ aᵢ·bᵢ over equal shapes.
    FrobDot { a: NodeId, b: NodeId },
    /// [b*s, h*dh] -> [b*h, s, dh]
    SplitHeads {
        a: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
        head_dim: usize,
    },
    /// [b*h, s, dh] -> [b*s, h*dh]
    MergeHeads {
        a: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
        head_dim: usize,
    },
    /// out[i] = a[rows[i]] over 2-D rows.
    GatherRows { a: NodeId, rows: Vec<usize> },
}

/// Recorded computation graph. One tape per forward/backward pass.
pub struct Tape {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
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
            ops: Vec::new(),
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

    /// Put a tensor on the tape as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, mut t: Tensor) -> NodeId {
        let id = self.nodes.len();
        t.tape_id = Some(id);
        t.grad = None;
        self.nodes.push(t);
        self.ops.push(Op::Leaf);
        self.grads.push(None);
        id
    }

    /// Clone a tensor onto the tape as a leaf.
    pub fn leaf_from(&mut self, t: &Tensor) -> NodeId {
        self.leaf(t.clone())
    }

    /// Non-differentiable leaf built from raw data.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<NodeId> {
        Ok(self.leaf(Tensor::new(data, shape)?))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id]
    }

    /// Clone the value of a node off the tape.
    pub fn take_value(&self, id: NodeId) -> Tensor {
        let mut t = self.nodes[id].clone();
        t.tape_id = None;
        t
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        let t = &self.nodes[id];
        if t.numel() != 1 {
            return Err(Error::Usage(format!(
                "expected scalar node, got shape {:?}",
                t.shape
            )));
        }
        Ok(t.data[0])
    }

    /// Accumulated gradient of a node, available after [`Tape::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    /// Node ids of every softmax output on the tape (diagnostics).
    pub fn softmax_node_ids(&self) -> Vec<NodeId> {
        self.ops
            .iter()
            .enumerate()
            .filter_map(|(i, op)| matches!(op, Op::Softmax { .. }).then_some(i))
            .collect()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Tensor {
            shape,
            data,
            grad: None,
            requires_grad,
            tape_id: Some(id),
        });
        self.ops.push(op);
        self.grads.push(None);
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    // ── Forward operations ──────────────────────────────────────────────

    /// Standard matrix product `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matops::mm(&self.nodes[a].data, &self.nodes[b].data, m, k, n);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(data, vec![m, n], rg, Op::Matmul { a, b }))
    }

    /// `a[m,k] · b[n,k]ᵀ`: the linear-layer form with row-major weights.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let data = matops::mm_nt(&self.nodes[a].data, &self.nodes[b].data, m, k, n);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(data, vec![m, n], rg, Op::MatmulNt { a, b }))
    }

    /// Per-batch matmul over 3-D operands: `[bt,m,k] · [bt,k,n]`, or
    /// `[bt,m,k] · [bt,n,k]ᵀ` when `transpose_b`.
    pub fn batched_matmul(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let (sa, sb) = (
            self.nodes[a].shape.clone(),
            self.nodes[b].shape.clone(),
        );
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim("batched_matmul", &sa, &sb));
        }
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if k != kb {
            return Err(Error::dim("batched_matmul", &sa, &sb));
        }
        let mut data = vec![0.0; bt * m * n];
        for t in 0..bt {
            let av = &self.nodes[a].data[t * m * k..(t + 1) * m * k];
            let bv = &self.nodes[b].data[t * k * n..(t + 1) * k * n];
            let out = if transpose_b {
                matops::mm_nt(av, bv, m, k, n)
            } else {
                matops::mm(av, bv, m, k, n)
            };
            data[t * m * n..(t + 1) * m * n].copy_from_slice(&out);
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(data, vec![bt, m, n], rg, Op::BatchedMatmul { a, b, transpose_b }))
    }

    /// Elementwise sum. Equal shapes, or row-broadcast when `b` is a vector
    /// matching the last axis of `a` (the bias case).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (
            self.nodes[a].shape.clone(),
            self.nodes[b].shape.clone(),
        );
        if sa == sb {
            let data: Vec<f64> = self.nodes[a]
                .data
                .iter()
                .zip(&self.nodes[b].data)
                .map(|(x, y)| x + y)
                .collect();
            let rg = self.needs(a) || self.needs(b);
            return Ok(self.push(data, sa, rg, Op::Add { a, b }));
        }
        if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            let d = sb[0];
            let bias = &self.nodes[b].data;
            let data: Vec<f64> = self.nodes[a]
                .data
                .iter()
                .enumerate()
                .map(|(i, x)| x + bias[i % d])
                .collect();
            let rg = self.needs(a) || self.needs(b);
            return Ok(self.push(data, sa, rg, Op::AddBias { a, bias: b }));
        }
        Err(Error::dim("add", &sa, &sb))
    }

    /// Uniform scaling by a single-element tensor node.
    pub fn scale(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.nodes[s].numel() != 1 {
            return Err(Error::dim("scale", &self.nodes[a].shape, &self.nodes[s].shape));
        }
        let sv = self.nodes[s].data[0];
        let data: Vec<f64> = self.nodes[a].data.iter().map(|x| sv * x).collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.needs(a) || self.needs(s);
        Ok(self.push(data, shape, rg, Op::Scale { a, s }))
    }

    /// Uniform scaling by a constant.
    pub fn scale_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|x| c * x).collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.needs(a);
        Ok(self.push(data, shape, rg, Op::ScaleConst { a, c }))
    }

    /// GELU activation, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|&x| gelu(x)).collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.needs(a);
        Ok(self.push(data, shape, rg, Op::Gelu { a }))
    }

    /// Softmax along `axis`, numerically stabilized by max subtraction.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.nodes[a].shape.clone();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", &shape, &[axis]));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = &self.nodes[a].data;
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(src[at(j)]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    data[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    data[at(j)] /= sum;
                }
            }
        }
        let rg = self.needs(a);
        Ok(self.push(data, shape, rg, Op::Softmax { a, axis }))
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let shape = self.nodes[a].shape.clone();
        let d = *shape.last().ok_or_else(|| Error::dim("layer_norm", &shape, &[]))?;
        for (name, id) in [("gain", gain), ("bias", bias)] {
            let s = &self.nodes[id].shape;
            if s.len() != 1 || s[0] != d {
                let _ = name;
                return Err(Error::dim("layer_norm", &shape, s));
            }
        }
        let src = &self.nodes[a].data;
        let g = &self.nodes[gain].data;
        let b = &self.nodes[bias].data;
        let rows = src.len() / d;
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let rg = self.needs(a) || self.needs(gain) || self.needs(bias);
        Ok(self.push(data, shape, rg, Op::LayerNorm { a, gain, bias }))
    }

    /// Table lookup: `out[i] = table[ids[i]]`.
    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let s = self.nodes[table].shape.clone();
        if s.len() != 2 {
            return Err(Error::dim("embedding_lookup", &s, &[ids.len()]));
        }
        let (rows, d) = (s[0], s[1]);
        for (i, &id) in ids.iter().enumerate() {
            if id >= rows {
                return Err(Error::Data(format!(
                    "embedding id {id} out of range [0,{rows}) at position {i}"
                )));
            }
        }
        let src = &self.nodes[table].data;
        let mut data = vec![0.0; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.needs(table);
        Ok(self.push(
            data,
            vec![ids.len(), d],
            rg,
            Op::EmbeddingLookup { table, ids: ids.to_vec() },
        ))
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`, so eval mode is
    /// an exact identity (the node is returned unchanged). `p = 0` is also an
    /// identity and draws nothing from the generator.
    pub fn dropout(
        &mut self,
        a: NodeId,
        p: f64,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.nodes[a].numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.needs(a);
        Ok(self.push(data, shape, rg, Op::Dropout { a, mask }))
    }

    /// Mean negative log-softmax of the true class; scalar output.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.nodes[logits].shape.clone();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim("cross_entropy", &s, &[labels.len()]));
        }
        let (batch, classes) = (s[0], s[1]);
        for (i, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::Data(format!(
                    "label {l} out of range [0,{classes}) at index {i}"
                )));
            }
        }
        let src = &self.nodes[logits].data;
        let mut total = 0.0;
        for (b, &y) in labels.iter().enumerate() {
            let row = &src[b * classes..(b + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_sum: f64 = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total -= row[y] - max - log_sum;
        }
        let loss = total / batch as f64;
        let rg = self.needs(logits);
        Ok(self.push(
            vec![loss],
            vec![1],
            rg,
            Op::CrossEntropy { logits, labels: labels.to_vec() },
        ))
    }

    /// Frobenius inner product of two equal-shaped nodes; scalar output.
    pub fn frob_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa != sb {
            return Err(Error::dim("frob_dot", sa, sb));
        }
        let v = matops::dot(&self.nodes[a].data, &self.nodes[b].data);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(vec![v], vec![1], rg, Op::FrobDot { a, b }))
    }

    /// Rearrange `[batch*seq, heads*head_dim]` into `[batch*heads, seq, head_dim]`.
    pub fn split_heads(
        &mut self,
        a: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
        head_dim: usize,
    ) -> Result<NodeId> {
        let s = self.nodes[a].shape.clone();
        if s != [batch * seq, heads * head_dim] {
            return Err(Error::dim("split_heads", &s, &[batch * seq, heads * head_dim]));
        }
        let data = split_heads_perm(&self.nodes[a].data, batch, seq, heads, head_dim);
        let rg = self.needs(a);
        Ok(self.push(
            data,
            vec![batch * heads, seq, head_dim],
            rg,
            Op::SplitHeads { a, batch, seq, heads, head_dim },
        ))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(
        &mut self,
        a: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
        head_dim: usize,
    ) -> Result<NodeId> {
        let s = self.nodes[a].shape.clone();
        if s != [batch * heads, seq, head_dim] {
            return Err(Error::dim("merge_heads", &s, &[batch * heads, seq, head_dim]));
        }
        let data = merge_heads_perm(&self.nodes[a].data, batch, seq, heads, head_dim);
        let rg = self.needs(a);
        Ok(self.push(
            data,
            vec![batch * seq, heads * head_dim],
            rg,
            Op::MergeHeads { a, batch, seq, heads, head_dim },
        ))
    }

    /// Select rows of a 2-D node: `out[i] = a[rows[i]]`.
    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        let s = self.nodes[a].shape.clone();
        if s.len() != 2 {
            return Err(Error::dim("gather_rows", &s, &[rows.len()]));
        }
        let (n, d) = (s[0], s[1]);
        for (i, &r) in rows.iter().enumerate() {
            if r >= n {
                return Err(Error::Data(format!(
                    "row index {r} out of range [0,{n}) at position {i}"
                )));
            }
        }
        let src = &self.nodes[a].data;
        let mut data = vec![0.0; rows.len() * d];
        for (i, &r) in rows.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(&src[r * d..(r + 1) * d]);
        }
        let rg = self.needs(a);
        Ok(self.push(data, vec![rows.len(), d], rg, Op::GatherRows { a, rows: rows.to_vec() }))
    }

    // ── Backward pass ───────────────────────────────────────────────────

    /// Accumulate gradients of `loss` into every node that requires grad.
    ///
    /// Parameters not on the loss path end up with an exactly-zero gradient.
    /// Calling backward twice on one tape is a usage error; build a fresh
    /// tape per step instead.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward already called on this tape; gradients would double-accumulate".into(),
            ));
        }
        if self.nodes[loss].numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].shape
            )));
        }
        self.backward_done = true;
        if self.nodes[loss].requires_grad {
            self.grads[loss] = Some(vec![1.0]);
            for i in (0..self.ops.len()).rev() {
                self.backward_node(i);
            }
        }
        // Materialize gradients on the tensors; untouched-but-required nodes
        // hold exact zeros.
        for i in 0..self.nodes.len() {
            if self.nodes[i].requires_grad {
                let g = self.grads[i]
                    .take()
                    .unwrap_or_else(|| vec![0.0; self.nodes[i].numel()]);
                self.nodes[i].grad = Some(g);
            }
        }
        Ok(())
    }

    fn backward_node(&mut self, i: NodeId) {
        if !self.nodes[i].requires_grad {
            return;
        }
        let gout = match self.grads[i].take() {
            Some(g) => g,
            None => return,
        };
        let op = self.ops[i].clone();
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let sa = &self.nodes[a].shape;
                let (m, k) = (sa[0], sa[1]);
                let n = self.nodes[b].shape[1];
                if self.needs(a) {
                    let da = matops::mm_nt(&gout, &self.nodes[b].data, m, n, k);
                    self.accum(a, &da);
                }
                if self.needs(b) {
                    let db = matops::mm_tn(&self.nodes[a].data, &gout, m, k, n);
                    self.accum(b, &db);
                }
            }
            Op::MatmulNt { a, b } => {
                let sa = &self.nodes[a].shape;
                let (m, k) = (sa[0], sa[1]);
                let n = self.nodes[b].shape[0];
                if self.needs(a) {
                    let da = matops::mm(&gout, &self.nodes[b].data, m, n, k);
                    self.accum(a, &da);
                }
                if self.needs(b) {
                    let db = matops::mm_tn(&gout, &self.nodes[a].data, m, n, k);
                    self.accum(b, &db);
                }
            }
            Op::BatchedMatmul { a, b, transpose_b } => {
                let sa = self.nodes[a].shape.clone();
                let sb = self.nodes[b].shape.clone();
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let n = if transpose_b { sb[1] } else { sb[2] };
                let mut da = vec![0.0; bt * m * k];
                let mut db = vec![0.0; sb.iter().product()];
                for t in 0..bt {
                    let g = &gout[t * m * n..(t + 1) * m * n];
                    let av = &self.nodes[a].data[t * m * k..(t + 1) * m * k];
                    if transpose_b {
                        // out = A·Bᵀ with B: [n,k]
                        let bv = &self.nodes[b].data[t * n * k..(t + 1) * n * k];
                        da[t * m * k..(t + 1) * m * k]
                            .copy_from_slice(&matops::mm(g, bv, m, n, k));
                        db[t * n * k..(t + 1) * n * k]
                            .copy_from_slice(&matops::mm_tn(g, av, m, n, k));
                    } else {
                        let bv = &self.nodes[b].data[t * k * n..(t + 1) * k * n];
                        da[t * m * k..(t + 1) * m * k]
                            .copy_from_slice(&matops::mm_nt(g, bv, m, n, k));
                        db[t * k * n..(t + 1) * k * n]
                            .copy_from_slice(&matops::mm_tn(av, g, m, k, n));
                    }
                }
                if self.needs(a) {
                    self.accum(a, &da);
                }
                if self.needs(b) {
                    self.accum(b, &db);
                }
            }
            Op::Add { a, b } => {
                if self.needs(a) {
                    self.accum(a, &gout);
                }
                if self.needs(b) {
                    self.accum(b, &gout);
                }
            }
            Op::AddBias { a, bias } => {
                if self.needs(a) {
                    self.accum(a, &gout);
                }
                if self.needs(bias) {
                    let d = self.nodes[bias].numel();
                    let mut dbias = vec![0.0; d];
                    for (i, g) in gout.iter().enumerate() {
                        dbias[i % d] += g;
                    }
                    self.accum(bias, &dbias);
                }
            }
            Op::Scale { a, s } => {
                let sv = self.nodes[s].data[0];
                if self.needs(a) {
                    let da: Vec<f64> = gout.iter().map(|g| sv * g).collect();
                    self.accum(a, &da);
                }
                if self.needs(s) {
                    let ds: f64 = self.nodes[a].data.iter().zip(&gout).map(|(x, g)| x * g).sum();
                    self.accum(s, &[ds]);
                }
            }
            Op::ScaleConst { a, c } => {
                if self.needs(a) {
                    let da: Vec<f64> = gout.iter().map(|g| c * g).collect();
                    self.accum(a, &da);
                }
            }
            Op::Gelu { a } => {
                if self.needs(a) {
                    let da: Vec<f64> = self.nodes[a]
                        .data
                        .iter()
                        .zip(&gout)
                        .map(|(&x, g)| g * gelu_grad(x))
                        .collect();
                    self.accum(a, &da);
                }
            }
            Op::Softmax { a, axis } => {
                if self.needs(a) {
                    let shape = &self.nodes[i].shape;
                    let (outer, len, inner) = axis_split(shape, axis);
                    let out = &self.nodes[i].data;
                    let mut da = vec![0.0; out.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + ii;
                            let mut dot = 0.0;
                            for j in 0..len {
                                dot += gout[at(j)] * out[at(j)];
                            }
                            for j in 0..len {
                                da[at(j)] = out[at(j)] * (gout[at(j)] - dot);
                            }
                        }
                    }
                    self.accum(a, &da);
                }
            }
            Op::LayerNorm { a, gain, bias } => {
                let d = *self.nodes[a].shape.last().unwrap();
                let rows = self.nodes[a].numel() / d;
                let src = &self.nodes[a].data;
                let g = &self.nodes[gain].data;
                let mut da = vec![0.0; src.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let row = &src[r * d..(r + 1) * d];
                    let gr = &gout[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var =
                        row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let mut dy_mean = 0.0;
                    let mut dyx_mean = 0.0;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        let dy = gr[j] * g[j];
                        dgain[j] += gr[j] * xhat;
                        dbias[j] += gr[j];
                        dy_mean += dy;
                        dyx_mean += dy * xhat;
                    }
                    dy_mean /= d as f64;
                    dyx_mean /= d as f64;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        let dy = gr[j] * g[j];
                        da[r * d + j] = inv * (dy - dy_mean - xhat * dyx_mean);
                    }
                }
                if self.needs(a) {
                    self.accum(a, &da);
                }
                if self.needs(gain) {
                    self.accum(gain, &dgain);
                }
                if self.needs(bias) {
                    self.accum(bias, &dbias);
                }
            }
            Op::EmbeddingLookup { table, ids } => {
                if self.needs(table) {
                    let d = self.nodes[table].shape[1];
                    let mut dt = vec![0.0; self.nodes[table].numel()];
                    for (i, &id) in ids.iter().enumerate() {
                        let row = &gout[i * d..(i + 1) * d];
                        for (slot, g) in dt[id * d..(id + 1) * d].iter_mut().zip(row) {
                            *slot += g;
                        }
                    }
                    self.accum(table, &dt);
                }
            }
            Op::Dropout { a, mask } => {
                if self.needs(a) {
                    let da: Vec<f64> = gout.iter().zip(&mask).map(|(g, m)| g * m).collect();
                    self.accum(a, &da);
                }
            }
            Op::CrossEntropy { logits, labels } => {
                if self.needs(logits) {
                    let classes = self.nodes[logits].shape[1];
                    let batch = labels.len();
                    let src = &self.nodes[logits].data;
                    let scale = gout[0] / batch as f64;
                    let mut dl = vec![0.0; src.len()];
                    for (b, &y) in labels.iter().enumerate() {
                        let row = &src[b * classes..(b + 1) * classes];
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for j in 0..classes {
                            let e = (row[j] - max).exp();
                            dl[b * classes + j] = e;
                            sum += e;
                        }
                        for j in 0..classes {
                            dl[b * classes + j] /= sum;
                        }
                        dl[b * classes + y] -= 1.0;
                        for j in 0..classes {
                            dl[b * classes + j] *= scale;
                        }
                    }
                    self.accum(logits, &dl);
                }
            }
            Op::FrobDot { a, b } => {
                let g = gout[0];
                if self.needs(a) {
                    let da: Vec<f64> = self.nodes[b].data.iter().map(|v| g * v).collect();
                    self.accum(a, &da);
                }
                if self.needs(b) {
                    let db: Vec<f64> = self.nodes[a].data.iter().map(|v| g * v).collect();
                    self.accum(b, &db);
                }
            }
            Op::SplitHeads { a, batch, seq, heads, head_dim } => {
                if self.needs(a) {
                    let da = merge_heads_perm(&gout, batch, seq, heads, head_dim);
                    self.accum(a, &da);
                }
            }
            Op::MergeHeads { a, batch, seq, heads, head_dim } => {
                if self.needs(a) {
                    let da = split_heads_perm(&gout, batch, seq, heads, head_dim);
                    self.accum(a, &da);
                }
            }
            Op::GatherRows { a, rows } => {
                if self.needs(a) {
                    let d = self.nodes[a].shape[1];
                    let mut da = vec![0.0; self.nodes[a].numel()];
                    for (i, &r) in rows.iter().enumerate() {
                        let row = &gout[i * d..(i + 1) * d];
                        for (slot, g) in da[r * d..(r + 1) * d].iter_mut().zip(row) {
                            *slot += g;
                        }
                    }
                    self.accum(a, &da);
                }
            }
        }
        self.grads[i] = Some(gout);
    }

    fn accum(&mut self, id: NodeId, contrib: &[f64]) {
        match &mut self.grads[id] {
            Some(g) => {
                for (slot, c) in g.iter_mut().zip(contrib) {
                    *slot += c;
                }
            }
            None => self.grads[id] = Some(contrib.to_vec()),
        }
    }
}

/// (outer, axis length, inner) strides for iterating one axis of a shape.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * du
}

fn split_heads_perm(src: &[f64], batch: usize, seq: usize, heads: usize, head_dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        for s in 0..seq {
            for h in 0..heads {
                let from = (b * seq + s) * heads * head_dim + h * head_dim;
                let to = ((b * heads + h) * seq + s) * head_dim;
                out[to..to + head_dim].copy_from_slice(&src[from..from + head_dim]);
            }
        }
    }
    out
}

fn merge_heads_perm(src: &[f64], batch: usize, seq: usize, heads: usize, head_dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        for s in 0..seq {
            for h in 0..heads {
                let from = ((b * heads + h) * seq + s) * head_dim;
                let to = (b * seq + s) * heads * head_dim + h * head_dim;
                out[to..to + head_dim].copy_from_slice(&src[from..from + head_dim]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::component_rng;

    fn leaf2(tape: &mut Tape, data: Vec<f64>, shape: Vec<usize>, rg: bool) -> NodeId {
        tape.leaf(Tensor::new(data, shape).unwrap().with_requires_grad(rg))
    }

    #[test]
    fn matmul_identity_case() {
        let mut tape = Tape::new();
        let eye = leaf2(&mut tape, vec![1.0, 0.0, 0.0, 1.0], vec![2, 2], false);
        let b = leaf2(&mut tape, vec![3.0, 4.0, 5.0, 6.0], vec![2, 2], false);
        let out = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.value(out).data, vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_scalar_product_grads() {
        // 1x1 case: [2]·[3] = [6], d(out)/d(a) = 3, d(out)/d(b) = 2.
        let mut tape = Tape::new();
        let a = leaf2(&mut tape, vec![2.0], vec![1, 1], true);
        let b = leaf2(&mut tape, vec![3.0], vec![1, 1], true);
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data, vec![6.0]);
        tape.backward(out).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[3.0]);
        assert_eq!(tape.grad(b).unwrap(), &[2.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = leaf2(&mut tape, vec![0.0; 6], vec![2, 3], false);
        let b = leaf2(&mut tape, vec![0.0; 4], vec![2, 2], false);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn add_identity_and_bias_broadcast() {
        let mut tape = Tape::new();
        let x = leaf2(&mut tape, vec![1.5, -2.0, 0.25, 7.0], vec![2, 2], false);
        let zero = leaf2(&mut tape, vec![0.0; 4], vec![2, 2], false);
        let out = tape.add(x, zero).unwrap();
        assert_eq!(tape.value(out).data, tape.value(x).data);

        let bias = leaf2(&mut tape, vec![10.0, 20.0], vec![2], true);
        let out2 = tape.add(x, bias).unwrap();
        assert_eq!(tape.value(out2).data, vec![11.5, 18.0, 10.25, 27.0]);

        let bad = leaf2(&mut tape, vec![0.0; 3], vec![3], false);
        assert!(tape.add(x, bad).is_err());
    }

    #[test]
    fn scale_identity_and_hand_gradient() {
        let mut tape = Tape::new();
        let x = leaf2(&mut tape, vec![1.0, 2.0, 3.0, 4.0], vec![2, 2], true);
        let one = leaf2(&mut tape, vec![1.0], vec![1], false);
        let out = tape.scale(x, one).unwrap();
        assert_eq!(tape.value(out).data, tape.value(x).data);

        // scale([[1,2],[3,4]], 2): under an all-ones upstream gradient,
        // ds = 1+2+3+4 = 10 and dx = s = 2 everywhere.
        let mut t2 = Tape::new();
        let x2 = leaf2(&mut t2, vec![1.0, 2.0, 3.0, 4.0], vec![2, 2], true);
        let s = leaf2(&mut t2, vec![2.0], vec![1], true);
        let out2 = t2.scale(x2, s).unwrap();
        assert_eq!(t2.value(out2).data, vec![2.0, 4.0, 6.0, 8.0]);
        let ones = leaf2(&mut t2, vec![1.0; 4], vec![2, 2], false);
        let total = t2.frob_dot(out2, ones).unwrap();
        t2.backward(total).unwrap();
        assert_eq!(t2.grad(s).unwrap(), &[10.0]);
        assert_eq!(t2.grad(x2).unwrap(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let mut tape = Tape::new();
        let x = leaf2(&mut tape, vec![0.0, 0.0, 0.0], vec![1, 3], false);
        let out = tape.softmax(x, 1).unwrap();
        for v in &tape.value(out).data {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_invalid_axis_is_dimension_error() {
        let mut tape = Tape::new();
        let x = leaf2(&mut tape, vec![0.0; 3], vec![1, 3], false);
        assert!(matches!(tape.softmax(x, 2), Err(Error::Dim { .. })));
    }

    #[test]
    fn softmax_rows_sum_to_one_on_random_inputs() {
        let mut rng = component_rng(11, "softmax-prop");
        for trial in 0..100 {
            let rows = 1 + (trial % 5);
            let cols = 2 + (trial % 7);
            let data = crate::rng::normal_vec(&mut rng, rows * cols, 3.0);
            let mut tape = Tape::new();
            let x = leaf2(&mut tape, data, vec![rows, cols], false);
            let out = tape.softmax(x, 1).unwrap();
            let v = &tape.value(out).data;
            for r in 0..rows {
                let sum: f64 = v[r * cols..(r + 1) * cols].iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
                assert!(v[r * cols..(r + 1) * cols].iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = leaf2(&mut tape, vec![5.0; 4], vec![1, 4], false);
        let g = leaf2(&mut tape, vec![1.0; 4], vec![4], false);
        let b = leaf2(&mut tape, vec![0.0; 4], vec![4], false);
        let out = tape.layer_norm(x, g, b).unwrap();
        for v in &tape.value(out).data {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn dropout_eval_is_identity_train_p0_is_identity() {
        let mut rng = component_rng(3, "dropout");
        let mut tape = Tape::new();
        let x = leaf2(&mut tape, vec![1.0, -2.0, 3.0], vec![3], false);
        let eval = tape.dropout(x, 0.9, Mode::Eval, &mut rng).unwrap();
        assert_eq!(eval, x);
        let p0 = tape.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(p0, x);
        assert!(tape.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_statistics_at_half_rate() {
        let n = 10_000;
        let mut rng = component_rng(17, "dropout-stats");
        let mut tape = Tape::new();
        let x = leaf2(&mut tape, vec![1.0; n], vec![n], false);
        let out = tape.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        let v = &tape.value(out).data;
        let zeroed = v.iter().filter(|&&e| e == 0.0).count() as f64 / n as f64;
        assert!((zeroed - 0.5).abs() < 0.02, "zeroed fraction {zeroed}");
        let mean = v.iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut tape = Tape::new();
        let l = leaf2(&mut tape, vec![0.0, 0.0], vec![1, 2], false);
        let loss = tape.cross_entropy(l, &[0]).unwrap();
        assert!((tape.scalar_value(loss).unwrap() - 2.0f64.ln()).abs() < 1e-12);

        let mut t2 = Tape::new();
        let l2 = leaf2(&mut t2, vec![1000.0, 0.0], vec![1, 2], false);
        let loss2 = t2.cross_entropy(l2, &[0]).unwrap();
        let v = t2.scalar_value(loss2).unwrap();
        assert!(v.is_finite() && v.abs() < 1e-12, "saturated loss {v}");
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let l = leaf2(&mut tape, vec![0.0; 4], vec![2, 2], false);
        let err = tape.cross_entropy(l, &[0, 2]).unwrap_err();
        assert!(err.to_string().contains("index 1"), "{err}");
    }

    #[test]
    fn backward_requires_scalar_and_runs_once() {
        let mut tape = Tape::new();
        let x = leaf2(&mut tape, vec![1.0, 2.0], vec![1, 2], true);
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));

        let mut t2 = Tape::new();
        let a = leaf2(&mut t2, vec![2.0], vec![1, 1], true);
        let b = leaf2(&mut t2, vec![3.0], vec![1, 1], false);
        let out = t2.matmul(a, b).unwrap();
        t2.backward(out).unwrap();
        assert!(matches!(t2.backward(out), Err(Error::Usage(_))));
    }

    #[test]
    fn unreached_parameter_gets_exact_zero_gradient() {
        let mut tape = Tape::new();
        let a = leaf2(&mut tape, vec![2.0], vec![1, 1], true);
        let unused = leaf2(&mut tape, vec![5.0], vec![1, 1], true);
        let b = leaf2(&mut tape, vec![3.0], vec![1, 1], false);
        let out = tape.matmul(a, b).unwrap();
        tape.backward(out).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0]);
    }

    #[test]
    fn frozen_leaves_accumulate_no_gradient_and_keep_bits() {
        let mut tape = Tape::new();
        let frozen = Tensor::new(vec![0.5, -0.25], vec![1, 2]).unwrap();
        let before = frozen.clone();
        let f = tape.leaf_from(&frozen);
        let w = leaf2(&mut tape, vec![1.0, 1.0], vec![1, 2], true);
        let sum = tape.add(f, w).unwrap();
        let ones = leaf2(&mut tape, vec![1.0, 1.0], vec![2, 1], false);
        let total = tape.matmul(sum, ones).unwrap();
        tape.backward(total).unwrap();
        assert!(tape.grad(f).is_none());
        assert!(tape.value(f).bits_eq(&before));
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn split_merge_heads_roundtrip() {
        let (b, s, h, dh) = (2, 3, 2, 2);
        let data: Vec<f64> = (0..b * s * h * dh).map(|i| i as f64).collect();
        let mut tape = Tape::new();
        let x = leaf2(&mut tape, data.clone(), vec![b * s, h * dh], false);
        let sp = tape.split_heads(x, b, s, h, dh).unwrap();
        let mg = tape.merge_heads(sp, b, s, h, dh).unwrap();
        assert_eq!(tape.value(mg).data, data);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || {
            let mut rng = component_rng(99, "det");
            let data = crate::rng::normal_vec(&mut rng, 12, 1.0);
            let mut tape = Tape::new();
            let x = leaf2(&mut tape, data, vec![3, 4], true);
            let g = leaf2(&mut tape, vec![1.0; 4], vec![4], false);
            let b = leaf2(&mut tape, vec![0.0; 4], vec![4], false);
            let ln = tape.layer_norm(x, g, b).unwrap();
            let sm = tape.softmax(ln, 1).unwrap();
            let loss = tape.cross_entropy(sm, &[0, 1, 2]).unwrap();
            tape.backward(loss).unwrap();
            (
                tape.value(loss).data.clone(),
                tape.grad(x).unwrap().to_vec(),
            )
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert!(l1.iter().zip(&l2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
