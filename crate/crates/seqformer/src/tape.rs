//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! append nodes and return lightweight [`Value`] handles; [`Tape::backward`]
//! replays the record in reverse, visiting each node once, and deposits the
//! resulting gradients into the [`Parameter`] leaves the pass started from.
//! One tape serves one training or inference step and is dropped afterwards.
//!
//! A tape built with [`Tape::training`] carries its own RNG and applies
//! dropout; a tape built with [`Tape::inference`] treats dropout as the
//! identity, so inference is deterministic.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{numel, Parameter, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

enum Op {
    /// Entry point of data. `source` is present for parameter leaves that
    /// receive gradients.
    Leaf { source: Option<Parameter> },
    Matmul { a: Value, b: Value },
    Transpose { a: Value },
    Add { a: Value, b: Value },
    Sub { a: Value, b: Value },
    MulScalar { a: Value, factor: f64 },
    Square { a: Value },
    Relu { a: Value },
    MeanAll { a: Value },
    /// Output rows were normalized after the additive mask was applied;
    /// fully masked rows are all-zero instead of NaN.
    SoftmaxLastDim { a: Value },
    /// y = x · weightᵀ + bias applied along the last dimension.
    Linear { x: Value, weight: Value, bias: Value },
    LayerNorm { x: Value, gain: Value, offset: Value, eps: f64 },
    /// Row lookup. `frozen_row`, when present, never receives gradient.
    Embed { table: Value, ids: Vec<usize>, frozen_row: Option<usize> },
    /// `mask` holds 0 or 1/(1-p) per element.
    Dropout { x: Value, mask: Vec<f64> },
    /// [L,B,d] -> [L,d] for one batch column.
    SelectBatch { x: Value, index: usize },
    /// B× [L,d] -> [L,B,d].
    StackBatch { parts: Vec<Value> },
    SliceFront { x: Value, start: usize },
    SliceLast { x: Value, start: usize },
    ConcatLast { parts: Vec<Value> },
    /// Mean of -log softmax(logits)[target] over rows with a target;
    /// `None` rows contribute neither value nor gradient.
    CrossEntropy { logits: Value, targets: Vec<Option<usize>> },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    leaves: HashMap<usize, Value>,
    dropout_rng: Option<ChaCha8Rng>,
    fully_masked_rows: usize,
}

impl Tape {
    /// Tape for an inference step: dropout is the identity.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            leaves: HashMap::new(),
            dropout_rng: None,
            fully_masked_rows: 0,
        }
    }

    /// Tape for a training step; `rng` drives dropout sampling.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Tape {
            dropout_rng: Some(rng),
            ..Tape::inference()
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    /// Number of softmax rows that were entirely masked so far.
    pub fn fully_masked_rows(&self) -> usize {
        self.fully_masked_rows
    }

    pub fn data(&self, v: Value) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Value) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.data(v).to_vec()).expect("node shapes are valid")
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Value {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            data,
            shape,
            op,
            needs_grad,
        });
        Value(self.nodes.len() - 1)
    }

    /// Registers a parameter as a leaf. Registering the same parameter twice
    /// returns the original handle so all uses share one gradient slot.
    pub fn leaf(&mut self, p: &Parameter) -> Value {
        if let Some(&v) = self.leaves.get(&p.storage_id()) {
            return v;
        }
        let t = p.borrow();
        let needs_grad = t.requires_grad();
        let data = t.data().to_vec();
        let shape = t.shape().to_vec();
        drop(t);
        let source = needs_grad.then(|| p.clone());
        let v = self.push(data, shape, Op::Leaf { source }, needs_grad);
        self.leaves.insert(p.storage_id(), v);
        v
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Value> {
        if numel(&shape) != data.len() {
            return Err(Error::contract(
                "Tape::constant",
                format!("{} values for shape {:?}", numel(&shape), shape),
                format!("{} values", data.len()),
            ));
        }
        Ok(self.push(data, shape, Op::Leaf { source: None }, false))
    }

    pub fn constant_from(&mut self, t: &Tensor) -> Value {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            Op::Leaf { source: None },
            false,
        )
    }

    // ── Arithmetic ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::DimMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        let needs = self.any_needs_grad(&[a, b]);
        Ok(self.push(data, vec![m, n], Op::Matmul { a, b }, needs))
    }

    pub fn transpose(&mut self, a: Value) -> Result<Value> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::contract(
                "transpose",
                "rank-2 tensor",
                format!("shape {s:?}"),
            ));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.data(a);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let needs = self.needs_grad(a);
        Ok(self.push(data, vec![n, m], Op::Transpose { a }, needs))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.zip_same_shape(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.zip_same_shape(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    fn zip_same_shape(
        &mut self,
        a: Value,
        b: Value,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(Value, Value) -> Op,
    ) -> Result<Value> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::DimMismatch {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.any_needs_grad(&[a, b]);
        Ok(self.push(data, shape, op(a, b), needs))
    }

    pub fn mul_scalar(&mut self, a: Value, factor: f64) -> Value {
        let data: Vec<f64> = self.data(a).iter().map(|&x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs_grad(a);
        self.push(data, shape, Op::MulScalar { a, factor }, needs)
    }

    pub fn square(&mut self, a: Value) -> Value {
        let data: Vec<f64> = self.data(a).iter().map(|&x| x * x).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs_grad(a);
        self.push(data, shape, Op::Square { a }, needs)
    }

    pub fn relu(&mut self, a: Value) -> Value {
        let data: Vec<f64> = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs_grad(a);
        self.push(data, shape, Op::Relu { a }, needs)
    }

    pub fn mean_all(&mut self, a: Value) -> Value {
        let n = self.data(a).len() as f64;
        let mean = self.data(a).iter().sum::<f64>() / n;
        let needs = self.needs_grad(a);
        self.push(vec![mean], vec![1], Op::MeanAll { a }, needs)
    }

    // ── Structured operations ───────────────────────────────────────────

    /// Softmax over the last dimension with an optional additive mask.
    ///
    /// The mask must match the last two dimensions of `a` (for rank-3 input
    /// it is reused across the leading dimension). Masked positions carry
    /// `-inf` and end up with weight exactly 0. A row whose entries are all
    /// `-inf` yields zeros and bumps the diagnostics counter.
    pub fn softmax_lastdim(&mut self, a: Value, mask: Option<&[f64]>) -> Result<Value> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().expect("rank >= 1");
        let rows_per_block = if shape.len() >= 2 {
            shape[shape.len() - 2]
        } else {
            1
        };
        if let Some(m) = mask {
            if m.len() != rows_per_block * cols {
                return Err(Error::DimMismatch {
                    op: "softmax_lastdim mask",
                    lhs: shape.clone(),
                    rhs: vec![m.len()],
                });
            }
        }
        let src = self.data(a).to_vec();
        let mut data = vec![0.0; src.len()];
        let block = rows_per_block * cols;
        for (r, row) in src.chunks(cols).enumerate() {
            let mask_row = mask.map(|m| {
                let in_block = (r * cols) % block;
                &m[in_block..in_block + cols]
            });
            let masked: Vec<f64> = match mask_row {
                Some(mr) => row.iter().zip(mr).map(|(&x, &v)| x + v).collect(),
                None => row.to_vec(),
            };
            let max = masked.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                self.fully_masked_rows += 1;
                continue; // row stays all-zero
            }
            let out = &mut data[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for (o, &x) in out.iter_mut().zip(&masked) {
                *o = (x - max).exp();
                sum += *o;
            }
            out.iter_mut().for_each(|o| *o /= sum);
        }
        let needs = self.needs_grad(a);
        Ok(self.push(data, shape, Op::SoftmaxLastDim { a }, needs))
    }

    /// Affine map along the last dimension: y = x · weightᵀ + bias.
    pub fn linear(&mut self, x: Value, weight: Value, bias: Value) -> Result<Value> {
        let (sx, sw, sb) = (self.shape(x), self.shape(weight), self.shape(bias));
        let in_dim = *sx.last().expect("rank >= 1");
        if sw.len() != 2 || sw[1] != in_dim {
            return Err(Error::DimMismatch {
                op: "linear",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let out_dim = sw[0];
        if sb.len() != 1 || sb[0] != out_dim {
            return Err(Error::DimMismatch {
                op: "linear bias",
                lhs: sw.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let rows = numel(sx) / in_dim;
        let mut out_shape = sx.to_vec();
        *out_shape.last_mut().unwrap() = out_dim;

        let (xd, wd, bd) = (self.data(x), self.data(weight), self.data(bias));
        let mut data = vec![0.0; rows * out_dim];
        for r in 0..rows {
            let xr = &xd[r * in_dim..(r + 1) * in_dim];
            let yr = &mut data[r * out_dim..(r + 1) * out_dim];
            for (o, y) in yr.iter_mut().enumerate() {
                let wr = &wd[o * in_dim..(o + 1) * in_dim];
                *y = bd[o] + dot(xr, wr);
            }
        }
        let needs = self.any_needs_grad(&[x, weight, bias]);
        Ok(self.push(data, out_shape, Op::Linear { x, weight, bias }, needs))
    }

    /// Normalizes over the last dimension with biased variance, then applies
    /// the learned affine transform.
    pub fn layer_norm(&mut self, x: Value, gain: Value, offset: Value, eps: f64) -> Result<Value> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().expect("rank >= 1");
        if d == 0 {
            return Err(Error::contract(
                "layer_norm",
                "non-empty feature dimension",
                "0",
            ));
        }
        let (sg, so) = (self.shape(gain), self.shape(offset));
        if sg != [d] || so != [d] {
            return Err(Error::DimMismatch {
                op: "layer_norm",
                lhs: sx,
                rhs: sg.to_vec(),
            });
        }
        let (xd, gd, od) = (self.data(x), self.data(gain), self.data(offset));
        let mut data = vec![0.0; xd.len()];
        for (r, row) in xd.chunks(d).enumerate() {
            let (mean, inv_sigma) = row_stats(row, eps);
            let out = &mut data[r * d..(r + 1) * d];
            for i in 0..d {
                out[i] = (row[i] - mean) * inv_sigma * gd[i] + od[i];
            }
        }
        let needs = self.any_needs_grad(&[x, gain, offset]);
        Ok(self.push(
            data,
            self.shape(x).to_vec(),
            Op::LayerNorm { x, gain, offset, eps },
            needs,
        ))
    }

    /// Looks up `ids` (row-major `[seq, batch]`) in an embedding table.
    pub fn embed(
        &mut self,
        table: Value,
        ids: &[usize],
        seq_len: usize,
        batch: usize,
        frozen_row: Option<usize>,
    ) -> Result<Value> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::contract(
                "embed",
                "rank-2 table",
                format!("shape {st:?}"),
            ));
        }
        let (vocab, d) = (st[0], st[1]);
        if ids.len() != seq_len * batch {
            return Err(Error::contract(
                "embed",
                format!("{} ids", seq_len * batch),
                format!("{} ids", ids.len()),
            ));
        }
        for (pos, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(Error::Vocabulary { id, vocab, pos });
            }
        }
        let td = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let needs = self.needs_grad(table);
        Ok(self.push(
            data,
            vec![seq_len, batch, d],
            Op::Embed {
                table,
                ids: ids.to_vec(),
                frozen_row,
            },
            needs,
        ))
    }

    /// Zeroes each element with probability `p` and rescales survivors by
    /// 1/(1-p). On an inference tape this is the identity.
    pub fn dropout(&mut self, x: Value, p: f64) -> Value {
        debug_assert!((0.0..1.0).contains(&p));
        if self.dropout_rng.is_none() || p == 0.0 {
            return x;
        }
        let keep_scale = 1.0 / (1.0 - p);
        let rng = self.dropout_rng.as_mut().unwrap();
        let mask: Vec<f64> = (0..self.nodes[x.0].data.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep_scale })
            .collect();
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs_grad(x);
        self.push(data, shape, Op::Dropout { x, mask }, needs)
    }

    /// Extracts batch column `index` of a `[L,B,d]` value as `[L,d]`.
    pub fn select_batch(&mut self, x: Value, index: usize) -> Result<Value> {
        let s = self.shape(x);
        if s.len() != 3 || index >= s[1] {
            return Err(Error::contract(
                "select_batch",
                "rank-3 input and index < batch",
                format!("shape {s:?}, index {index}"),
            ));
        }
        let (l, b, d) = (s[0], s[1], s[2]);
        let src = self.data(x);
        let mut data = Vec::with_capacity(l * d);
        for i in 0..l {
            let start = (i * b + index) * d;
            data.extend_from_slice(&src[start..start + d]);
        }
        let needs = self.needs_grad(x);
        Ok(self.push(data, vec![l, d], Op::SelectBatch { x, index }, needs))
    }

    /// Stacks B values of shape `[L,d]` into `[L,B,d]`.
    pub fn stack_batch(&mut self, parts: &[Value]) -> Result<Value> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("stack_batch", "at least one part", "empty"))?;
        let s = self.shape(first).to_vec();
        if s.len() != 2 {
            return Err(Error::contract(
                "stack_batch",
                "rank-2 parts",
                format!("shape {s:?}"),
            ));
        }
        for &p in parts {
            if self.shape(p) != s {
                return Err(Error::DimMismatch {
                    op: "stack_batch",
                    lhs: s.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (l, d) = (s[0], s[1]);
        let b = parts.len();
        let mut data = vec![0.0; l * b * d];
        for (j, &p) in parts.iter().enumerate() {
            let pd = self.data(p);
            for i in 0..l {
                let dst = (i * b + j) * d;
                data[dst..dst + d].copy_from_slice(&pd[i * d..(i + 1) * d]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs_grad(p));
        Ok(self.push(
            data,
            vec![l, b, d],
            Op::StackBatch {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Contiguous slice along the first dimension.
    pub fn slice_front(&mut self, x: Value, start: usize, len: usize) -> Result<Value> {
        let s = self.shape(x).to_vec();
        if start + len > s[0] {
            return Err(Error::contract(
                "slice_front",
                format!("start+len <= {}", s[0]),
                format!("{}..{}", start, start + len),
            ));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.data(x)[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        let needs = self.needs_grad(x);
        Ok(self.push(data, shape, Op::SliceFront { x, start }, needs))
    }

    /// Slice along the last dimension.
    pub fn slice_last(&mut self, x: Value, start: usize, len: usize) -> Result<Value> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        if start + len > d {
            return Err(Error::contract(
                "slice_last",
                format!("start+len <= {d}"),
                format!("{}..{}", start, start + len),
            ));
        }
        let rows = numel(&s) / d;
        let src = self.data(x);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * d + start..r * d + start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let needs = self.needs_grad(x);
        Ok(self.push(data, shape, Op::SliceLast { x, start }, needs))
    }

    /// Concatenates along the last dimension.
    pub fn concat_last(&mut self, parts: &[Value]) -> Result<Value> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_last", "at least one part", "empty"))?;
        let first_shape = self.shape(first).to_vec();
        let lead = first_shape[..first_shape.len() - 1].to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::DimMismatch {
                    op: "concat_last",
                    lhs: first_shape,
                    rhs: s.to_vec(),
                });
            }
            total += *s.last().unwrap();
        }
        let rows: usize = lead.iter().product();
        let mut data = vec![0.0; rows * total];
        let mut col = 0;
        for &p in parts {
            let d = *self.shape(p).last().unwrap();
            let pd = self.data(p);
            for r in 0..rows {
                data[r * total + col..r * total + col + d]
                    .copy_from_slice(&pd[r * d..(r + 1) * d]);
            }
            col += d;
        }
        let mut shape = lead;
        shape.push(total);
        let needs = parts.iter().any(|&p| self.needs_grad(p));
        Ok(self.push(
            data,
            shape,
            Op::ConcatLast {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Mean cross entropy between logit rows and integer targets. Rows whose
    /// target is `None` (e.g. padding) contribute nothing; a batch where all
    /// rows are ignored yields 0 with zero gradients.
    pub fn cross_entropy(&mut self, logits: Value, targets: &[Option<usize>]) -> Result<Value> {
        let s = self.shape(logits).to_vec();
        let v = *s.last().unwrap();
        let rows = numel(&s) / v;
        if targets.len() != rows {
            return Err(Error::contract(
                "cross_entropy",
                format!("{rows} targets"),
                format!("{} targets", targets.len()),
            ));
        }
        for (pos, t) in targets.iter().enumerate() {
            if let Some(id) = t {
                if *id >= v {
                    return Err(Error::Vocabulary {
                        id: *id,
                        vocab: v,
                        pos,
                    });
                }
            }
        }
        let ld = self.data(logits);
        let mut total = 0.0;
        let mut counted = 0usize;
        for (r, t) in targets.iter().enumerate() {
            let Some(id) = t else { continue };
            let row = &ld[r * v..(r + 1) * v];
            total += log_sum_exp(row) - row[*id];
            counted += 1;
        }
        let loss = if counted == 0 { 0.0 } else { total / counted as f64 };
        let needs = self.needs_grad(logits);
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    fn needs_grad(&self, v: Value) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn any_needs_grad(&self, vs: &[Value]) -> bool {
        vs.iter().any(|&v| self.needs_grad(v))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Propagates d(loss)/d(leaf) into every reachable parameter leaf.
    /// `loss` must be scalar. Leaf gradients accumulate additively into the
    /// underlying tensors, so calling this twice doubles them.
    pub fn backward(&self, loss: Value) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::contract(
                "backward",
                "scalar loss",
                format!("shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Value, contribution: Vec<f64>) {
        if !self.needs_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing
                .iter_mut()
                .zip(&contribution)
                .for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf { source } => {
                if let Some(p) = source {
                    p.accumulate_grad(g);
                }
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let bd = self.data(*b);
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gv = g[i * n + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            da[i * k + p] += gv * bd[p * n + j];
                        }
                    }
                }
                let ad = self.data(*a);
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = ad[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += av * g[i * n + j];
                        }
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Transpose { a } => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::MulScalar { a, factor } => {
                self.accumulate(grads, *a, g.iter().map(|&v| v * factor).collect());
            }
            Op::Square { a } => {
                let da: Vec<f64> = self
                    .data(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| 2.0 * x * gv)
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::Relu { a } => {
                let da: Vec<f64> = self
                    .data(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::MeanAll { a } => {
                let n = self.data(*a).len();
                self.accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::SoftmaxLastDim { a } => {
                let cols = *node.shape.last().unwrap();
                let y = &node.data;
                let mut da = vec![0.0; y.len()];
                for r in 0..y.len() / cols {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot_gy: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for i in 0..cols {
                        da[r * cols + i] = yr[i] * (gr[i] - dot_gy);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Linear { x, weight, bias } => {
                let in_dim = *self.shape(*x).last().unwrap();
                let out_dim = self.shape(*weight)[0];
                let rows = self.data(*x).len() / in_dim;
                let (xd, wd) = (self.data(*x), self.data(*weight));
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; wd.len()];
                let mut db = vec![0.0; out_dim];
                for r in 0..rows {
                    let gr = &g[r * out_dim..(r + 1) * out_dim];
                    let xr = &xd[r * in_dim..(r + 1) * in_dim];
                    for o in 0..out_dim {
                        let gv = gr[o];
                        if gv == 0.0 {
                            continue;
                        }
                        db[o] += gv;
                        let wr = &wd[o * in_dim..(o + 1) * in_dim];
                        for i in 0..in_dim {
                            dx[r * in_dim + i] += gv * wr[i];
                            dw[o * in_dim + i] += gv * xr[i];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *weight, dw);
                self.accumulate(grads, *bias, db);
            }
            Op::LayerNorm { x, gain, offset, eps } => {
                let d = self.shape(*gain)[0];
                let (xd, gd) = (self.data(*x), self.data(*gain));
                let mut dx = vec![0.0; xd.len()];
                let mut dgain = vec![0.0; d];
                let mut doffset = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                for (r, row) in xd.chunks(d).enumerate() {
                    let (mean, inv_sigma) = row_stats(row, *eps);
                    let gr = &g[r * d..(r + 1) * d];
                    let mut mean_gh = 0.0;
                    let mut mean_gh_xhat = 0.0;
                    for i in 0..d {
                        xhat[i] = (row[i] - mean) * inv_sigma;
                        let gh = gr[i] * gd[i];
                        mean_gh += gh;
                        mean_gh_xhat += gh * xhat[i];
                        dgain[i] += gr[i] * xhat[i];
                        doffset[i] += gr[i];
                    }
                    mean_gh /= d as f64;
                    mean_gh_xhat /= d as f64;
                    for i in 0..d {
                        let gh = gr[i] * gd[i];
                        dx[r * d + i] = (gh - mean_gh - xhat[i] * mean_gh_xhat) * inv_sigma;
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain);
                self.accumulate(grads, *offset, doffset);
            }
            Op::Embed { table, ids, frozen_row } => {
                let d = self.shape(*table)[1];
                let mut dt = vec![0.0; self.data(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    if Some(id) == *frozen_row {
                        continue;
                    }
                    for i in 0..d {
                        dt[id * d + i] += g[r * d + i];
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::Dropout { x, mask } => {
                let dx: Vec<f64> = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::SelectBatch { x, index } => {
                let s = self.shape(*x);
                let (l, b, d) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; l * b * d];
                for i in 0..l {
                    let start = (i * b + index) * d;
                    dx[start..start + d].copy_from_slice(&g[i * d..(i + 1) * d]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::StackBatch { parts } => {
                let b = parts.len();
                let s = self.shape(parts[0]);
                let (l, d) = (s[0], s[1]);
                for (j, &p) in parts.iter().enumerate() {
                    let mut dp = vec![0.0; l * d];
                    for i in 0..l {
                        let src = (i * b + j) * d;
                        dp[i * d..(i + 1) * d].copy_from_slice(&g[src..src + d]);
                    }
                    self.accumulate(grads, p, dp);
                }
            }
            Op::SliceFront { x, start } => {
                let inner: usize = self.shape(*x)[1..].iter().product();
                let mut dx = vec![0.0; self.data(*x).len()];
                dx[start * inner..start * inner + g.len()].copy_from_slice(g);
                self.accumulate(grads, *x, dx);
            }
            Op::SliceLast { x, start } => {
                let d = *self.shape(*x).last().unwrap();
                let len = *node.shape.last().unwrap();
                let rows = self.data(*x).len() / d;
                let mut dx = vec![0.0; self.data(*x).len()];
                for r in 0..rows {
                    dx[r * d + start..r * d + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatLast { parts } => {
                let total = *node.shape.last().unwrap();
                let rows = node.data.len() / total;
                let mut col = 0;
                for &p in parts {
                    let d = *self.shape(p).last().unwrap();
                    let mut dp = vec![0.0; rows * d];
                    for r in 0..rows {
                        dp[r * d..(r + 1) * d]
                            .copy_from_slice(&g[r * total + col..r * total + col + d]);
                    }
                    self.accumulate(grads, p, dp);
                    col += d;
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let v = *self.shape(*logits).last().unwrap();
                let counted = targets.iter().flatten().count();
                let mut dl = vec![0.0; self.data(*logits).len()];
                if counted > 0 {
                    let scale = g[0] / counted as f64;
                    let ld = self.data(*logits);
                    for (r, t) in targets.iter().enumerate() {
                        let Some(id) = t else { continue };
                        let row = &ld[r * v..(r + 1) * v];
                        let lse = log_sum_exp(row);
                        for i in 0..v {
                            let p = (row[i] - lse).exp();
                            dl[r * v + i] = scale * (p - if i == *id { 1.0 } else { 0.0 });
                        }
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
        }
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            let cr = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                cr[j] += av * br[j];
            }
        }
    }
    c
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use approx::assert_relative_eq;

    fn param(shape: Vec<usize>, data: Vec<f64>) -> Parameter {
        Parameter::new(Tensor::new(shape, data).unwrap())
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::inference();
        let i2 = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.data(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_projector_row() {
        let mut tape = Tape::inference();
        let p = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let m = tape.constant(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let out = tape.matmul(p, m).unwrap();
        assert_eq!(tape.data(out), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::inference();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut tape = Tape::inference();
        let x = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let y = tape.softmax_lastdim(x, None).unwrap();
        assert_eq!(tape.data(y), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_single_survivor() {
        let mut tape = Tape::inference();
        let x = tape.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let y = tape
            .softmax_lastdim(x, Some(&[0.0, f64::NEG_INFINITY]))
            .unwrap();
        assert_eq!(tape.data(y), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_reference_row() {
        let mut tape = Tape::inference();
        let x = tape.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = tape.softmax_lastdim(x, None).unwrap();
        let got = tape.data(y);
        for (g, want) in got.iter().zip([0.09003, 0.24473, 0.66524]) {
            assert_relative_eq!(*g, want, epsilon = 1e-5);
        }
    }

    #[test]
    fn softmax_fully_masked_row_is_zero_and_counted() {
        let mut tape = Tape::inference();
        let x = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mask = [f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0, 0.0];
        let y = tape.softmax_lastdim(x, Some(&mask)).unwrap();
        let d = tape.data(y);
        assert_eq!(&d[..2], &[0.0, 0.0]);
        assert!(d[2] > 0.0 && d[3] > 0.0);
        assert_eq!(tape.fully_masked_rows(), 1);
    }

    #[test]
    fn relu_sign_split() {
        let mut tape = Tape::inference();
        let x = tape.constant(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = tape.relu(x);
        assert_eq!(tape.data(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn mean_all_arithmetic_mean() {
        let mut tape = Tape::inference();
        let x = tape.constant(vec![2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let y = tape.mean_all(x);
        assert_eq!(tape.data(y), &[4.0]);
    }

    #[test]
    fn backward_of_leaf_is_one() {
        let p = param(vec![1], vec![3.0]);
        let mut tape = Tape::inference();
        let x = tape.leaf(&p);
        tape.backward(x).unwrap();
        assert_eq!(p.grad_vec().unwrap(), vec![1.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let p = param(vec![2], vec![1.0, 2.0]);
        let mut tape = Tape::inference();
        let x = tape.leaf(&p);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn two_backward_passes_double_the_gradient() {
        let p = param(vec![2], vec![1.0, 2.0]);
        let mut tape = Tape::inference();
        let x = tape.leaf(&p);
        let loss = tape.mean_all(x);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(p.grad_vec().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn closed_form_regression_gradient() {
        // loss = mean((w*x - y)^2); dloss/dw = 2*mean((w*x - y)*x)
        let xs = [1.0, 2.0, 3.0];
        let ys = [2.0, 4.0, 5.0];
        let w = param(vec![1, 1], vec![1.5]);
        let mut tape = Tape::inference();
        let wv = tape.leaf(&w);
        let x = tape.constant(vec![3, 1], xs.to_vec()).unwrap();
        let pred = tape.matmul(x, wv).unwrap();
        let y = tape.constant(vec![3, 1], ys.to_vec()).unwrap();
        let diff = tape.sub(pred, y).unwrap();
        let sq = tape.square(diff);
        let loss = tape.mean_all(sq);
        tape.backward(loss).unwrap();
        let expected: f64 =
            2.0 * xs.iter().zip(ys).map(|(&x, y)| (1.5 * x - y) * x).sum::<f64>() / 3.0;
        assert_relative_eq!(w.grad_vec().unwrap()[0], expected, epsilon = 1e-12);
    }

    #[test]
    fn same_parameter_used_twice_gets_both_contributions() {
        let p = param(vec![1], vec![2.0]);
        let mut tape = Tape::inference();
        let a = tape.leaf(&p);
        let b = tape.leaf(&p);
        let s = tape.add(a, b).unwrap(); // s = 2p, ds/dp = 2
        let loss = tape.mean_all(s);
        tape.backward(loss).unwrap();
        assert_eq!(p.grad_vec().unwrap(), vec![2.0]);
    }

    #[test]
    fn dropout_identity_on_inference_tape() {
        let mut tape = Tape::inference();
        let x = tape.constant(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = tape.dropout(x, 0.5);
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn cross_entropy_all_ignored_is_zero() {
        let p = param(vec![2, 4], vec![0.1; 8]);
        let mut tape = Tape::inference();
        let logits = tape.leaf(&p);
        let loss = tape.cross_entropy(logits, &[None, None]).unwrap();
        assert_eq!(tape.data(loss), &[0.0]);
        tape.backward(loss).unwrap();
        assert_eq!(p.grad_vec().unwrap(), vec![0.0; 8]);
    }
}
