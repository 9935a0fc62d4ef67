use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, gemm, gemm_a_bt_acc, gemm_acc, gemm_at_b_acc};
use super::{as_matrix, axis_split, Tensor};
use crate::error::{Error, Result};

/// Guard used inside logarithms and divisions by probabilities.
pub const LOG_EPS: f32 = 1e-12;
const LAYER_NORM_EPS: f32 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// Running mean/variance kept by a batch-normalisation layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    /// Fraction of the previous running value kept on each update.
    pub momentum: f32,
    pub eps: f32,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
            momentum: 0.9,
            eps: 1e-5,
        }
    }
}

pub struct BatchNormOutput {
    pub out: Var,
    /// Updated running statistics (train mode only).
    pub updated: Option<RunningStats>,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBroadcast { x: Var, row: Var, period: usize, cols: usize },
    Scale { x: Var, factor: f32 },
    Sum { x: Var },
    Mean { x: Var },
    Gelu { x: Var },
    Relu { x: Var },
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, cols: usize, xhat: Vec<f32>, inv_std: Vec<f32> },
    BatchNorm { x: Var, gamma: Var, beta: Var, cols: usize, xhat: Vec<f32>, inv_std: Vec<f32>, train: bool },
    Dropout { x: Var, mask: Vec<f32> },
    CrossEntropy { logits: Var, probs: Vec<f32>, targets: Vec<usize>, weights: Vec<f32>, classes: usize },
    KlDiv { p: Var, q: Var, rows: usize },
    Mse { a: Var, b: Var },
    Attention { qkv: Var, batch: usize, tokens: usize, heads: usize, probs: Vec<f32> },
    PrependToken { x: Var, token: Var, batch: usize, per: usize, hidden: usize },
    GatherRows { x: Var, rows: Vec<usize>, cols: usize },
    StudentT { z: Var, mu: Var, alpha: f32, dim: usize, kernel: Vec<f32>, row_sums: Vec<f32>, dist: Vec<f32> },
}

struct Node<'p> {
    value: Cow<'p, [f32]>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// Record of executed operations; nodes are appended after their inputs, so
/// index order is a topological order.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    grads: Vec<Option<Vec<f32>>>,
    backward_done: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
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

    fn push(&mut self, value: Cow<'p, [f32]>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Vec<f32>, shape: Vec<usize>, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), shape, requires_grad, op)
    }

    /// Borrows a tensor as a leaf; gradients are tracked when the tensor
    /// requires them.
    pub fn leaf(&mut self, tensor: &'p Tensor) -> Var {
        self.push(
            Cow::Borrowed(tensor.data()),
            tensor.shape().to_vec(),
            tensor.requires_grad(),
            Op::Leaf,
        )
    }

    /// Borrows a tensor as a leaf that never receives a gradient.
    pub fn leaf_frozen(&mut self, tensor: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(tensor.data()), tensor.shape().to_vec(), false, Op::Leaf)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let shape = tensor.shape().to_vec();
        let requires_grad = tensor.requires_grad();
        self.push(Cow::Owned(tensor.into_data()), shape, requires_grad, Op::Leaf)
    }

    pub fn input(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        Ok(self.constant(Tensor::new(shape, data)?))
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.to_vec())
            .expect("tape nodes keep consistent shapes")
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Clears gradients so that `backward` may run again.
    pub fn reset(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            other => Err(Error::Shape(format!("{op} expects a matrix, got shape {other:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::DimensionMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul")?;
        let (k2, n) = self.mat(b, "matmul")?;
        if k != k2 {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = gemm(self.value(a), self.value(b), m, k, n);
        Ok(self.push_owned(out, vec![m, n], &[a, b], Op::MatMul { a, b, m, k, n }))
    }

    /// `x·w + b` for `x[rows, in]`, `w[in, out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_broadcast(y, b)
    }

    fn elementwise(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Vec<f32>> {
        self.same_shape(a, b, op)?;
        Ok(self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise(a, b, "add", |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push_owned(out, shape, &[a, b], Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise(a, b, "sub", |x, y| x - y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push_owned(out, shape, &[a, b], Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise(a, b, "mul", |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push_owned(out, shape, &[a, b], Op::Mul { a, b }))
    }

    /// Adds `row` (shape `[cols]` or `[period, cols]`) to every consecutive
    /// block of `period` rows of the matrix `x`.
    pub fn add_broadcast(&mut self, x: Var, row: Var) -> Result<Var> {
        let (rows, cols) = self.mat(x, "add_broadcast")?;
        let (period, rcols) = match self.shape(row) {
            [c] => (1, *c),
            [p, c] => (*p, *c),
            _ => (0, 0),
        };
        if rcols != cols || period == 0 || rows % period != 0 {
            return Err(Error::DimensionMismatch {
                op: "add_broadcast",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row);
        let mut out = self.value(x).to_vec();
        for (i, out_row) in out.chunks_mut(cols).enumerate() {
            let src = &r[(i % period) * cols..(i % period + 1) * cols];
            out_row.iter_mut().zip(src).for_each(|(o, s)| *o += s);
        }
        Ok(self.push_owned(out, vec![rows, cols], &[x, row], Op::AddBroadcast { x, row, period, cols }))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push_owned(out, shape, &[x], Op::Scale { x, factor })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().map(|&v| v as f64).sum();
        self.push_owned(vec![s as f32], vec![1], &[x], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s: f64 = self.value(x).iter().map(|&v| v as f64).sum();
        self.push_owned(vec![(s / n) as f32], vec![1], &[x], Op::Mean { x })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push_owned(out, shape, &[x], Op::Gelu { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push_owned(out, shape, &[x], Op::Relu { x })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        if self.value(x).iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN input to softmax".into()));
        }
        let (outer, n, inner) = axis_split(self.shape(x), axis)?;
        let mut out = self.value(x).to_vec();
        kernels::softmax_strided(&mut out, outer, n, inner);
        let shape = self.shape(x).to_vec();
        Ok(self.push_owned(out, shape, &[x], Op::Softmax { x, outer, n, inner }))
    }

    /// Row-wise layer normalisation with learnable scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.mat(x, "layer_norm")?;
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::DimensionMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0f32; rows * cols];
        let mut inv_std = vec![0.0f32; rows];
        let mut out = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / cols as f64;
            let istd = 1.0 / (var + LAYER_NORM_EPS as f64).sqrt();
            inv_std[r] = istd as f32;
            for c in 0..cols {
                let h = ((row[c] as f64 - mean) * istd) as f32;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        Ok(self.push_owned(
            out,
            vec![rows, cols],
            &[x, gamma, beta],
            Op::LayerNorm { x, gamma, beta, cols, xhat, inv_std },
        ))
    }

    /// Batch normalisation over the rows of `x[batch, features]`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &RunningStats,
        mode: Mode,
    ) -> Result<BatchNormOutput> {
        let (rows, cols) = self.mat(x, "batch_norm")?;
        if self.value(gamma).len() != cols || self.value(beta).len() != cols || stats.mean.len() != cols {
            return Err(Error::DimensionMismatch {
                op: "batch_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        if mode == Mode::Train && rows < 2 {
            return Err(Error::Config("batch normalisation in train mode needs a batch of at least 2".into()));
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0f32; rows * cols];
        let mut inv_std = vec![0.0f32; cols];
        let mut out = vec![0.0f32; rows * cols];
        let mut updated = None;
        match mode {
            Mode::Train => {
                let mut next = stats.clone();
                for c in 0..cols {
                    let mean = (0..rows).map(|r| xs[r * cols + c] as f64).sum::<f64>() / rows as f64;
                    let var = (0..rows).map(|r| (xs[r * cols + c] as f64 - mean).powi(2)).sum::<f64>() / rows as f64;
                    let istd = 1.0 / (var + stats.eps as f64).sqrt();
                    inv_std[c] = istd as f32;
                    for r in 0..rows {
                        xhat[r * cols + c] = ((xs[r * cols + c] as f64 - mean) * istd) as f32;
                    }
                    let unbiased = var * rows as f64 / (rows - 1) as f64;
                    let m = stats.momentum;
                    next.mean[c] = m * stats.mean[c] + (1.0 - m) * mean as f32;
                    next.var[c] = m * stats.var[c] + (1.0 - m) * unbiased as f32;
                }
                updated = Some(next);
            }
            Mode::Infer => {
                for c in 0..cols {
                    let istd = 1.0 / (stats.var[c] + stats.eps).sqrt();
                    inv_std[c] = istd;
                    for r in 0..rows {
                        xhat[r * cols + c] = (xs[r * cols + c] - stats.mean[c]) * istd;
                    }
                }
            }
        }
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = xhat[r * cols + c] * g[c] + b[c];
            }
        }
        let out = self.push_owned(
            out,
            vec![rows, cols],
            &[x, gamma, beta],
            Op::BatchNorm { x, gamma, beta, cols, xhat, inv_std, train: mode == Mode::Train },
        );
        Ok(BatchNormOutput { out, updated })
    }

    /// Inverted dropout: in train mode each element survives with
    /// probability `keep` and survivors are scaled by `1/keep`.
    pub fn dropout(&mut self, x: Var, keep: f32, mode: Mode, seed: u64) -> Result<Var> {
        let mask = dropout_mask(self.value(x).len(), keep, mode, seed)?;
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push_owned(out, shape, &[x], Op::Dropout { x, mask }))
    }

    /// Mean (optionally sample-weighted) categorical cross-entropy of
    /// `logits[batch, classes]` against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[f32]>) -> Result<Var> {
        let (batch, classes) = self.mat(logits, "cross_entropy")?;
        if targets.len() != batch {
            return Err(Error::Label(format!("{} targets for a batch of {batch}", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Label(format!("class index {bad} out of range for {classes} classes")));
        }
        let weights = match weights {
            Some(w) if w.len() != batch => {
                return Err(Error::Label(format!("{} weights for a batch of {batch}", w.len())))
            }
            Some(w) => w.to_vec(),
            None => vec![1.0; batch],
        };
        let mut probs = self.value(logits).to_vec();
        if probs.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN logits in cross_entropy".into()));
        }
        let mut loss = 0.0f64;
        for (i, row) in self.value(logits).chunks(classes).enumerate() {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
            loss += weights[i] as f64 * (lse - row[targets[i]] as f64);
        }
        kernels::softmax_rows(&mut probs, classes);
        let value = (loss / batch as f64) as f32;
        Ok(self.push_owned(
            vec![value],
            vec![1],
            &[logits],
            Op::CrossEntropy { logits, probs, targets: targets.to_vec(), weights, classes },
        ))
    }

    /// Cross-entropy against one-hot target rows.
    pub fn cross_entropy_onehot(&mut self, logits: Var, onehot: &Tensor) -> Result<Var> {
        let (rows, cols) = as_matrix(onehot, "cross_entropy")?;
        if [rows, cols] != self.shape(logits) {
            return Err(Error::DimensionMismatch {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: onehot.shape().to_vec(),
            });
        }
        let mut targets = Vec::with_capacity(rows);
        for (i, row) in onehot.data().chunks(cols).enumerate() {
            let ones: Vec<usize> = row.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(j, _)| j).collect();
            if ones.len() != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Label(format!("target row {i} is not one-hot")));
            }
            targets.push(ones[0]);
        }
        self.cross_entropy(logits, &targets, None)
    }

    /// `KL(p‖q)` summed over each row and averaged over rows.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape(p, q, "kl_divergence")?;
        let rows = match self.shape(p) {
            [r, _] => *r,
            [_] => 1,
            other => return Err(Error::Shape(format!("kl_divergence expects rows, got {other:?}"))),
        };
        let value = kl_sum(self.value(p), self.value(q)) / rows as f64;
        Ok(self.push_owned(vec![value as f32], vec![1], &[p, q], Op::KlDiv { p, q, rows }))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = self.value(a).len() as f64;
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| ((x - y) as f64).powi(2))
            .sum();
        Ok(self.push_owned(vec![(s / n) as f32], vec![1], &[a, b], Op::Mse { a, b }))
    }

    /// Multi-head scaled dot-product self-attention over packed projections.
    ///
    /// `qkv` is `[batch·tokens, 3·hidden]` with query, key and value blocks
    /// side by side; head `h` owns columns `h·d..(h+1)·d` of each block. Returns
    /// the concatenated head outputs `[batch·tokens, hidden]` and the attention
    /// probabilities laid out as `[batch, heads, tokens, tokens]`.
    pub fn attention(&mut self, qkv: Var, batch: usize, tokens: usize, heads: usize) -> Result<(Var, Vec<f32>)> {
        let (rows, width) = self.mat(qkv, "attention")?;
        if rows != batch * tokens || width % 3 != 0 || (width / 3) % heads != 0 {
            return Err(Error::Shape(format!(
                "attention over {batch}x{tokens} tokens with {heads} heads cannot use qkv of shape {:?}",
                self.shape(qkv)
            )));
        }
        let hidden = width / 3;
        let dh = hidden / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let src = self.value(qkv);
        let mut out = vec![0.0f32; rows * hidden];
        let mut probs = vec![0.0f32; batch * heads * tokens * tokens];
        for b in 0..batch {
            for h in 0..heads {
                let [q, k, v] = head_slices(src, b, h, tokens, hidden, dh);
                let p = &mut probs[(b * heads + h) * tokens * tokens..(b * heads + h + 1) * tokens * tokens];
                gemm_a_bt_acc(&q, &k, p, tokens, dh, tokens);
                p.iter_mut().for_each(|s| *s *= scale);
                kernels::softmax_rows(p, tokens);
                let o = gemm(p, &v, tokens, tokens, dh);
                for t in 0..tokens {
                    let dst = (b * tokens + t) * hidden + h * dh;
                    out[dst..dst + dh].copy_from_slice(&o[t * dh..(t + 1) * dh]);
                }
            }
        }
        let op = Op::Attention { qkv, batch, tokens, heads, probs: probs.clone() };
        Ok((self.push_owned(out, vec![rows, hidden], &[qkv], op), probs))
    }

    /// Inserts `token[1, hidden]` before each group of `per` rows of `x`.
    pub fn prepend_token(&mut self, x: Var, token: Var, batch: usize) -> Result<Var> {
        let (rows, hidden) = self.mat(x, "prepend_token")?;
        if batch == 0 || rows % batch != 0 || self.value(token).len() != hidden {
            return Err(Error::DimensionMismatch {
                op: "prepend_token",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(token).to_vec(),
            });
        }
        let per = rows / batch;
        let xs = self.value(x);
        let tok = self.value(token);
        let mut out = Vec::with_capacity((rows + batch) * hidden);
        for b in 0..batch {
            out.extend_from_slice(tok);
            out.extend_from_slice(&xs[b * per * hidden..(b + 1) * per * hidden]);
        }
        Ok(self.push_owned(
            out,
            vec![rows + batch, hidden],
            &[x, token],
            Op::PrependToken { x, token, batch, per, hidden },
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = self.mat(x, "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Shape(format!("row {bad} out of range for {n} rows")));
        }
        let xs = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(&xs[r * cols..(r + 1) * cols]);
        }
        Ok(self.push_owned(
            out,
            vec![rows.len(), cols],
            &[x],
            Op::GatherRows { x, rows: rows.to_vec(), cols },
        ))
    }

    /// Student's-t soft assignment of points `z[n, d]` to centroids `mu[k, d]`:
    /// `q_ij ∝ (1 + ‖z_i − μ_j‖²/α)^(−(α+1)/2)`, rows normalised.
    pub fn student_t(&mut self, z: Var, mu: Var, alpha: f32) -> Result<Var> {
        let (n, dim) = self.mat(z, "student_t")?;
        let (k, dim2) = self.mat(mu, "student_t")?;
        if dim != dim2 {
            return Err(Error::DimensionMismatch {
                op: "student_t",
                lhs: self.shape(z).to_vec(),
                rhs: self.shape(mu).to_vec(),
            });
        }
        let (zs, ms) = (self.value(z), self.value(mu));
        let expo = (alpha as f64 + 1.0) / 2.0;
        let mut dist = vec![0.0f32; n * k];
        let mut kernel = vec![0.0f32; n * k];
        let mut row_sums = vec![0.0f32; n];
        let mut q = vec![0.0f32; n * k];
        for i in 0..n {
            let zi = &zs[i * dim..(i + 1) * dim];
            let mut s = 0.0f64;
            for j in 0..k {
                let d = kernels::sq_dist(zi, &ms[j * dim..(j + 1) * dim]);
                let kv = (1.0 + d as f64 / alpha as f64).powf(-expo);
                dist[i * k + j] = d;
                kernel[i * k + j] = kv as f32;
                s += kv;
            }
            row_sums[i] = s as f32;
            for j in 0..k {
                q[i * k + j] = (kernel[i * k + j] as f64 / s) as f32;
            }
        }
        Ok(self.push_owned(
            q,
            vec![n, k],
            &[z, mu],
            Op::StudentT { z, mu, alpha, dim, kernel, row_sums, dist },
        ))
    }

    /// Populates gradients of `loss` with respect to every tracked ancestor.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract("backward already ran on this tape; call reset first".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Some(g) = grads[i].take() {
                self.propagate(i, &g, &mut grads);
                grads[i] = Some(g);
            }
        }
        // Untracked nodes never keep a gradient.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad && g.is_some() {
                *g = None;
            }
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<f32>>], v: Var) -> Option<&'g mut Vec<f32>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn propagate(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = self.buf(grads, a) {
                    gemm_a_bt_acc(g, self.value(b), ga, m, n, k);
                }
                if let Some(gb) = self.buf(grads, b) {
                    gemm_at_b_acc(self.value(a), g, gb, m, k, n);
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(gv) = self.buf(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::Sub { a, b } => {
                if let Some(ga) = self.buf(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.buf(grads, b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = self.buf(grads, a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.buf(grads, b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            &Op::AddBroadcast { x, row, period, cols } => {
                if let Some(gx) = self.buf(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(gr) = self.buf(grads, row) {
                    for (i, grow) in g.chunks(cols).enumerate() {
                        let dst = &mut gr[(i % period) * cols..(i % period + 1) * cols];
                        dst.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                    }
                }
            }
            &Op::Scale { x, factor } => {
                if let Some(gx) = self.buf(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += factor * b);
                }
            }
            &Op::Sum { x } => {
                if let Some(gx) = self.buf(grads, x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            &Op::Mean { x } => {
                if let Some(gx) = self.buf(grads, x) {
                    let s = g[0] / gx.len() as f32;
                    gx.iter_mut().for_each(|a| *a += s);
                }
            }
            &Op::Gelu { x } => {
                let xv = self.value(x);
                if let Some(gx) = self.buf(grads, x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * kernels::gelu_grad(xv[i]);
                    }
                }
            }
            &Op::Relu { x } => {
                let xv = self.value(x);
                if let Some(gx) = self.buf(grads, x) {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            &Op::Softmax { x, outer, n, inner } => {
                let y = &node.value;
                if let Some(gx) = self.buf(grads, x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let dot: f32 = (0..n).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                            for j in 0..n {
                                let at = base + j * inner;
                                gx[at] += y[at] * (g[at] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, cols, xhat, inv_std } => {
                let cols = *cols;
                let gam = self.value(*gamma);
                if let Some(gg) = self.buf(grads, *gamma) {
                    for (r, grow) in g.chunks(cols).enumerate() {
                        for c in 0..cols {
                            gg[c] += grow[c] * xhat[r * cols + c];
                        }
                    }
                }
                if let Some(gb) = self.buf(grads, *beta) {
                    for grow in g.chunks(cols) {
                        gb.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                    }
                }
                if let Some(gx) = self.buf(grads, *x) {
                    let mut dxhat = vec![0.0f32; cols];
                    for (r, grow) in g.chunks(cols).enumerate() {
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut s1 = 0.0f32;
                        let mut s2 = 0.0f32;
                        for c in 0..cols {
                            dxhat[c] = grow[c] * gam[c];
                            s1 += dxhat[c];
                            s2 += dxhat[c] * xh[c];
                        }
                        let f = cols as f32;
                        for c in 0..cols {
                            gx[r * cols + c] += inv_std[r] / f * (f * dxhat[c] - s1 - xh[c] * s2);
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, cols, xhat, inv_std, train } => {
                let cols = *cols;
                let rows = g.len() / cols;
                let gam = self.value(*gamma);
                if let Some(gg) = self.buf(grads, *gamma) {
                    for (r, grow) in g.chunks(cols).enumerate() {
                        for c in 0..cols {
                            gg[c] += grow[c] * xhat[r * cols + c];
                        }
                    }
                }
                if let Some(gb) = self.buf(grads, *beta) {
                    for grow in g.chunks(cols) {
                        gb.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                    }
                }
                if let Some(gx) = self.buf(grads, *x) {
                    for c in 0..cols {
                        if *train {
                            let mut s1 = 0.0f32;
                            let mut s2 = 0.0f32;
                            for r in 0..rows {
                                let d = g[r * cols + c] * gam[c];
                                s1 += d;
                                s2 += d * xhat[r * cols + c];
                            }
                            let n = rows as f32;
                            for r in 0..rows {
                                let d = g[r * cols + c] * gam[c];
                                gx[r * cols + c] += inv_std[c] / n * (n * d - s1 - xhat[r * cols + c] * s2);
                            }
                        } else {
                            for r in 0..rows {
                                gx[r * cols + c] += g[r * cols + c] * gam[c] * inv_std[c];
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.buf(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * mask[i];
                    }
                }
            }
            Op::CrossEntropy { logits, probs, targets, weights, classes } => {
                let classes = *classes;
                let batch = targets.len() as f32;
                if let Some(gl) = self.buf(grads, *logits) {
                    for (i, &t) in targets.iter().enumerate() {
                        let s = g[0] * weights[i] / batch;
                        for c in 0..classes {
                            let delta = if c == t { 1.0 } else { 0.0 };
                            gl[i * classes + c] += s * (probs[i * classes + c] - delta);
                        }
                    }
                }
            }
            &Op::KlDiv { p, q, rows } => {
                let (pv, qv) = (self.value(p), self.value(q));
                let s = g[0] / rows as f32;
                if let Some(gq) = self.buf(grads, q) {
                    for i in 0..pv.len() {
                        if qv[i] > LOG_EPS {
                            gq[i] -= s * pv[i] / qv[i];
                        }
                    }
                }
                if let Some(gp) = self.buf(grads, p) {
                    for i in 0..pv.len() {
                        if pv[i] > 0.0 {
                            let ratio = pv[i].max(LOG_EPS) as f64 / qv[i].max(LOG_EPS) as f64;
                            gp[i] += s * (ratio.ln() as f32 + 1.0);
                        }
                    }
                }
            }
            &Op::Mse { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let s = 2.0 * g[0] / av.len() as f32;
                if let Some(ga) = self.buf(grads, a) {
                    for i in 0..av.len() {
                        ga[i] += s * (av[i] - bv[i]);
                    }
                }
                if let Some(gb) = self.buf(grads, b) {
                    for i in 0..av.len() {
                        gb[i] -= s * (av[i] - bv[i]);
                    }
                }
            }
            Op::Attention { qkv, batch, tokens, heads, probs } => {
                let (batch, tokens, heads) = (*batch, *tokens, *heads);
                let src = self.value(*qkv);
                let hidden = src.len() / (batch * tokens) / 3;
                let dh = hidden / heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let Some(gq) = self.buf(grads, *qkv) else { return };
                let tt = tokens * tokens;
                for b in 0..batch {
                    for h in 0..heads {
                        let [q, k, v] = head_slices(src, b, h, tokens, hidden, dh);
                        let p = &probs[(b * heads + h) * tt..(b * heads + h + 1) * tt];
                        let mut go = vec![0.0f32; tokens * dh];
                        for t in 0..tokens {
                            let at = (b * tokens + t) * hidden + h * dh;
                            go[t * dh..(t + 1) * dh].copy_from_slice(&g[at..at + dh]);
                        }
                        let mut dv = vec![0.0f32; tokens * dh];
                        gemm_at_b_acc(p, &go, &mut dv, tokens, tokens, dh);
                        let mut dp = vec![0.0f32; tt];
                        gemm_a_bt_acc(&go, &v, &mut dp, tokens, dh, tokens);
                        for r in 0..tokens {
                            let row = &mut dp[r * tokens..(r + 1) * tokens];
                            let pr = &p[r * tokens..(r + 1) * tokens];
                            let dot: f32 = row.iter().zip(pr).map(|(a, b)| a * b).sum();
                            for (d, &pv) in row.iter_mut().zip(pr) {
                                *d = pv * (*d - dot) * scale;
                            }
                        }
                        let mut dq = vec![0.0f32; tokens * dh];
                        gemm_acc(&dp, &k, &mut dq, tokens, tokens, dh);
                        let mut dk = vec![0.0f32; tokens * dh];
                        gemm_at_b_acc(&dp, &q, &mut dk, tokens, tokens, dh);
                        for t in 0..tokens {
                            let row = (b * tokens + t) * 3 * hidden + h * dh;
                            for (off, blk) in [(0, &dq), (hidden, &dk), (2 * hidden, &dv)] {
                                let dst = &mut gq[row + off..row + off + dh];
                                dst.iter_mut().zip(&blk[t * dh..(t + 1) * dh]).for_each(|(a, b)| *a += b);
                            }
                        }
                    }
                }
            }
            &Op::PrependToken { x, token, batch, per, hidden } => {
                if let Some(gt) = self.buf(grads, token) {
                    for b in 0..batch {
                        let src = &g[b * (per + 1) * hidden..(b * (per + 1) + 1) * hidden];
                        gt.iter_mut().zip(src).for_each(|(a, s)| *a += s);
                    }
                }
                if let Some(gx) = self.buf(grads, x) {
                    for b in 0..batch {
                        let src = &g[(b * (per + 1) + 1) * hidden..(b + 1) * (per + 1) * hidden];
                        let dst = &mut gx[b * per * hidden..(b + 1) * per * hidden];
                        dst.iter_mut().zip(src).for_each(|(a, s)| *a += s);
                    }
                }
            }
            Op::GatherRows { x, rows, cols } => {
                let cols = *cols;
                if let Some(gx) = self.buf(grads, *x) {
                    for (i, &r) in rows.iter().enumerate() {
                        let dst = &mut gx[r * cols..(r + 1) * cols];
                        dst.iter_mut().zip(&g[i * cols..(i + 1) * cols]).for_each(|(a, s)| *a += s);
                    }
                }
            }
            Op::StudentT { z, mu, alpha, dim, kernel, row_sums, dist } => {
                let (dim, alpha) = (*dim, *alpha);
                let q = &node.value;
                let k = self.shape(*mu)[0];
                let n = row_sums.len();
                let expo = (alpha + 1.0) / 2.0;
                // dL/dd_ij through the kernel and the row normalisation.
                let mut dd = vec![0.0f32; n * k];
                for i in 0..n {
                    let dot: f32 = (0..k).map(|j| g[i * k + j] * q[i * k + j]).sum();
                    for j in 0..k {
                        let dnum = (g[i * k + j] - dot) / row_sums[i];
                        let dkernel = -(expo / alpha) * kernel[i * k + j] / (1.0 + dist[i * k + j] / alpha);
                        dd[i * k + j] = dnum * dkernel;
                    }
                }
                let (zs, ms) = (self.value(*z), self.value(*mu));
                if let Some(gz) = self.buf(grads, *z) {
                    for i in 0..n {
                        for j in 0..k {
                            let f = 2.0 * dd[i * k + j];
                            for d in 0..dim {
                                gz[i * dim + d] += f * (zs[i * dim + d] - ms[j * dim + d]);
                            }
                        }
                    }
                }
                if let Some(gm) = self.buf(grads, *mu) {
                    for i in 0..n {
                        for j in 0..k {
                            let f = 2.0 * dd[i * k + j];
                            for d in 0..dim {
                                gm[j * dim + d] -= f * (zs[i * dim + d] - ms[j * dim + d]);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn head_slices(src: &[f32], b: usize, h: usize, tokens: usize, hidden: usize, dh: usize) -> [Vec<f32>; 3] {
    let mut out = [vec![0.0f32; tokens * dh], vec![0.0f32; tokens * dh], vec![0.0f32; tokens * dh]];
    for t in 0..tokens {
        let row = (b * tokens + t) * 3 * hidden + h * dh;
        for (i, blk) in out.iter_mut().enumerate() {
            let at = row + i * hidden;
            blk[t * dh..(t + 1) * dh].copy_from_slice(&src[at..at + dh]);
        }
    }
    out
}

/// Scaled keep-mask used by [`Tape::dropout`]; identity outside train mode.
pub fn dropout_mask(len: usize, keep: f32, mode: Mode, seed: u64) -> Result<Vec<f32>> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::Config(format!("dropout keep probability must lie in (0, 1], got {keep}")));
    }
    if mode == Mode::Infer || keep == 1.0 {
        return Ok(vec![1.0; len]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / keep;
    Ok((0..len)
        .map(|_| if rng.random::<f32>() < keep { scale } else { 0.0 })
        .collect())
}

/// `Σ p·ln(p/q)` over all entries with the `1e-12` floor on `q`.
pub fn kl_sum(p: &[f32], q: &[f32]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi as f64 * (pi as f64 / qi.max(LOG_EPS) as f64).ln())
        .sum()
}
