//! Computation tape: records operations in topological order and replays
//! them in reverse to accumulate gradients.

use super::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Element, Tensor, TensorError};
use crate::rng::SplitMix64;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

struct Node<E> {
    shape: Vec<usize>,
    value: Vec<E>,
    needs_grad: bool,
}

enum OpKind<E> {
    Add { a: ValueId, b: ValueId },
    AddBias { x: ValueId, b: ValueId },
    AddTiled { x: ValueId, t: ValueId },
    Mul { a: ValueId, b: ValueId },
    Scale { x: ValueId, c: E },
    Matmul { a: ValueId, b: ValueId, m: usize, k: usize, n: usize },
    Linear { x: ValueId, w: ValueId, b: Option<ValueId>, n: usize, din: usize, dout: usize },
    ScaledCross { a: ValueId, b: ValueId, scale: E, m: usize, k: usize, n: usize },
    Outer { a: ValueId, b: ValueId },
    ConcatRows { inputs: Vec<ValueId>, cols: usize },
    ConcatCols { inputs: Vec<ValueId>, rows: usize },
    SliceBlock { x: ValueId, r0: usize, c0: usize, rows: usize, cols: usize, src_cols: usize },
    GatherRows { x: ValueId, indices: Vec<usize>, cols: usize },
    SoftmaxRows { x: ValueId, cols: usize },
    LayerNorm { x: ValueId, gamma: ValueId, beta: ValueId, mean: Vec<E>, inv: Vec<E> },
    Gelu { x: ValueId },
    Relu { x: ValueId },
    Dropout { x: ValueId, mask: Vec<E> },
    StopGrad,
    SumAll { x: ValueId },
    WeightedCe { logits: ValueId, probs: Vec<E>, labels: Vec<usize>, sample_w: Vec<E>, wsum: E },
    EpiContract { m: ValueId, z: ValueId, dz: usize, classes: usize },
}

struct OpRecord<E> {
    out: ValueId,
    kind: OpKind<E>,
}

/// Reverse-mode autodiff tape. Values are appended in creation order, which
/// is also a valid topological order for the backward sweep.
pub struct Tape<E: Element = f32> {
    nodes: Vec<Node<E>>,
    ops: Vec<OpRecord<E>>,
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new(), grads: Vec::new() }
    }

    fn push_node(&mut self, shape: Vec<usize>, value: Vec<E>, needs_grad: bool) -> ValueId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, needs_grad });
        self.grads.push(None);
        ValueId(self.nodes.len() - 1)
    }

    /// Records a leaf holding a copy of `t`; gradient flow follows
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<E>) -> ValueId {
        self.push_node(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Records a non-differentiable constant.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<E>) -> ValueId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push_node(shape, data, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &[E] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn needs_grad(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Accumulated gradient of `id`, present only after a backward pass that
    /// reached it.
    pub fn grad(&self, id: ValueId) -> Option<&[E]> {
        self.grads[id.0].as_deref()
    }

    pub fn clear_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn rows_cols(&self, id: ValueId, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape(id) {
            [r, c] => Ok((*r, *c)),
            other => Err(TensorError::Invalid {
                op,
                msg: format!("expected a matrix, got shape {other:?}"),
            }),
        }
    }

    fn same_shape(&self, a: ValueId, b: ValueId, op: &'static str) -> Result<(), TensorError> {
        if self.shape(a) == self.shape(b) {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            })
        }
    }

    /// Elementwise sum of two same-shape values.
    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        self.same_shape(a, b, "add")?;
        let value: Vec<E> =
            self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let out = self.push_node(self.shape(a).to_vec(), value, needs);
        self.ops.push(OpRecord { out, kind: OpKind::Add { a, b } });
        Ok(out)
    }

    /// Adds a length-`d` bias vector to every row of `x[n,d]`.
    pub fn add_bias(&mut self, x: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let (n, d) = self.rows_cols(x, "add_bias")?;
        if self.shape(b) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut value = self.value(x).to_vec();
        let bias = self.value(b).to_vec();
        for row in 0..n {
            for (v, &bv) in value[row * d..(row + 1) * d].iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        let needs = self.needs_grad(x) || self.needs_grad(b);
        let out = self.push_node(vec![n, d], value, needs);
        self.ops.push(OpRecord { out, kind: OpKind::AddBias { x, b } });
        Ok(out)
    }

    /// Adds `t[tn,d]` to `x[n,d]` with `t` repeated vertically; `n` must be a
    /// multiple of `tn`.
    pub fn add_tiled(&mut self, x: ValueId, t: ValueId) -> Result<ValueId, TensorError> {
        let (n, d) = self.rows_cols(x, "add_tiled")?;
        let (tn, td) = self.rows_cols(t, "add_tiled")?;
        if td != d || tn == 0 || n % tn != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "add_tiled",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(t).to_vec(),
            });
        }
        let mut value = self.value(x).to_vec();
        let tile = self.value(t).to_vec();
        for row in 0..n {
            let trow = &tile[(row % tn) * d..(row % tn + 1) * d];
            for (v, &tv) in value[row * d..(row + 1) * d].iter_mut().zip(trow) {
                *v += tv;
            }
        }
        let needs = self.needs_grad(x) || self.needs_grad(t);
        let out = self.push_node(vec![n, d], value, needs);
        self.ops.push(OpRecord { out, kind: OpKind::AddTiled { x, t } });
        Ok(out)
    }

    /// Elementwise product of two same-shape values.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        self.same_shape(a, b, "mul")?;
        let value: Vec<E> =
            self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let out = self.push_node(self.shape(a).to_vec(), value, needs);
        self.ops.push(OpRecord { out, kind: OpKind::Mul { a, b } });
        Ok(out)
    }

    /// Multiplies every element by the constant `c`.
    pub fn scale(&mut self, x: ValueId, c: E) -> ValueId {
        let value: Vec<E> = self.value(x).iter().map(|&v| v * c).collect();
        let needs = self.needs_grad(x);
        let out = self.push_node(self.shape(x).to_vec(), value, needs);
        self.ops.push(OpRecord { out, kind: OpKind::Scale { x, c } });
        out
    }

    /// Matrix product `a[m,k] * b[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let (m, ka) = self.rows_cols(a, "matmul")?;
        let (kb, n) = self.rows_cols(b, "matmul")?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut value = vec![E::zero(); m * n];
        matmul_raw(self.value(a), self.value(b), m, ka, n, &mut value);
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let out = self.push_node(vec![m, n], value, needs);
        self.ops.push(OpRecord { out, kind: OpKind::Matmul { a, b, m, k: ka, n } });
        Ok(out)
    }

    /// Affine map `x[n,din] * w[dout,din]^T + b -> [n,dout]`.
    pub fn linear(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
    ) -> Result<ValueId, TensorError> {
        let (n, din) = self.rows_cols(x, "linear")?;
        let (dout, win) = self.rows_cols(w, "linear")?;
        if win != din {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        if let Some(bias) = b {
            if self.shape(bias) != [dout] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear",
                    lhs: self.shape(w).to_vec(),
                    rhs: self.shape(bias).to_vec(),
                });
            }
        }
        let mut value = vec![E::zero(); n * dout];
        matmul_nt_raw(self.value(x), self.value(w), n, din, dout, &mut value);
        if let Some(bias) = b {
            let bv = self.value(bias).to_vec();
            for row in 0..n {
                for (v, &add) in value[row * dout..(row + 1) * dout].iter_mut().zip(&bv) {
                    *v += add;
                }
            }
        }
        let needs = self.needs_grad(x)
            || self.needs_grad(w)
            || b.map(|bias| self.needs_grad(bias)).unwrap_or(false);
        let out = self.push_node(vec![n, dout], value, needs);
        self.ops.push(OpRecord { out, kind: OpKind::Linear { x, w, b, n, din, dout } });
        Ok(out)
    }

    /// `scale * a[m,k] * b[n,k]^T -> [m,n]`.
    pub fn scaled_cross(
        &mut self,
        a: ValueId,
        b: ValueId,
        scale: E,
    ) -> Result<ValueId, TensorError> {
        let (m, ka) = self.rows_cols(a, "scaled_cross")?;
        let (n, kb) = self.rows_cols(b, "scaled_cross")?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "scaled_cross",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut value = vec![E::zero(); m * n];
        matmul_nt_raw(self.value(a), self.value(b), m, ka, n, &mut value);
        for v in &mut value {
            *v *= scale;
        }
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let out = self.push_node(vec![m, n], value, needs);
        self.ops.push(OpRecord { out, kind: OpKind::ScaledCross { a, b, scale, m, k: ka, n } });
        Ok(out)
    }

    /// Outer product of vectors `a[k]` and `b[d] -> [k,d]`.
    pub fn outer(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let (k, d) = match (self.shape(a), self.shape(b)) {
            ([k], [d]) => (*k, *d),
            (lhs, rhs) => {
                return Err(TensorError::ShapeMismatch {
                    op: "outer",
                    lhs: lhs.to_vec(),
                    rhs: rhs.to_vec(),
                })
            }
        };
        let mut value = vec![E::zero(); k * d];
        for i in 0..k {
            let x = self.value(a)[i];
            for j in 0..d {
                value[i * d + j] = x * self.value(b)[j];
            }
        }
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let out = self.push_node(vec![k, d], value, needs);
        self.ops.push(OpRecord { out, kind: OpKind::Outer { a, b } });
        Ok(out)
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, inputs: &[ValueId]) -> Result<ValueId, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::Invalid { op: "concat_rows", msg: "no inputs".into() });
        }
        let (_, cols) = self.rows_cols(inputs[0], "concat_rows")?;
        let mut total_rows = 0;
        for &id in inputs {
            let (r, c) = self.rows_cols(id, "concat_rows")?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(inputs[0]).to_vec(),
                    rhs: self.shape(id).to_vec(),
                });
            }
            total_rows += r;
        }
        let mut value = Vec::with_capacity(total_rows * cols);
        for &id in inputs {
            value.extend_from_slice(self.value(id));
        }
        let needs = inputs.iter().any(|&id| self.needs_grad(id));
        let out = self.push_node(vec![total_rows, cols], value, needs);
        self.ops.push(OpRecord { out, kind: OpKind::ConcatRows { inputs: inputs.to_vec(), cols } });
        Ok(out)
    }

    /// Stacks matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, inputs: &[ValueId]) -> Result<ValueId, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::Invalid { op: "concat_cols", msg: "no inputs".into() });
        }
        let (rows, _) = self.rows_cols(inputs[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(inputs.len());
        for &id in inputs {
            let (r, c) = self.rows_cols(id, "concat_cols")?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(inputs[0]).to_vec(),
                    rhs: self.shape(id).to_vec(),
                });
            }
            widths.push(c);
        }
        let total_cols: usize = widths.iter().sum();
        let mut value = vec![E::zero(); rows * total_cols];
        let mut offset = 0;
        for (&id, &c) in inputs.iter().zip(&widths) {
            let src = self.value(id);
            for row in 0..rows {
                value[row * total_cols + offset..row * total_cols + offset + c]
                    .copy_from_slice(&src[row * c..(row + 1) * c]);
            }
            offset += c;
        }
        let needs = inputs.iter().any(|&id| self.needs_grad(id));
        let out = self.push_node(vec![rows, total_cols], value, needs);
        self.ops.push(OpRecord { out, kind: OpKind::ConcatCols { inputs: inputs.to_vec(), rows } });
        Ok(out)
    }

    /// Contiguous sub-matrix of `x` starting at `(r0, c0)`.
    pub fn slice_block(
        &mut self,
        x: ValueId,
        r0: usize,
        rows: usize,
        c0: usize,
        cols: usize,
    ) -> Result<ValueId, TensorError> {
        let (n, d) = self.rows_cols(x, "slice_block")?;
        if r0 + rows > n || c0 + cols > d || rows == 0 || cols == 0 {
            return Err(TensorError::Invalid {
                op: "slice_block",
                msg: format!("block ({r0},{c0})+({rows},{cols}) out of bounds for [{n},{d}]"),
            });
        }
        let src = self.value(x);
        let mut value = Vec::with_capacity(rows * cols);
        for row in r0..r0 + rows {
            value.extend_from_slice(&src[row * d + c0..row * d + c0 + cols]);
        }
        let needs = self.needs_grad(x);
        let out = self.push_node(vec![rows, cols], value, needs);
        self.ops.push(OpRecord {
            out,
            kind: OpKind::SliceBlock { x, r0, c0, rows, cols, src_cols: d },
        });
        Ok(out)
    }

    /// Rows `start..start+rows` of `x`, all columns.
    pub fn slice_rows(
        &mut self,
        x: ValueId,
        start: usize,
        rows: usize,
    ) -> Result<ValueId, TensorError> {
        let (_, d) = self.rows_cols(x, "slice_rows")?;
        self.slice_block(x, start, rows, 0, d)
    }

    /// Gathers the listed rows of `x` into a new matrix, in the given order.
    pub fn gather_rows(&mut self, x: ValueId, indices: &[usize]) -> Result<ValueId, TensorError> {
        let (n, d) = self.rows_cols(x, "gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("row index {bad} out of bounds for {n} rows"),
            });
        }
        let src = self.value(x);
        let mut value = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            value.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let needs = self.needs_grad(x);
        let out = self.push_node(vec![indices.len(), d], value, needs);
        self.ops.push(OpRecord {
            out,
            kind: OpKind::GatherRows { x, indices: indices.to_vec(), cols: d },
        });
        Ok(out)
    }

    /// Row-wise softmax with max subtraction. Rejects non-finite inputs.
    pub fn softmax_rows(&mut self, x: ValueId) -> Result<ValueId, TensorError> {
        let (n, d) = self.rows_cols(x, "softmax_rows")?;
        if self.value(x).iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "softmax_rows" });
        }
        let mut value = vec![E::zero(); n * d];
        for row in 0..n {
            let xr = &self.value(x)[row * d..(row + 1) * d];
            let vr = &mut value[row * d..(row + 1) * d];
            let max = xr.iter().cloned().fold(E::neg_infinity(), E::max);
            let mut sum = E::zero();
            for (v, &xv) in vr.iter_mut().zip(xr) {
                *v = (xv - max).exp();
                sum += *v;
            }
            for v in vr.iter_mut() {
                *v /= sum;
            }
        }
        let needs = self.needs_grad(x);
        let out = self.push_node(vec![n, d], value, needs);
        self.ops.push(OpRecord { out, kind: OpKind::SoftmaxRows { x, cols: d } });
        Ok(out)
    }

    /// Per-row layer normalization with affine parameters.
    pub fn layer_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: E,
    ) -> Result<ValueId, TensorError> {
        let (n, d) = self.rows_cols(x, "layer_norm")?;
        if d < 2 {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                msg: format!("normalized dimension must be >= 2, got {d}"),
            });
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let dn = E::from_f64(d as f64);
        let mut value = vec![E::zero(); n * d];
        let mut means = vec![E::zero(); n];
        let mut invs = vec![E::zero(); n];
        for row in 0..n {
            let xr = &self.value(x)[row * d..(row + 1) * d];
            let mut mean = E::zero();
            for &v in xr {
                mean += v;
            }
            mean /= dn;
            let mut var = E::zero();
            for &v in xr {
                var += (v - mean) * (v - mean);
            }
            var /= dn;
            let inv = (var + eps).sqrt().recip();
            means[row] = mean;
            invs[row] = inv;
            for j in 0..d {
                value[row * d + j] =
                    (xr[j] - mean) * inv * self.value(gamma)[j] + self.value(beta)[j];
            }
        }
        let needs = self.needs_grad(x) || self.needs_grad(gamma) || self.needs_grad(beta);
        let out = self.push_node(vec![n, d], value, needs);
        self.ops.push(OpRecord {
            out,
            kind: OpKind::LayerNorm { x, gamma, beta, mean: means, inv: invs },
        });
        Ok(out)
    }

    /// Exact GELU, `x * Phi(x)` with the Gaussian CDF.
    pub fn gelu(&mut self, x: ValueId) -> ValueId {
        let half = E::from_f64(0.5);
        let inv_sqrt2 = E::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let value: Vec<E> = self
            .value(x)
            .iter()
            .map(|&v| v * half * (E::one() + (v * inv_sqrt2).erf()))
            .collect();
        let needs = self.needs_grad(x);
        let out = self.push_node(self.shape(x).to_vec(), value, needs);
        self.ops.push(OpRecord { out, kind: OpKind::Gelu { x } });
        out
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let value: Vec<E> = self.value(x).iter().map(|&v| v.max(E::zero())).collect();
        let needs = self.needs_grad(x);
        let out = self.push_node(self.shape(x).to_vec(), value, needs);
        self.ops.push(OpRecord { out, kind: OpKind::Relu { x } });
        out
    }

    /// Inverted-scaling dropout: kept elements are multiplied by `1/(1-rate)`.
    /// A rate of zero is the identity and draws nothing from `rng`.
    pub fn dropout(
        &mut self,
        x: ValueId,
        rate: f64,
        rng: &mut SplitMix64,
    ) -> Result<ValueId, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("rate must be in [0,1), got {rate}"),
            });
        }
        let mask: Vec<E> = if rate == 0.0 {
            vec![E::one(); self.value(x).len()]
        } else {
            let keep_scale = E::from_f64(1.0 / (1.0 - rate));
            self.value(x)
                .iter()
                .map(|_| if rng.next_f64() < rate { E::zero() } else { keep_scale })
                .collect()
        };
        let value: Vec<E> = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let needs = self.needs_grad(x);
        let out = self.push_node(self.shape(x).to_vec(), value, needs);
        self.ops.push(OpRecord { out, kind: OpKind::Dropout { x, mask } });
        Ok(out)
    }

    /// Identity in the forward pass; blocks all gradient flow backward.
    pub fn stop_grad(&mut self, x: ValueId) -> ValueId {
        let value = self.value(x).to_vec();
        let out = self.push_node(self.shape(x).to_vec(), value, false);
        self.ops.push(OpRecord { out, kind: OpKind::StopGrad });
        out
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        let mut sum = E::zero();
        for &v in self.value(x) {
            sum += v;
        }
        let needs = self.needs_grad(x);
        let out = self.push_node(vec![1], vec![sum], needs);
        self.ops.push(OpRecord { out, kind: OpKind::SumAll { x } });
        out
    }

    /// Class-weighted cross entropy over `logits[s,c]`, normalized by the
    /// total weight of the batch. `class_w` holds one weight per class.
    pub fn weighted_ce(
        &mut self,
        logits: ValueId,
        labels: &[usize],
        class_w: &[E],
    ) -> Result<ValueId, TensorError> {
        let (s, c) = self.rows_cols(logits, "weighted_ce")?;
        if labels.len() != s {
            return Err(TensorError::Invalid {
                op: "weighted_ce",
                msg: format!("{} labels for {} rows", labels.len(), s),
            });
        }
        if class_w.len() != c {
            return Err(TensorError::Invalid {
                op: "weighted_ce",
                msg: format!("{} class weights for {} classes", class_w.len(), c),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(TensorError::Invalid {
                op: "weighted_ce",
                msg: format!("label {bad} out of range for {c} classes"),
            });
        }
        if self.value(logits).iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "weighted_ce" });
        }
        let mut probs = vec![E::zero(); s * c];
        let mut sample_w = vec![E::zero(); s];
        let mut wsum = E::zero();
        let mut loss = E::zero();
        for row in 0..s {
            let zr = &self.value(logits)[row * c..(row + 1) * c];
            let pr = &mut probs[row * c..(row + 1) * c];
            let max = zr.iter().cloned().fold(E::neg_infinity(), E::max);
            let mut sum = E::zero();
            for (p, &z) in pr.iter_mut().zip(zr) {
                *p = (z - max).exp();
                sum += *p;
            }
            for p in pr.iter_mut() {
                *p /= sum;
            }
            let w = class_w[labels[row]];
            sample_w[row] = w;
            wsum += w;
            loss += w * (sum.ln() + max - zr[labels[row]]);
        }
        if wsum <= E::zero() {
            return Err(TensorError::Invalid {
                op: "weighted_ce",
                msg: "total sample weight must be positive".into(),
            });
        }
        loss /= wsum;
        let needs = self.needs_grad(logits);
        let out = self.push_node(vec![1], vec![loss], needs);
        self.ops.push(OpRecord {
            out,
            kind: OpKind::WeightedCe { logits, probs, labels: labels.to_vec(), sample_w, wsum },
        });
        Ok(out)
    }

    /// Contracts `m[s, dz*classes]` (rows viewed as `[dz, classes]`) with
    /// `z[s, dz]`, yielding `[s, classes]`.
    pub fn epi_contract(
        &mut self,
        m: ValueId,
        z: ValueId,
        dz: usize,
        classes: usize,
    ) -> Result<ValueId, TensorError> {
        let (s, mc) = self.rows_cols(m, "epi_contract")?;
        let (sz, zc) = self.rows_cols(z, "epi_contract")?;
        if mc != dz * classes || sz != s || zc != dz {
            return Err(TensorError::ShapeMismatch {
                op: "epi_contract",
                lhs: self.shape(m).to_vec(),
                rhs: self.shape(z).to_vec(),
            });
        }
        let mut value = vec![E::zero(); s * classes];
        for row in 0..s {
            for k in 0..dz {
                let zk = self.value(z)[row * dz + k];
                let mrow = &self.value(m)[row * mc + k * classes..row * mc + (k + 1) * classes];
                for (j, &mm) in mrow.iter().enumerate() {
                    value[row * classes + j] += zk * mm;
                }
            }
        }
        let needs = self.needs_grad(m) || self.needs_grad(z);
        let out = self.push_node(vec![s, classes], value, needs);
        self.ops.push(OpRecord { out, kind: OpKind::EpiContract { m, z, dz, classes } });
        Ok(out)
    }

    /// Reverse sweep from the scalar `loss`. Gradients accumulate into the
    /// tape across calls, so two passes double every gradient.
    pub fn backward(&mut self, loss: ValueId) -> Result<(), TensorError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        let mut flow: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        flow[loss.0] = Some(vec![E::one()]);
        for idx in (0..self.ops.len()).rev() {
            let out = self.ops[idx].out;
            if out.0 > loss.0 {
                continue;
            }
            let Some(g) = flow[out.0].take() else { continue };
            self.propagate(idx, &g, &mut flow);
            flow[out.0] = Some(g);
        }
        for (i, g) in flow.into_iter().enumerate() {
            if let Some(g) = g {
                if self.nodes[i].needs_grad || i == loss.0 {
                    let slot = self.grads[i]
                        .get_or_insert_with(|| vec![E::zero(); self.nodes[i].value.len()]);
                    for (dst, src) in slot.iter_mut().zip(g) {
                        *dst += src;
                    }
                }
            }
        }
        Ok(())
    }

    fn flow_into<'f>(
        flow: &'f mut [Option<Vec<E>>],
        id: ValueId,
        len: usize,
    ) -> &'f mut Vec<E> {
        flow[id.0].get_or_insert_with(|| vec![E::zero(); len])
    }

    fn propagate(&self, op_idx: usize, g: &[E], flow: &mut [Option<Vec<E>>]) {
        let out = self.ops[op_idx].out;
        match &self.ops[op_idx].kind {
            OpKind::Add { a, b } => {
                for &id in [*a, *b].iter() {
                    if self.nodes[id.0].needs_grad {
                        let acc = Self::flow_into(flow, id, g.len());
                        for (dst, &src) in acc.iter_mut().zip(g) {
                            *dst += src;
                        }
                    }
                }
            }
            OpKind::AddBias { x, b } => {
                if self.nodes[x.0].needs_grad {
                    let acc = Self::flow_into(flow, *x, g.len());
                    for (dst, &src) in acc.iter_mut().zip(g) {
                        *dst += src;
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let d = self.nodes[b.0].value.len();
                    let acc = Self::flow_into(flow, *b, d);
                    for row in g.chunks_exact(d) {
                        for (dst, &src) in acc.iter_mut().zip(row) {
                            *dst += src;
                        }
                    }
                }
            }
            OpKind::AddTiled { x, t } => {
                if self.nodes[x.0].needs_grad {
                    let acc = Self::flow_into(flow, *x, g.len());
                    for (dst, &src) in acc.iter_mut().zip(g) {
                        *dst += src;
                    }
                }
                if self.nodes[t.0].needs_grad {
                    let tn = self.nodes[t.0].shape[0];
                    let d = self.nodes[t.0].shape[1];
                    let acc = Self::flow_into(flow, *t, tn * d);
                    for (row, grow) in g.chunks_exact(d).enumerate() {
                        let tr = row % tn;
                        for (dst, &src) in acc[tr * d..(tr + 1) * d].iter_mut().zip(grow) {
                            *dst += src;
                        }
                    }
                }
            }
            OpKind::Mul { a, b } => {
                if self.nodes[a.0].needs_grad {
                    let acc = Self::flow_into(flow, *a, g.len());
                    for ((dst, &src), &other) in
                        acc.iter_mut().zip(g).zip(&self.nodes[b.0].value)
                    {
                        *dst += src * other;
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let acc = Self::flow_into(flow, *b, g.len());
                    for ((dst, &src), &other) in
                        acc.iter_mut().zip(g).zip(&self.nodes[a.0].value)
                    {
                        *dst += src * other;
                    }
                }
            }
            OpKind::Scale { x, c } => {
                if self.nodes[x.0].needs_grad {
                    let acc = Self::flow_into(flow, *x, g.len());
                    for (dst, &src) in acc.iter_mut().zip(g) {
                        *dst += src * *c;
                    }
                }
            }
            OpKind::Matmul { a, b, m, k, n } => {
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![E::zero(); m * k];
                    matmul_nt_raw(g, &self.nodes[b.0].value, *m, *n, *k, &mut da);
                    let acc = Self::flow_into(flow, *a, m * k);
                    for (dst, src) in acc.iter_mut().zip(da) {
                        *dst += src;
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![E::zero(); k * n];
                    matmul_tn_raw(&self.nodes[a.0].value, g, *k, *m, *n, &mut db);
                    let acc = Self::flow_into(flow, *b, k * n);
                    for (dst, src) in acc.iter_mut().zip(db) {
                        *dst += src;
                    }
                }
            }
            OpKind::Linear { x, w, b, n, din, dout } => {
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![E::zero(); n * din];
                    matmul_raw(g, &self.nodes[w.0].value, *n, *dout, *din, &mut dx);
                    let acc = Self::flow_into(flow, *x, n * din);
                    for (dst, src) in acc.iter_mut().zip(dx) {
                        *dst += src;
                    }
                }
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![E::zero(); dout * din];
                    matmul_tn_raw(g, &self.nodes[x.0].value, *dout, *n, *din, &mut dw);
                    let acc = Self::flow_into(flow, *w, dout * din);
                    for (dst, src) in acc.iter_mut().zip(dw) {
                        *dst += src;
                    }
                }
                if let Some(bias) = b {
                    if self.nodes[bias.0].needs_grad {
                        let acc = Self::flow_into(flow, *bias, *dout);
                        for row in g.chunks_exact(*dout) {
                            for (dst, &src) in acc.iter_mut().zip(row) {
                                *dst += src;
                            }
                        }
                    }
                }
            }
            OpKind::ScaledCross { a, b, scale, m, k, n } => {
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![E::zero(); m * k];
                    matmul_raw(g, &self.nodes[b.0].value, *m, *n, *k, &mut da);
                    let acc = Self::flow_into(flow, *a, m * k);
                    for (dst, src) in acc.iter_mut().zip(da) {
                        *dst += src * *scale;
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![E::zero(); n * k];
                    matmul_tn_raw(g, &self.nodes[a.0].value, *n, *m, *k, &mut db);
                    let acc = Self::flow_into(flow, *b, n * k);
                    for (dst, src) in acc.iter_mut().zip(db) {
                        *dst += src * *scale;
                    }
                }
            }
            OpKind::Outer { a, b } => {
                let k = self.nodes[a.0].value.len();
                let d = self.nodes[b.0].value.len();
                if self.nodes[a.0].needs_grad {
                    let acc = Self::flow_into(flow, *a, k);
                    for i in 0..k {
                        let mut sum = E::zero();
                        for (j, &bj) in self.nodes[b.0].value.iter().enumerate() {
                            sum += g[i * d + j] * bj;
                        }
                        acc[i] += sum;
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let acc = Self::flow_into(flow, *b, d);
                    for (i, &ai) in self.nodes[a.0].value.iter().enumerate() {
                        for (j, dst) in acc.iter_mut().enumerate() {
                            *dst += g[i * d + j] * ai;
                        }
                    }
                }
            }
            OpKind::ConcatRows { inputs, cols } => {
                let mut offset = 0;
                for &id in inputs {
                    let len = self.nodes[id.0].shape[0] * cols;
                    if self.nodes[id.0].needs_grad {
                        let acc = Self::flow_into(flow, id, len);
                        for (dst, &src) in acc.iter_mut().zip(&g[offset..offset + len]) {
                            *dst += src;
                        }
                    }
                    offset += len;
                }
            }
            OpKind::ConcatCols { inputs, rows } => {
                let total_cols: usize = inputs.iter().map(|&id| self.nodes[id.0].shape[1]).sum();
                let mut offset = 0;
                for &id in inputs {
                    let c = self.nodes[id.0].shape[1];
                    if self.nodes[id.0].needs_grad {
                        let acc = Self::flow_into(flow, id, rows * c);
                        for row in 0..*rows {
                            let grow =
                                &g[row * total_cols + offset..row * total_cols + offset + c];
                            for (dst, &src) in acc[row * c..(row + 1) * c].iter_mut().zip(grow) {
                                *dst += src;
                            }
                        }
                    }
                    offset += c;
                }
            }
            OpKind::SliceBlock { x, r0, c0, rows, cols, src_cols } => {
                if self.nodes[x.0].needs_grad {
                    let len = self.nodes[x.0].value.len();
                    let acc = Self::flow_into(flow, *x, len);
                    for row in 0..*rows {
                        let grow = &g[row * cols..(row + 1) * cols];
                        let base = (r0 + row) * src_cols + c0;
                        for (dst, &src) in acc[base..base + cols].iter_mut().zip(grow) {
                            *dst += src;
                        }
                    }
                }
            }
            OpKind::GatherRows { x, indices, cols } => {
                if self.nodes[x.0].needs_grad {
                    let len = self.nodes[x.0].value.len();
                    let acc = Self::flow_into(flow, *x, len);
                    for (slot, &i) in indices.iter().enumerate() {
                        let grow = &g[slot * cols..(slot + 1) * cols];
                        for (dst, &src) in acc[i * cols..(i + 1) * cols].iter_mut().zip(grow) {
                            *dst += src;
                        }
                    }
                }
            }
            OpKind::SoftmaxRows { x, cols } => {
                if self.nodes[x.0].needs_grad {
                    let y = &self.nodes[out.0].value;
                    let acc = Self::flow_into(flow, *x, y.len());
                    for row in 0..y.len() / cols {
                        let yr = &y[row * cols..(row + 1) * cols];
                        let gr = &g[row * cols..(row + 1) * cols];
                        let mut dot = E::zero();
                        for (&yv, &gv) in yr.iter().zip(gr) {
                            dot += yv * gv;
                        }
                        for (dst, (&yv, &gv)) in
                            acc[row * cols..(row + 1) * cols].iter_mut().zip(yr.iter().zip(gr))
                        {
                            *dst += yv * (gv - dot);
                        }
                    }
                }
            }
            OpKind::LayerNorm { x, gamma, beta, mean, inv } => {
                let d = self.nodes[gamma.0].value.len();
                let rows = mean.len();
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gamma.0].value;
                if self.nodes[beta.0].needs_grad {
                    let acc = Self::flow_into(flow, *beta, d);
                    for row in g.chunks_exact(d) {
                        for (dst, &src) in acc.iter_mut().zip(row) {
                            *dst += src;
                        }
                    }
                }
                if self.nodes[gamma.0].needs_grad {
                    let acc = Self::flow_into(flow, *gamma, d);
                    for row in 0..rows {
                        let m = mean[row];
                        let iv = inv[row];
                        for j in 0..d {
                            let xhat = (xv[row * d + j] - m) * iv;
                            acc[j] += g[row * d + j] * xhat;
                        }
                    }
                }
                if self.nodes[x.0].needs_grad {
                    let dn = E::from_f64(d as f64);
                    let mut dx = vec![E::zero(); rows * d];
                    for row in 0..rows {
                        let m = mean[row];
                        let iv = inv[row];
                        let mut sum_dxhat = E::zero();
                        let mut sum_dxhat_xhat = E::zero();
                        for j in 0..d {
                            let xhat = (xv[row * d + j] - m) * iv;
                            let dxhat = g[row * d + j] * gv[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let mean_dxhat = sum_dxhat / dn;
                        let mean_dxhat_xhat = sum_dxhat_xhat / dn;
                        for j in 0..d {
                            let xhat = (xv[row * d + j] - m) * iv;
                            let dxhat = g[row * d + j] * gv[j];
                            dx[row * d + j] = (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * iv;
                        }
                    }
                    let acc = Self::flow_into(flow, *x, rows * d);
                    for (dst, src) in acc.iter_mut().zip(dx) {
                        *dst += src;
                    }
                }
            }
            OpKind::Gelu { x } => {
                if self.nodes[x.0].needs_grad {
                    let half = E::from_f64(0.5);
                    let inv_sqrt2 = E::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                    let inv_sqrt_2pi = E::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                    let acc = Self::flow_into(flow, *x, g.len());
                    for ((dst, &gv), &v) in acc.iter_mut().zip(g).zip(&self.nodes[x.0].value) {
                        let phi_cdf = half * (E::one() + (v * inv_sqrt2).erf());
                        let phi_pdf = inv_sqrt_2pi * (-(v * v) * half).exp();
                        *dst += gv * (phi_cdf + v * phi_pdf);
                    }
                }
            }
            OpKind::Relu { x } => {
                if self.nodes[x.0].needs_grad {
                    let acc = Self::flow_into(flow, *x, g.len());
                    for ((dst, &gv), &v) in acc.iter_mut().zip(g).zip(&self.nodes[x.0].value) {
                        if v > E::zero() {
                            *dst += gv;
                        }
                    }
                }
            }
            OpKind::Dropout { x, mask } => {
                if self.nodes[x.0].needs_grad {
                    let acc = Self::flow_into(flow, *x, mask.len());
                    for ((dst, &gv), &m) in acc.iter_mut().zip(g).zip(mask) {
                        *dst += gv * m;
                    }
                }
            }
            OpKind::StopGrad => {}
            OpKind::SumAll { x } => {
                if self.nodes[x.0].needs_grad {
                    let len = self.nodes[x.0].value.len();
                    let acc = Self::flow_into(flow, *x, len);
                    for dst in acc.iter_mut() {
                        *dst += g[0];
                    }
                }
            }
            OpKind::WeightedCe { logits, probs, labels, sample_w, wsum } => {
                if self.nodes[logits.0].needs_grad {
                    let c = probs.len() / labels.len();
                    let acc = Self::flow_into(flow, *logits, probs.len());
                    for (row, &y) in labels.iter().enumerate() {
                        let coeff = g[0] * sample_w[row] / *wsum;
                        for j in 0..c {
                            let indicator = if j == y { E::one() } else { E::zero() };
                            acc[row * c + j] += coeff * (probs[row * c + j] - indicator);
                        }
                    }
                }
            }
            OpKind::EpiContract { m, z, dz, classes } => {
                let s = self.nodes[z.0].shape[0];
                if self.nodes[m.0].needs_grad {
                    let mlen = self.nodes[m.0].value.len();
                    let zv = &self.nodes[z.0].value;
                    let acc = Self::flow_into(flow, *m, mlen);
                    for row in 0..s {
                        for k in 0..*dz {
                            let zk = zv[row * dz + k];
                            for j in 0..*classes {
                                acc[row * dz * classes + k * classes + j] +=
                                    g[row * classes + j] * zk;
                            }
                        }
                    }
                }
                if self.nodes[z.0].needs_grad {
                    let zlen = self.nodes[z.0].value.len();
                    let mv = &self.nodes[m.0].value;
                    let acc = Self::flow_into(flow, *z, zlen);
                    for row in 0..s {
                        for k in 0..*dz {
                            let mut sum = E::zero();
                            for j in 0..*classes {
                                sum += g[row * classes + j]
                                    * mv[row * dz * classes + k * classes + j];
                            }
                            acc[row * dz + k] += sum;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_is_exact() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let m = tape.constant(vec![3, 3], (0..9).map(|i| i as f64 * 0.7 - 2.0).collect());
        let left = tape.matmul(eye, m).unwrap();
        let right = tape.matmul(m, eye).unwrap();
        assert_eq!(tape.value(left), tape.value(m));
        assert_eq!(tape.value(right), tape.value(m));
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]);
        let b = tape.constant(vec![4, 2], vec![0.0; 8]);
        let err = tape.matmul(a, b).unwrap_err();
        match err {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_match_closed_form() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![1, 2], vec![2.0, 0.0]);
        let y = tape.softmax_rows(x).unwrap();
        let e2 = 2f64.exp();
        let expect = [e2 / (e2 + 1.0), 1.0 / (e2 + 1.0)];
        for (got, want) in tape.value(y).iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![1, 2], vec![1000.0, 0.0]);
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y);
        assert!(v.iter().all(|p| p.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![1, 2], vec![f64::NAN, 0.0]);
        assert_eq!(tape.softmax_rows(x).unwrap_err(), TensorError::NonFinite {
            op: "softmax_rows"
        });
    }

    #[test]
    fn layer_norm_zero_centers_constant_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![1, 4], vec![3.0; 4]);
        let gamma = tape.constant(vec![4], vec![1.0; 4]);
        let beta = tape.constant(vec![4], vec![0.0; 4]);
        let y = tape.layer_norm(x, gamma, beta, 1e-6).unwrap();
        for &v in tape.value(y) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![2, 8], (0..16).map(|i| (i as f64).sin() * 3.0).collect());
        let gamma = tape.constant(vec![8], vec![1.0; 8]);
        let beta = tape.constant(vec![8], vec![0.0; 8]);
        let y = tape.layer_norm(x, gamma, beta, 1e-12).unwrap();
        for row in tape.value(y).chunks_exact(8) {
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_norm_beta_sets_row_mean() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![1, 4], vec![0.5, -1.0, 2.0, 0.25]);
        let gamma = tape.constant(vec![4], vec![1.0; 4]);
        let beta_v = [0.2, -0.4, 1.0, 0.6];
        let beta = tape.constant(vec![4], beta_v.to_vec());
        let y = tape.layer_norm(x, gamma, beta, 1e-6).unwrap();
        let mean: f64 = tape.value(y).iter().sum::<f64>() / 4.0;
        let beta_mean: f64 = beta_v.iter().sum::<f64>() / 4.0;
        assert!((mean - beta_mean).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_requires_width_two() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![3, 1], vec![1.0; 3]);
        let gamma = tape.constant(vec![1], vec![1.0]);
        let beta = tape.constant(vec![1], vec![0.0]);
        assert!(tape.layer_norm(x, gamma, beta, 1e-6).is_err());
    }

    #[test]
    fn gelu_matches_reference_points() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![1, 3], vec![0.0, 10.0, -10.0]);
        let y = tape.gelu(x);
        let v = tape.value(y);
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 10.0).abs() < 1e-4);
        assert!(v[2].abs() < 1e-4);

        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![1, 1], vec![1.0]);
        let y = tape.gelu(x);
        let phi1 = 0.5 * (1.0 + libm::erf(1.0 / 2f64.sqrt()));
        assert!((tape.value(y)[0] - phi1).abs() < 1e-12);
    }

    #[test]
    fn backward_of_linear_sum_gives_input_rows() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(
            &tensor(vec![2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).with_requires_grad(true),
        );
        let x = tape.constant(vec![1, 3], vec![1.0, 2.0, 3.0]);
        let y = tape.linear(x, w, None).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_leaves_disconnected_grads_empty() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(&tensor(vec![2, 2], vec![1.0; 4]).with_requires_grad(true));
        let x = tape.leaf(&tensor(vec![1, 2], vec![1.0, 2.0]).with_requires_grad(true));
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert!(tape.grad(w).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_twice_doubles_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&tensor(vec![1, 2], vec![3.0, 4.0]).with_requires_grad(true));
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        let first: Vec<f64> = tape.grad(x).unwrap().to_vec();
        tape.backward(loss).unwrap();
        let second: Vec<f64> = tape.grad(x).unwrap().to_vec();
        assert_eq!(first, vec![6.0, 8.0]);
        assert_eq!(second, vec![12.0, 16.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&tensor(vec![1, 2], vec![1.0, 2.0]).with_requires_grad(true));
        let err = tape.backward(x).unwrap_err();
        assert_eq!(err, TensorError::NotScalar { op: "backward", shape: vec![1, 2] });
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&tensor(vec![1, 2], vec![2.0, 5.0]).with_requires_grad(true));
        let frozen = tape.stop_grad(x);
        let y = tape.mul(frozen, frozen).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.value(frozen), tape.value(x));
    }

    #[test]
    fn dropout_zero_rate_is_identity_and_draws_nothing() {
        let mut rng = SplitMix64::new(9);
        let before = rng.clone().next_u64();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(vec![2, 2], vec![1.0, -2.0, 3.0, -4.0]);
        let y = tape.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        assert_eq!(rng.next_u64(), before);
    }

    #[test]
    fn dropout_scales_kept_elements() {
        let mut rng = SplitMix64::new(4);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![1, 1000], vec![1.0; 1000]);
        let y = tape.dropout(x, 0.25, &mut rng).unwrap();
        let kept: Vec<f64> =
            tape.value(y).iter().cloned().filter(|&v| v != 0.0).collect();
        for &v in &kept {
            assert!((v - 1.0 / 0.75).abs() < 1e-12);
        }
        let dropped = 1000 - kept.len();
        let sigma = (1000.0f64 * 0.25 * 0.75).sqrt();
        assert!((dropped as f64 - 250.0).abs() < 4.0 * sigma, "dropped {dropped}");
    }

    #[test]
    fn weighted_ce_matches_hand_computation() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let loss = tape.weighted_ce(logits, &[0, 0], &[1.0, 1.0]).unwrap();
        let p0 = 1f64.exp() / (1f64.exp() + 1.0);
        let p1 = 1.0 / (1f64.exp() + 1.0);
        let expect = -(p0.ln() + p1.ln()) / 2.0;
        assert!((tape.value(loss)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(vec![2, 3], (0..6).map(|i| i as f64).collect());
        let b = tape.constant(vec![1, 3], vec![9.0, 8.0, 7.0]);
        let cat = tape.concat_rows(&[a, b]).unwrap();
        assert_eq!(tape.shape(cat), &[3, 3]);
        let back = tape.slice_rows(cat, 2, 1).unwrap();
        assert_eq!(tape.value(back), &[9.0, 8.0, 7.0]);

        let cols = tape.concat_cols(&[a, a]).unwrap();
        assert_eq!(tape.shape(cols), &[2, 6]);
        let block = tape.slice_block(cols, 0, 2, 3, 3).unwrap();
        assert_eq!(tape.value(block), tape.value(a));
    }

    #[test]
    fn gather_rows_collects_in_order() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![3, 2], vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]);
        let g = tape.gather_rows(x, &[2, 0]).unwrap();
        assert_eq!(tape.value(g), &[20.0, 21.0, 0.0, 1.0]);
    }
}
