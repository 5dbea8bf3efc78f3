//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Operations append nodes to the graph in construction order, which is
//! also a topological order: an op may only reference vars created
//! earlier. `backward` walks the tape once in reverse, accumulating
//! gradients additively into every input, so a value used twice receives
//! the sum of both contributions.
//!
//! A graph is rebuilt per step and dropped afterwards; dropping frees all
//! saved activations.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{shape_string, TensorBase};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Handle to a node in one graph. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
    },
    Transpose {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: S,
    },
    /// bias is [1 x n], broadcast over every row of x.
    AddRowBias {
        x: Var,
        bias: Var,
    },
    Relu {
        x: Var,
    },
    /// Backward uses the node's own output value.
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    EmbeddingLookup {
        table: Var,
        ids: Vec<u32>,
    },
    /// scale_mask holds 0 or 1/(1-p) per element.
    Dropout {
        x: Var,
        scale_mask: Vec<S>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    SliceCols {
        x: Var,
        start: usize,
        width: usize,
    },
    Sum {
        x: Var,
    },
    LabelSmoothedNll {
        logits: Var,
        targets: Vec<u32>,
        pad_id: u32,
        smoothing: S,
        probs: Vec<S>,
        n_active: usize,
    },
}

struct Node<S> {
    /// Shared so parameter leaves cost a refcount bump, not a copy.
    value: Arc<TensorBase<S>>,
    grad: Option<TensorBase<S>>,
    op: Op<S>,
}

/// Tape-based computation graph over scalar type `S`.
pub struct GraphBase<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for GraphBase<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> GraphBase<S> {
    pub fn new() -> Self {
        GraphBase { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, value: TensorBase<S>, op: Op<S>) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: TensorBase<S>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf over shared data; used for parameters so a forward pass never
    /// copies weight tensors.
    pub fn leaf_shared(&mut self, value: Arc<TensorBase<S>>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &TensorBase<S> {
        &self.nodes[v.0].value
    }

    /// Gradient populated by the last `backward` call, if this node was
    /// reached.
    pub fn grad(&self, v: Var) -> Option<&TensorBase<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Values of every softmax node in the graph, in construction order.
    /// Lets callers inspect attention distributions after a forward pass.
    pub fn softmax_values(&self) -> Vec<&TensorBase<S>> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Softmax { .. }))
            .map(|n| n.value.as_ref())
            .collect()
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::shape(format!(
                "matmul: inner extents differ, lhs {} rhs {}",
                shape_string(self.value(a).shape()),
                shape_string(self.value(b).shape())
            )));
        }
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), m, ka, n);
        let value = TensorBase::new(vec![m, n], data)?;
        Ok(self.push(value, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let value = TensorBase::new(vec![c, r], data)?;
        Ok(self.push(value, Op::Transpose { x }))
    }

    fn check_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{}: shapes differ, {} vs {}",
                what,
                shape_string(self.value(a).shape()),
                shape_string(self.value(b).shape())
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "add")?;
        let data: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = TensorBase::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "sub")?;
        let data: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let value = TensorBase::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "mul")?;
        let data: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = TensorBase::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let data: Vec<S> = self.value(x).data().iter().map(|&v| v * c).collect();
        let value = TensorBase::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Scale { x, c }))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let (br, bc) = self.value(bias).dims2()?;
        if br != 1 || bc != c {
            return Err(Error::shape(format!(
                "add_row_bias: x {} needs bias 1x{}, got {}",
                shape_string(self.value(x).shape()),
                c,
                shape_string(self.value(bias).shape())
            )));
        }
        let bias_data = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += bias_data[j];
            }
        }
        let value = TensorBase::new(vec![r, c], data)?;
        Ok(self.push(value, Op::AddRowBias { x, bias }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data: Vec<S> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > S::zero() { v } else { S::zero() })
            .collect();
        let value = TensorBase::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Relu { x }))
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!(
                "softmax: axis {} out of range for shape {}",
                axis,
                shape_string(&shape)
            )));
        }
        let src = self.value(x).data();
        if src.iter().any(|v| v.is_nan()) {
            return Err(Error::numeric("softmax: NaN in input"));
        }
        let data = softmax_kernel(src, &shape, axis);
        let value = TensorBase::new(shape, data)?;
        Ok(self.push(value, Op::Softmax { x, axis }))
    }

    /// Per-row normalization of a [L x C] tensor followed by affine
    /// gain/shift (each [1 x C]). `eps` sits inside the square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: S) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if cols < 2 {
            return Err(Error::shape("layer_norm: needs at least 2 columns"));
        }
        for (v, name) in [(gain, "gain"), (shift, "shift")] {
            let (r, c) = self.value(v).dims2()?;
            if r != 1 || c != cols {
                return Err(Error::shape(format!(
                    "layer_norm: {} must be 1x{}, got {}",
                    name,
                    cols,
                    shape_string(self.value(v).shape())
                )));
            }
        }
        let src = self.value(x).data();
        let gain_data = self.value(gain).data();
        let shift_data = self.value(shift).data();
        let denom = S::from_usize(cols);
        let mut out = vec![S::zero(); rows * cols];
        let mut xhat = vec![S::zero(); rows * cols];
        let mut inv_std = vec![S::zero(); rows];
        for i in 0..rows {
            let row = &src[i * cols..(i + 1) * cols];
            let mut mean = S::zero();
            for &v in row {
                mean += v;
            }
            mean /= denom;
            let mut var = S::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var /= denom;
            let istd = (var + eps).sqrt().recip();
            inv_std[i] = istd;
            for j in 0..cols {
                let h = (row[j] - mean) * istd;
                xhat[i * cols + j] = h;
                out[i * cols + j] = h * gain_data[j] + shift_data[j];
            }
        }
        let value = TensorBase::new(vec![rows, cols], out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            },
        ))
    }

    /// Gathers rows of `table` [V x C] by id, producing [len(ids) x C].
    pub fn embedding_lookup(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (vocab, width) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(Error::usage("embedding_lookup: empty id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::data(format!(
                "embedding_lookup: id {} out of range for vocab {}",
                bad, vocab
            )));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            let off = id as usize * width;
            data.extend_from_slice(&src[off..off + width]);
        }
        let value = TensorBase::new(vec![ids.len(), width], data)?;
        Ok(self.push(
            value,
            Op::EmbeddingLookup {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Inverted dropout: survivors scaled by 1/(1-p). Identity (the same
    /// var, bitwise) when `train` is false.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, rng: &mut ChaCha8Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout: rate {} outside [0, 1)", p)));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep_inv = S::from_f64(1.0 / (1.0 - p));
        let src = self.value(x).data();
        let mut scale_mask = Vec::with_capacity(src.len());
        for _ in 0..src.len() {
            if rng.random::<f64>() < p {
                scale_mask.push(S::zero());
            } else {
                scale_mask.push(keep_inv);
            }
        }
        let data: Vec<S> = src.iter().zip(&scale_mask).map(|(&v, &s)| v * s).collect();
        let value = TensorBase::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, scale_mask }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        match axis {
            0 => self.concat_rows(parts),
            1 => self.concat_cols(parts),
            _ => Err(Error::shape(format!("concat: axis {} unsupported", axis))),
        }
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::usage("concat: no parts"));
        }
        let (_, cols) = self.value(parts[0]).dims2()?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(Error::shape(format!(
                    "concat rows: column mismatch, {} vs {}",
                    cols, c
                )));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = TensorBase::new(vec![rows, cols], data)?;
        Ok(self.push(
            value,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::usage("concat: no parts"));
        }
        let (rows, _) = self.value(parts[0]).dims2()?;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::shape(format!(
                    "concat cols: row mismatch, {} vs {}",
                    rows, r
                )));
            }
            cols += c;
        }
        let mut data = vec![S::zero(); rows * cols];
        let mut offset = 0;
        for &p in parts {
            let (_, c) = self.value(p).dims2()?;
            let src = self.value(p).data();
            for i in 0..rows {
                data[i * cols + offset..i * cols + offset + c]
                    .copy_from_slice(&src[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        let value = TensorBase::new(vec![rows, cols], data)?;
        Ok(self.push(
            value,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if start + width > cols || width == 0 {
            return Err(Error::shape(format!(
                "slice_cols: [{}, {}) out of range for {} columns",
                start,
                start + width,
                cols
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * width);
        for i in 0..rows {
            data.extend_from_slice(&src[i * cols + start..i * cols + start + width]);
        }
        let value = TensorBase::new(vec![rows, width], data)?;
        Ok(self.push(value, Op::SliceCols { x, start, width }))
    }

    /// Full reduction to a scalar of shape 1.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut total = S::zero();
        for &v in self.value(x).data() {
            total += v;
        }
        Ok(self.push(TensorBase::scalar(total), Op::Sum { x }))
    }

    /// Per non-pad token: (1-eps) * NLL(target) + eps * mean over the
    /// vocabulary of NLL, averaged over non-pad tokens.
    pub fn label_smoothed_nll(
        &mut self,
        logits: Var,
        targets: &[u32],
        pad_id: u32,
        smoothing: f64,
    ) -> Result<Var> {
        let (rows, vocab) = self.value(logits).dims2()?;
        if targets.len() != rows {
            return Err(Error::shape(format!(
                "label_smoothed_nll: {} logit rows but {} targets",
                rows,
                targets.len()
            )));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::config(format!(
                "label smoothing {} outside [0, 1)",
                smoothing
            )));
        }
        if let Some(&bad) = targets
            .iter()
            .find(|&&t| t != pad_id && t as usize >= vocab)
        {
            return Err(Error::data(format!(
                "label_smoothed_nll: target {} out of range for vocab {}",
                bad, vocab
            )));
        }
        let n_active = targets.iter().filter(|&&t| t != pad_id).count();
        if n_active == 0 {
            return Err(Error::usage(
                "label_smoothed_nll: every position is padding",
            ));
        }
        let src = self.value(logits).data();
        let eps = S::from_f64(smoothing);
        let one = S::one();
        let vocab_s = S::from_usize(vocab);
        let mut probs = vec![S::zero(); rows * vocab];
        let mut total = S::zero();
        for (i, &target) in targets.iter().enumerate() {
            let row = &src[i * vocab..(i + 1) * vocab];
            let mut max = row[0];
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            let mut z = S::zero();
            for &v in row {
                z += (v - max).exp();
            }
            let log_z = z.ln() + max;
            for (j, &v) in row.iter().enumerate() {
                probs[i * vocab + j] = (v - log_z).exp();
            }
            if target == pad_id {
                continue;
            }
            // log-softmax of the target plus the mean over the vocabulary
            let lsm_target = row[target as usize] - log_z;
            let mut lsm_sum = S::zero();
            for &v in row {
                lsm_sum += v - log_z;
            }
            let nll = -((one - eps) * lsm_target + eps * lsm_sum / vocab_s);
            total += nll;
        }
        let loss = total / S::from_usize(n_active);
        Ok(self.push(
            TensorBase::scalar(loss),
            Op::LabelSmoothedNll {
                logits,
                targets: targets.to_vec(),
                pad_id,
                smoothing: eps,
                probs,
                n_active,
            },
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Populates gradient buffers for every node reachable from `loss`,
    /// visiting the tape once in reverse construction order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::usage(format!(
                "backward: loss must be scalar, got shape {}",
                shape_string(self.nodes[loss.0].value.shape())
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let g = match upper[0].as_ref() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = self.nodes[a.0].value.dims2()?;
                    let (_, nn) = self.nodes[b.0].value.dims2()?;
                    {
                        let acc = ensure(&mut lower[a.0], m * k);
                        matmul_nt_acc(g, self.nodes[b.0].value.data(), m, nn, k, acc);
                    }
                    {
                        let acc = ensure(&mut lower[b.0], k * nn);
                        matmul_tn_acc(self.nodes[a.0].value.data(), g, m, k, nn, acc);
                    }
                }
                Op::Transpose { x } => {
                    let (r, c) = self.nodes[x.0].value.dims2()?;
                    let acc = ensure(&mut lower[x.0], r * c);
                    // out is [c x r]; route grad back through the index swap
                    for j in 0..c {
                        for i2 in 0..r {
                            acc[i2 * c + j] += g[j * r + i2];
                        }
                    }
                }
                Op::Add { a, b } => {
                    add_into(ensure(&mut lower[a.0], g.len()), g);
                    add_into(ensure(&mut lower[b.0], g.len()), g);
                }
                Op::Sub { a, b } => {
                    add_into(ensure(&mut lower[a.0], g.len()), g);
                    let acc = ensure(&mut lower[b.0], g.len());
                    for (o, &gv) in acc.iter_mut().zip(g) {
                        *o -= gv;
                    }
                }
                Op::Mul { a, b } => {
                    {
                        let bd = self.nodes[b.0].value.data();
                        let acc = ensure(&mut lower[a.0], g.len());
                        for ((o, &gv), &bv) in acc.iter_mut().zip(g).zip(bd) {
                            *o += gv * bv;
                        }
                    }
                    {
                        let ad = self.nodes[a.0].value.data();
                        let acc = ensure(&mut lower[b.0], g.len());
                        for ((o, &gv), &av) in acc.iter_mut().zip(g).zip(ad) {
                            *o += gv * av;
                        }
                    }
                }
                Op::Scale { x, c } => {
                    let acc = ensure(&mut lower[x.0], g.len());
                    for (o, &gv) in acc.iter_mut().zip(g) {
                        *o += gv * *c;
                    }
                }
                Op::AddRowBias { x, bias } => {
                    let (r, c) = node.value.dims2()?;
                    add_into(ensure(&mut lower[x.0], g.len()), g);
                    let acc = ensure(&mut lower[bias.0], c);
                    for i2 in 0..r {
                        for j in 0..c {
                            acc[j] += g[i2 * c + j];
                        }
                    }
                }
                Op::Relu { x } => {
                    let xd = self.nodes[x.0].value.data();
                    let acc = ensure(&mut lower[x.0], g.len());
                    for ((o, &gv), &xv) in acc.iter_mut().zip(g).zip(xd) {
                        if xv > S::zero() {
                            *o += gv;
                        }
                    }
                }
                Op::Softmax { x, axis } => {
                    let y = node.value.data();
                    let shape = node.value.shape();
                    let acc = ensure(&mut lower[x.0], g.len());
                    softmax_backward(y, g, shape, *axis, acc);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    shift,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = node.value.dims2()?;
                    let gain_data = self.nodes[gain.0].value.data();
                    let denom = S::from_usize(cols);
                    {
                        let acc = ensure(&mut lower[x.0], rows * cols);
                        for i2 in 0..rows {
                            let g_row = &g[i2 * cols..(i2 + 1) * cols];
                            let h_row = &xhat[i2 * cols..(i2 + 1) * cols];
                            // dy scaled by gain, then remove the mean and the
                            // xhat-projected component
                            let mut sum_dg = S::zero();
                            let mut sum_dgh = S::zero();
                            for j in 0..cols {
                                let dg = g_row[j] * gain_data[j];
                                sum_dg += dg;
                                sum_dgh += dg * h_row[j];
                            }
                            let mean_dg = sum_dg / denom;
                            let mean_dgh = sum_dgh / denom;
                            for j in 0..cols {
                                let dg = g_row[j] * gain_data[j];
                                acc[i2 * cols + j] +=
                                    inv_std[i2] * (dg - mean_dg - h_row[j] * mean_dgh);
                            }
                        }
                    }
                    {
                        let acc = ensure(&mut lower[gain.0], cols);
                        for i2 in 0..rows {
                            for j in 0..cols {
                                acc[j] += g[i2 * cols + j] * xhat[i2 * cols + j];
                            }
                        }
                    }
                    {
                        let acc = ensure(&mut lower[shift.0], cols);
                        for i2 in 0..rows {
                            for j in 0..cols {
                                acc[j] += g[i2 * cols + j];
                            }
                        }
                    }
                }
                Op::EmbeddingLookup { table, ids } => {
                    let (_, width) = self.nodes[table.0].value.dims2()?;
                    let numel = self.nodes[table.0].value.numel();
                    let acc = ensure(&mut lower[table.0], numel);
                    for (row, &id) in ids.iter().enumerate() {
                        let dst = id as usize * width;
                        for j in 0..width {
                            acc[dst + j] += g[row * width + j];
                        }
                    }
                }
                Op::Dropout { x, scale_mask } => {
                    let acc = ensure(&mut lower[x.0], g.len());
                    for ((o, &gv), &s) in acc.iter_mut().zip(g).zip(scale_mask) {
                        *o += gv * s;
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let numel = self.nodes[p.0].value.numel();
                        let acc = ensure(&mut lower[p.0], numel);
                        for (o, &gv) in acc.iter_mut().zip(&g[offset..offset + numel]) {
                            *o += gv;
                        }
                        offset += numel;
                    }
                }
                Op::ConcatCols { parts } => {
                    let (rows, cols) = node.value.dims2()?;
                    let mut offset = 0;
                    for &p in parts {
                        let (_, c) = self.nodes[p.0].value.dims2()?;
                        let acc = ensure(&mut lower[p.0], rows * c);
                        for i2 in 0..rows {
                            for j in 0..c {
                                acc[i2 * c + j] += g[i2 * cols + offset + j];
                            }
                        }
                        offset += c;
                    }
                }
                Op::SliceCols { x, start, width } => {
                    let (rows, cols) = self.nodes[x.0].value.dims2()?;
                    let acc = ensure(&mut lower[x.0], rows * cols);
                    for i2 in 0..rows {
                        for j in 0..*width {
                            acc[i2 * cols + start + j] += g[i2 * width + j];
                        }
                    }
                }
                Op::Sum { x } => {
                    let numel = self.nodes[x.0].value.numel();
                    let acc = ensure(&mut lower[x.0], numel);
                    let gv = g[0];
                    for o in acc.iter_mut() {
                        *o += gv;
                    }
                }
                Op::LabelSmoothedNll {
                    logits,
                    targets,
                    pad_id,
                    smoothing,
                    probs,
                    n_active,
                } => {
                    let (_, vocab) = self.nodes[logits.0].value.dims2()?;
                    let acc = ensure(&mut lower[logits.0], probs.len());
                    let gv = g[0];
                    let eps = *smoothing;
                    let one = S::one();
                    let uniform = eps / S::from_usize(vocab);
                    let inv_n = S::from_usize(*n_active).recip();
                    for (row, &target) in targets.iter().enumerate() {
                        if target == *pad_id {
                            continue;
                        }
                        for j in 0..vocab {
                            let mut q = uniform;
                            if j == target as usize {
                                q += one - eps;
                            }
                            acc[row * vocab + j] += gv * (probs[row * vocab + j] - q) * inv_n;
                        }
                    }
                }
            }
        }

        for (node, grad) in self.nodes.iter_mut().zip(grads) {
            node.grad = grad.map(|data| {
                TensorBase::new(node.value.shape().to_vec(), data)
                    .expect("gradient buffer matches value shape")
            });
        }
        Ok(())
    }
}

fn ensure<S: Scalar>(slot: &mut Option<Vec<S>>, numel: usize) -> &mut [S] {
    slot.get_or_insert_with(|| vec![S::zero(); numel])
}

fn add_into<S: Scalar>(acc: &mut [S], g: &[S]) {
    for (o, &gv) in acc.iter_mut().zip(g) {
        *o += gv;
    }
}

/// Row-major product with the panel loop unrolled four deep: one store
/// per four multiply-adds instead of one per one.
fn matmul_kernel<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        let mut p = 0;
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (a_row[p], a_row[p + 1], a_row[p + 2], a_row[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                o_row[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            p += 4;
        }
        while p < k {
            let av = a_row[p];
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
            p += 1;
        }
    }
    out
}

/// acc[m x k] += dc[m x n] * b[k x n] transposed.
fn matmul_nt_acc<S: Scalar>(dc: &[S], b: &[S], m: usize, n: usize, k: usize, acc: &mut [S]) {
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        let acc_row = &mut acc[i * k..(i + 1) * k];
        for (p, slot) in acc_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = S::zero();
            for (&x, &y) in dc_row.iter().zip(b_row) {
                s += x * y;
            }
            *slot += s;
        }
    }
}

/// acc[k x n] += a[m x k] transposed * dc[m x n].
fn matmul_tn_acc<S: Scalar>(a: &[S], dc: &[S], m: usize, k: usize, n: usize, acc: &mut [S]) {
    let mut i = 0;
    while i + 4 <= m {
        let rows = [
            &a[i * k..(i + 1) * k],
            &a[(i + 1) * k..(i + 2) * k],
            &a[(i + 2) * k..(i + 3) * k],
            &a[(i + 3) * k..(i + 4) * k],
        ];
        let dc0 = &dc[i * n..(i + 1) * n];
        let dc1 = &dc[(i + 1) * n..(i + 2) * n];
        let dc2 = &dc[(i + 2) * n..(i + 3) * n];
        let dc3 = &dc[(i + 3) * n..(i + 4) * n];
        for p in 0..k {
            let (a0, a1, a2, a3) = (rows[0][p], rows[1][p], rows[2][p], rows[3][p]);
            let acc_row = &mut acc[p * n..(p + 1) * n];
            for j in 0..n {
                acc_row[j] += a0 * dc0[j] + a1 * dc1[j] + a2 * dc2[j] + a3 * dc3[j];
            }
        }
        i += 4;
    }
    while i < m {
        let a_row = &a[i * k..(i + 1) * k];
        let dc_row = &dc[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let acc_row = &mut acc[p * n..(p + 1) * n];
            for (o, &gv) in acc_row.iter_mut().zip(dc_row) {
                *o += av * gv;
            }
        }
        i += 1;
    }
}

fn softmax_kernel<S: Scalar>(src: &[S], shape: &[usize], axis: usize) -> Vec<S> {
    let axis_size = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![S::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| o * axis_size * inner + a * inner + i;
            let mut max = src[at(0)];
            for a in 1..axis_size {
                if src[at(a)] > max {
                    max = src[at(a)];
                }
            }
            let mut z = S::zero();
            for a in 0..axis_size {
                let e = (src[at(a)] - max).exp();
                out[at(a)] = e;
                z += e;
            }
            for a in 0..axis_size {
                out[at(a)] = out[at(a)] / z;
            }
        }
    }
    out
}

/// dx = y * (dy - sum(dy * y)) along the softmax axis.
fn softmax_backward<S: Scalar>(y: &[S], g: &[S], shape: &[usize], axis: usize, acc: &mut [S]) {
    let axis_size = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| o * axis_size * inner + a * inner + i;
            let mut dot = S::zero();
            for a in 0..axis_size {
                dot += g[at(a)] * y[at(a)];
            }
            for a in 0..axis_size {
                acc[at(a)] += y[at(a)] * (g[at(a)] - dot);
            }
        }
    }
}
