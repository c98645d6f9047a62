use rand::{Rng, RngCore};

use super::tensor::Tensor;
use super::MASK_FILL;
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Boolean keep-mask aligned with a tensor shape. `true` keeps an entry,
/// `false` masks it out of the softmax.
#[derive(Debug, Clone)]
pub struct Mask {
    shape: Vec<usize>,
    keep: Vec<bool>,
}

impl Mask {
    pub fn from_keep(shape: Vec<usize>, keep: Vec<bool>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != keep.len() {
            return Err(Error::Contract(format!(
                "mask shape {:?} does not describe {} flags",
                shape,
                keep.len()
            )));
        }
        Ok(Mask { shape, keep })
    }

    /// Causal [n, n] mask: row i keeps columns 0..=i.
    pub fn causal(n: usize) -> Self {
        let mut keep = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                keep[i * n + j] = true;
            }
        }
        Mask {
            shape: vec![n, n],
            keep,
        }
    }

    /// [rows, keys] mask that keeps the same key columns in every row.
    pub fn broadcast_keys(rows: usize, keep_key: &[bool]) -> Self {
        let mut keep = Vec::with_capacity(rows * keep_key.len());
        for _ in 0..rows {
            keep.extend_from_slice(keep_key);
        }
        Mask {
            shape: vec![rows, keep_key.len()],
            keep,
        }
    }

    /// Elementwise AND of two identically-shaped masks.
    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op: "mask_and",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let keep = self
            .keep
            .iter()
            .zip(&other.keep)
            .map(|(a, b)| *a && *b)
            .collect();
        Ok(Mask {
            shape: self.shape.clone(),
            keep,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }
}

struct Node {
    value: Tensor,
    rule: Option<BackwardFn>,
}

/// Given all nodes and the upstream gradient of this node's output,
/// returns `(parent index, gradient contribution)` pairs.
type BackwardFn = Box<dyn Fn(&[Node], &[f64]) -> Vec<(usize, Vec<f64>)>>;

/// Define-by-run reverse-mode tape.
///
/// Operations append nodes; [`Tape::backward`] replays the recorded rules
/// in reverse order. Rebuild a fresh tape for every forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
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
            grad_enabled: true,
        }
    }

    /// Tape that records values only; no backward rules, no gradients.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── node access ─────────────────────────────────────────────────

    pub fn data(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a node, if it participates in gradients.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    // ── leaves ──────────────────────────────────────────────────────

    /// Records an existing tensor as a leaf. Its `requires_grad` flag is
    /// honored unless the tape is in inference mode.
    pub fn leaf(&mut self, t: Tensor) -> Result<TensorId> {
        let t = if self.grad_enabled { t } else { t.detached() };
        self.push("leaf", t, None)
    }

    /// Records a non-differentiable constant.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<TensorId> {
        self.push("constant", Tensor::from_vec(shape, data)?, None)
    }

    pub fn scalar(&mut self, value: f64) -> Result<TensorId> {
        self.push("scalar", Tensor::scalar(value), None)
    }

    /// Registers a copy of a model parameter as a differentiable leaf.
    pub fn param(&mut self, t: &Tensor) -> Result<TensorId> {
        let copy = Tensor::from_vec(t.shape().to_vec(), t.data().to_vec())?;
        let copy = if self.grad_enabled {
            copy.with_grad()
        } else {
            copy
        };
        self.push("param", copy, None)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every `requires_grad` node
    /// reachable from the loss accumulates its gradient; repeated calls
    /// without a tape rebuild keep accumulating.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.grad_enabled {
            return Err(Error::Contract(
                "backward on an inference tape".to_string(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(rule) = &self.nodes[i].rule {
                let contributions = rule(&self.nodes, &g);
                for (pid, c) in contributions {
                    debug_assert!(pid < i, "tape parents precede children");
                    if !self.nodes[pid].value.requires_grad() {
                        continue;
                    }
                    match &mut grads[pid] {
                        Some(acc) => {
                            for (slot, v) in acc.iter_mut().zip(&c) {
                                *slot += v;
                            }
                        }
                        slot => *slot = Some(c),
                    }
                }
            }
            if self.nodes[i].value.requires_grad() {
                self.nodes[i].value.accumulate_grad(&g);
            }
        }
        for node in &self.nodes[..=loss.0] {
            if let Some(g) = node.value.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::non_finite("backward"));
                }
            }
        }
        Ok(())
    }

    // ── elementwise and shape ops ───────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("add", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        let out = self.output_like("add", a, data)?;
        self.record(out, move |_, g| {
            vec![(a.0, g.to_vec()), (b.0, g.to_vec())]
        });
        Ok(out)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("mul", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x * y);
        let out = self.output_like("mul", a, data)?;
        self.record(out, move |nodes, g| {
            let bv = nodes[b.0].value.data();
            let av = nodes[a.0].value.data();
            vec![
                (a.0, zip_map(g, bv, |gi, bi| gi * bi)),
                (b.0, zip_map(g, av, |gi, ai| gi * ai)),
            ]
        });
        Ok(out)
    }

    /// `y = scale * x + shift`, elementwise with scalar coefficients.
    pub fn affine(&mut self, a: TensorId, scale: f64, shift: f64) -> Result<TensorId> {
        let data = self.data(a).iter().map(|x| scale * x + shift).collect();
        let out = self.output_like("affine", a, data)?;
        self.record(out, move |_, g| {
            vec![(a.0, g.iter().map(|gi| gi * scale).collect())]
        });
        Ok(out)
    }

    /// Adds a `[cols]` bias row to every row of a `[rows, cols]` tensor.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.as_matrix("add_bias", a)?;
        if self.shape(bias) != [cols] {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let bv = self.data(bias);
        let mut data = self.data(a).to_vec();
        for row in data.chunks_mut(cols) {
            for (slot, b) in row.iter_mut().zip(bv) {
                *slot += b;
            }
        }
        let out = self.output_like("add_bias", a, data)?;
        self.record(out, move |_, g| {
            let mut gb = vec![0.0; cols];
            for row in g.chunks(cols) {
                for (slot, v) in gb.iter_mut().zip(row) {
                    *slot += v;
                }
            }
            let _ = rows;
            vec![(a.0, g.to_vec()), (bias.0, gb)]
        });
        Ok(out)
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let data = self.data(a).iter().map(|x| x.max(0.0)).collect();
        let out = self.output_like("relu", a, data)?;
        self.record(out, move |nodes, g| {
            let x = nodes[a.0].value.data();
            vec![(a.0, zip_map(g, x, |gi, xi| if *xi > 0.0 { *gi } else { 0.0 }))]
        });
        Ok(out)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.data(a).iter().map(|x| stable_sigmoid(*x)).collect();
        let out = self.output_like("sigmoid", a, data)?;
        let out_idx = out.0;
        self.record(out, move |nodes, g| {
            let y = nodes[out_idx].value.data();
            vec![(a.0, zip_map(g, y, |gi, yi| gi * yi * (1.0 - yi)))]
        });
        Ok(out)
    }

    /// `ln(max(x, floor))`; the gradient is zero wherever the floor is
    /// active.
    pub fn log_clamped(&mut self, a: TensorId, floor: f64) -> Result<TensorId> {
        let data = self.data(a).iter().map(|x| x.max(floor).ln()).collect();
        let out = self.output_like("log_clamped", a, data)?;
        self.record(out, move |nodes, g| {
            let x = nodes[a.0].value.data();
            vec![(
                a.0,
                zip_map(g, x, |gi, xi| if *xi > floor { gi / xi } else { 0.0 }),
            )]
        });
        Ok(out)
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let t = self.make_output(a, shape, self.data(a).to_vec())?;
        let out = self.push("reshape", t, None)?;
        self.record(out, move |_, g| vec![(a.0, g.to_vec())]);
        Ok(out)
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
    pub fn dropout(&mut self, a: TensorId, rate: f64, rng: &mut dyn RngCore) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate {rate} not in [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = self
            .data(a)
            .iter()
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let data = zip_map(self.data(a), &mask, |x, m| x * m);
        let out = self.output_like("dropout", a, data)?;
        self.record(out, move |_, g| {
            vec![(a.0, zip_map(g, &mask, |gi, m| gi * m))]
        });
        Ok(out)
    }

    // ── matrix ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.as_matrix("matmul", a)?;
        let (k2, n) = self.as_matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = matmul_nn(self.data(a), self.data(b), m, k, n);
        let t = self.make_output2(a, b, vec![m, n], data)?;
        let out = self.push("matmul", t, None)?;
        let need_a = self.requires_grad(a);
        let need_b = self.requires_grad(b);
        self.record(out, move |nodes, g| {
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            let mut contribs = Vec::with_capacity(2);
            if need_a {
                contribs.push((a.0, matmul_nt(g, bv, m, n, k)));
            }
            if need_b {
                contribs.push((b.0, matmul_tn(av, g, m, k, n)));
            }
            contribs
        });
        Ok(out)
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.as_matrix("transpose", a)?;
        let data = transpose_raw(self.data(a), r, c);
        let t = self.make_output(a, vec![c, r], data)?;
        let out = self.push("transpose", t, None)?;
        self.record(out, move |_, g| vec![(a.0, transpose_raw(g, c, r))]);
        Ok(out)
    }

    /// Concatenates 2-D tensors along the last axis.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero tensors".to_string()));
        }
        let (rows, _) = self.as_matrix("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.as_matrix("concat_cols", p)?;
            if r != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.data(p);
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let requires = self.grad_enabled && parts.iter().any(|&p| self.requires_grad(p));
        let mut t = Tensor::from_vec(vec![rows, total], data)?;
        if requires {
            t = t.with_grad();
        }
        let out = self.push("concat_cols", t, None)?;
        let parents: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.record(out, move |_, g| {
            let mut contribs = Vec::with_capacity(parents.len());
            let mut offset = 0;
            for (&pid, &w) in parents.iter().zip(&widths) {
                let mut part = vec![0.0; rows * w];
                for r in 0..rows {
                    part[r * w..(r + 1) * w]
                        .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                }
                contribs.push((pid, part));
                offset += w;
            }
            contribs
        });
        Ok(out)
    }

    /// Column window `[start, start + len)` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (rows, cols) = self.as_matrix("slice_cols", a)?;
        if start + len > cols || len == 0 {
            return Err(Error::Contract(format!(
                "slice_cols [{start}, {}) out of {cols} columns",
                start + len
            )));
        }
        let src = self.data(a);
        let mut data = vec![0.0; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let t = self.make_output(a, vec![rows, len], data)?;
        let out = self.push("slice_cols", t, None)?;
        self.record(out, move |_, g| {
            let mut ga = vec![0.0; rows * cols];
            for r in 0..rows {
                ga[r * cols + start..r * cols + start + len]
                    .copy_from_slice(&g[r * len..(r + 1) * len]);
            }
            vec![(a.0, ga)]
        });
        Ok(out)
    }

    /// Row gather; the backward pass scatter-adds into the source, which
    /// makes this double as the embedding lookup.
    pub fn gather_rows(
        &mut self,
        table: &'static str,
        a: TensorId,
        indices: &[usize],
    ) -> Result<TensorId> {
        let (rows, cols) = self.as_matrix("gather_rows", a)?;
        if indices.is_empty() {
            return Err(Error::Contract(format!("{table}: empty row gather")));
        }
        for &i in indices {
            if i >= rows {
                return Err(Error::IndexOutOfRange {
                    table,
                    index: i,
                    size: rows,
                });
            }
        }
        let src = self.data(a);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let t = self.make_output(a, vec![indices.len(), cols], data)?;
        let out = self.push("gather_rows", t, None)?;
        let idx: Vec<usize> = indices.to_vec();
        self.record(out, move |_, g| {
            let mut ga = vec![0.0; rows * cols];
            for (slot, &i) in idx.iter().enumerate() {
                let grow = &g[slot * cols..(slot + 1) * cols];
                for (acc, v) in ga[i * cols..(i + 1) * cols].iter_mut().zip(grow) {
                    *acc += v;
                }
            }
            vec![(a.0, ga)]
        });
        Ok(out)
    }

    // ── reductions ──────────────────────────────────────────────────

    /// Sums each row of a `[rows, cols]` tensor into a `[rows, 1]` column.
    pub fn row_sum(&mut self, a: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.as_matrix("row_sum", a)?;
        let src = self.data(a);
        let data: Vec<f64> = (0..rows)
            .map(|r| src[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        let t = self.make_output(a, vec![rows, 1], data)?;
        let out = self.push("row_sum", t, None)?;
        self.record(out, move |_, g| {
            let mut ga = vec![0.0; rows * cols];
            for r in 0..rows {
                ga[r * cols..(r + 1) * cols].fill(g[r]);
            }
            vec![(a.0, ga)]
        });
        Ok(out)
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let total: f64 = self.data(a).iter().sum();
        let numel = self.value(a).numel();
        let t = self.make_output(a, vec![1], vec![total])?;
        let out = self.push("sum_all", t, None)?;
        self.record(out, move |_, g| vec![(a.0, vec![g[0]; numel])]);
        Ok(out)
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let numel = self.value(a).numel();
        let total: f64 = self.data(a).iter().sum();
        let t = self.make_output(a, vec![1], vec![total / numel as f64])?;
        let out = self.push("mean_all", t, None)?;
        self.record(out, move |_, g| {
            vec![(a.0, vec![g[0] / numel as f64; numel])]
        });
        Ok(out)
    }

    // ── normalizations ──────────────────────────────────────────────

    /// Row-wise masked softmax over the last axis. Masked entries are
    /// exactly zero in the output; every row must keep at least one entry.
    pub fn softmax_masked(&mut self, a: TensorId, mask: Option<&Mask>) -> Result<TensorId> {
        let (rows, cols) = self.as_matrix("softmax_masked", a)?;
        if let Some(m) = mask {
            if m.shape() != self.shape(a) {
                return Err(Error::Dimension {
                    op: "softmax_masked",
                    lhs: self.shape(a).to_vec(),
                    rhs: m.shape().to_vec(),
                });
            }
        }
        let keep: Option<Vec<bool>> = mask.map(|m| m.keep().to_vec());
        let src = self.data(a);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let keep_row = keep.as_ref().map(|k| &k[r * cols..(r + 1) * cols]);
            if let Some(k) = keep_row {
                if !k.iter().any(|&b| b) {
                    return Err(Error::InvalidMask { row: r });
                }
            }
            let shifted: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(j, &x)| match keep_row {
                    Some(k) if !k[j] => x + MASK_FILL,
                    _ => x,
                })
                .collect();
            let max = shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let out_row = &mut data[r * cols..(r + 1) * cols];
            for (j, x) in shifted.iter().enumerate() {
                let keepj = keep_row.map_or(true, |k| k[j]);
                let e = if keepj { (x - max).exp() } else { 0.0 };
                out_row[j] = e;
                sum += e;
            }
            for v in out_row.iter_mut() {
                *v /= sum;
            }
        }
        let t = self.make_output(a, vec![rows, cols], data)?;
        let out = self.push("softmax_masked", t, None)?;
        let out_idx = out.0;
        self.record(out, move |nodes, g| {
            let y = nodes[out_idx].value.data();
            let mut ga = vec![0.0; rows * cols];
            for r in 0..rows {
                let yr = &y[r * cols..(r + 1) * cols];
                let gr = &g[r * cols..(r + 1) * cols];
                let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                for j in 0..cols {
                    ga[r * cols + j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![(a.0, ga)]
        });
        Ok(out)
    }

    /// Row-wise standardization over the last axis followed by an affine
    /// transform: `y = gain * (x - mean) / sqrt(var + eps) + bias`.
    ///
    /// A constant row standardizes to zero, so the output is the bias.
    pub fn layer_norm(
        &mut self,
        a: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (rows, cols) = self.as_matrix("layer_norm", a)?;
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let src = self.data(a);
        let gv = self.data(gain).to_vec();
        let bv = self.data(bias);
        let mut data = vec![0.0; rows * cols];
        let mut normalized = vec![0.0; rows * cols];
        let mut inv_sigma = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_sigma[r] = inv;
            for j in 0..cols {
                let xh = (row[j] - mean) * inv;
                normalized[r * cols + j] = xh;
                data[r * cols + j] = gv[j] * xh + bv[j];
            }
        }
        let requires = self.grad_enabled
            && (self.requires_grad(a) || self.requires_grad(gain) || self.requires_grad(bias));
        let mut t = Tensor::from_vec(vec![rows, cols], data)?;
        if requires {
            t = t.with_grad();
        }
        let out = self.push("layer_norm", t, None)?;
        let (ai, gi, bi) = (a.0, gain.0, bias.0);
        self.record(out, move |_, g| {
            let mut ga = vec![0.0; rows * cols];
            let mut ggain = vec![0.0; cols];
            let mut gbias = vec![0.0; cols];
            for r in 0..rows {
                let xh = &normalized[r * cols..(r + 1) * cols];
                let gr = &g[r * cols..(r + 1) * cols];
                let mut mean_dxh = 0.0;
                let mut mean_dxh_xh = 0.0;
                for j in 0..cols {
                    let dxh = gr[j] * gv[j];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xh[j];
                    ggain[j] += gr[j] * xh[j];
                    gbias[j] += gr[j];
                }
                mean_dxh /= cols as f64;
                mean_dxh_xh /= cols as f64;
                for j in 0..cols {
                    let dxh = gr[j] * gv[j];
                    ga[r * cols + j] = (dxh - mean_dxh - xh[j] * mean_dxh_xh) * inv_sigma[r];
                }
            }
            vec![(ai, ga), (gi, ggain), (bi, gbias)]
        });
        Ok(out)
    }

    // ── internals ───────────────────────────────────────────────────

    fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].value.requires_grad()
    }

    fn as_matrix(&self, op: &'static str, id: TensorId) -> Result<(usize, usize)> {
        let shape = self.shape(id);
        if shape.len() != 2 {
            return Err(Error::Dimension {
                op,
                lhs: shape.to_vec(),
                rhs: vec![],
            });
        }
        Ok((shape[0], shape[1]))
    }

    fn check_same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Output tensor with the same shape as `a`, tracking gradients iff
    /// `a` does.
    fn output_like(&mut self, op: &'static str, a: TensorId, data: Vec<f64>) -> Result<TensorId> {
        let t = self.make_output(a, self.shape(a).to_vec(), data)?;
        self.push(op, t, None)
    }

    fn make_output(&self, a: TensorId, shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let mut t = Tensor::from_vec(shape, data)?;
        if self.grad_enabled && self.requires_grad(a) {
            t = t.with_grad();
        }
        Ok(t)
    }

    fn make_output2(
        &self,
        a: TensorId,
        b: TensorId,
        shape: Vec<usize>,
        data: Vec<f64>,
    ) -> Result<Tensor> {
        let mut t = Tensor::from_vec(shape, data)?;
        if self.grad_enabled && (self.requires_grad(a) || self.requires_grad(b)) {
            t = t.with_grad();
        }
        Ok(t)
    }

    fn push(&mut self, op: &'static str, value: Tensor, rule: Option<BackwardFn>) -> Result<TensorId> {
        if !value.is_finite() {
            return Err(Error::non_finite(op));
        }
        self.nodes.push(Node { value, rule });
        Ok(TensorId(self.nodes.len() - 1))
    }

    /// Attaches a backward rule to a freshly pushed node, unless the
    /// output does not participate in gradients.
    fn record<F>(&mut self, out: TensorId, f: F)
    where
        F: Fn(&[Node], &[f64]) -> Vec<(usize, Vec<f64>)> + 'static,
    {
        if self.grad_enabled && self.nodes[out.0].value.requires_grad() {
            self.nodes[out.0].rule = Some(Box::new(f));
        }
    }
}

impl Tensor {
    fn detached(mut self) -> Self {
        self = Tensor::from_vec(self.shape().to_vec(), self.data().to_vec())
            .expect("detach preserves validity");
        self
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(&f64, &f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(x, y)).collect()
}

/// `C[m,n] = A[m,k] · B[k,n]`, row-major, accumulation ordered for
/// auto-vectorization.
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += ap * bv;
            }
        }
    }
    c
}

/// `C[m,k] = A[m,n] · B[k,n]ᵀ` — rows of A dotted with rows of B.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            c[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `C[k,n] = A[m,k]ᵀ · B[m,n]` — accumulated one A-row at a time.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += ap * bv;
            }
        }
    }
    c
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}
