//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass in execution order.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients for
//! every parameter that took part in the pass. Only the operations the model
//! needs are provided; each caches whatever its backward rule requires.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, MatRef, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;
/// Probability clamp applied before the logarithms of binary cross entropy.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Gather { param: ParamId, rows: Vec<usize> },
    Add(Var, Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Scale(Var, f64),
    MaskedSoftmax { x: Var, valid: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    Dropout { x: Var, mask: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    MeanRows { x: Var, count: usize },
    Stack(Vec<Var>),
    Reshape(Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize, cols: Vec<f64> },
    BatchNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Sigmoid(Var),
    Bce { p: Var, targets: Vec<f64> },
    SmoothL1 { x: Var, targets: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Per-channel statistics observed by a batch-norm op in batch mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<f64>,
}

/// Gradients of a scalar with respect to each parameter of the store.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the parameter did not take part in the pass.
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), param_vars: vec![None; params.len()] }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Selects rows of a 2-D parameter (embedding lookup).
    pub fn gather(&mut self, id: ParamId, rows: &[usize]) -> Result<Var> {
        let table = self.params.get(id);
        let (n, width) = (table.rows(), table.cols());
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= n {
                return Err(shape_err(format!("row {r} out of range for table of {n}")));
            }
            data.extend_from_slice(table.row(r));
        }
        let value = Tensor::from_parts(vec![rows.len(), width], data);
        Ok(self.push(value, Op::Gather { param: id, rows: rows.to_vec() }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("add {:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [n] {
            return Err(shape_err(format!("bias {:?} for input {:?}", self.shape(b), self.shape(x))));
        }
        let bias = self.value(b).data();
        let data = self.value(x).data().chunks(n).flat_map(|row| row.iter().zip(bias).map(|(v, c)| v + c)).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        Ok(self.push(value, Op::AddBias(x, b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(MatRef::new(self.value(a).data(), m, k), MatRef::new(self.value(b).data(), k, n), &mut out, false);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err(format!("matmul_nt {sa:?} x {sb:?}ᵀ")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm(MatRef::new(self.value(a).data(), m, k), MatRef::new(self.value(b).data(), n, k).t(), &mut out, false);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNT(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push(value, Op::Scale(x, c))
    }

    /// Row softmax over the first `valid` columns of the first `valid` rows of a
    /// square matrix. Masked columns and rows are exactly zero.
    pub fn masked_softmax(&mut self, x: Var, valid: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != s[1] || valid == 0 || valid > s[0] {
            return Err(shape_err(format!("masked_softmax {s:?} with {valid} valid")));
        }
        let t = s[0];
        let xv = self.value(x).data();
        let mut out = vec![0.0; t * t];
        for i in 0..valid {
            let row = &xv[i * t..i * t + valid];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * t..i * t + valid];
            let mut sum = 0.0;
            for (d, v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![t, t], out), Op::MaskedSoftmax { x, valid }))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    ///
    /// A row whose entries are all equal normalizes to zero, so its output is
    /// the bias vector.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if n == 0 || self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(shape_err(format!(
                "layer_norm input {:?}, gain {:?}, bias {:?}",
                self.shape(x),
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.len() / n;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let constant = row.iter().all(|v| *v == row[0]);
            if !constant {
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std[r] = is;
                for (h, v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
                    *h = (v - mean) * is;
                }
            }
            for j in 0..n {
                out[r * n + j] = g[j] * xhat[r * n + j] + b[j];
            }
        }
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push(value, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push(value, Op::Sigmoid(x))
    }

    /// Elementwise multiplication by a fixed mask (already scaled by `1/(1-p)`).
    pub fn dropout_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(shape_err("dropout mask length"));
        }
        let data = self.value(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[1] {
            return Err(shape_err(format!("slice_cols {s:?} [{start}, {})", start + len)));
        }
        let (rows, cols) = (s[0], s[1]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * cols + start..r * cols + start + len]);
        }
        Ok(self.push(Tensor::from_parts(vec![rows, len], out), Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) if self.shape(p).len() == 2 => self.shape(p)[0],
            _ => return Err(shape_err("concat_cols needs 2-D inputs")),
        };
        if parts.iter().any(|&p| self.shape(p).len() != 2 || self.shape(p)[0] != rows) {
            return Err(shape_err("concat_cols row mismatch"));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(Tensor::from_parts(vec![rows, total], out), Op::ConcatCols(parts.to_vec())))
    }

    /// Mean of the first `count` rows of a matrix, as a vector.
    pub fn mean_rows(&mut self, x: Var, count: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || count == 0 || count > s[0] {
            return Err(shape_err(format!("mean_rows of {count} rows from {s:?}")));
        }
        let cols = s[1];
        let xv = self.value(x).data();
        let mut out = vec![0.0; cols];
        for r in 0..count {
            for (o, v) in out.iter_mut().zip(&xv[r * cols..(r + 1) * cols]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= count as f64;
        }
        Ok(self.push(Tensor::vector(out), Op::MeanRows { x, count }))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let inner = match parts.first() {
            Some(&p) => self.shape(p).to_vec(),
            None => return Err(shape_err("stack of nothing")),
        };
        if parts.iter().any(|&p| self.shape(p) != inner.as_slice()) {
            return Err(shape_err("stack shape mismatch"));
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner);
        let mut out = Vec::with_capacity(shape.iter().product());
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Stack(parts.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// 2-D convolution without bias. `x` is `(N, C, H, W)`, `w` is `(O, C, k, k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] || stride == 0 {
            return Err(shape_err(format!("conv2d input {sx:?} kernel {sw:?}")));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, k) = (sw[0], sw[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err("conv2d kernel larger than padded input"));
        }
        let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
        let ckk = c * k * k;
        let spatial = ho * wo;
        let xv = self.value(x).data();
        let mut cols = vec![0.0; n * ckk * spatial];
        for b in 0..n {
            let img = &xv[b * c * h * wd..(b + 1) * c * h * wd];
            let dst = &mut cols[b * ckk * spatial..(b + 1) * ckk * spatial];
            im2col(img, c, h, wd, k, stride, pad, ho, wo, dst);
        }
        let wv = self.value(w).data();
        let mut out = vec![0.0; n * o * spatial];
        for b in 0..n {
            gemm(
                MatRef::new(wv, o, ckk),
                MatRef::new(&cols[b * ckk * spatial..(b + 1) * ckk * spatial], ckk, spatial),
                &mut out[b * o * spatial..(b + 1) * o * spatial],
                false,
            );
        }
        let value = Tensor::from_parts(vec![n, o, ho, wo], out);
        Ok(self.push(value, Op::Conv2d { x, w, stride, pad, cols }))
    }

    /// Batch normalization over `(N, C, H, W)`.
    ///
    /// With `batch_stats` the per-channel statistics of this batch are used and
    /// returned so the caller can update running estimates; otherwise the given
    /// running statistics are applied as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        running_mean: &[f64],
        running_var: &[f64],
        batch_stats: bool,
    ) -> Result<(Var, Option<BatchStats>)> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(shape_err(format!("batch_norm input {sx:?}")));
        }
        let (n, c, plane) = (sx[0], sx[1], sx[2] * sx[3]);
        if self.shape(gain) != [c] || self.shape(bias) != [c] || running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("batch_norm channel mismatch"));
        }
        let xv = self.value(x).data();
        let count = n * plane;
        let mut inv_std = vec![0.0; c];
        let mut means = vec![0.0; c];
        let mut stats = None;
        if batch_stats {
            let mut unbiased = vec![0.0; c];
            for ch in 0..c {
                let mut sum = 0.0;
                for b in 0..n {
                    sum += xv[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().sum::<f64>();
                }
                let mean = sum / count as f64;
                let mut sq = 0.0;
                for b in 0..n {
                    sq += xv[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                        .iter()
                        .map(|v| (v - mean) * (v - mean))
                        .sum::<f64>();
                }
                means[ch] = mean;
                inv_std[ch] = 1.0 / (sq / count as f64 + BATCH_NORM_EPS).sqrt();
                unbiased[ch] = if count > 1 { sq / (count - 1) as f64 } else { 0.0 };
            }
            stats = Some(BatchStats { mean: means.clone(), var: unbiased });
        } else {
            for ch in 0..c {
                means[ch] = running_mean[ch];
                inv_std[ch] = 1.0 / (running_var[ch] + BATCH_NORM_EPS).sqrt();
            }
        }
        let (g, bvec) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    let h = (xv[i] - means[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bvec[ch];
                }
            }
        }
        let value = Tensor::from_parts(sx, out);
        let v = self.push(value, Op::BatchNorm { x, gain, bias, xhat, inv_std, batch_stats });
        Ok((v, stats))
    }

    /// Mean binary cross entropy of probabilities against 0/1 targets.
    pub fn bce(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        let pv = self.value(p).data();
        if pv.len() != targets.len() || pv.is_empty() {
            return Err(shape_err("bce target count"));
        }
        let loss = pv.iter().zip(targets).map(|(&p, &y)| bce_term(p, y)).sum::<f64>() / pv.len() as f64;
        Ok(self.push(Tensor::vector(vec![loss]), Op::Bce { p, targets: targets.to_vec() }))
    }

    /// Mean Smooth L1 (β = 1) over all elements.
    pub fn smooth_l1(&mut self, x: Var, targets: &[f64]) -> Result<Var> {
        let xv = self.value(x).data();
        if xv.len() != targets.len() || xv.is_empty() {
            return Err(shape_err("smooth_l1 target count"));
        }
        let loss = xv.iter().zip(targets).map(|(a, b)| smooth_l1_term(a - b)).sum::<f64>() / xv.len() as f64;
        Ok(self.push(Tensor::vector(vec![loss]), Op::SmoothL1 { x, targets: targets.to_vec() }))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward needs a scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));
        let mut out: Vec<Option<Tensor>> = (0..self.params.len()).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let gd = g.data();
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => accumulate(&mut out[id.0], g),
                Op::Gather { param, rows } => {
                    let slot = out[param.0].get_or_insert_with(|| Tensor::zeros(self.params.get(*param).shape()));
                    let width = slot.cols();
                    let dst = slot.data_mut();
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..width {
                            dst[r * width + j] += gd[k * width + j];
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::AddBias(x, b) => {
                    let n = self.shape(*b)[0];
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads[b.0], Tensor::vector(db));
                    accumulate(&mut grads[x.0], g);
                }
                Op::MatMul(a, b) => {
                    let (m, k, n) = (self.shape(*a)[0], self.shape(*a)[1], self.shape(*b)[1]);
                    let gm = MatRef::new(gd, m, n);
                    let mut da = vec![0.0; m * k];
                    gemm(gm, MatRef::new(self.value(*b).data(), k, n).t(), &mut da, false);
                    let mut db = vec![0.0; k * n];
                    gemm(MatRef::new(self.value(*a).data(), m, k).t(), gm, &mut db, false);
                    accumulate(&mut grads[a.0], Tensor::from_parts(vec![m, k], da));
                    accumulate(&mut grads[b.0], Tensor::from_parts(vec![k, n], db));
                }
                Op::MatMulNT(a, b) => {
                    let (m, k, n) = (self.shape(*a)[0], self.shape(*a)[1], self.shape(*b)[0]);
                    let gm = MatRef::new(gd, m, n);
                    let mut da = vec![0.0; m * k];
                    gemm(gm, MatRef::new(self.value(*b).data(), n, k), &mut da, false);
                    let mut db = vec![0.0; n * k];
                    gemm(gm.t(), MatRef::new(self.value(*a).data(), m, k), &mut db, false);
                    accumulate(&mut grads[a.0], Tensor::from_parts(vec![m, k], da));
                    accumulate(&mut grads[b.0], Tensor::from_parts(vec![n, k], db));
                }
                Op::Scale(x, c) => {
                    let d = gd.iter().map(|v| v * c).collect();
                    accumulate(&mut grads[x.0], Tensor::from_parts(g.shape().to_vec(), d));
                }
                Op::MaskedSoftmax { x, valid } => {
                    let t = g.shape()[0];
                    let y = node.value.data();
                    let mut dx = vec![0.0; t * t];
                    for i in 0..*valid {
                        let r = i * t..i * t + valid;
                        let dot: f64 = gd[r.clone()].iter().zip(&y[r.clone()]).map(|(a, b)| a * b).sum();
                        for j in r {
                            dx[j] = y[j] * (gd[j] - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::from_parts(vec![t, t], dx));
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let n = self.shape(*gain)[0];
                    let gv = self.value(*gain).data();
                    let mut dgain = vec![0.0; n];
                    let mut dbias = vec![0.0; n];
                    let mut dx = vec![0.0; gd.len()];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let span = r * n..(r + 1) * n;
                        let (gr, hr) = (&gd[span.clone()], &xhat[span.clone()]);
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..n {
                            dgain[j] += gr[j] * hr[j];
                            dbias[j] += gr[j];
                            let dh = gr[j] * gv[j];
                            sum_d += dh;
                            sum_dh += dh * hr[j];
                        }
                        if is == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            let dh = gr[j] * gv[j];
                            dx[r * n + j] = is / n as f64 * (n as f64 * dh - sum_d - hr[j] * sum_dh);
                        }
                    }
                    accumulate(&mut grads[gain.0], Tensor::vector(dgain));
                    accumulate(&mut grads[bias.0], Tensor::vector(dbias));
                    accumulate(&mut grads[x.0], Tensor::from_parts(g.shape().to_vec(), dx));
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x).data();
                    let d = gd.iter().zip(xv).map(|(g, &v)| g * gelu_grad(v)).collect();
                    accumulate(&mut grads[x.0], Tensor::from_parts(g.shape().to_vec(), d));
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let d = gd.iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                    accumulate(&mut grads[x.0], Tensor::from_parts(g.shape().to_vec(), d));
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    let d = gd.iter().zip(y).map(|(g, &s)| g * s * (1.0 - s)).collect();
                    accumulate(&mut grads[x.0], Tensor::from_parts(g.shape().to_vec(), d));
                }
                Op::Dropout { x, mask } => {
                    let d = gd.iter().zip(mask).map(|(g, m)| g * m).collect();
                    accumulate(&mut grads[x.0], Tensor::from_parts(g.shape().to_vec(), d));
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let len = g.shape()[1];
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        dx[r * cols + start..r * cols + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                    }
                    accumulate(&mut grads[x.0], Tensor::from_parts(vec![rows, cols], dx));
                }
                Op::ConcatCols(parts) => {
                    let (rows, total) = (g.shape()[0], g.shape()[1]);
                    let mut offset = 0;
                    for p in parts {
                        let w = self.shape(*p)[1];
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(&mut grads[p.0], Tensor::from_parts(vec![rows, w], dp));
                        offset += w;
                    }
                }
                Op::MeanRows { x, count } => {
                    let (rows, cols) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..*count {
                        for j in 0..cols {
                            dx[r * cols + j] = gd[j] / *count as f64;
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::from_parts(vec![rows, cols], dx));
                }
                Op::Stack(parts) => {
                    let inner = self.shape(parts[0]).to_vec();
                    let size: usize = inner.iter().product();
                    for (k, p) in parts.iter().enumerate() {
                        let dp = gd[k * size..(k + 1) * size].to_vec();
                        accumulate(&mut grads[p.0], Tensor::from_parts(inner.clone(), dp));
                    }
                }
                Op::Reshape(x) => {
                    let shape = self.shape(*x).to_vec();
                    accumulate(&mut grads[x.0], Tensor::from_parts(shape, g.into_data()));
                }
                Op::Conv2d { x, w, stride, pad, cols } => {
                    let sx = self.shape(*x).to_vec();
                    let sw = self.shape(*w).to_vec();
                    let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                    let (o, k) = (sw[0], sw[2]);
                    let (ho, wo) = (node.value.shape()[2], node.value.shape()[3]);
                    let (ckk, spatial) = (c * k * k, ho * wo);
                    let wv = self.value(*w).data();
                    let mut dw = vec![0.0; o * ckk];
                    let mut dx = vec![0.0; n * c * h * wd];
                    let mut dcols = vec![0.0; ckk * spatial];
                    for b in 0..n {
                        let gb = MatRef::new(&gd[b * o * spatial..(b + 1) * o * spatial], o, spatial);
                        let cb = MatRef::new(&cols[b * ckk * spatial..(b + 1) * ckk * spatial], ckk, spatial);
                        gemm(gb, cb.t(), &mut dw, true);
                        gemm(MatRef::new(wv, o, ckk).t(), gb, &mut dcols, false);
                        col2im(
                            &dcols,
                            c,
                            h,
                            wd,
                            k,
                            *stride,
                            *pad,
                            ho,
                            wo,
                            &mut dx[b * c * h * wd..(b + 1) * c * h * wd],
                        );
                    }
                    accumulate(&mut grads[w.0], Tensor::from_parts(sw, dw));
                    accumulate(&mut grads[x.0], Tensor::from_parts(sx, dx));
                }
                Op::BatchNorm { x, gain, bias, xhat, inv_std, batch_stats } => {
                    let sx = self.shape(*x).to_vec();
                    let (n, c, plane) = (sx[0], sx[1], sx[2] * sx[3]);
                    let gv = self.value(*gain).data();
                    let count = (n * plane) as f64;
                    let mut dgain = vec![0.0; c];
                    let mut dbias = vec![0.0; c];
                    let mut dx = vec![0.0; gd.len()];
                    for ch in 0..c {
                        let idx = || (0..n).flat_map(move |b| (b * c + ch) * plane..(b * c + ch + 1) * plane);
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for i in idx() {
                            dgain[ch] += gd[i] * xhat[i];
                            dbias[ch] += gd[i];
                            let dh = gd[i] * gv[ch];
                            sum_d += dh;
                            sum_dh += dh * xhat[i];
                        }
                        for i in idx() {
                            let dh = gd[i] * gv[ch];
                            dx[i] = if *batch_stats {
                                inv_std[ch] / count * (count * dh - sum_d - xhat[i] * sum_dh)
                            } else {
                                dh * inv_std[ch]
                            };
                        }
                    }
                    accumulate(&mut grads[gain.0], Tensor::vector(dgain));
                    accumulate(&mut grads[bias.0], Tensor::vector(dbias));
                    accumulate(&mut grads[x.0], Tensor::from_parts(sx, dx));
                }
                Op::Bce { p, targets } => {
                    let pv = self.value(*p).data();
                    let scale = gd[0] / pv.len() as f64;
                    let d = pv.iter().zip(targets).map(|(&p, &y)| scale * bce_term_grad(p, y)).collect();
                    accumulate(&mut grads[p.0], Tensor::from_parts(self.shape(*p).to_vec(), d));
                }
                Op::SmoothL1 { x, targets } => {
                    let xv = self.value(*x).data();
                    let scale = gd[0] / xv.len() as f64;
                    let d = xv.iter().zip(targets).map(|(a, b)| scale * smooth_l1_grad(a - b)).collect();
                    accumulate(&mut grads[x.0], Tensor::from_parts(self.shape(*x).to_vec(), d));
                }
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dst: &mut [f64],
) {
    let spatial = ho * wo;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    for ow in 0..wo {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        dst[row * spatial + oh * wo + ow] =
                            if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                                img[(ch * h + ih as usize) * w + iw as usize]
                            } else {
                                0.0
                            };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    img: &mut [f64],
) {
    let spatial = ho * wo;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih as usize >= h {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw as usize >= w {
                            continue;
                        }
                        img[(ch * h + ih as usize) * w + iw as usize] += cols[row * spatial + oh * wo + ow];
                    }
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-[y ln p + (1-y) ln(1-p)]` with `p` clamped to `[ε, 1-ε]`.
pub fn bce_term(p: f64, y: f64) -> f64 {
    let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
}

fn bce_term_grad(p: f64, y: f64) -> f64 {
    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
        return 0.0;
    }
    -y / p + (1.0 - y) / (1.0 - p)
}

/// Huber-style residual penalty with unit threshold.
pub fn smooth_l1_term(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{NamedTensor, ParamKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store_with(tensors: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (name, t) in tensors {
            s.insert(NamedTensor { name: name.to_string(), kind: ParamKind::Weight, tensor: t.clone() }).unwrap();
        }
        s
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of every scalar in the store against `backward`.
    fn check(store: ParamStore, f: impl Fn(&mut Graph<'_>) -> Var) {
        let grads = {
            let mut g = Graph::new(&store);
            let out = f(&mut g);
            g.backward(out).unwrap()
        };
        let eval = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let out = f(&mut g);
            g.value(out).data()[0]
        };
        let h = 1e-5;
        let mut probe = store.clone();
        for id in store.ids() {
            for i in 0..store.get(id).len() {
                let orig = probe.get(id).data()[i];
                probe.get_mut(id).data_mut()[i] = orig + h;
                let up = eval(&probe);
                probe.get_mut(id).data_mut()[i] = orig - h;
                let down = eval(&probe);
                probe.get_mut(id).data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.get(id).map_or(0.0, |t| t.data()[i]);
                let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(err < 1e-5, "{} [{i}]: numeric {numeric}, analytic {analytic}", store.entry(id).name);
            }
        }
    }

    /// Reduces any tensor to a scalar with fixed random weights so every
    /// output element contributes a distinct gradient.
    fn weighted_sum(g: &mut Graph<'_>, x: Var) -> Var {
        let n = g.value(x).len();
        let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
        let flat = g.reshape(x, &[1, n]).unwrap();
        let wv = g.input(Tensor::matrix(n, 1, w).unwrap());
        g.matmul(flat, wv).unwrap()
    }

    #[test]
    fn matmul_and_bias_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = store_with(&[
            ("a", random(&[3, 4], &mut rng)),
            ("b", random(&[4, 2], &mut rng)),
            ("c", random(&[5, 4], &mut rng)),
            ("bias", random(&[2], &mut rng)),
        ]);
        check(store, |g| {
            let a = g.param(ParamId(0));
            let b = g.param(ParamId(1));
            let c = g.param(ParamId(2));
            let bias = g.param(ParamId(3));
            let ab = g.matmul(a, b).unwrap();
            let ab = g.add_bias(ab, bias).unwrap();
            let ac = g.matmul_nt(a, c).unwrap();
            let s1 = weighted_sum(g, ab);
            let s2 = weighted_sum(g, ac);
            g.add(s1, s2).unwrap()
        });
    }

    #[test]
    fn softmax_layernorm_gelu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let store = store_with(&[
            ("x", random(&[5, 5], &mut rng)),
            ("g", random(&[5], &mut rng)),
            ("b", random(&[5], &mut rng)),
        ]);
        check(store, |g| {
            let x = g.param(ParamId(0));
            let sm = g.masked_softmax(x, 3).unwrap();
            let gain = g.param(ParamId(1));
            let bias = g.param(ParamId(2));
            let ln = g.layer_norm(x, gain, bias).unwrap();
            let ge = g.gelu(ln);
            let prod = g.matmul(sm, ge).unwrap();
            let sl = g.slice_cols(prod, 1, 3).unwrap();
            let cat = g.concat_cols(&[sl, ge]).unwrap();
            let m = g.mean_rows(cat, 4).unwrap();
            let sc = g.scale(m, 0.7);
            weighted_sum(g, sc)
        });
    }

    #[test]
    fn conv_batchnorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let store = store_with(&[
            ("x", random(&[2, 3, 5, 5], &mut rng)),
            ("w", random(&[4, 3, 3, 3], &mut rng)),
            ("g", random(&[4], &mut rng)),
            ("b", random(&[4], &mut rng)),
        ]);
        for batch_stats in [true, false] {
            check(store.clone(), move |g| {
                let x = g.param(ParamId(0));
                let w = g.param(ParamId(1));
                let conv = g.conv2d(x, w, 2, 1).unwrap();
                assert_eq!(g.shape(conv), &[2, 4, 3, 3]);
                let gain = g.param(ParamId(2));
                let bias = g.param(ParamId(3));
                let (bn, _) = g.batch_norm(conv, gain, bias, &[0.1; 4], &[0.9; 4], batch_stats).unwrap();
                let st = g.stack(&[bn, conv]).unwrap();
                weighted_sum(g, st)
            });
        }
    }

    #[test]
    fn losses_and_sigmoid_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let store = store_with(&[("z", random(&[4], &mut rng)), ("q", random(&[4], &mut rng))]);
        check(store, |g| {
            let z = g.param(ParamId(0));
            let p = g.sigmoid(z);
            let l1 = g.bce(p, &[1.0, 0.0, 1.0, 0.0]).unwrap();
            let q = g.param(ParamId(1));
            let q3 = g.scale(q, 3.0);
            let l2 = g.smooth_l1(q3, &[0.0, 0.5, -0.2, 1.0]).unwrap();
            g.add(l1, l2).unwrap()
        });
    }

    #[test]
    fn gather_accumulates_repeated_rows() {
        let table = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let store = store_with(&[("t", table)]);
        let mut g = Graph::new(&store);
        let rows = g.gather(ParamId(0), &[2, 0, 2]).unwrap();
        assert_eq!(g.value(rows).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let m = g.mean_rows(rows, 3).unwrap();
        let s = weighted_sum(&mut g, m);
        let grads = g.backward(s).unwrap();
        let gt = grads.get(ParamId(0)).unwrap();
        assert_eq!(gt.data()[2..4], [0.0, 0.0]);
        assert!((gt.data()[4] - 2.0 * gt.data()[0]).abs() < 1e-15);
        assert!(g.gather(ParamId(0), &[3]).is_err());
    }

    #[test]
    fn masked_softmax_zeroes_padding() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::matrix(3, 3, vec![1.0, 2.0, 3.0, 0.0, 0.0, 9.0, 1.0, 1.0, 1.0]).unwrap());
        let y = g.masked_softmax(x, 2).unwrap();
        let v = g.value(y);
        assert!((v.at(0, 0) + v.at(0, 1) - 1.0).abs() < 1e-15);
        assert_eq!(v.at(0, 2), 0.0);
        assert_eq!(v.at(1, 2), 0.0);
        assert_eq!(v.row(2), &[0.0, 0.0, 0.0]);
        assert!((v.at(1, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_constant_row_returns_bias() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::vector(vec![0.1; 3]));
        let gain = g.input(Tensor::vector(vec![2.0; 3]));
        let bias = g.input(Tensor::vector(vec![0.5, -1.0, 3.0]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.0, 3.0]);
    }

    #[test]
    fn loss_closed_forms() {
        assert!((bce_term(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_term(BCE_EPS, 1.0) - 16.118_095_650_958_32).abs() < 1e-9);
        assert!(bce_term(1.0 - BCE_EPS, 1.0) < 1e-6);
        assert_eq!(smooth_l1_term(0.5), 0.125);
        assert_eq!(smooth_l1_term(-2.0), 1.5);
        assert_eq!(smooth_l1_term(1.0), 0.5);
    }
}
