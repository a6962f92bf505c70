use std::str::FromStr;

use super::kernels::{col2im, gemm, im2col, ConvGeom, Strides};
use super::{Result, Tensor, TensorError};

pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPS: f32 = 1e-5;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dAttrs {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dAttrs {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormAttrs {
    pub training: bool,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNormAttrs {
    pub fn training() -> Self {
        Self {
            training: true,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn eval() -> Self {
        Self {
            training: false,
            ..Self::training()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Conv2d,
    Dense,
    BatchNorm,
    Relu,
    MaxPool2x2,
    AvgPoolGlobal,
    SoftmaxCrossEntropy,
    Mse,
    SigmoidBce,
}

impl FromStr for OpKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "conv2d" => Self::Conv2d,
            "dense" => Self::Dense,
            "batchnorm" => Self::BatchNorm,
            "relu" => Self::Relu,
            "maxpool2x2" => Self::MaxPool2x2,
            "avgpool_global" => Self::AvgPoolGlobal,
            "softmax_crossentropy" => Self::SoftmaxCrossEntropy,
            "mse" => Self::Mse,
            "sigmoid_bce" => Self::SigmoidBce,
            other => return Err(TensorError::UnknownOp(other.to_string())),
        })
    }
}

/// A primitive op with its attributes, for [`Tape::forward_op`].
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// inputs: `[x, weight]` or `[x, weight, bias]`
    Conv2d(Conv2dAttrs),
    /// inputs: `[x, weight]` or `[x, weight, bias]`
    Dense,
    /// inputs: `[x, gamma, beta, running_mean, running_var]`
    BatchNorm(BatchNormAttrs),
    Relu,
    MaxPool2x2,
    AvgPoolGlobal,
    /// inputs: `[logits]`
    SoftmaxCrossEntropy { labels: Vec<usize> },
    /// inputs: `[prediction, target]`
    Mse,
    /// inputs: `[logits, target]`
    SigmoidBce,
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Conv2d(_) => OpKind::Conv2d,
            Op::Dense => OpKind::Dense,
            Op::BatchNorm(_) => OpKind::BatchNorm,
            Op::Relu => OpKind::Relu,
            Op::MaxPool2x2 => OpKind::MaxPool2x2,
            Op::AvgPoolGlobal => OpKind::AvgPoolGlobal,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::Mse => OpKind::Mse,
            Op::SigmoidBce => OpKind::SigmoidBce,
        }
    }
}

enum Saved {
    Conv2d { geom: ConvGeom, batch: usize, filters: usize, cols: Vec<f32> },
    Dense { batch: usize, in_width: usize, out_width: usize },
    BatchNorm { training: bool, channels: usize, spatial: usize, xhat: Vec<f32>, inv_std: Vec<f32> },
    Relu,
    MaxPool { argmax: Vec<usize> },
    AvgPoolGlobal { spatial: usize },
    SoftmaxCe { probs: Vec<f32>, labels: Vec<usize> },
    Mse,
    SigmoidBce,
}

struct Recorded {
    inputs: Vec<Var>,
    saved: Saved,
}

struct Node {
    value: Tensor,
    op: Option<Recorded>,
}

/// Records executed ops so gradients can be replayed in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    last_order: Vec<usize>,
}

fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite(what.to_string()))
    }
}

fn mismatch<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::ShapeMismatch(msg.into()))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input or parameter tensor.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    /// Node indices visited by the most recent [`Tape::backward`], in order.
    pub fn last_backward_order(&self) -> &[usize] {
        &self.last_order
    }

    fn push(&mut self, value: Tensor, inputs: Vec<Var>, saved: Saved) -> Result<Var> {
        ensure_finite(&value, "op output")?;
        let record = inputs.iter().any(|v| self.nodes[v.0].value.needs_grad());
        let value = value.requires_grad(record);
        let op = record.then_some(Recorded { inputs, saved });
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn checked(&self, v: Var, what: &str) -> Result<&Tensor> {
        let t = &self.nodes[v.0].value;
        ensure_finite(t, what)?;
        Ok(t)
    }

    fn recording(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].value.needs_grad())
    }

    /// Generic entry point dispatching on [`Op`].
    pub fn forward_op(&mut self, op: &Op, inputs: &[Var]) -> Result<Var> {
        let arity = |n: &[usize]| -> Result<()> {
            if n.contains(&inputs.len()) {
                Ok(())
            } else {
                mismatch(format!("{:?} takes {n:?} inputs, got {}", op.kind(), inputs.len()))
            }
        };
        match op {
            Op::Conv2d(attrs) => {
                arity(&[2, 3])?;
                self.conv2d(inputs[0], inputs[1], inputs.get(2).copied(), *attrs)
            }
            Op::Dense => {
                arity(&[2, 3])?;
                self.dense(inputs[0], inputs[1], inputs.get(2).copied())
            }
            Op::BatchNorm(attrs) => {
                arity(&[5])?;
                self.batchnorm(inputs[0], inputs[1], inputs[2], inputs[3], inputs[4], *attrs)
            }
            Op::Relu => {
                arity(&[1])?;
                self.relu(inputs[0])
            }
            Op::MaxPool2x2 => {
                arity(&[1])?;
                self.maxpool2x2(inputs[0])
            }
            Op::AvgPoolGlobal => {
                arity(&[1])?;
                self.avgpool_global(inputs[0])
            }
            Op::SoftmaxCrossEntropy { labels } => {
                arity(&[1])?;
                self.softmax_cross_entropy(inputs[0], labels)
            }
            Op::Mse => {
                arity(&[2])?;
                self.mse(inputs[0], inputs[1])
            }
            Op::SigmoidBce => {
                arity(&[2])?;
                self.sigmoid_bce(inputs[0], inputs[1])
            }
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, attrs: Conv2dAttrs) -> Result<Var> {
        let xt = self.checked(x, "conv2d input")?;
        let wt = self.checked(w, "conv2d weight")?;
        let (xs, ws) = (xt.shape(), wt.shape());
        if xs.len() != 4 || ws.len() != 4 {
            return mismatch(format!("conv2d expects 4-D input and weight, got {xs:?} and {ws:?}"));
        }
        let (batch, channels, height, width) = (xs[0], xs[1], xs[2], xs[3]);
        let (filters, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != channels {
            return mismatch(format!("conv2d weight has {wc} channels, input has {channels}"));
        }
        if attrs.stride == 0 {
            return mismatch("conv2d stride must be positive");
        }
        let (ph, pw) = (height + 2 * attrs.padding, width + 2 * attrs.padding);
        if ph < kh || pw < kw {
            return mismatch(format!("kernel {kh}x{kw} larger than padded input {ph}x{pw}"));
        }
        let geom = ConvGeom {
            channels,
            height,
            width,
            kh,
            kw,
            stride: attrs.stride,
            pad: attrs.padding,
            out_h: (ph - kh) / attrs.stride + 1,
            out_w: (pw - kw) / attrs.stride + 1,
        };
        let bias = match b {
            Some(b) => {
                let bt = self.checked(b, "conv2d bias")?;
                if bt.len() != filters {
                    return mismatch(format!("conv2d bias has {} entries for {filters} filters", bt.len()));
                }
                Some(bt.data())
            }
            None => None,
        };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let record = self.recording(&inputs);

        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let in_len = channels * height * width;
        let mut out = vec![0.0f32; batch * filters * cols];
        let mut saved_cols = if record { vec![0.0f32; batch * rows * cols] } else { Vec::new() };
        let mut scratch = if record { Vec::new() } else { vec![0.0f32; rows * cols] };
        for n in 0..batch {
            let col: &mut [f32] = if record {
                &mut saved_cols[n * rows * cols..(n + 1) * rows * cols]
            } else {
                &mut scratch
            };
            im2col(&xt.data()[n * in_len..(n + 1) * in_len], &geom, col);
            let dst = &mut out[n * filters * cols..(n + 1) * filters * cols];
            gemm(filters, rows, cols, wt.data(), Strides::row_major(rows), col, Strides::row_major(cols), 0.0, dst);
            if let Some(bias) = bias {
                for (f, chunk) in dst.chunks_exact_mut(cols).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bias[f]);
                }
            }
        }
        let value = Tensor::new(vec![batch, filters, geom.out_h, geom.out_w], out)?;
        self.push(value, inputs, Saved::Conv2d { geom, batch, filters, cols: saved_cols })
    }

    /// Fully connected layer; trailing input dimensions are flattened.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xt = self.checked(x, "dense input")?;
        let wt = self.checked(w, "dense weight")?;
        let ws = wt.shape();
        if ws.len() != 2 {
            return mismatch(format!("dense weight must be 2-D, got {ws:?}"));
        }
        let (out_width, in_width) = (ws[0], ws[1]);
        let batch = xt.shape()[0];
        if xt.len() != batch * in_width {
            return mismatch(format!(
                "dense expects {in_width} features per sample, input shape is {:?}",
                xt.shape()
            ));
        }
        let mut out = vec![0.0f32; batch * out_width];
        gemm(batch, in_width, out_width, xt.data(), Strides::row_major(in_width), wt.data(), Strides::transposed(in_width), 0.0, &mut out);
        if let Some(b) = b {
            let bt = self.checked(b, "dense bias")?;
            if bt.len() != out_width {
                return mismatch(format!("dense bias has {} entries for width {out_width}", bt.len()));
            }
            for row in out.chunks_exact_mut(out_width) {
                row.iter_mut().zip(bt.data()).for_each(|(v, b)| *v += b);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let value = Tensor::new(vec![batch, out_width], out)?;
        self.push(value, inputs, Saved::Dense { batch, in_width, out_width })
    }

    /// Per-channel batch normalization over `[N, C]` or `[N, C, H, W]`.
    ///
    /// In training mode batch statistics (biased variance) normalize the
    /// input and the running buffers are blended in place with `momentum`.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: Var,
        running_var: Var,
        attrs: BatchNormAttrs,
    ) -> Result<Var> {
        let xt = self.checked(x, "batchnorm input")?;
        let xs = xt.shape().to_vec();
        if xs.len() != 2 && xs.len() != 4 {
            return mismatch(format!("batchnorm expects 2-D or 4-D input, got {xs:?}"));
        }
        let (batch, channels) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        for (v, name) in [(gamma, "gamma"), (beta, "beta"), (running_mean, "running_mean"), (running_var, "running_var")] {
            let t = self.checked(v, name)?;
            if t.len() != channels {
                return mismatch(format!("batchnorm {name} has {} entries for {channels} channels", t.len()));
            }
        }
        let xd = xt.data();
        let g = self.nodes[gamma.0].value.data();
        let bta = self.nodes[beta.0].value.data();
        let m = (batch * spatial) as f64;
        let mut mean = vec![0.0f64; channels];
        let mut var = vec![0.0f64; channels];
        if attrs.training {
            for n in 0..batch {
                for c in 0..channels {
                    let s = &xd[(n * channels + c) * spatial..(n * channels + c + 1) * spatial];
                    mean[c] += s.iter().map(|&v| v as f64).sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m);
            for n in 0..batch {
                for c in 0..channels {
                    let s = &xd[(n * channels + c) * spatial..(n * channels + c + 1) * spatial];
                    var[c] += s.iter().map(|&v| (v as f64 - mean[c]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= m);
        } else {
            let rm = self.nodes[running_mean.0].value.data();
            let rv = self.nodes[running_var.0].value.data();
            for c in 0..channels {
                mean[c] = rm[c] as f64;
                var[c] = rv[c] as f64;
            }
        }
        let inv_std: Vec<f32> = var.iter().map(|v| (1.0 / (v + attrs.eps as f64).sqrt()) as f32).collect();
        let mut xhat = vec![0.0f32; xd.len()];
        let mut out = vec![0.0f32; xd.len()];
        for n in 0..batch {
            for c in 0..channels {
                let base = (n * channels + c) * spatial;
                let mu = mean[c] as f32;
                for i in base..base + spatial {
                    let h = (xd[i] - mu) * inv_std[c];
                    xhat[i] = h;
                    out[i] = g[c] * h + bta[c];
                }
            }
        }
        if attrs.training {
            let mo = attrs.momentum;
            let rm = self.nodes[running_mean.0].value.data_mut();
            for c in 0..channels {
                rm[c] = (1.0 - mo) * rm[c] + mo * mean[c] as f32;
            }
            let rv = self.nodes[running_var.0].value.data_mut();
            for c in 0..channels {
                rv[c] = (1.0 - mo) * rv[c] + mo * var[c] as f32;
            }
        }
        let inputs = vec![x, gamma, beta];
        let record = self.recording(&inputs);
        let value = Tensor::new(xs, out)?;
        let saved = Saved::BatchNorm {
            training: attrs.training,
            channels,
            spatial,
            xhat: if record { xhat } else { Vec::new() },
            inv_std,
        };
        self.push(value, inputs, saved)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xt = self.checked(x, "relu input")?;
        let out = xt.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(xt.shape().to_vec(), out)?;
        self.push(value, vec![x], Saved::Relu)
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let xt = self.checked(x, "maxpool input")?;
        let xs = xt.shape();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return mismatch(format!("maxpool2x2 needs [N, C, H>=2, W>=2], got {xs:?}"));
        }
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = xt.data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![xs[0], xs[1], oh, ow], out)?;
        let record = self.recording(&[x]);
        self.push(value, vec![x], Saved::MaxPool { argmax: if record { argmax } else { Vec::new() } })
    }

    /// Mean over spatial positions: `[N, C, H, W] -> [N, C]`.
    pub fn avgpool_global(&mut self, x: Var) -> Result<Var> {
        let xt = self.checked(x, "avgpool input")?;
        let xs = xt.shape();
        if xs.len() != 4 {
            return mismatch(format!("avgpool_global needs 4-D input, got {xs:?}"));
        }
        let spatial = xs[2] * xs[3];
        let out = xt
            .data()
            .chunks_exact(spatial)
            .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / spatial as f64) as f32)
            .collect();
        let value = Tensor::new(vec![xs[0], xs[1]], out)?;
        self.push(value, vec![x], Saved::AvgPoolGlobal { spatial })
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits`).
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lt = self.checked(logits, "logits")?;
        let ls = lt.shape();
        if ls.len() != 2 || ls[0] != labels.len() {
            return mismatch(format!("logits {ls:?} vs {} labels", labels.len()));
        }
        let k = ls[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return mismatch(format!("label {bad} out of range for {k} classes"));
        }
        let mut probs = vec![0.0f32; lt.len()];
        let mut total = 0.0f64;
        for (n, row) in lt.data().chunks_exact(k).enumerate() {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let denom: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            for (j, &v) in row.iter().enumerate() {
                probs[n * k + j] = ((v as f64 - max).exp() / denom) as f32;
            }
            total += denom.ln() - (row[labels[n]] as f64 - max);
        }
        let loss = (total / labels.len() as f64) as f32;
        let record = self.recording(&[logits]);
        let saved = Saved::SoftmaxCe {
            probs: if record { probs } else { Vec::new() },
            labels: labels.to_vec(),
        };
        self.push(Tensor::scalar(loss), vec![logits], saved)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.checked(pred, "mse prediction")?, self.checked(target, "mse target")?);
        if p.len() != t.len() {
            return mismatch(format!("mse prediction {:?} vs target {:?}", p.shape(), t.shape()));
        }
        let sum: f64 = p.data().iter().zip(t.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
        let loss = (sum / p.len() as f64) as f32;
        self.push(Tensor::scalar(loss), vec![pred, target], Saved::Mse)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 targets.
    pub fn sigmoid_bce(&mut self, logits: Var, target: Var) -> Result<Var> {
        let (z, y) = (self.checked(logits, "bce logits")?, self.checked(target, "bce target")?);
        if z.len() != y.len() {
            return mismatch(format!("bce logits {:?} vs target {:?}", z.shape(), y.shape()));
        }
        let sum: f64 = z
            .data()
            .iter()
            .zip(y.data())
            .map(|(&z, &y)| {
                let (z, y) = (z as f64, y as f64);
                z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
            })
            .sum();
        let loss = (sum / z.len() as f64) as f32;
        self.push(Tensor::scalar(loss), vec![logits, target], Saved::SigmoidBce)
    }

    /// Accumulates `d loss / d t` into every tensor on the tape that requires
    /// a gradient. Repeated calls add to existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let lt = &self.nodes[loss.0].value;
        if lt.len() != 1 {
            return Err(TensorError::NotScalar(lt.shape().to_vec()));
        }
        self.backward_vjp(loss, &[1.0])
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `out`) back
    /// through the tape, accumulating like [`Tape::backward`].
    pub fn backward_vjp(&mut self, out: Var, seed: &[f32]) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        if seed.len() != self.nodes[out.0].value.len() {
            return mismatch(format!(
                "seed of length {} for output of length {}",
                seed.len(),
                self.nodes[out.0].value.len()
            ));
        }
        self.last_order.clear();
        let mut pending: Vec<Option<Vec<f32>>> = (0..=out.0).map(|_| None).collect();
        pending[out.0] = Some(seed.to_vec());
        for i in (0..=out.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            if !self.nodes[i].value.needs_grad() {
                continue;
            }
            if let Some(rec) = &self.nodes[i].op {
                self.last_order.push(i);
                let grads = self.input_grads(rec, &g);
                for (v, dg) in rec.inputs.iter().zip(grads) {
                    let Some(dg) = dg else { continue };
                    match pending[v.0].as_mut() {
                        Some(acc) => acc.iter_mut().zip(&dg).for_each(|(a, b)| *a += b),
                        None => pending[v.0] = Some(dg),
                    }
                }
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(TensorError::NonFinite(format!("gradient of node {i}")));
            }
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].value.needs_grad()
    }

    fn input_grads(&self, rec: &Recorded, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let inputs = &rec.inputs;
        match &rec.saved {
            Saved::Conv2d { geom, batch, filters, cols } => {
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let in_len = geom.channels * geom.height * geom.width;
                let w = val(inputs[1]);
                let mut dx = self.wants(inputs[0]).then(|| vec![0.0f32; batch * in_len]);
                let mut dw = self.wants(inputs[1]).then(|| vec![0.0f32; filters * rows]);
                let mut db = inputs.get(2).filter(|&&b| self.wants(b)).map(|_| vec![0.0f32; *filters]);
                let mut dcol = vec![0.0f32; rows * ncols];
                for n in 0..*batch {
                    let go = &g[n * filters * ncols..(n + 1) * filters * ncols];
                    let col = &cols[n * rows * ncols..(n + 1) * rows * ncols];
                    if let Some(dw) = dw.as_mut() {
                        gemm(*filters, ncols, rows, go, Strides::row_major(ncols), col, Strides::transposed(ncols), 1.0, dw);
                    }
                    if let Some(db) = db.as_mut() {
                        for (f, chunk) in go.chunks_exact(ncols).enumerate() {
                            db[f] += chunk.iter().sum::<f32>();
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(rows, *filters, ncols, w, Strides::transposed(rows), go, Strides::row_major(ncols), 0.0, &mut dcol);
                        col2im(&dcol, geom, &mut dx[n * in_len..(n + 1) * in_len]);
                    }
                }
                let mut out = vec![dx, dw];
                if inputs.len() > 2 {
                    out.push(db);
                }
                out
            }
            Saved::Dense { batch, in_width, out_width } => {
                let (x, w) = (val(inputs[0]), val(inputs[1]));
                let dx = self.wants(inputs[0]).then(|| {
                    let mut dx = vec![0.0f32; batch * in_width];
                    gemm(*batch, *out_width, *in_width, g, Strides::row_major(*out_width), w, Strides::row_major(*in_width), 0.0, &mut dx);
                    dx
                });
                let dw = self.wants(inputs[1]).then(|| {
                    let mut dw = vec![0.0f32; out_width * in_width];
                    gemm(*out_width, *batch, *in_width, g, Strides::transposed(*out_width), x, Strides::row_major(*in_width), 0.0, &mut dw);
                    dw
                });
                let mut out = vec![dx, dw];
                if inputs.len() > 2 {
                    out.push(self.wants(inputs[2]).then(|| {
                        let mut db = vec![0.0f32; *out_width];
                        for row in g.chunks_exact(*out_width) {
                            db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                        db
                    }));
                }
                out
            }
            Saved::BatchNorm { training, channels, spatial, xhat, inv_std } => {
                let (channels, spatial) = (*channels, *spatial);
                let gamma = val(inputs[1]);
                let batch = g.len() / (channels * spatial);
                let m = (batch * spatial) as f64;
                let mut sum_g = vec![0.0f64; channels];
                let mut sum_gx = vec![0.0f64; channels];
                for n in 0..batch {
                    for c in 0..channels {
                        let base = (n * channels + c) * spatial;
                        for i in base..base + spatial {
                            sum_g[c] += g[i] as f64;
                            sum_gx[c] += (g[i] * xhat[i]) as f64;
                        }
                    }
                }
                let dx = self.wants(inputs[0]).then(|| {
                    let mut dx = vec![0.0f32; g.len()];
                    for n in 0..batch {
                        for c in 0..channels {
                            let base = (n * channels + c) * spatial;
                            let scale = gamma[c] * inv_std[c];
                            for i in base..base + spatial {
                                dx[i] = if *training {
                                    let centered = g[i] as f64 - sum_g[c] / m - xhat[i] as f64 * sum_gx[c] / m;
                                    (scale as f64 * centered) as f32
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                    dx
                });
                let dgamma = self.wants(inputs[1]).then(|| sum_gx.iter().map(|&v| v as f32).collect());
                let dbeta = self.wants(inputs[2]).then(|| sum_g.iter().map(|&v| v as f32).collect());
                vec![dx, dgamma, dbeta]
            }
            Saved::Relu => {
                let x = val(inputs[0]);
                vec![Some(x.iter().zip(g).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect())]
            }
            Saved::MaxPool { argmax } => {
                let mut dx = vec![0.0f32; self.nodes[inputs[0].0].value.len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                vec![Some(dx)]
            }
            Saved::AvgPoolGlobal { spatial } => {
                let inv = 1.0 / *spatial as f32;
                vec![Some(g.iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, *spatial)).collect())]
            }
            Saved::SoftmaxCe { probs, labels } => {
                let k = probs.len() / labels.len();
                let scale = g[0] / labels.len() as f32;
                let mut d: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (n, &l) in labels.iter().enumerate() {
                    d[n * k + l] -= scale;
                }
                vec![Some(d)]
            }
            Saved::Mse => {
                let (p, t) = (val(inputs[0]), val(inputs[1]));
                let scale = 2.0 * g[0] / p.len() as f32;
                let dp: Vec<f32> = p.iter().zip(t).map(|(a, b)| scale * (a - b)).collect();
                let dt = self.wants(inputs[1]).then(|| dp.iter().map(|v| -v).collect());
                vec![self.wants(inputs[0]).then_some(dp), dt]
            }
            Saved::SigmoidBce => {
                let (z, y) = (val(inputs[0]), val(inputs[1]));
                let scale = g[0] / z.len() as f32;
                let dz = z
                    .iter()
                    .zip(y)
                    .map(|(&z, &y)| {
                        let s = if z >= 0.0 { 1.0 / (1.0 + (-z).exp()) } else { z.exp() / (1.0 + z.exp()) };
                        scale * (s - y)
                    })
                    .collect();
                vec![Some(dz), None]
            }
        }
    }
}
