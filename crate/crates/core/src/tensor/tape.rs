use super::kernels::{col2im, gemm_nn, gemm_tn, im2col, transpose, ConvGeom};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Batch-norm epsilon added to the variance.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvAttrs {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvAttrs {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolAttrs {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Normalization statistics source for [`Tape::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with fixed running statistics; the op is affine.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics of a training-mode batch-norm call. `var` is the
/// unbiased estimate, which is what feeds the running average.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Conv2d { x: usize, w: usize, attrs: ConvAttrs },
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    BiasAdd { x: usize, b: usize },
    Mul { a: usize, b: usize },
    Concat { inputs: Vec<usize> },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Relu { x: usize },
    Relu6 { x: usize },
    MaxPool { x: usize, argmax: Vec<usize> },
    GlobalAvgPool { x: usize },
    SoftmaxCe { logits: usize, probs: Vec<f64>, labels: Vec<usize> },
    Scale { x: usize, s: f64 },
    Flatten { x: usize },
    Sum { x: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records primitive operations so that [`Tape::backward`] can replay them in
/// reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < k || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last [`Tape::backward`], if `v` received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Grouped 2-D convolution. `x` is `[N, C, H, W]`, `w` is
    /// `[O, C / groups, KH, KW]`. Depthwise convolution is `groups == C == O`.
    pub fn conv2d(&mut self, x: Var, w: Var, attrs: ConvAttrs) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err("conv2d", format!("input {xs:?} and weight {ws:?} must both be rank 4")));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, cg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let groups = attrs.groups;
        if groups == 0 || c % groups != 0 || o % groups != 0 || c / groups != cg {
            return Err(shape_err(
                "conv2d",
                format!("input channels {c}, output channels {o}, groups {groups} incompatible with weight {ws:?}"),
            ));
        }
        let (oh, ow) = match (
            conv_out(h, kh, attrs.stride, attrs.padding),
            conv_out(wd, kw, attrs.stride, attrs.padding),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(shape_err(
                    "conv2d",
                    format!("kernel {kh}x{kw} stride {} padding {} does not fit input {h}x{wd}", attrs.stride, attrs.padding),
                ))
            }
        };
        let geom = ConvGeom {
            channels: cg,
            height: h,
            width: wd,
            kh,
            kw,
            stride: attrs.stride,
            pad: attrs.padding,
            out_h: oh,
            out_w: ow,
        };
        let og = o / groups;
        let area = oh * ow;
        let k = geom.patch();
        let mut out = vec![0.0; n * o * area];
        let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { k * area }];
        {
            let xd = self.nodes[x.0].value.data();
            let wdat = self.nodes[w.0].value.data();
            for b in 0..n {
                for g in 0..groups {
                    let xin = &xd[(b * c + g * cg) * h * wd..(b * c + (g + 1) * cg) * h * wd];
                    let src: &[f64] = if geom.is_pointwise() {
                        xin
                    } else {
                        im2col(&geom, xin, &mut cols);
                        &cols
                    };
                    let wg = &wdat[g * og * k..(g + 1) * og * k];
                    let dst = &mut out[(b * o + g * og) * area..(b * o + (g + 1) * og) * area];
                    gemm_nn(og, k, area, wg, src, dst);
                }
            }
        }
        let value = Tensor::new(vec![n, o, oh, ow], out)?;
        let needs = self.needs(&[x.0, w.0]);
        Ok(self.push(value, Op::Conv2d { x: x.0, w: w.0, attrs }, needs))
    }

    /// `[N, K] · [K, M] → [N, M]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
            return Err(shape_err("matmul", format!("cannot multiply {as_:?} by {bs:?}")));
        }
        let mut out = vec![0.0; as_[0] * bs[1]];
        gemm_nn(
            as_[0],
            as_[1],
            bs[1],
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            &mut out,
        );
        let value = Tensor::new(vec![as_[0], bs[1]], out)?;
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0 }, needs))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }, needs))
    }

    /// Adds `b[C]` along axis 1 of `x[N, C, ...]`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() < 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(shape_err("bias_add", format!("bias {bs:?} does not match channels of {xs:?}")));
        }
        let inner: usize = xs[2..].iter().product();
        let c = xs[1];
        let bias = self.nodes[b.0].value.data();
        let data = self.nodes[x.0]
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[(i / inner) % c])
            .collect();
        let value = Tensor::new(xs, data)?;
        let needs = self.needs(&[x.0, b.0]);
        Ok(self.push(value, Op::BiasAdd { x: x.0, b: b.0 }, needs))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }, needs))
    }

    /// Concatenation along channels.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let parts: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = Tensor::concat_channels(&parts)?;
        let idx: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let needs = self.needs(&idx);
        Ok(self.push(value, Op::Concat { inputs: idx }, needs))
    }

    /// Batch normalization over axis 1 of `x[N, C, ...]`. Training mode also
    /// returns the batch statistics so the caller can update running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(shape_err("batch_norm", format!("input {xs:?} has no channel axis")));
        }
        let (n, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(shape_err(
                    "batch_norm",
                    format!("{name} {:?} does not match {c} channels", self.shape(v)),
                ));
            }
        }
        let xd = self.nodes[x.0].value.data();
        let m = (n * inner) as f64;
        let (mean, var_biased, train) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        let off = (b * c + ch) * inner;
                        s += xd[off..off + inner].iter().sum::<f64>();
                    }
                    let mu = s / m;
                    let mut ss = 0.0;
                    for b in 0..n {
                        let off = (b * c + ch) * inner;
                        ss += xd[off..off + inner].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = ss / m;
                }
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err(
                        "batch_norm",
                        format!("running stats of length {}/{} for {c} channels", mean.len(), var.len()),
                    ));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gd = self.nodes[gamma.0].value.data();
        let bd = self.nodes[beta.0].value.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for (i, (&v, (xh, o))) in xd.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ch = (i / inner) % c;
            *xh = (v - mean[ch]) * inv_std[ch];
            *o = gd[ch] * *xh + bd[ch];
        }
        let stats = train.then(|| {
            let unbiased = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            BatchStats {
                mean: mean.clone(),
                var: var_biased.iter().map(|v| v * unbiased).collect(),
            }
        });
        let value = Tensor::new(xs, out)?;
        let needs = self.needs(&[x.0, gamma.0, beta.0]);
        let var = self.push(
            value,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                train,
            },
            needs,
        );
        Ok((var, stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, |v| v.max(0.0))?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(value, Op::Relu { x: x.0 }, needs))
    }

    /// ReLU clipped at 6.
    pub fn relu6(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, |v| v.clamp(0.0, 6.0))?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(value, Op::Relu6 { x: x.0 }, needs))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let value = self.map(x, |v| v * s)?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(value, Op::Scale { x: x.0, s }, needs))
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let t = &self.nodes[x.0].value;
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
    }

    /// Max pooling with implicit `-inf` padding.
    pub fn max_pool2d(&mut self, x: Var, attrs: PoolAttrs) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("max_pool2d", format!("input {xs:?} must be rank 4")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if attrs.padding >= attrs.kernel {
            return Err(shape_err("max_pool2d", "padding must be smaller than the kernel"));
        }
        let (oh, ow) = match (
            conv_out(h, attrs.kernel, attrs.stride, attrs.padding),
            conv_out(w, attrs.kernel, attrs.stride, attrs.padding),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(shape_err("max_pool2d", format!("window does not fit input {h}x{w}"))),
        };
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for ky in 0..attrs.kernel {
                        let iy = (oy * attrs.stride + ky) as isize - attrs.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..attrs.kernel {
                            let ix = (ox * attrs.stride + kx) as isize - attrs.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = base + iy as usize * w + ix as usize;
                            if best_i == usize::MAX || xd[i] > best {
                                best = xd[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (plane * oh + oy) * ow + ox;
                    out[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(value, Op::MaxPool { x: x.0, argmax }, needs))
    }

    /// `[N, C, H, W] → [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("global_avg_pool", format!("input {xs:?} must be rank 4")));
        }
        let area = xs[2] * xs[3];
        let data = self.nodes[x.0]
            .value
            .data()
            .chunks(area)
            .map(|p| p.iter().sum::<f64>() / area as f64)
            .collect();
        let value = Tensor::new(vec![xs[0], xs[1]], data)?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(value, Op::GlobalAvgPool { x: x.0 }, needs))
    }

    /// `[N, ...] → [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.nodes[x.0].value.clone();
        let n = t.shape()[0];
        let rest = t.numel() / n;
        let value = t.reshape(vec![n, rest])?;
        let needs = self.needs(&[x.0]);
        Ok(self.push(value, Op::Flatten { x: x.0 }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].value.data().iter().sum();
        let needs = self.needs(&[x.0]);
        Ok(self.push(Tensor::scalar(s), Op::Sum { x: x.0 }, needs))
    }

    /// Mean softmax cross-entropy of `logits[N, K]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("logits {ls:?} vs {} labels", labels.len()),
            ));
        }
        let (n, k) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(shape_err("softmax_cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        let ld = self.nodes[logits.0].value.data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            let row = &ld[b * k..(b + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let log_z = z.ln() + mx;
            for j in 0..k {
                probs[b * k + j] = (row[j] - log_z).exp();
            }
            loss += log_z - row[label];
        }
        let needs = self.needs(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::SoftmaxCe {
                logits: logits.0,
                probs,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    /// Propagates d(loss)/d(·) to every recorded value that requires it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Backward("tape is empty".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Backward("loss was not recorded on this tape".into()));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, idx: usize, contrib: Vec<f64>) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        match &mut self.grads[idx] {
            Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) -> Result<()> {
        // Contributions are computed against immutable node values first, then
        // accumulated.
        let mut contribs: Vec<(usize, Vec<f64>)> = Vec::new();
        let nodes = &self.nodes;
        let need = |j: usize| nodes[j].needs_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, attrs } => {
                let xv = &nodes[*x].value;
                let wv = &nodes[*w].value;
                let (n, c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                let (o, cg, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
                let out = nodes[i].value.shape();
                let geom = ConvGeom {
                    channels: cg,
                    height: h,
                    width: wd,
                    kh,
                    kw,
                    stride: attrs.stride,
                    pad: attrs.padding,
                    out_h: out[2],
                    out_w: out[3],
                };
                let groups = attrs.groups;
                let og = o / groups;
                let area = geom.out_area();
                let k = geom.patch();
                let want_w = need(*w);
                let want_x = need(*x);
                let mut dw = vec![0.0; if want_w { wv.numel() } else { 0 }];
                let mut dx = vec![0.0; if want_x { xv.numel() } else { 0 }];
                let mut cols = vec![0.0; k * area];
                let mut cols_t = vec![0.0; k * area];
                let mut dcols = vec![0.0; k * area];
                for b in 0..n {
                    for gi in 0..groups {
                        let xin = &xv.data()[(b * c + gi * cg) * h * wd..(b * c + (gi + 1) * cg) * h * wd];
                        let dy = &g[(b * o + gi * og) * area..(b * o + (gi + 1) * og) * area];
                        if want_w {
                            if geom.is_pointwise() {
                                transpose(k, area, xin, &mut cols_t);
                            } else {
                                im2col(&geom, xin, &mut cols);
                                transpose(k, area, &cols, &mut cols_t);
                            }
                            gemm_nn(og, area, k, dy, &cols_t, &mut dw[gi * og * k..(gi + 1) * og * k]);
                        }
                        if want_x {
                            let wg = &wv.data()[gi * og * k..(gi + 1) * og * k];
                            let dxin = &mut dx[(b * c + gi * cg) * h * wd..(b * c + (gi + 1) * cg) * h * wd];
                            if geom.is_pointwise() {
                                gemm_tn(k, og, area, wg, dy, dxin);
                            } else {
                                dcols.fill(0.0);
                                gemm_tn(k, og, area, wg, dy, &mut dcols);
                                col2im(&geom, &dcols, dxin);
                            }
                        }
                    }
                }
                if want_w {
                    contribs.push((*w, dw));
                }
                if want_x {
                    contribs.push((*x, dx));
                }
            }
            Op::MatMul { a, b } => {
                let av = &nodes[*a].value;
                let bv = &nodes[*b].value;
                let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if need(*a) {
                    let mut bt = vec![0.0; k * m];
                    transpose(k, m, bv.data(), &mut bt);
                    let mut da = vec![0.0; n * k];
                    gemm_nn(n, m, k, g, &bt, &mut da);
                    contribs.push((*a, da));
                }
                if need(*b) {
                    let mut db = vec![0.0; k * m];
                    gemm_tn(k, n, m, av.data(), g, &mut db);
                    contribs.push((*b, db));
                }
            }
            Op::Add { a, b } => {
                contribs.push((*a, g.to_vec()));
                contribs.push((*b, g.to_vec()));
            }
            Op::BiasAdd { x, b } => {
                let xs = nodes[*x].value.shape();
                let c = xs[1];
                let inner: usize = xs[2..].iter().product();
                if need(*b) {
                    let mut db = vec![0.0; c];
                    for (j, gv) in g.iter().enumerate() {
                        db[(j / inner) % c] += gv;
                    }
                    contribs.push((*b, db));
                }
                contribs.push((*x, g.to_vec()));
            }
            Op::Mul { a, b } => {
                let av = nodes[*a].value.data();
                let bv = nodes[*b].value.data();
                contribs.push((*a, g.iter().zip(bv).map(|(x, y)| x * y).collect()));
                contribs.push((*b, g.iter().zip(av).map(|(x, y)| x * y).collect()));
            }
            Op::Concat { inputs } => {
                let out = nodes[i].value.shape();
                let n = out[0];
                let total = out[1];
                let inner: usize = out[2..].iter().product();
                let mut start = 0;
                for &inp in inputs {
                    let ci = nodes[inp].value.shape()[1];
                    if need(inp) {
                        let mut d = Vec::with_capacity(n * ci * inner);
                        for b in 0..n {
                            let off = (b * total + start) * inner;
                            d.extend_from_slice(&g[off..off + ci * inner]);
                        }
                        contribs.push((inp, d));
                    }
                    start += ci;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let xs = nodes[*x].value.shape();
                let (n, c) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let gd = nodes[*gamma].value.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (j, (gv, xh)) in g.iter().zip(xhat).enumerate() {
                    let ch = (j / inner) % c;
                    dgamma[ch] += gv * xh;
                    dbeta[ch] += gv;
                }
                if need(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let m = (n * inner) as f64;
                    for (j, d) in dx.iter_mut().enumerate() {
                        let ch = (j / inner) % c;
                        *d = if *train {
                            gd[ch] * inv_std[ch] / m * (m * g[j] - dbeta[ch] - xhat[j] * dgamma[ch])
                        } else {
                            g[j] * gd[ch] * inv_std[ch]
                        };
                    }
                    contribs.push((*x, dx));
                }
                contribs.push((*gamma, dgamma));
                contribs.push((*beta, dbeta));
            }
            Op::Relu { x } => {
                let xv = nodes[*x].value.data();
                contribs.push((*x, g.iter().zip(xv).map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 }).collect()));
            }
            Op::Relu6 { x } => {
                let xv = nodes[*x].value.data();
                contribs.push((
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(gv, &v)| if v > 0.0 && v < 6.0 { *gv } else { 0.0 })
                        .collect(),
                ));
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; nodes[*x].value.numel()];
                for (gv, &src) in g.iter().zip(argmax) {
                    dx[src] += gv;
                }
                contribs.push((*x, dx));
            }
            Op::GlobalAvgPool { x } => {
                let xs = nodes[*x].value.shape();
                let area = xs[2] * xs[3];
                let mut dx = vec![0.0; nodes[*x].value.numel()];
                for (plane, gv) in g.iter().enumerate() {
                    dx[plane * area..(plane + 1) * area].fill(gv / area as f64);
                }
                contribs.push((*x, dx));
            }
            Op::SoftmaxCe { logits, probs, labels } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (b, &l) in labels.iter().enumerate() {
                    d[b * k + l] -= scale;
                }
                contribs.push((*logits, d));
            }
            Op::Scale { x, s } => contribs.push((*x, g.iter().map(|v| v * s).collect())),
            Op::Flatten { x } => contribs.push((*x, g.to_vec())),
            Op::Sum { x } => contribs.push((*x, vec![g[0]; nodes[*x].value.numel()])),
        }
        for (idx, c) in contribs {
            self.accum(idx, c);
        }
        Ok(())
    }
}
