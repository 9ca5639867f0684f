use std::collections::HashMap;

use super::kernels::{self, ConvGeometry, DeconvGeometry, NormStats};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: DeconvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<T>,
        training: bool,
    },
    Relu(Var),
    Add(Var, Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Concat(Vec<Var>),
    Mask {
        input: Var,
        mask: Vec<T>,
    },
    Sum(Var),
    Scale(Var, T),
    GatherPixel {
        input: Var,
        sample: usize,
        row: usize,
        col: usize,
    },
    DynamicConv {
        feature: Var,
        sample: usize,
        kernel: Var,
    },
    RowPool {
        feature: Var,
        sample: usize,
        logits: Var,
        weight: Var,
        bias: Var,
        softmax: Vec<T>,
    },
    Focal {
        logits: Var,
        dlogits: Vec<T>,
    },
    RowCrossEntropy {
        logits: Var,
        dlogits: Vec<T>,
    },
    BinaryCrossEntropy {
        logits: Var,
        dlogits: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records forward operations; [`Tape::backward`] replays them in reverse.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order of the computation DAG.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let out = kernels::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            geom,
        )?;
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Conv2d { input, weight, bias, geom }, needs))
    }

    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: DeconvGeometry,
    ) -> Result<Var> {
        let out = kernels::conv_transpose2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            geom,
        )?;
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::ConvTranspose2d { input, weight, bias, geom }, needs))
    }

    /// Batch normalization over `(N, H, W)` per channel. In training mode the
    /// running statistics are updated in place with `momentum`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [T],
        running_var: &mut [T],
        eps: T,
        momentum: T,
        training: bool,
    ) -> Result<Var> {
        let out = kernels::batch_norm(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
            training,
        )?;
        if training {
            let keep = T::one() - momentum;
            for ch in 0..running_mean.len() {
                running_mean[ch] = keep * running_mean[ch] + momentum * out.stats.mean[ch];
                running_var[ch] = keep * running_var[ch] + momentum * out.batch_var[ch];
            }
        }
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out.output,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                stats: out.stats,
                training,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| v.max(T::zero()));
        let needs = self.needs(input);
        self.push(out, Op::Relu(input), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2(self.value(input))?;
        let needs = self.needs(input);
        Ok(self.push(out, Op::MaxPool2 { input, argmax }, needs))
    }

    /// Concatenate rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let [n, _, h, w] = self.value(first).dims4()?;
        let mut channels = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let [vn, vc, vh, vw] = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape("concat", &[n, vc, h, w], self.shape(v)));
            }
            channels.push(vc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for s in 0..n {
            for (&v, &c) in inputs.iter().zip(&channels) {
                data.extend_from_slice(&self.value(v).data()[s * c * plane..(s + 1) * c * plane]);
            }
        }
        let out = Tensor::new(&[n, total, h, w], data)?;
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(out, Op::Concat(inputs.to_vec()), needs))
    }

    /// Elementwise multiplication by a constant mask (used for dropout).
    pub fn mask(&mut self, input: Var, mask: Vec<T>) -> Result<Var> {
        let x = self.value(input);
        if mask.len() != x.numel() {
            return Err(Error::shape("mask", x.shape(), &[mask.len()]));
        }
        let data = x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(x.shape(), data)?;
        let needs = self.needs(input);
        Ok(self.push(out, Op::Mask { input, mask }, needs))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        let needs = self.needs(input);
        self.push(out, Op::Sum(input), needs)
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let out = self.value(input).map(|v| v * factor);
        let needs = self.needs(input);
        self.push(out, Op::Scale(input, factor), needs)
    }

    /// Channel vector `[C]` at `(sample, row, col)` of an `[N, C, H, W]` tensor.
    pub fn gather_pixel(&mut self, input: Var, sample: usize, row: usize, col: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4()?;
        if sample >= n || row >= h || col >= w {
            return Err(Error::invalid(
                "gather_pixel",
                format!("({sample}, {row}, {col}) outside [{n}, {c}, {h}, {w}]"),
            ));
        }
        let x = self.value(input).data();
        let data = (0..c).map(|ch| x[((sample * c + ch) * h + row) * w + col]).collect();
        let out = Tensor::new(&[c], data)?;
        let needs = self.needs(input);
        Ok(self.push(out, Op::GatherPixel { input, sample, row, col }, needs))
    }

    /// 1x1 convolution of one sample with a per-instance kernel `[C + 1]`
    /// (C weights then the bias). Output is `[H, W]`.
    pub fn dynamic_conv1x1(&mut self, feature: Var, sample: usize, kernel: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(feature).dims4()?;
        if sample >= n {
            return Err(Error::invalid("dynamic_conv1x1", format!("sample {sample} >= {n}")));
        }
        let k = self.value(kernel);
        if k.shape() != [c + 1] {
            return Err(Error::shape("dynamic_conv1x1", &[c + 1], k.shape()));
        }
        let plane = h * w;
        let f = &self.value(feature).data()[sample * c * plane..(sample + 1) * c * plane];
        let kd = k.data();
        let mut out = vec![kd[c]; plane];
        for ch in 0..c {
            let wv = kd[ch];
            for (o, &fv) in out.iter_mut().zip(&f[ch * plane..(ch + 1) * plane]) {
                *o = *o + wv * fv;
            }
        }
        let out = Tensor::new(&[h, w], out)?;
        let needs = self.needs(feature) || self.needs(kernel);
        Ok(self.push(out, Op::DynamicConv { feature, sample, kernel }, needs))
    }

    /// Row-pooled linear readout: for each row `r`, pools the feature columns
    /// with `softmax(logits[r])` and applies `weight . pooled + bias`.
    /// `logits` is `[H, W]`, `weight` `[C]`, `bias` `[1]`; output `[H]`.
    pub fn row_pool_linear(
        &mut self,
        feature: Var,
        sample: usize,
        logits: Var,
        weight: Var,
        bias: Var,
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(feature).dims4()?;
        if sample >= n {
            return Err(Error::invalid("row_pool_linear", format!("sample {sample} >= {n}")));
        }
        if self.shape(logits) != [h, w] {
            return Err(Error::shape("row_pool_linear", &[h, w], self.shape(logits)));
        }
        if self.shape(weight) != [c] {
            return Err(Error::shape("row_pool_linear", &[c], self.shape(weight)));
        }
        if self.shape(bias) != [1] {
            return Err(Error::shape("row_pool_linear", &[1], self.shape(bias)));
        }
        let plane = h * w;
        let mut softmax = self.value(logits).data().to_vec();
        for row in softmax.chunks_mut(w) {
            kernels::softmax_in_place(row);
        }
        let f = &self.value(feature).data()[sample * c * plane..(sample + 1) * c * plane];
        let (wd, b) = (self.value(weight).data(), self.value(bias).data()[0]);
        let mut out = vec![b; h];
        for ch in 0..c {
            for r in 0..h {
                let mut pooled = T::zero();
                for col in 0..w {
                    pooled = pooled + softmax[r * w + col] * f[ch * plane + r * w + col];
                }
                out[r] = out[r] + wd[ch] * pooled;
            }
        }
        let out = Tensor::new(&[h], out)?;
        let needs = [feature, logits, weight, bias].iter().any(|&v| self.needs(v));
        Ok(self.push(
            out,
            Op::RowPool {
                feature,
                sample,
                logits,
                weight,
                bias,
                softmax,
            },
            needs,
        ))
    }

    /// Penalty-reduced focal loss on heatmap logits against a Gaussian target,
    /// normalized by the number of positives (`target == 1`, at least 1).
    pub fn focal_loss(&mut self, logits: Var, target: &Tensor<T>, alpha: T, beta: T) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != target.shape() {
            return Err(Error::shape("focal_loss", z.shape(), target.shape()));
        }
        let positives = target.data().iter().filter(|&&g| g == T::one()).count().max(1);
        let norm = T::one() / T::from_usize(positives).unwrap();
        let mut total = T::zero();
        let mut dlogits = Vec::with_capacity(z.numel());
        for (&zi, &gi) in z.data().iter().zip(target.data()) {
            let (l, dz) = kernels::focal_logit_term(zi, gi, alpha, beta);
            total = total + l;
            dlogits.push(dz * norm);
        }
        let needs = self.needs(logits);
        Ok(self.push(Tensor::scalar(total * norm), Op::Focal { logits, dlogits }, needs))
    }

    /// Mean cross-entropy over the rows that carry a target column.
    /// Rows with `None` contribute nothing; no valid rows gives 0.
    pub fn row_cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let z = self.value(logits);
        let (h, w) = match z.shape() {
            &[h, w] => (h, w),
            s => return Err(Error::invalid("row_cross_entropy", format!("expected [H, W], got {s:?}"))),
        };
        if targets.len() != h {
            return Err(Error::shape("row_cross_entropy", &[h], &[targets.len()]));
        }
        let valid = targets.iter().flatten().count();
        let mut dlogits = vec![T::zero(); h * w];
        let mut total = T::zero();
        if valid > 0 {
            let norm = T::one() / T::from_usize(valid).unwrap();
            for (r, t) in targets.iter().enumerate() {
                let Some(t) = *t else { continue };
                if t >= w {
                    return Err(Error::invalid(
                        "row_cross_entropy",
                        format!("target column {t} outside [0, {w})"),
                    ));
                }
                let row = &mut dlogits[r * w..(r + 1) * w];
                row.copy_from_slice(&z.data()[r * w..(r + 1) * w]);
                kernels::softmax_in_place(row);
                let p = row[t].max(T::lit(kernels::PROB_CLAMP));
                total = total - p.ln();
                row[t] = row[t] - T::one();
                for v in row.iter_mut() {
                    *v = *v * norm;
                }
            }
            total = total * norm;
        }
        let needs = self.needs(logits);
        Ok(self.push(Tensor::scalar(total), Op::RowCrossEntropy { logits, dlogits }, needs))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against a 0/1 mask.
    pub fn binary_cross_entropy(&mut self, logits: Var, mask: &[T]) -> Result<Var> {
        let z = self.value(logits);
        if z.numel() != mask.len() {
            return Err(Error::shape("binary_cross_entropy", z.shape(), &[mask.len()]));
        }
        let norm = T::one() / T::from_usize(mask.len()).unwrap();
        let mut total = T::zero();
        let mut dlogits = Vec::with_capacity(mask.len());
        for (&zi, &m) in z.data().iter().zip(mask) {
            total = total + kernels::bce_logit_term(zi, m);
            dlogits.push((kernels::sigmoid(zi) - m) * norm);
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total * norm),
            Op::BinaryCrossEntropy { logits, dlogits },
            needs,
        ))
    }

    /// Reverse accumulation from a scalar output to every gradient-tracking leaf.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = &self.nodes[output.0];
        if out.value.numel() != 1 {
            return Err(Error::NotScalar(out.value.shape().to_vec()));
        }
        if !out.value.is_finite() {
            return Err(Error::NonFinite { op: "backward" });
        }
        if !out.needs_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Tensor::ones(out.value.shape()));
        let mut result = Gradients::default();
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, g, idx, &mut grads, &mut result);
        }
        Ok(result)
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: Tensor<T>,
        idx: usize,
        grads: &mut [Option<Tensor<T>>],
        result: &mut Gradients<T>,
    ) {
        let acc = |v: Var, delta: Tensor<T>, grads: &mut [Option<Tensor<T>>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e = *e + *d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {
                result.grads.insert(Var(idx), g);
            }
            Op::Conv2d { input, weight, bias, geom } => {
                let want = (self.needs(*input), self.needs(*weight), bias.is_some_and(|b| self.needs(b)));
                let cg = kernels::conv2d_backward(self.value(*input), self.value(*weight), &g, *geom, want);
                if let Some(d) = cg.input {
                    acc(*input, d, grads);
                }
                if let Some(d) = cg.weight {
                    acc(*weight, d, grads);
                }
                if let (Some(b), Some(d)) = (bias, cg.bias) {
                    acc(*b, d, grads);
                }
            }
            Op::ConvTranspose2d { input, weight, bias, geom } => {
                let want = (self.needs(*input), self.needs(*weight), bias.is_some_and(|b| self.needs(b)));
                let cg = kernels::conv_transpose2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    &g,
                    *geom,
                    want,
                );
                if let Some(d) = cg.input {
                    acc(*input, d, grads);
                }
                if let Some(d) = cg.weight {
                    acc(*weight, d, grads);
                }
                if let (Some(b), Some(d)) = (bias, cg.bias) {
                    acc(*b, d, grads);
                }
            }
            Op::BatchNorm { input, gamma, beta, stats, training } => {
                let (dx, dg, db) =
                    kernels::batch_norm_backward(self.value(*input), self.value(*gamma), stats, &g, *training);
                acc(*input, dx, grads);
                acc(*gamma, dg, grads);
                acc(*beta, db, grads);
            }
            Op::Relu(input) => {
                let x = self.value(*input);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                acc(*input, Tensor::new(x.shape(), data).expect("same shape"), grads);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g, grads);
            }
            Op::MaxPool2 { input, argmax } => {
                let mut d = Tensor::zeros(self.shape(*input));
                for (&i, &gv) in argmax.iter().zip(g.data()) {
                    d.data_mut()[i] = d.data()[i] + gv;
                }
                acc(*input, d, grads);
            }
            Op::Concat(inputs) => {
                let [n, total, h, w] = g.dims4().expect("rank 4");
                let plane = h * w;
                let mut offset = 0;
                for &v in inputs {
                    let c = self.shape(v)[1];
                    if self.needs(v) {
                        let mut d = Vec::with_capacity(n * c * plane);
                        for s in 0..n {
                            let base = (s * total + offset) * plane;
                            d.extend_from_slice(&g.data()[base..base + c * plane]);
                        }
                        acc(v, Tensor::new(&[n, c, h, w], d).expect("shape"), grads);
                    }
                    offset += c;
                }
            }
            Op::Mask { input, mask } => {
                let data = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                acc(*input, Tensor::new(g.shape(), data).expect("same shape"), grads);
            }
            Op::Sum(input) => {
                acc(*input, Tensor::full(self.shape(*input), g.item()), grads);
            }
            Op::Scale(input, factor) => {
                acc(*input, g.map(|v| v * *factor), grads);
            }
            Op::GatherPixel { input, sample, row, col } => {
                let [_, c, h, w] = self.value(*input).dims4().expect("rank 4");
                let mut d = Tensor::zeros(self.shape(*input));
                for ch in 0..c {
                    d.data_mut()[((sample * c + ch) * h + row) * w + col] = g.data()[ch];
                }
                acc(*input, d, grads);
            }
            Op::DynamicConv { feature, sample, kernel } => {
                let fv = self.value(*feature);
                let [_, c, h, w] = fv.dims4().expect("rank 4");
                let plane = h * w;
                let f = &fv.data()[sample * c * plane..(sample + 1) * c * plane];
                if self.needs(*kernel) {
                    let mut dk = vec![T::zero(); c + 1];
                    for ch in 0..c {
                        dk[ch] = f[ch * plane..(ch + 1) * plane]
                            .iter()
                            .zip(g.data())
                            .map(|(&a, &b)| a * b)
                            .sum();
                    }
                    dk[c] = g.sum();
                    acc(*kernel, Tensor::new(&[c + 1], dk).expect("shape"), grads);
                }
                if self.needs(*feature) {
                    let kd = self.value(*kernel).data();
                    let mut d = Tensor::zeros(fv.shape());
                    let dst = &mut d.data_mut()[sample * c * plane..(sample + 1) * c * plane];
                    for ch in 0..c {
                        for (o, &gv) in dst[ch * plane..(ch + 1) * plane].iter_mut().zip(g.data()) {
                            *o = kd[ch] * gv;
                        }
                    }
                    acc(*feature, d, grads);
                }
            }
            Op::RowPool { feature, sample, logits, weight, bias, softmax } => {
                let fv = self.value(*feature);
                let [_, c, h, w] = fv.dims4().expect("rank 4");
                let plane = h * w;
                let f = &fv.data()[sample * c * plane..(sample + 1) * c * plane];
                let wd = self.value(*weight).data();
                let gd = g.data();
                // v[r, col] = weight . feature[:, r, col]
                let mut v = vec![T::zero(); plane];
                for ch in 0..c {
                    for (vi, &fi) in v.iter_mut().zip(&f[ch * plane..(ch + 1) * plane]) {
                        *vi = *vi + wd[ch] * fi;
                    }
                }
                if self.needs(*weight) {
                    let mut dw = vec![T::zero(); c];
                    for (ch, dwc) in dw.iter_mut().enumerate() {
                        let mut s = T::zero();
                        for r in 0..h {
                            let mut pooled = T::zero();
                            for col in 0..w {
                                pooled = pooled + softmax[r * w + col] * f[ch * plane + r * w + col];
                            }
                            s = s + gd[r] * pooled;
                        }
                        *dwc = s;
                    }
                    acc(*weight, Tensor::new(&[c], dw).expect("shape"), grads);
                }
                if self.needs(*bias) {
                    acc(*bias, Tensor::scalar(g.sum()), grads);
                }
                if self.needs(*logits) {
                    let mut dz = vec![T::zero(); plane];
                    for r in 0..h {
                        let row = r * w..(r + 1) * w;
                        let mean_v: T = softmax[row.clone()]
                            .iter()
                            .zip(&v[row.clone()])
                            .map(|(&s, &vv)| s * vv)
                            .sum();
                        for i in row {
                            dz[i] = gd[r] * softmax[i] * (v[i] - mean_v);
                        }
                    }
                    acc(*logits, Tensor::new(&[h, w], dz).expect("shape"), grads);
                }
                if self.needs(*feature) {
                    let mut d = Tensor::zeros(fv.shape());
                    let dst = &mut d.data_mut()[sample * c * plane..(sample + 1) * c * plane];
                    for ch in 0..c {
                        for r in 0..h {
                            for col in 0..w {
                                dst[ch * plane + r * w + col] = gd[r] * softmax[r * w + col] * wd[ch];
                            }
                        }
                    }
                    acc(*feature, d, grads);
                }
            }
            Op::Focal { logits, dlogits }
            | Op::RowCrossEntropy { logits, dlogits }
            | Op::BinaryCrossEntropy { logits, dlogits } => {
                let scale = g.item();
                let data = dlogits.iter().map(|&d| d * scale).collect();
                acc(*logits, Tensor::new(self.shape(*logits), data).expect("shape"), grads);
            }
        }
    }
}
