//! Raw forward/backward kernels. Loop nests have a fixed summation order so a
//! given input always produces bitwise-identical output.

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Stride, zero-padding and dilation of a 2D convolution, as (rows, cols).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
        }
    }
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride: (stride, stride),
            padding: (padding, padding),
            dilation: (dilation, dilation),
        }
    }

    /// Output spatial size for an `h x w` input and `kh x kw` kernel.
    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        let axis = |n: usize, k: usize, s: usize, p: usize, d: usize| -> Result<usize> {
            if s == 0 || d == 0 {
                return Err(Error::invalid("conv2d", "stride and dilation must be >= 1"));
            }
            let span = d * (k - 1) + 1;
            let padded = n + 2 * p;
            if padded < span {
                return Err(Error::NonPositiveOutput {
                    op: "conv2d",
                    reason: format!("padded extent {padded} < dilated kernel extent {span}"),
                });
            }
            Ok((padded - span) / s + 1)
        };
        Ok((
            axis(h, kh, self.stride.0, self.padding.0, self.dilation.0)?,
            axis(w, kw, self.stride.1, self.padding.1, self.dilation.1)?,
        ))
    }
}

/// Geometry of a transposed convolution (dilation fixed at 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeconvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl DeconvGeometry {
    pub fn new(stride: usize, padding: usize, output_padding: usize) -> Self {
        Self {
            stride,
            padding,
            output_padding,
        }
    }

    pub(crate) fn as_conv(&self) -> ConvGeometry {
        ConvGeometry::new(self.stride, self.padding, 1)
    }

    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::invalid("conv_transpose2d", "stride must be >= 1"));
        }
        if self.output_padding >= self.stride {
            return Err(Error::invalid(
                "conv_transpose2d",
                format!(
                    "output_padding {} must be smaller than stride {}",
                    self.output_padding, self.stride
                ),
            ));
        }
        let axis = |n: usize, k: usize| -> Result<usize> {
            let grown = (n - 1) * self.stride + (k - 1) + self.output_padding + 1;
            if grown <= 2 * self.padding {
                return Err(Error::NonPositiveOutput {
                    op: "conv_transpose2d",
                    reason: format!("extent {grown} minus padding {} is < 1", 2 * self.padding),
                });
            }
            Ok(grown - 2 * self.padding)
        };
        Ok((axis(h, kh)?, axis(w, kw)?))
    }
}

struct Patch {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    g: ConvGeometry,
}

impl Patch {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Calls `f(col_row, col_index, image_index)` for every in-bounds tap.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (sh, sw) = self.g.stride;
        let (ph, pw) = self.g.padding;
        let (dh, dw) = self.g.dilation;
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    for oy in 0..self.ho {
                        let iy = (oy * sh + ki * dh) as isize - ph as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let img_row = (c * self.h + iy as usize) * self.w;
                        let col_row = row * self.cols() + oy * self.wo;
                        for ox in 0..self.wo {
                            let ix = (ox * sw + kj * dw) as isize - pw as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(row, col_row + ox, img_row + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Element>(&self, img: &[T], cols: &mut [T]) {
        cols.fill(T::zero());
        self.for_each(|_, ci, ii| cols[ci] = img[ii]);
    }

    fn col2im_add<T: Element>(&self, cols: &[T], img: &mut [T]) {
        self.for_each(|_, ci, ii| img[ii] = img[ii] + cols[ci]);
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.g.stride == (1, 1)
            && self.g.padding == (0, 0)
            && self.ho == self.h
            && self.wo == self.w
    }
}

fn check_finite<T: Element>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn check_bias<T: Element>(op: &'static str, bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(Error::shape(op, &[channels], b.shape()));
        }
    }
    Ok(())
}

pub(crate) fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: ConvGeometry,
) -> Result<Tensor<T>> {
    let [n, ci, h, w] = input.dims4()?;
    let [co, wci, kh, kw] = weight.dims4()?;
    if wci != ci {
        return Err(Error::shape("conv2d", &[co, ci, kh, kw], weight.shape()));
    }
    check_bias("conv2d", bias, co)?;
    check_finite("conv2d", input)?;
    let (ho, wo) = g.output_size(h, w, kh, kw)?;
    let p = Patch { c: ci, h, w, kh, kw, ho, wo, g };
    let (k, cols_n) = (p.rows(), p.cols());
    let mut out = vec![T::zero(); n * co * cols_n];
    let mut cols = if p.is_pointwise() { Vec::new() } else { vec![T::zero(); k * cols_n] };
    let in_len = ci * h * w;
    for s in 0..n {
        let img = &input.data()[s * in_len..(s + 1) * in_len];
        let b: &[T] = if p.is_pointwise() {
            img
        } else {
            p.im2col(img, &mut cols);
            &cols
        };
        let dst = &mut out[s * co * cols_n..(s + 1) * co * cols_n];
        T::gemm(
            co, k, cols_n, T::one(), weight.data(), k as isize, 1, b, cols_n as isize, 1,
            T::zero(), dst, cols_n as isize, 1,
        );
        if let Some(bias) = bias {
            for (o, &bv) in bias.data().iter().enumerate() {
                for v in &mut dst[o * cols_n..(o + 1) * cols_n] {
                    *v = *v + bv;
                }
            }
        }
    }
    Tensor::new(&[n, co, ho, wo], out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: ConvGeometry,
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let [n, ci, h, w] = input.dims4().expect("checked in forward");
    let [co, _, kh, kw] = weight.dims4().expect("checked in forward");
    let [_, _, ho, wo] = grad_out.dims4().expect("checked in forward");
    let p = Patch { c: ci, h, w, kh, kw, ho, wo, g };
    let (k, cols_n) = (p.rows(), p.cols());
    let mut dx = want.0.then(|| vec![T::zero(); input.numel()]);
    let mut dw = want.1.then(|| vec![T::zero(); weight.numel()]);
    let mut cols = vec![T::zero(); k * cols_n];
    let in_len = ci * h * w;
    for s in 0..n {
        let go = &grad_out.data()[s * co * cols_n..(s + 1) * co * cols_n];
        if let Some(dw) = dw.as_mut() {
            let img = &input.data()[s * in_len..(s + 1) * in_len];
            let b: &[T] = if p.is_pointwise() {
                img
            } else {
                p.im2col(img, &mut cols);
                &cols
            };
            // dW[co, k] += gout[co, P] * cols[k, P]^T
            T::gemm(
                co, cols_n, k, T::one(), go, cols_n as isize, 1, b, 1, cols_n as isize,
                T::one(), dw, k as isize, 1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx[s * in_len..(s + 1) * in_len];
            if p.is_pointwise() {
                T::gemm(
                    k, co, cols_n, T::one(), weight.data(), 1, k as isize, go, cols_n as isize, 1,
                    T::zero(), dst, cols_n as isize, 1,
                );
            } else {
                T::gemm(
                    k, co, cols_n, T::one(), weight.data(), 1, k as isize, go, cols_n as isize, 1,
                    T::zero(), &mut cols, cols_n as isize, 1,
                );
                p.col2im_add(&cols, dst);
            }
        }
    }
    let db = want.2.then(|| channel_sums(grad_out));
    ConvGrads {
        input: dx.map(|d| Tensor::new(input.shape(), d).expect("same shape")),
        weight: dw.map(|d| Tensor::new(weight.shape(), d).expect("same shape")),
        bias: db,
    }
}

/// Transposed convolution; `weight` is `[C_in, C_out, kH, kW]`, the adjoint
/// layout of a convolution mapping `C_out -> C_in`.
pub(crate) fn conv_transpose2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: DeconvGeometry,
) -> Result<Tensor<T>> {
    let [n, ci, hi, wi] = input.dims4()?;
    let [wci, co, kh, kw] = weight.dims4()?;
    if wci != ci {
        return Err(Error::shape("conv_transpose2d", &[ci, co, kh, kw], weight.shape()));
    }
    check_bias("conv_transpose2d", bias, co)?;
    check_finite("conv_transpose2d", input)?;
    let (ho, wo) = g.output_size(hi, wi, kh, kw)?;
    let p = Patch { c: co, h: ho, w: wo, kh, kw, ho: hi, wo: wi, g: g.as_conv() };
    let (k, cols_n) = (p.rows(), p.cols());
    let mut out = vec![T::zero(); n * co * ho * wo];
    let mut cols = vec![T::zero(); k * cols_n];
    let out_len = co * ho * wo;
    for s in 0..n {
        let x = &input.data()[s * ci * cols_n..(s + 1) * ci * cols_n];
        // cols[k, P] = Wm[ci, k]^T * x[ci, P]
        T::gemm(
            k, ci, cols_n, T::one(), weight.data(), 1, k as isize, x, cols_n as isize, 1,
            T::zero(), &mut cols, cols_n as isize, 1,
        );
        let dst = &mut out[s * out_len..(s + 1) * out_len];
        p.col2im_add(&cols, dst);
        if let Some(bias) = bias {
            let plane = ho * wo;
            for (o, &bv) in bias.data().iter().enumerate() {
                for v in &mut dst[o * plane..(o + 1) * plane] {
                    *v = *v + bv;
                }
            }
        }
    }
    Tensor::new(&[n, co, ho, wo], out)
}

pub(crate) fn conv_transpose2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: DeconvGeometry,
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let [n, ci, hi, wi] = input.dims4().expect("checked in forward");
    let [_, co, kh, kw] = weight.dims4().expect("checked in forward");
    let [_, _, ho, wo] = grad_out.dims4().expect("checked in forward");
    let p = Patch { c: co, h: ho, w: wo, kh, kw, ho: hi, wo: wi, g: g.as_conv() };
    let (k, cols_n) = (p.rows(), p.cols());
    let mut dx = want.0.then(|| vec![T::zero(); input.numel()]);
    let mut dw = want.1.then(|| vec![T::zero(); weight.numel()]);
    let mut cols = vec![T::zero(); k * cols_n];
    let out_len = co * ho * wo;
    if want.0 || want.1 {
        for s in 0..n {
            p.im2col(&grad_out.data()[s * out_len..(s + 1) * out_len], &mut cols);
            if let Some(dx) = dx.as_mut() {
                T::gemm(
                    ci, k, cols_n, T::one(), weight.data(), k as isize, 1, &cols, cols_n as isize, 1,
                    T::zero(), &mut dx[s * ci * cols_n..(s + 1) * ci * cols_n], cols_n as isize, 1,
                );
            }
            if let Some(dw) = dw.as_mut() {
                let x = &input.data()[s * ci * cols_n..(s + 1) * ci * cols_n];
                T::gemm(
                    ci, cols_n, k, T::one(), x, cols_n as isize, 1, &cols, 1, cols_n as isize,
                    T::one(), dw, k as isize, 1,
                );
            }
        }
    }
    let db = want.2.then(|| channel_sums(grad_out));
    ConvGrads {
        input: dx.map(|d| Tensor::new(input.shape(), d).expect("same shape")),
        weight: dw.map(|d| Tensor::new(weight.shape(), d).expect("same shape")),
        bias: db,
    }
}

fn channel_sums<T: Element>(t: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = t.dims4().expect("rank 4");
    let plane = h * w;
    let mut sums = vec![T::zero(); c];
    for s in 0..n {
        for (ch, acc) in sums.iter_mut().enumerate() {
            let base = (s * c + ch) * plane;
            *acc = *acc + t.data()[base..base + plane].iter().copied().sum::<T>();
        }
    }
    Tensor::new(&[c], sums).expect("c >= 1")
}

/// Saved per-channel statistics of a batch-norm forward pass.
#[derive(Clone, Debug)]
pub(crate) struct NormStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) struct NormOut<T> {
    pub output: Tensor<T>,
    pub stats: NormStats<T>,
    /// Unbiased batch variance, for updating running statistics.
    pub batch_var: Vec<T>,
}

pub(crate) fn batch_norm<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    eps: T,
    training: bool,
) -> Result<NormOut<T>> {
    let [n, c, h, w] = input.dims4()?;
    for t in [gamma.shape(), beta.shape()] {
        if t != [c] {
            return Err(Error::shape("batch_norm2d", &[c], t));
        }
    }
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::shape("batch_norm2d", &[c], &[running_mean.len()]));
    }
    if eps <= T::zero() {
        return Err(Error::invalid("batch_norm2d", "eps must be > 0"));
    }
    check_finite("batch_norm2d", input)?;
    let plane = h * w;
    let count = n * plane;
    let x = input.data();
    let mut mean = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    let mut batch_var = vec![T::zero(); c];
    for ch in 0..c {
        let (m, var) = if training {
            let mut sum = T::zero();
            for s in 0..n {
                let base = (s * c + ch) * plane;
                sum = sum + x[base..base + plane].iter().copied().sum::<T>();
            }
            let m = sum / T::from_usize(count).unwrap();
            let mut sq = T::zero();
            for s in 0..n {
                let base = (s * c + ch) * plane;
                sq = sq + x[base..base + plane].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
            }
            let var = sq / T::from_usize(count).unwrap();
            batch_var[ch] = if count > 1 {
                sq / T::from_usize(count - 1).unwrap()
            } else {
                T::zero()
            };
            (m, var)
        } else {
            (running_mean[ch], running_var[ch])
        };
        mean[ch] = m;
        inv_std[ch] = T::one() / (var + eps).sqrt();
    }
    let mut out = vec![T::zero(); x.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            let (m, is, ga, be) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in base..base + plane {
                out[i] = ga * ((x[i] - m) * is) + be;
            }
        }
    }
    Ok(NormOut {
        output: Tensor::new(input.shape(), out)?,
        stats: NormStats { mean, inv_std },
        batch_var,
    })
}

pub(crate) fn batch_norm_backward<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &NormStats<T>,
    grad_out: &Tensor<T>,
    training: bool,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = input.dims4().expect("rank 4");
    let plane = h * w;
    let count = T::from_usize(n * plane).unwrap();
    let (x, gy) = (input.data(), grad_out.data());
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (m, is, ga) = (stats.mean[ch], stats.inv_std[ch], gamma.data()[ch]);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for i in base..base + plane {
                sum_dy = sum_dy + gy[i];
                sum_dy_xhat = sum_dy_xhat + gy[i] * (x[i] - m) * is;
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        for s in 0..n {
            let base = (s * c + ch) * plane;
            for i in base..base + plane {
                dx[i] = if training {
                    let xhat = (x[i] - m) * is;
                    ga * is * (gy[i] - sum_dy / count - xhat * sum_dy_xhat / count)
                } else {
                    ga * is * gy[i]
                };
            }
        }
    }
    (
        Tensor::new(input.shape(), dx).expect("same shape"),
        Tensor::new(&[c], dgamma).expect("c >= 1"),
        Tensor::new(&[c], dbeta).expect("c >= 1"),
    )
}

/// 2x2 max pooling with stride 2 (floor on odd sizes). Returns the flat input
/// index of each selected maximum; ties keep the first in row-major order.
pub(crate) fn maxpool2<T: Element>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = input.dims4()?;
    if h < 2 || w < 2 {
        return Err(Error::NonPositiveOutput {
            op: "maxpool2",
            reason: format!("spatial size {h}x{w} smaller than the 2x2 window"),
        });
    }
    let (ho, wo) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(&[n, c, ho, wo], out)?, arg))
}

#[inline]
pub(crate) fn sigmoid<T: Element>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// In-place softmax of one row; returns nothing, the row holds probabilities.
pub(crate) fn softmax_in_place<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub(crate) const PROB_CLAMP: f64 = 1e-6;

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus<T: Element>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Penalty-reduced focal term of a probability. `gt == 1` marks a positive.
/// The probability is clamped away from 0 and 1.
pub(crate) fn focal_term<T: Element>(p: T, gt: T, alpha: T, beta: T) -> T {
    let lo = T::lit(PROB_CLAMP);
    let p = p.max(lo).min(T::one() - lo);
    let one = T::one();
    if gt == one {
        -(one - p).powf(alpha) * p.ln()
    } else {
        -(one - gt).powf(beta) * p.powf(alpha) * (one - p).ln()
    }
}

/// Focal term of `sigmoid(z)` and its derivative with respect to `z`,
/// evaluated in log space so saturated logits keep a gradient.
pub(crate) fn focal_logit_term<T: Element>(z: T, gt: T, alpha: T, beta: T) -> (T, T) {
    let one = T::one();
    let log_p = -softplus(-z);
    let log_q = -softplus(z);
    let (p, q) = (log_p.exp(), log_q.exp());
    if gt == one {
        let loss = -q.powf(alpha) * log_p;
        (loss, alpha * p * q.powf(alpha) * log_p - q.powf(alpha + one))
    } else {
        let w = (one - gt).powf(beta);
        let loss = -w * p.powf(alpha) * log_q;
        (loss, -w * (alpha * p.powf(alpha) * q * log_q - p.powf(alpha + one)))
    }
}

/// Binary cross-entropy of `sigmoid(z)` against a 0/1 target, from the logit.
pub(crate) fn bce_logit_term<T: Element>(z: T, target: T) -> T {
    softplus(z) - target * z
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_output_size_formula() {
        let g = ConvGeometry::new(1, 1, 1);
        assert_eq!(g.output_size(16, 16, 3, 3).unwrap(), (16, 16));
        let g = ConvGeometry::new(2, 1, 1);
        assert_eq!(g.output_size(64, 128, 3, 3).unwrap(), (32, 64));
        let g = ConvGeometry::new(1, 0, 2);
        assert!(g.output_size(4, 4, 3, 3).is_err());
    }

    #[test]
    fn deconv_output_size_formula() {
        let g = DeconvGeometry::new(2, 1, 1);
        assert_eq!(g.output_size(4, 4, 3, 3).unwrap(), (8, 8));
        assert!(DeconvGeometry::new(2, 1, 2).output_size(4, 4, 3, 3).is_err());
        assert!(DeconvGeometry::new(1, 1, 0).output_size(1, 1, 1, 1).is_err());
    }

    #[test]
    fn maxpool_picks_window_maximum() {
        let x = Tensor::<f32>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        let x = Tensor::<f32>::full(&[1, 1, 4, 6], 2.5);
        let (y, _) = maxpool2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 3]);
        assert!(y.data().iter().all(|&v| v == 2.5));
        let tiny = Tensor::<f32>::zeros(&[1, 1, 1, 4]);
        assert!(maxpool2(&tiny).is_err());
    }

    #[test]
    fn focal_single_positive_at_half() {
        let l = focal_term(0.5f64, 1.0, 2.0, 4.0);
        assert!((l - 0.25 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn focal_logit_form_agrees_and_keeps_gradient_when_saturated() {
        for z in [-3.0f64, -0.4, 0.0, 1.7] {
            for g in [1.0, 0.3] {
                let (l, _) = focal_logit_term(z, g, 2.0, 4.0);
                assert!((l - focal_term(sigmoid(z), g, 2.0, 4.0)).abs() < 1e-12);
            }
        }
        let (l, d) = focal_logit_term(-40.0f64, 1.0, 2.0, 4.0);
        assert!((l - 40.0).abs() < 1e-9 && (d + 1.0).abs() < 1e-9);
        let (_, d) = focal_logit_term(40.0f64, 0.0, 2.0, 4.0);
        assert!((d - 1.0).abs() < 1e-9);
        assert!((bce_logit_term(-50.0f64, 1.0) - 50.0).abs() < 1e-12);
    }
}
