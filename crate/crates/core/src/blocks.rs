//! Residual building blocks: the factorized non-bottleneck-1D block, the
//! conv/pool downsampler and the ResNet basic block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{conv_decls, norm_buffers, norm_decls, BufferDecl, Ctx, ParamDecl};
use crate::tensor::{ConvGeometry, Element, Var};

/// Residual block whose 3x3 convolutions are each split into a 3x1 and a 1x3
/// convolution. Dilation applies to the second factorized pair only.
#[derive(Clone, Debug, PartialEq)]
pub struct NonBt1DSpec {
    pub channels: usize,
    pub dilation: usize,
    pub dropout_prob: f64,
}

impl NonBt1DSpec {
    pub fn new(channels: usize, dilation: usize, dropout_prob: f64) -> Result<Self> {
        if channels == 0 || dilation == 0 {
            return Err(Error::Config("non-bt-1D needs channels >= 1 and dilation >= 1".into()));
        }
        if !(0.0..1.0).contains(&dropout_prob) {
            return Err(Error::Config(format!("dropout probability {dropout_prob} outside [0, 1)")));
        }
        Ok(Self {
            channels,
            dilation,
            dropout_prob,
        })
    }

    pub fn param_decls(&self, prefix: &str) -> Vec<ParamDecl> {
        let c = self.channels;
        let mut v = Vec::new();
        v.extend(conv_decls(&format!("{prefix}.conv3x1_1"), c, c, 3, 1, true));
        v.extend(conv_decls(&format!("{prefix}.conv1x3_1"), c, c, 1, 3, true));
        v.extend(norm_decls(&format!("{prefix}.bn1"), c));
        v.extend(conv_decls(&format!("{prefix}.conv3x1_2"), c, c, 3, 1, true));
        v.extend(conv_decls(&format!("{prefix}.conv1x3_2"), c, c, 1, 3, true));
        v.extend(norm_decls(&format!("{prefix}.bn2"), c));
        v
    }

    pub fn buffer_decls(&self, prefix: &str) -> Vec<BufferDecl> {
        let mut v = norm_buffers(&format!("{prefix}.bn1"), self.channels);
        v.extend(norm_buffers(&format!("{prefix}.bn2"), self.channels));
        v
    }
}

pub fn non_bt_1d_forward<T: Element>(ctx: &mut Ctx<'_, T>, x: Var, spec: &NonBt1DSpec, prefix: &str) -> Result<Var> {
    let [_, c, _, _] = ctx.tape.value(x).dims4()?;
    if c != spec.channels {
        return Err(Error::shape("non_bt_1d", &[spec.channels], &[c]));
    }
    let d = spec.dilation;
    let vertical = |dil: usize| ConvGeometry {
        stride: (1, 1),
        padding: (dil, 0),
        dilation: (dil, 1),
    };
    let horizontal = |dil: usize| ConvGeometry {
        stride: (1, 1),
        padding: (0, dil),
        dilation: (1, dil),
    };
    let y = ctx.conv(x, &format!("{prefix}.conv3x1_1"), vertical(1))?;
    let y = ctx.tape.relu(y);
    let y = ctx.conv(y, &format!("{prefix}.conv1x3_1"), horizontal(1))?;
    let y = ctx.norm(y, &format!("{prefix}.bn1"))?;
    let y = ctx.tape.relu(y);
    let y = ctx.conv(y, &format!("{prefix}.conv3x1_2"), vertical(d))?;
    let y = ctx.tape.relu(y);
    let y = ctx.conv(y, &format!("{prefix}.conv1x3_2"), horizontal(d))?;
    let y = ctx.norm(y, &format!("{prefix}.bn2"))?;
    let y = ctx.dropout2d(y, spec.dropout_prob)?;
    let y = ctx.tape.add(y, x)?;
    Ok(ctx.tape.relu(y))
}

/// Stride-2 3x3 convolution producing `out - in` maps, concatenated with a
/// 2x2 max-pool of the input, then norm and ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct DownsamplerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
}

impl DownsamplerSpec {
    pub fn new(in_channels: usize, out_channels: usize) -> Result<Self> {
        if in_channels == 0 || out_channels <= in_channels {
            return Err(Error::Config(format!(
                "downsampler needs out_channels > in_channels >= 1, got {in_channels} -> {out_channels}"
            )));
        }
        Ok(Self {
            in_channels,
            out_channels,
        })
    }

    pub fn conv_channels(&self) -> usize {
        self.out_channels - self.in_channels
    }

    pub fn param_decls(&self, prefix: &str) -> Vec<ParamDecl> {
        let mut v = conv_decls(&format!("{prefix}.conv"), self.in_channels, self.conv_channels(), 3, 3, true);
        v.extend(norm_decls(&format!("{prefix}.bn"), self.out_channels));
        v
    }

    pub fn buffer_decls(&self, prefix: &str) -> Vec<BufferDecl> {
        norm_buffers(&format!("{prefix}.bn"), self.out_channels)
    }
}

pub fn downsampler_forward<T: Element>(ctx: &mut Ctx<'_, T>, x: Var, spec: &DownsamplerSpec, prefix: &str) -> Result<Var> {
    let [_, c, h, w] = ctx.tape.value(x).dims4()?;
    if c != spec.in_channels {
        return Err(Error::shape("downsampler", &[spec.in_channels], &[c]));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Geometry(format!("downsampler needs even spatial dims, got {h}x{w}")));
    }
    let conv = ctx.conv(x, &format!("{prefix}.conv"), ConvGeometry::new(2, 1, 1))?;
    let pooled = ctx.tape.maxpool2(x)?;
    let y = ctx.tape.concat_channels(&[conv, pooled])?;
    let y = ctx.norm(y, &format!("{prefix}.bn"))?;
    Ok(ctx.tape.relu(y))
}

/// ResNet basic block: two 3x3 convolutions with norm, plus a shortcut that
/// becomes a strided 1x1 projection when the shape changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl ResidualSpec {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || !(1..=2).contains(&stride) {
            return Err(Error::Config(format!(
                "residual block {in_channels} -> {out_channels} with stride {stride} is invalid"
            )));
        }
        Ok(Self {
            in_channels,
            out_channels,
            stride,
        })
    }

    pub fn has_projection(&self) -> bool {
        self.stride != 1 || self.in_channels != self.out_channels
    }

    pub fn param_decls(&self, prefix: &str) -> Vec<ParamDecl> {
        let (i, o) = (self.in_channels, self.out_channels);
        let mut v = conv_decls(&format!("{prefix}.conv1"), i, o, 3, 3, false);
        v.extend(norm_decls(&format!("{prefix}.bn1"), o));
        v.extend(conv_decls(&format!("{prefix}.conv2"), o, o, 3, 3, false));
        v.extend(norm_decls(&format!("{prefix}.bn2"), o));
        if self.has_projection() {
            v.extend(conv_decls(&format!("{prefix}.proj"), i, o, 1, 1, false));
            v.extend(norm_decls(&format!("{prefix}.proj_bn"), o));
        }
        v
    }

    pub fn buffer_decls(&self, prefix: &str) -> Vec<BufferDecl> {
        let mut v = norm_buffers(&format!("{prefix}.bn1"), self.out_channels);
        v.extend(norm_buffers(&format!("{prefix}.bn2"), self.out_channels));
        if self.has_projection() {
            v.extend(norm_buffers(&format!("{prefix}.proj_bn"), self.out_channels));
        }
        v
    }
}

pub fn residual_basic_forward<T: Element>(ctx: &mut Ctx<'_, T>, x: Var, spec: &ResidualSpec, prefix: &str) -> Result<Var> {
    let [_, c, _, _] = ctx.tape.value(x).dims4()?;
    if c != spec.in_channels {
        return Err(Error::shape("residual_basic", &[spec.in_channels], &[c]));
    }
    let y = ctx.conv(x, &format!("{prefix}.conv1"), ConvGeometry::new(spec.stride, 1, 1))?;
    let y = ctx.norm(y, &format!("{prefix}.bn1"))?;
    let y = ctx.tape.relu(y);
    let y = ctx.conv(y, &format!("{prefix}.conv2"), ConvGeometry::new(1, 1, 1))?;
    let y = ctx.norm(y, &format!("{prefix}.bn2"))?;
    let shortcut = if spec.has_projection() {
        let s = ctx.conv(x, &format!("{prefix}.proj"), ConvGeometry::new(spec.stride, 0, 1))?;
        ctx.norm(s, &format!("{prefix}.proj_bn"))?
    } else {
        x
    };
    let y = ctx.tape.add(y, shortcut)?;
    Ok(ctx.tape.relu(y))
}

/// Weight counts of a `k x k` convolution versus its `k x 1` + `1 x k` factorization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FactorizationSavings {
    pub full_weights: u64,
    pub factorized_weights: u64,
    /// `factorized / full`, i.e. `2 / k`.
    pub ratio: f64,
}

impl FactorizationSavings {
    pub fn reduction(&self) -> f64 {
        1.0 - self.ratio
    }
}

pub fn factorization_savings(kernel: u64, channels: u64) -> Result<FactorizationSavings> {
    if kernel == 0 || channels == 0 {
        return Err(Error::Config("kernel size and channels must be >= 1".into()));
    }
    let full = kernel * kernel * channels * channels;
    let factorized = 2 * kernel * channels * channels;
    Ok(FactorizationSavings {
        full_weights: full,
        factorized_weights: factorized,
        ratio: factorized as f64 / full as f64,
    })
}
