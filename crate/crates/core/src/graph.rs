//! Declarative layer graphs: every layer declares its named parameters, can be
//! run on a [`Tape`], and is counted by the parameter audit.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::blocks::{self, DownsamplerSpec, NonBt1DSpec, ResidualSpec};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, DeconvGeometry, Element, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    KaimingFanIn(usize),
    Zeros,
    Ones,
    Constant(f32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamDecl {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Non-trainable per-channel state (batch-norm running statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct BufferDecl {
    pub name: String,
    pub len: usize,
    pub fill: f32,
}

/// Named tensors in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn initialize(decls: &[ParamDecl], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut store = Self::default();
        for d in decls {
            let n = d.numel();
            let data: Vec<T> = match d.init {
                Init::KaimingFanIn(fan_in) => {
                    let std = (2.0 / fan_in.max(1) as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("finite std");
                    (0..n).map(|_| T::lit(normal.sample(rng))).collect()
                }
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Constant(v) => vec![T::widen(v); n],
            };
            store.insert(&d.name, Tensor::new(&d.shape, data)?)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        if self.tensors.insert(name.to_string(), tensor).is_some() {
            return Err(Error::Config(format!("duplicate parameter {name:?}")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Running statistics keyed by buffer name.
#[derive(Clone, Debug, PartialEq)]
pub struct BufferStore<T = f32> {
    buffers: IndexMap<String, Vec<T>>,
}

impl<T: Element> Default for BufferStore<T> {
    fn default() -> Self {
        Self {
            buffers: IndexMap::new(),
        }
    }
}

impl<T: Element> BufferStore<T> {
    pub fn initialize(decls: &[BufferDecl]) -> Self {
        Self {
            buffers: decls
                .iter()
                .map(|d| (d.name.clone(), vec![T::widen(d.fill); d.len]))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&[T]> {
        self.buffers
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn pair_mut(&mut self, a: &str, b: &str) -> Result<(&mut [T], &mut [T])> {
        let [x, y] = self
            .buffers
            .get_disjoint_mut([a, b])
            .map(|v| v.ok_or_else(|| Error::UnknownParameter(format!("{a} / {b}"))));
        Ok((x?.as_mut_slice(), y?.as_mut_slice()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn set(&mut self, name: &str, values: Vec<T>) -> Result<()> {
        let slot = self
            .buffers
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if slot.len() != values.len() {
            return Err(Error::shape("buffer", &[slot.len()], &[values.len()]));
        }
        *slot = values;
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> BufferStore<U> {
        BufferStore {
            buffers: self
                .buffers
                .iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        v.iter().map(|x| U::from_f64(x.to_f64().unwrap()).unwrap()).collect(),
                    )
                })
                .collect(),
        }
    }
}

/// Tape variables for each parameter of a store.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: HashMap<String, Var>,
    order: Vec<(String, Var)>,
}

impl Bindings {
    /// Records every parameter on the tape; `trainable` selects gradient tracking.
    pub fn bind<T: Element>(tape: &mut Tape<T>, store: &ParamStore<T>, trainable: bool) -> Self {
        let mut b = Self::default();
        for (name, t) in store.iter() {
            let v = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            b.vars.insert(name.to_string(), v);
            b.order.push((name.to_string(), v));
        }
        b
    }

    /// Binds `name` to an existing tape variable, replacing any previous binding.
    pub fn insert(&mut self, name: &str, var: Var) {
        if self.vars.insert(name.to_string(), var).is_some() {
            self.order.retain(|(n, _)| n != name);
        }
        self.order.push((name.to_string(), var));
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.order.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Batch-norm hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            momentum: 0.1,
        }
    }
}

/// Everything a layer needs while running forward.
pub struct Ctx<'a, T: Element> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a Bindings,
    pub buffers: &'a mut BufferStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    pub training: bool,
    pub norm: NormConfig,
}

impl<T: Element> Ctx<'_, T> {
    pub fn conv(&mut self, x: Var, prefix: &str, geom: ConvGeometry) -> Result<Var> {
        let w = self.params.get(&format!("{prefix}.weight"))?;
        let b = self.params.try_get(&format!("{prefix}.bias"));
        self.tape.conv2d(x, w, b, geom)
    }

    pub fn deconv(&mut self, x: Var, prefix: &str, geom: DeconvGeometry) -> Result<Var> {
        let w = self.params.get(&format!("{prefix}.weight"))?;
        let b = self.params.try_get(&format!("{prefix}.bias"));
        self.tape.conv_transpose2d(x, w, b, geom)
    }

    pub fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.params.get(&format!("{prefix}.weight"))?;
        let beta = self.params.get(&format!("{prefix}.bias"))?;
        let (rm, rv) = self
            .buffers
            .pair_mut(&format!("{prefix}.running_mean"), &format!("{prefix}.running_var"))?;
        self.tape.batch_norm2d(
            x,
            gamma,
            beta,
            rm,
            rv,
            T::lit(self.norm.eps),
            T::lit(self.norm.momentum),
            self.training,
        )
    }

    /// Channel-wise dropout; identity outside training or when `p == 0`.
    pub fn dropout2d(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.training || p <= 0.0 {
            return Ok(x);
        }
        let [n, c, h, w] = self.tape.value(x).dims4()?;
        let keep = T::lit(1.0 / (1.0 - p));
        let mut mask = Vec::with_capacity(n * c * h * w);
        for _ in 0..n * c {
            let m = if self.rng.random::<f64>() < p { T::zero() } else { keep };
            mask.extend(std::iter::repeat_n(m, h * w));
        }
        self.tape.mask(x, mask)
    }
}

pub(crate) fn conv_decls(prefix: &str, cin: usize, cout: usize, kh: usize, kw: usize, bias: bool) -> Vec<ParamDecl> {
    let mut v = vec![ParamDecl::new(
        format!("{prefix}.weight"),
        &[cout, cin, kh, kw],
        Init::KaimingFanIn(cin * kh * kw),
    )];
    if bias {
        v.push(ParamDecl::new(format!("{prefix}.bias"), &[cout], Init::Zeros));
    }
    v
}

pub(crate) fn deconv_decls(prefix: &str, cin: usize, cout: usize, k: usize) -> Vec<ParamDecl> {
    vec![
        ParamDecl::new(format!("{prefix}.weight"), &[cin, cout, k, k], Init::KaimingFanIn(cout * k * k)),
        ParamDecl::new(format!("{prefix}.bias"), &[cout], Init::Zeros),
    ]
}

pub(crate) fn norm_decls(prefix: &str, c: usize) -> Vec<ParamDecl> {
    vec![
        ParamDecl::new(format!("{prefix}.weight"), &[c], Init::Ones),
        ParamDecl::new(format!("{prefix}.bias"), &[c], Init::Zeros),
    ]
}

pub(crate) fn norm_buffers(prefix: &str, c: usize) -> Vec<BufferDecl> {
    vec![
        BufferDecl {
            name: format!("{prefix}.running_mean"),
            len: c,
            fill: 0.0,
        },
        BufferDecl {
            name: format!("{prefix}.running_var"),
            len: c,
            fill: 1.0,
        },
    ]
}

/// Where a layer comes from, for the layer census.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    /// Part of the unmodified reference network.
    Base,
    /// Added on top of the reference network.
    Added,
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    /// Convolution with optional norm and ReLU.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        norm: bool,
        relu: bool,
    },
    MaxPool2,
    Downsampler(DownsamplerSpec),
    NonBt1D(NonBt1DSpec),
    /// Stride-2 transposed 3x3 convolution followed by norm and ReLU.
    Upsampler { in_channels: usize, out_channels: usize },
    /// Plain transposed convolution with bias.
    Deconv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geometry: DeconvGeometry,
    },
    ResidualBasic(ResidualSpec),
    /// Emits the current activation as a feature-pyramid level.
    Tap { stride: usize },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::MaxPool2 => "maxpool",
            LayerSpec::Downsampler(_) => "downsampler",
            LayerSpec::NonBt1D(_) => "non_bt_1d",
            LayerSpec::Upsampler { .. } => "upsampler",
            LayerSpec::Deconv { .. } => "deconv",
            LayerSpec::ResidualBasic(_) => "residual_basic",
            LayerSpec::Tap { .. } => "tap",
        }
    }

    /// Number of convolution or transposed-convolution operations inside.
    pub fn conv_ops(&self) -> usize {
        match self {
            LayerSpec::Conv { .. } | LayerSpec::Upsampler { .. } | LayerSpec::Deconv { .. } => 1,
            LayerSpec::Downsampler(_) => 1,
            LayerSpec::NonBt1D(_) => 4,
            LayerSpec::ResidualBasic(r) => 2 + usize::from(r.has_projection()),
            LayerSpec::MaxPool2 | LayerSpec::Tap { .. } => 0,
        }
    }

    pub fn param_decls(&self, prefix: &str) -> Vec<ParamDecl> {
        match self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                bias,
                norm,
                ..
            } => {
                let mut v = conv_decls(&format!("{prefix}.conv"), *in_channels, *out_channels, *kernel, *kernel, *bias);
                if *norm {
                    v.extend(norm_decls(&format!("{prefix}.bn"), *out_channels));
                }
                v
            }
            LayerSpec::MaxPool2 | LayerSpec::Tap { .. } => Vec::new(),
            LayerSpec::Downsampler(s) => s.param_decls(prefix),
            LayerSpec::NonBt1D(s) => s.param_decls(prefix),
            LayerSpec::Upsampler {
                in_channels,
                out_channels,
            } => {
                let mut v = deconv_decls(&format!("{prefix}.deconv"), *in_channels, *out_channels, 3);
                v.extend(norm_decls(&format!("{prefix}.bn"), *out_channels));
                v
            }
            LayerSpec::Deconv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => deconv_decls(&format!("{prefix}.deconv"), *in_channels, *out_channels, *kernel),
            LayerSpec::ResidualBasic(s) => s.param_decls(prefix),
        }
    }

    pub fn buffer_decls(&self, prefix: &str) -> Vec<BufferDecl> {
        match self {
            LayerSpec::Conv {
                out_channels, norm: true, ..
            } => norm_buffers(&format!("{prefix}.bn"), *out_channels),
            LayerSpec::Upsampler { out_channels, .. } => norm_buffers(&format!("{prefix}.bn"), *out_channels),
            LayerSpec::Downsampler(s) => s.buffer_decls(prefix),
            LayerSpec::NonBt1D(s) => s.buffer_decls(prefix),
            LayerSpec::ResidualBasic(s) => s.buffer_decls(prefix),
            _ => Vec::new(),
        }
    }

    pub fn out_channels(&self, in_channels: usize) -> usize {
        match self {
            LayerSpec::Conv { out_channels, .. }
            | LayerSpec::Upsampler { out_channels, .. }
            | LayerSpec::Deconv { out_channels, .. } => *out_channels,
            LayerSpec::Downsampler(s) => s.out_channels,
            LayerSpec::ResidualBasic(s) => s.out_channels,
            LayerSpec::NonBt1D(_) | LayerSpec::MaxPool2 | LayerSpec::Tap { .. } => in_channels,
        }
    }

    pub fn in_channels(&self) -> Option<usize> {
        match self {
            LayerSpec::Conv { in_channels, .. }
            | LayerSpec::Upsampler { in_channels, .. }
            | LayerSpec::Deconv { in_channels, .. } => Some(*in_channels),
            LayerSpec::Downsampler(s) => Some(s.in_channels),
            LayerSpec::ResidualBasic(s) => Some(s.in_channels),
            LayerSpec::NonBt1D(s) => Some(s.channels),
            LayerSpec::MaxPool2 | LayerSpec::Tap { .. } => None,
        }
    }

    /// Spatial scale change: `(numerator, denominator)` applied to H and W.
    pub fn scale(&self) -> (usize, usize) {
        match self {
            LayerSpec::Conv { stride, .. } => (1, *stride),
            LayerSpec::MaxPool2 | LayerSpec::Downsampler(_) => (1, 2),
            LayerSpec::Upsampler { .. } => (2, 1),
            LayerSpec::Deconv { geometry, .. } => (geometry.stride, 1),
            LayerSpec::ResidualBasic(s) => (1, s.stride),
            LayerSpec::NonBt1D(_) | LayerSpec::Tap { .. } => (1, 1),
        }
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var, prefix: &str) -> Result<Var> {
        match self {
            LayerSpec::Conv {
                kernel,
                stride,
                norm,
                relu,
                ..
            } => {
                let mut y = ctx.conv(x, &format!("{prefix}.conv"), ConvGeometry::new(*stride, kernel / 2, 1))?;
                if *norm {
                    y = ctx.norm(y, &format!("{prefix}.bn"))?;
                }
                Ok(if *relu { ctx.tape.relu(y) } else { y })
            }
            LayerSpec::MaxPool2 => ctx.tape.maxpool2(x),
            LayerSpec::Downsampler(s) => blocks::downsampler_forward(ctx, x, s, prefix),
            LayerSpec::NonBt1D(s) => blocks::non_bt_1d_forward(ctx, x, s, prefix),
            LayerSpec::Upsampler { .. } => {
                let y = ctx.deconv(x, &format!("{prefix}.deconv"), DeconvGeometry::new(2, 1, 1))?;
                let y = ctx.norm(y, &format!("{prefix}.bn"))?;
                Ok(ctx.tape.relu(y))
            }
            LayerSpec::Deconv { geometry, .. } => ctx.deconv(x, &format!("{prefix}.deconv"), *geometry),
            LayerSpec::ResidualBasic(s) => blocks::residual_basic_forward(ctx, x, s, prefix),
            LayerSpec::Tap { .. } => Ok(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNode {
    pub name: String,
    pub spec: LayerSpec,
    pub origin: Origin,
}

impl LayerNode {
    pub fn new(name: impl Into<String>, spec: LayerSpec, origin: Origin) -> Self {
        Self {
            name: name.into(),
            spec,
            origin,
        }
    }
}

/// Output of running a [`ModelGraph`].
#[derive(Clone, Debug)]
pub struct GraphOutput {
    /// `(stride, activation)` for every tap reached, in graph order.
    pub taps: Vec<(usize, Var)>,
    pub output: Var,
}

/// Ordered composition of layers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelGraph {
    pub layers: Vec<LayerNode>,
}

impl ModelGraph {
    pub fn new(layers: Vec<LayerNode>) -> Self {
        Self { layers }
    }

    pub fn param_decls(&self) -> Vec<ParamDecl> {
        self.layers.iter().flat_map(|l| l.spec.param_decls(&l.name)).collect()
    }

    pub fn buffer_decls(&self) -> Vec<BufferDecl> {
        self.layers.iter().flat_map(|l| l.spec.buffer_decls(&l.name)).collect()
    }

    /// Runs the layers in order. With `stop_after_last_tap`, layers after the
    /// final tap are skipped.
    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, input: Var, stop_after_last_tap: bool) -> Result<GraphOutput> {
        let last = if stop_after_last_tap {
            self.layers
                .iter()
                .rposition(|l| matches!(l.spec, LayerSpec::Tap { .. }))
                .map_or(self.layers.len(), |i| i + 1)
        } else {
            self.layers.len()
        };
        let mut x = input;
        let mut taps = Vec::new();
        for layer in &self.layers[..last] {
            x = layer.spec.forward(ctx, x, &layer.name)?;
            if let LayerSpec::Tap { stride } = layer.spec {
                taps.push((stride, x));
            }
        }
        Ok(GraphOutput { taps, output: x })
    }
}
