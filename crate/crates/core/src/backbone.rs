//! Backbone assembly (modified ERFNet and ResNet), feature pyramids and the
//! parameter audit.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::blocks::{DownsamplerSpec, NonBt1DSpec, ResidualSpec};
use crate::error::{Error, Result};
use crate::graph::{BufferStore, Ctx, LayerNode, LayerSpec, ModelGraph, Origin, ParamDecl, ParamStore};
use crate::tensor::{DeconvGeometry, Element, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    ErfModified,
    ResnetBasic,
}

const ERF_CHANNELS: [usize; 4] = [16, 64, 128, 256];
const RESNET_CHANNELS: [usize; 4] = [64, 128, 256, 512];
const RESNET34_BLOCKS: [usize; 4] = [3, 4, 6, 3];
const ERF_DILATIONS: [usize; 4] = [2, 4, 8, 16];

fn default_width() -> f64 {
    1.0
}
fn default_geometry() -> (usize, usize) {
    (320, 800)
}
fn default_extra_blocks() -> usize {
    8
}
fn default_extra_deconvs() -> usize {
    2
}
fn default_down_up() -> (usize, usize) {
    (1, 1)
}
fn default_dropout() -> f64 {
    0.1
}
fn default_classes() -> usize {
    2
}

/// Backbone description. Channel lists left empty take the variant's defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    #[serde(default = "default_width")]
    pub width_multiplier: f64,
    /// Four stage widths before the width multiplier.
    #[serde(default)]
    pub stage_channels: Vec<usize>,
    /// Residual blocks per stage (ResNet only).
    #[serde(default)]
    pub stage_blocks: Vec<usize>,
    /// `(height, width)` of the network input.
    #[serde(default = "default_geometry")]
    pub input_geometry: (usize, usize),
    #[serde(default = "default_extra_blocks")]
    pub extra_blocks: usize,
    #[serde(default = "default_extra_deconvs")]
    pub extra_deconvs: usize,
    #[serde(default = "default_down_up")]
    pub extra_down_up: (usize, usize),
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// Output maps of the segmentation decoder.
    #[serde(default = "default_classes")]
    pub num_classes: usize,
}

impl BackboneConfig {
    pub fn new(variant: BackboneVariant) -> Self {
        Self {
            variant,
            width_multiplier: default_width(),
            stage_channels: Vec::new(),
            stage_blocks: Vec::new(),
            input_geometry: default_geometry(),
            extra_blocks: default_extra_blocks(),
            extra_deconvs: default_extra_deconvs(),
            extra_down_up: default_down_up(),
            dropout: default_dropout(),
            num_classes: default_classes(),
        }
    }

    pub fn erf_modified() -> Self {
        Self::new(BackboneVariant::ErfModified)
    }

    pub fn resnet() -> Self {
        Self::new(BackboneVariant::ResnetBasic)
    }

    /// Stage widths after applying the width multiplier.
    pub fn channels(&self) -> Result<[usize; 4]> {
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(Error::Config(format!(
                "width_multiplier must be positive, got {}",
                self.width_multiplier
            )));
        }
        let base = if self.stage_channels.is_empty() {
            match self.variant {
                BackboneVariant::ErfModified => ERF_CHANNELS,
                BackboneVariant::ResnetBasic => RESNET_CHANNELS,
            }
        } else {
            <[usize; 4]>::try_from(self.stage_channels.as_slice()).map_err(|_| {
                Error::Config(format!("stage_channels needs 4 entries, got {}", self.stage_channels.len()))
            })?
        };
        if base.contains(&0) {
            return Err(Error::Config("stage channels must be positive".into()));
        }
        Ok(base.map(|c| scale_channels(c, self.width_multiplier)))
    }

    pub fn blocks(&self) -> Result<[usize; 4]> {
        if self.stage_blocks.is_empty() {
            return Ok(RESNET34_BLOCKS);
        }
        let b = <[usize; 4]>::try_from(self.stage_blocks.as_slice())
            .map_err(|_| Error::Config(format!("stage_blocks needs 4 entries, got {}", self.stage_blocks.len())))?;
        if b.contains(&0) {
            return Err(Error::Config("every ResNet stage needs at least one block".into()));
        }
        Ok(b)
    }
}

/// `max(1, round(c * w))`.
pub fn scale_channels(c: usize, w: f64) -> usize {
    ((c as f64 * w).round() as usize).max(1)
}

/// A built backbone: the layer graph plus the channel count at each pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub graph: ModelGraph,
    /// Channels at strides 4, 8 and 16.
    pub pyramid_channels: [usize; 3],
}

/// Features at strides 4, 8 and 16.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<F> {
    pub s4: F,
    pub s8: F,
    pub s16: F,
}

pub fn build_backbone(config: &BackboneConfig) -> Result<Backbone> {
    let ch = config.channels()?;
    if !(0.0..1.0).contains(&config.dropout) {
        return Err(Error::Config(format!("dropout {} outside [0, 1)", config.dropout)));
    }
    let (h, w) = config.input_geometry;
    if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Config(format!("input geometry {h}x{w} must be positive multiples of 16")));
    }
    let graph = match config.variant {
        BackboneVariant::ErfModified => erf_graph(config, ch)?,
        BackboneVariant::ResnetBasic => resnet_graph(config, ch)?,
    };
    let pyramid_channels = trace_tap_channels(&graph)?;
    Ok(Backbone {
        config: config.clone(),
        graph,
        pyramid_channels,
    })
}

fn erf_graph(config: &BackboneConfig, ch: [usize; 4]) -> Result<ModelGraph> {
    if config.extra_down_up != (1, 1) {
        return Err(Error::Config(format!(
            "extra_down_up must be (1, 1) so the stride-16 level exists, got {:?}",
            config.extra_down_up
        )));
    }
    if config.num_classes == 0 {
        return Err(Error::Config("num_classes must be positive".into()));
    }
    let [c1, c2, c3, c4] = ch;
    let p = config.dropout;
    let mut layers = Vec::new();
    let mut push = |name: String, spec: LayerSpec, origin: Origin| layers.push(LayerNode::new(name, spec, origin));
    let nbt = |c: usize, d: usize, drop: f64| NonBt1DSpec::new(c, d, drop).map(LayerSpec::NonBt1D);

    push("enc.down1".into(), LayerSpec::Downsampler(DownsamplerSpec::new(3, c1)?), Origin::Base);
    push("enc.down2".into(), LayerSpec::Downsampler(DownsamplerSpec::new(c1, c2)?), Origin::Base);
    for i in 0..5 {
        push(format!("enc.stage2.{i}"), nbt(c2, 1, p * 0.3)?, Origin::Base);
    }
    push("enc.down3".into(), LayerSpec::Downsampler(DownsamplerSpec::new(c2, c3)?), Origin::Base);
    for i in 0..8 {
        push(format!("enc.stage3.{i}"), nbt(c3, ERF_DILATIONS[i % 4], p)?, Origin::Base);
    }
    push("added.down".into(), LayerSpec::Downsampler(DownsamplerSpec::new(c3, c4)?), Origin::Added);
    for i in 0..config.extra_blocks {
        push(format!("added.stage4.{i}"), nbt(c4, 1 << (i % 4), p)?, Origin::Added);
    }
    push("tap16".into(), LayerSpec::Tap { stride: 16 }, Origin::Added);
    push(
        "added.up".into(),
        LayerSpec::Upsampler {
            in_channels: c4,
            out_channels: c3,
        },
        Origin::Added,
    );
    push("tap8".into(), LayerSpec::Tap { stride: 8 }, Origin::Added);
    push(
        "dec.up1".into(),
        LayerSpec::Upsampler {
            in_channels: c3,
            out_channels: c2,
        },
        Origin::Base,
    );
    for i in 0..2 {
        push(format!("dec.stage1.{i}"), nbt(c2, 1, 0.0)?, Origin::Base);
    }
    push("tap4".into(), LayerSpec::Tap { stride: 4 }, Origin::Base);
    push(
        "dec.up2".into(),
        LayerSpec::Upsampler {
            in_channels: c2,
            out_channels: c1,
        },
        Origin::Base,
    );
    for i in 0..2 {
        push(format!("dec.stage2.{i}"), nbt(c1, 1, 0.0)?, Origin::Base);
    }
    push(
        "dec.output".into(),
        LayerSpec::Deconv {
            in_channels: c1,
            out_channels: config.num_classes,
            kernel: 2,
            geometry: DeconvGeometry::new(2, 0, 0),
        },
        Origin::Base,
    );
    for i in 0..config.extra_deconvs {
        push(
            format!("added.deconv{i}"),
            LayerSpec::Deconv {
                in_channels: config.num_classes,
                out_channels: config.num_classes,
                kernel: 3,
                geometry: DeconvGeometry::new(1, 1, 0),
            },
            Origin::Added,
        );
    }
    Ok(ModelGraph::new(layers))
}

fn resnet_graph(config: &BackboneConfig, ch: [usize; 4]) -> Result<ModelGraph> {
    let blocks = config.blocks()?;
    let mut layers = vec![
        LayerNode::new(
            "stem",
            LayerSpec::Conv {
                in_channels: 3,
                out_channels: ch[0],
                kernel: 7,
                stride: 2,
                bias: false,
                norm: true,
                relu: true,
            },
            Origin::Base,
        ),
        LayerNode::new("stem.pool", LayerSpec::MaxPool2, Origin::Base),
    ];
    let mut cin = ch[0];
    // layer4 keeps stride 1 so the deepest level stays at stride 16.
    let strides = [1, 2, 2, 1];
    for (stage, (&cout, &n)) in ch.iter().zip(&blocks).enumerate() {
        for b in 0..n {
            let stride = if b == 0 { strides[stage] } else { 1 };
            layers.push(LayerNode::new(
                format!("layer{}.{b}", stage + 1),
                LayerSpec::ResidualBasic(ResidualSpec::new(cin, cout, stride)?),
                Origin::Base,
            ));
            cin = cout;
        }
        let tap = match stage {
            0 => Some(4),
            1 => Some(8),
            3 => Some(16),
            _ => None,
        };
        if let Some(stride) = tap {
            layers.push(LayerNode::new(format!("tap{stride}"), LayerSpec::Tap { stride }, Origin::Base));
        }
    }
    Ok(ModelGraph::new(layers))
}

/// Walks the graph checking channel continuity; returns channels at each tap.
fn trace_tap_channels(graph: &ModelGraph) -> Result<[usize; 3]> {
    let mut c = 3;
    let (mut num, mut den) = (1usize, 1usize);
    let mut taps = BTreeMap::new();
    for layer in &graph.layers {
        if let Some(cin) = layer.spec.in_channels() {
            if cin != c {
                return Err(Error::Config(format!(
                    "layer {} expects {cin} channels but receives {c}",
                    layer.name
                )));
            }
        }
        c = layer.spec.out_channels(c);
        let (n, d) = layer.spec.scale();
        num *= n;
        den *= d;
        if let LayerSpec::Tap { stride } = layer.spec {
            if den != stride * num {
                return Err(Error::Config(format!(
                    "tap {} sits at stride {den}/{num}, declared {stride}",
                    layer.name
                )));
            }
            taps.insert(stride, c);
        }
    }
    match (taps.get(&4), taps.get(&8), taps.get(&16)) {
        (Some(&a), Some(&b), Some(&d)) => Ok([a, b, d]),
        _ => Err(Error::Config("backbone must expose taps at strides 4, 8 and 16".into())),
    }
}

impl Backbone {
    pub fn param_decls(&self) -> Vec<ParamDecl> {
        self.graph.param_decls()
    }

    /// Runs up to the last tap and returns the pyramid.
    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, input: Var) -> Result<FeaturePyramid<Var>> {
        let [_, c, h, w] = ctx.tape.value(input).dims4()?;
        if c != 3 {
            return Err(Error::shape("backbone", &[3], &[c]));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Geometry(format!("input {h}x{w} is not divisible by 16")));
        }
        let out = self.graph.forward(ctx, input, true)?;
        let find = |s: usize| {
            out.taps
                .iter()
                .rev()
                .find(|(stride, _)| *stride == s)
                .map(|&(_, v)| v)
                .ok_or_else(|| Error::Config(format!("no tap at stride {s}")))
        };
        Ok(FeaturePyramid {
            s4: find(4)?,
            s8: find(8)?,
            s16: find(16)?,
        })
    }
}

/// Inference-mode pyramid for a batch of images `[N, 3, H, W]`.
pub fn forward_backbone(
    backbone: &Backbone,
    params: &ParamStore,
    buffers: &BufferStore,
    image: &Tensor,
) -> Result<FeaturePyramid<Tensor>> {
    let mut tape = Tape::new();
    let bindings = crate::graph::Bindings::bind(&mut tape, params, false);
    let mut buffers = buffers.clone();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let input = tape.constant(image.clone());
    let mut ctx = Ctx {
        tape: &mut tape,
        params: &bindings,
        buffers: &mut buffers,
        rng: &mut rng,
        training: false,
        norm: Default::default(),
    };
    let p = backbone.forward(&mut ctx, input)?;
    Ok(FeaturePyramid {
        s4: tape.value(p.s4).clone(),
        s8: tape.value(p.s8).clone(),
        s16: tape.value(p.s16).clone(),
    })
}

/// Conv-type layer census.
///
/// Reference layers count once each (the reference network's own layer
/// table), added layers count every convolution they contain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerCensus {
    pub base_layers: usize,
    pub added_convs: usize,
    pub added_non_bt_1d: usize,
    pub added_deconvs: usize,
    pub added_downsamplers: usize,
    pub added_upsamplers: usize,
}

impl LayerCensus {
    pub fn total(&self) -> usize {
        self.base_layers + self.added_convs
    }
}

pub fn layer_census(graph: &ModelGraph) -> LayerCensus {
    let mut c = LayerCensus {
        base_layers: 0,
        added_convs: 0,
        added_non_bt_1d: 0,
        added_deconvs: 0,
        added_downsamplers: 0,
        added_upsamplers: 0,
    };
    for layer in &graph.layers {
        if layer.spec.conv_ops() == 0 {
            continue;
        }
        match layer.origin {
            Origin::Base => c.base_layers += 1,
            Origin::Added => {
                c.added_convs += layer.spec.conv_ops();
                match layer.spec {
                    LayerSpec::NonBt1D(_) => c.added_non_bt_1d += 1,
                    LayerSpec::Deconv { .. } => c.added_deconvs += 1,
                    LayerSpec::Downsampler(_) => c.added_downsamplers += 1,
                    LayerSpec::Upsampler { .. } => c.added_upsamplers += 1,
                    _ => {}
                }
            }
            Origin::Head => {}
        }
    }
    c
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamRow {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

/// Per-tensor parameter counts and the exact size of a parameters-only checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamReport {
    pub rows: Vec<ParamRow>,
    pub total_params: usize,
    /// Checkpoint bytes other than the f32 payload.
    pub header_bytes: usize,
    pub serialized_bytes: usize,
}

impl ParamReport {
    pub fn from_decls(decls: &[ParamDecl]) -> Self {
        let rows: Vec<ParamRow> = decls
            .iter()
            .map(|d| ParamRow {
                name: d.name.clone(),
                shape: d.shape.clone(),
                count: d.numel(),
            })
            .collect();
        let total_params = rows.iter().map(|r| r.count).sum();
        let header_bytes = crate::train::checkpoint_header_bytes(rows.iter().map(|r| (r.name.as_str(), r.shape.len())));
        Self {
            rows,
            total_params,
            header_bytes,
            serialized_bytes: header_bytes + 4 * total_params,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,shape,count\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.name, shape_str(&r.shape), r.count);
        }
        let _ = writeln!(s, "total,,{}", self.total_params);
        let _ = writeln!(s, "serialized_bytes,,{}", self.serialized_bytes);
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Name | Shape | Count |\n|---|---|---:|\n");
        for r in &self.rows {
            let _ = writeln!(s, "| {} | {} | {} |", r.name, shape_str(&r.shape), r.count);
        }
        let _ = writeln!(s, "| **total** | | {} |", self.total_params);
        let _ = writeln!(s, "| **serialized bytes** | | {} |", self.serialized_bytes);
        s
    }
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

pub fn audit_parameters(graph: &ModelGraph) -> ParamReport {
    ParamReport::from_decls(&graph.param_decls())
}

/// Side-by-side parameter totals of two models, grouped by layer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub label_a: String,
    pub label_b: String,
    pub total_a: usize,
    pub total_b: usize,
    pub bytes_a: usize,
    pub bytes_b: usize,
    /// `(layer, count in a, count in b)`; absent layers count 0.
    pub layers: Vec<(String, usize, usize)>,
}

impl ComparisonReport {
    pub fn from_decls(label_a: &str, a: &[ParamDecl], label_b: &str, b: &[ParamDecl]) -> Self {
        let ra = ParamReport::from_decls(a);
        let rb = ParamReport::from_decls(b);
        let mut layers: Vec<(String, usize, usize)> = Vec::new();
        let mut index = std::collections::HashMap::new();
        for (side, decls) in [(0, a), (1, b)] {
            for d in decls {
                let layer = layer_of(&d.name);
                let i = *index.entry(layer.clone()).or_insert_with(|| {
                    layers.push((layer, 0, 0));
                    layers.len() - 1
                });
                if side == 0 {
                    layers[i].1 += d.numel();
                } else {
                    layers[i].2 += d.numel();
                }
            }
        }
        Self {
            label_a: label_a.into(),
            label_b: label_b.into(),
            total_a: ra.total_params,
            total_b: rb.total_params,
            bytes_a: ra.serialized_bytes,
            bytes_b: rb.serialized_bytes,
            layers,
        }
    }

    pub fn param_ratio(&self) -> f64 {
        self.total_a as f64 / self.total_b as f64
    }

    pub fn byte_ratio(&self) -> f64 {
        self.bytes_a as f64 / self.bytes_b as f64
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("| Layer | {} | {} |\n|---|---:|---:|\n", self.label_a, self.label_b);
        for (name, a, b) in &self.layers {
            let _ = writeln!(s, "| {name} | {a} | {b} |");
        }
        let _ = writeln!(s, "| **total** | {} | {} |", self.total_a, self.total_b);
        let _ = writeln!(s, "| **bytes** | {} | {} |", self.bytes_a, self.bytes_b);
        let _ = writeln!(s, "\nparameter ratio {:.4}, byte ratio {:.4}", self.param_ratio(), self.byte_ratio());
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("layer,{},{}\n", self.label_a, self.label_b);
        for (name, a, b) in &self.layers {
            let _ = writeln!(s, "{name},{a},{b}");
        }
        let _ = writeln!(s, "total,{},{}", self.total_a, self.total_b);
        let _ = writeln!(s, "bytes,{},{}", self.bytes_a, self.bytes_b);
        s
    }
}

/// Layer name of a parameter: the dotted path up to the first sub-module segment.
fn layer_of(param: &str) -> String {
    const SUBMODULES: [&str; 8] = ["conv", "bn", "deconv", "proj", "weight", "bias", "hidden", "logits"];
    let parts: Vec<&str> = param.split('.').collect();
    let cut = parts
        .iter()
        .enumerate()
        .skip(1)
        .find(|(_, p)| SUBMODULES.iter().any(|s| p.starts_with(s)))
        .map_or(parts.len(), |(i, _)| i);
    parts[..cut].join(".")
}

pub fn compare_backbones(a: &BackboneConfig, b: &BackboneConfig) -> Result<ComparisonReport> {
    let ga = build_backbone(a)?;
    let gb = build_backbone(b)?;
    Ok(ComparisonReport::from_decls(
        &variant_label(a),
        &ga.param_decls(),
        &variant_label(b),
        &gb.param_decls(),
    ))
}

pub(crate) fn variant_label(c: &BackboneConfig) -> String {
    match c.variant {
        BackboneVariant::ErfModified => "erf_modified".into(),
        BackboneVariant::ResnetBasic => "resnet_basic".into(),
    }
}
