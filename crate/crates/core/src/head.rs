//! Conditional lane head: proposal heatmap, per-instance dynamic kernels,
//! conditional 1x1 convolution over a shared feature and row-wise decoding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_backbone, Backbone, BackboneConfig};
use crate::data::CoordTransform;
use crate::error::{Error, Result};
use crate::graph::{conv_decls, Bindings, BufferDecl, BufferStore, Ctx, Init, NormConfig, ParamDecl, ParamStore};
use crate::tensor::{sigmoid, softmax, ConvGeometry, Element, Tape, Tensor, Var};

/// Stride of the shared feature used for row-wise shape prediction.
pub const SHAPE_STRIDE: usize = 4;
/// Stride of the proposal heatmap and kernel map.
pub const PROPOSAL_STRIDE: usize = 16;

fn default_hidden() -> usize {
    64
}
fn default_shape() -> usize {
    64
}
fn default_basis() -> usize {
    8
}
fn default_proposal_threshold() -> f64 {
    0.4
}
fn default_nms() -> usize {
    3
}
fn default_range_threshold() -> f64 {
    0.5
}
fn default_prior() -> f64 {
    -2.19
}
fn default_max_lanes() -> usize {
    8
}
fn default_sigma() -> f64 {
    crate::data::HEATMAP_SIGMA
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    /// Width of the hidden layer in the proposal and kernel branches.
    #[serde(default = "default_hidden")]
    pub hidden_channels: usize,
    /// Learned channels of the shared shape feature.
    #[serde(default = "default_shape")]
    pub shape_channels: usize,
    /// Bumps per family in the fixed positional basis appended to the shared
    /// feature; 0 keeps only the two coordinate channels.
    #[serde(default = "default_basis")]
    pub positional_bumps: usize,
    #[serde(default = "default_proposal_threshold")]
    pub proposal_threshold: f64,
    #[serde(default = "default_nms")]
    pub nms_kernel: usize,
    #[serde(default = "default_range_threshold")]
    pub range_threshold: f64,
    /// Initial bias of the heatmap logit.
    #[serde(default = "default_prior")]
    pub heatmap_prior_bias: f64,
    #[serde(default = "default_max_lanes")]
    pub max_lanes: usize,
    /// Spread of the training heatmap bumps, in proposal cells.
    #[serde(default = "default_sigma")]
    pub heatmap_sigma: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden_channels: default_hidden(),
            shape_channels: default_shape(),
            positional_bumps: default_basis(),
            proposal_threshold: default_proposal_threshold(),
            nms_kernel: default_nms(),
            range_threshold: default_range_threshold(),
            heatmap_prior_bias: default_prior(),
            max_lanes: default_max_lanes(),
            heatmap_sigma: default_sigma(),
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_channels == 0 || self.shape_channels == 0 {
            return Err(Error::Config("head channel counts must be positive".into()));
        }
        if !(self.proposal_threshold > 0.0 && self.proposal_threshold < 1.0) {
            return Err(Error::Config(format!(
                "proposal_threshold {} outside (0, 1)",
                self.proposal_threshold
            )));
        }
        if !(self.range_threshold > 0.0 && self.range_threshold < 1.0) {
            return Err(Error::Config(format!("range_threshold {} outside (0, 1)", self.range_threshold)));
        }
        if self.nms_kernel == 0 || self.nms_kernel % 2 == 0 {
            return Err(Error::Config(format!("nms_kernel must be odd, got {}", self.nms_kernel)));
        }
        if !(self.heatmap_sigma > 0.0 && self.heatmap_sigma.is_finite()) {
            return Err(Error::Config(format!("heatmap_sigma must be positive, got {}", self.heatmap_sigma)));
        }
        if self.max_lanes == 0 {
            return Err(Error::Config("max_lanes must be positive".into()));
        }
        Ok(())
    }

    pub fn basis_channels(&self) -> usize {
        2 * self.positional_bumps + 2
    }
}

/// Backbone plus head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub norm: NormConfig,
}

/// Architecture of a lane detector (no weights).
#[derive(Clone, Debug, PartialEq)]
pub struct LaneNet {
    pub config: ModelConfig,
    pub backbone: Backbone,
}

/// Head outputs for a batch, as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    /// `[N, 1, H/16, W/16]` heatmap logits.
    pub heatmap: Var,
    /// `[N, C + 1, H/16, W/16]` dynamic kernel for every cell.
    pub kernels: Var,
    /// `[N, C, H/4, W/4]` shared feature.
    pub shared: Var,
    pub range_weight: Var,
    pub range_bias: Var,
}

impl LaneNet {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.head.validate()?;
        Ok(Self {
            config: config.clone(),
            backbone: build_backbone(&config.backbone)?,
        })
    }

    /// Channels of the shared feature, `C`.
    pub fn shared_channels(&self) -> usize {
        self.config.head.shape_channels + self.config.head.basis_channels()
    }

    pub fn input_geometry(&self) -> (usize, usize) {
        self.config.backbone.input_geometry
    }

    pub fn head_param_decls(&self) -> Vec<ParamDecl> {
        let h = &self.config.head;
        let [c4, _, c16] = self.backbone.pyramid_channels;
        let c = self.shared_channels();
        let mut v = conv_decls("head.proposal.hidden", c16, h.hidden_channels, 3, 3, true);
        v.push(ParamDecl::new(
            "head.proposal.logits.weight",
            &[1, h.hidden_channels, 1, 1],
            Init::KaimingFanIn(h.hidden_channels),
        ));
        v.push(ParamDecl::new(
            "head.proposal.logits.bias",
            &[1],
            Init::Constant(h.heatmap_prior_bias as f32),
        ));
        v.extend(conv_decls("head.kernel.hidden", c16 + 2, h.hidden_channels, 3, 3, true));
        v.extend(conv_decls("head.kernel.logits", h.hidden_channels, c + 1, 1, 1, true));
        v.extend(conv_decls("head.shape.conv1", c4 + 2, h.shape_channels, 3, 3, true));
        v.extend(conv_decls("head.shape.conv2", h.shape_channels, h.shape_channels, 3, 3, true));
        v.push(ParamDecl::new("head.range.weight", &[c], Init::KaimingFanIn(c)));
        v.push(ParamDecl::new("head.range.bias", &[1], Init::Zeros));
        v
    }

    pub fn param_decls(&self) -> Vec<ParamDecl> {
        let mut v = self.backbone.param_decls();
        v.extend(self.head_param_decls());
        v
    }

    pub fn buffer_decls(&self) -> Vec<BufferDecl> {
        self.backbone.graph.buffer_decls()
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, input: Var) -> Result<HeadOutputs> {
        let [n, _, h, w] = ctx.tape.value(input).dims4()?;
        if (h, w) != self.input_geometry() {
            return Err(Error::Geometry(format!(
                "input {h}x{w} does not match model geometry {:?}",
                self.input_geometry()
            )));
        }
        let pyr = self.backbone.forward(ctx, input)?;
        let same = ConvGeometry::new(1, 1, 1);
        let point = ConvGeometry::new(1, 0, 1);

        let p = ctx.conv(pyr.s16, "head.proposal.hidden", same)?;
        let p = ctx.tape.relu(p);
        let heatmap = ctx.conv(p, "head.proposal.logits", point)?;

        let (h16, w16) = (h / PROPOSAL_STRIDE, w / PROPOSAL_STRIDE);
        let coords16 = ctx.tape.constant(coord_channels(n, h16, w16));
        let k = ctx.tape.concat_channels(&[pyr.s16, coords16])?;
        let k = ctx.conv(k, "head.kernel.hidden", same)?;
        let k = ctx.tape.relu(k);
        let kernels = ctx.conv(k, "head.kernel.logits", point)?;

        let (h4, w4) = (h / SHAPE_STRIDE, w / SHAPE_STRIDE);
        let coords4 = ctx.tape.constant(coord_channels(n, h4, w4));
        let s = ctx.tape.concat_channels(&[pyr.s4, coords4])?;
        let s = ctx.conv(s, "head.shape.conv1", same)?;
        let s = ctx.tape.relu(s);
        let s = ctx.conv(s, "head.shape.conv2", same)?;
        let s = ctx.tape.relu(s);
        let basis = ctx
            .tape
            .constant(positional_basis(n, h4, w4, self.config.head.positional_bumps));
        let shared = ctx.tape.concat_channels(&[s, basis])?;

        Ok(HeadOutputs {
            heatmap,
            kernels,
            shared,
            range_weight: ctx.params.get("head.range.weight")?,
            range_bias: ctx.params.get("head.range.bias")?,
        })
    }
}

/// Normalized x and y coordinate planes in `[-1, 1]`, `[N, 2, H, W]`.
pub fn coord_channels<T: Element>(n: usize, h: usize, w: usize) -> Tensor<T> {
    let norm = |i: usize, len: usize| {
        if len <= 1 {
            0.0
        } else {
            2.0 * i as f64 / (len - 1) as f64 - 1.0
        }
    };
    let mut data = Vec::with_capacity(n * 2 * h * w);
    for _ in 0..n {
        for _ in 0..h {
            data.extend((0..w).map(|c| T::lit(norm(c, w))));
        }
        for r in 0..h {
            data.extend(std::iter::repeat_n(T::lit(norm(r, h)), w));
        }
    }
    Tensor::new(&[n, 2, h, w], data).expect("coordinate planes have consistent size")
}

/// Fixed positional channels: `bumps` vertical Gaussian stripes, `bumps`
/// stripes converging towards the top centre, then x and y coordinates.
pub fn positional_basis<T: Element>(n: usize, h: usize, w: usize, bumps: usize) -> Tensor<T> {
    let sigma = (w as f64 / bumps.max(1) as f64).max(1.0);
    let center = (w as f64 - 1.0) / 2.0;
    let mut plane = Vec::with_capacity((2 * bumps + 2) * h * w);
    let bump = |c: f64, mu: f64| (-0.5 * ((c - mu) / sigma).powi(2)).exp();
    for k in 0..bumps {
        let mu = (k as f64 + 0.5) * w as f64 / bumps as f64 - 0.5;
        for _ in 0..h {
            plane.extend((0..w).map(|c| T::lit(bump(c as f64, mu))));
        }
    }
    for k in 0..bumps {
        let base = (k as f64 + 0.5) * w as f64 / bumps as f64 - 0.5;
        for r in 0..h {
            let mu = center + (base - center) * (r as f64 + 0.5) / h as f64;
            plane.extend((0..w).map(|c| T::lit(bump(c as f64, mu))));
        }
    }
    let coords = coord_channels::<T>(1, h, w);
    plane.extend_from_slice(coords.data());
    let mut data = Vec::with_capacity(n * plane.len());
    for _ in 0..n {
        data.extend_from_slice(&plane);
    }
    Tensor::new(&[n, 2 * bumps + 2, h, w], data).expect("basis planes have consistent size")
}

/// A detected lane instance on the proposal grid.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceDetection {
    pub row: usize,
    pub col: usize,
    pub score: f32,
    /// `C` weights followed by one bias.
    pub kernel: Vec<f32>,
}

/// Per-instance row-wise maps on the shape grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RowWiseMaps {
    /// `[H_f, W_f]`.
    pub location_logits: Tensor,
    /// Length `H_f`.
    pub range_logits: Vec<f32>,
}

/// Decoded lane in original-image pixels: one point per row, rows increasing.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LanePrediction {
    /// `(x, y)` with integral `y`.
    pub points: Vec<(f64, f64)>,
    pub score: f64,
}

/// Local maxima of a `[H, W]` probability map under `k x k` suppression,
/// sorted by score (ties by raster order).
///
/// On plateaus the first cell in raster order wins: a cell must strictly beat
/// earlier neighbours and at least match later ones.
pub fn generate_proposals(heatmap: &Tensor, threshold: f64, nms_kernel: usize) -> Result<Vec<(usize, usize, f32)>> {
    let (h, w) = match heatmap.shape() {
        &[h, w] => (h, w),
        &[1, h, w] => (h, w),
        &[1, 1, h, w] => (h, w),
        s => return Err(Error::invalid("generate_proposals", format!("expected [H, W], got {s:?}"))),
    };
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("proposal threshold {threshold} outside (0, 1)")));
    }
    let r = (nms_kernel / 2) as isize;
    let d = heatmap.data();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = d[y * w + x];
            if (v as f64) < threshold {
                continue;
            }
            let mut keep = true;
            'win: for dy in -r..=r {
                for dx in -r..=r {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if (dy, dx) == (0, 0) || ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let u = d[ny as usize * w + nx as usize];
                    let earlier = (dy, dx) < (0, 0);
                    if u > v || (earlier && u == v) {
                        keep = false;
                        break 'win;
                    }
                }
            }
            if keep {
                out.push((y, x, v));
            }
        }
    }
    out.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    Ok(out)
}

/// Reads the kernel vector at a proposal cell from a `[C + 1, H, W]` kernel map.
pub fn regress_dynamic_kernels(kernel_map: &Tensor, row: usize, col: usize) -> Result<Vec<f32>> {
    let (c, h, w) = match kernel_map.shape() {
        &[c, h, w] | &[1, c, h, w] => (c, h, w),
        s => return Err(Error::invalid("regress_dynamic_kernels", format!("expected [C+1, H, W], got {s:?}"))),
    };
    if row >= h || col >= w {
        return Err(Error::invalid(
            "regress_dynamic_kernels",
            format!("proposal ({row}, {col}) outside {h}x{w}"),
        ));
    }
    Ok((0..c).map(|ch| kernel_map.data()[(ch * h + row) * w + col]).collect())
}

/// Conditional 1x1 convolution of the shared feature `[C, H, W]` with one
/// instance's kernel, plus the row-pooled range readout.
pub fn conditional_shape_forward(
    shared: &Tensor,
    kernel: &[f32],
    range_weight: &Tensor,
    range_bias: &Tensor,
) -> Result<RowWiseMaps> {
    let [c, h, w] = match shared.shape() {
        &[c, h, w] | &[1, c, h, w] => [c, h, w],
        s => return Err(Error::invalid("conditional_shape_forward", format!("expected [C, H, W], got {s:?}"))),
    };
    if kernel.len() != c + 1 {
        return Err(Error::shape("conditional_shape_forward", &[c + 1], &[kernel.len()]));
    }
    let mut tape = Tape::<f32>::new();
    let f = tape.constant(shared.clone().reshape(&[1, c, h, w])?);
    let k = tape.constant(Tensor::new(&[c + 1], kernel.to_vec())?);
    let rw = tape.constant(range_weight.clone());
    let rb = tape.constant(range_bias.clone());
    let loc = tape.dynamic_conv1x1(f, 0, k)?;
    let range = tape.row_pool_linear(f, 0, loc, rw, rb)?;
    Ok(RowWiseMaps {
        location_logits: tape.value(loc).clone(),
        range_logits: tape.value(range).data().to_vec(),
    })
}

/// Expected column of each row under `softmax(location_logits[r])`.
pub fn row_expectations(location_logits: &Tensor) -> Result<Vec<f64>> {
    let (h, w) = match location_logits.shape() {
        &[h, w] => (h, w),
        s => return Err(Error::invalid("row_expectations", format!("expected [H, W], got {s:?}"))),
    };
    let mut out = Vec::with_capacity(h);
    let mut row = vec![0f32; w];
    for r in 0..h {
        row.copy_from_slice(&location_logits.data()[r * w..(r + 1) * w]);
        softmax(&mut row);
        let x: f64 = row.iter().enumerate().map(|(j, &p)| j as f64 * p as f64).sum();
        out.push(x.clamp(0.0, (w - 1) as f64));
    }
    Ok(out)
}

/// Model-input coordinate of the centre of shape-grid cell `i`.
pub fn shape_cell_center(i: f64) -> f64 {
    i * SHAPE_STRIDE as f64 + (SHAPE_STRIDE as f64 - 1.0) / 2.0
}

/// Decodes maps into a lane in original-image pixels. Returns `None` when
/// fewer than two rows are inside the predicted range.
pub fn rowwise_decode(
    maps: &RowWiseMaps,
    score: f64,
    transform: &CoordTransform,
    range_threshold: f64,
) -> Result<Option<LanePrediction>> {
    let xs = row_expectations(&maps.location_logits)?;
    if xs.len() != maps.range_logits.len() {
        return Err(Error::shape("rowwise_decode", &[xs.len()], &[maps.range_logits.len()]));
    }
    let max_x = transform.original_width.saturating_sub(1) as f64;
    let max_y = transform.original_height.saturating_sub(1) as f64;
    let mut points: Vec<(f64, f64)> = Vec::new();
    for (r, (&xf, &z)) in xs.iter().zip(&maps.range_logits).enumerate() {
        if (sigmoid(z) as f64) <= range_threshold {
            continue;
        }
        let (x, y) = transform.invert(shape_cell_center(xf), shape_cell_center(r as f64));
        let y = y.round().clamp(0.0, max_y);
        if points.last().is_some_and(|&(_, py)| py >= y) {
            continue;
        }
        points.push((x.clamp(0.0, max_x), y));
    }
    Ok((points.len() >= 2).then_some(LanePrediction { points, score }))
}

/// Trained weights together with the architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct LaneModel {
    pub net: LaneNet,
    pub params: ParamStore,
    pub buffers: BufferStore,
}

impl LaneModel {
    /// Fresh model with weights drawn from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let net = LaneNet::build(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ParamStore::initialize(&net.param_decls(), &mut rng)?;
        let buffers = BufferStore::initialize(&net.buffer_decls());
        Ok(Self { net, params, buffers })
    }

    /// Detections for a batch `[N, 3, H, W]`, each with its row-wise maps.
    pub fn infer(&self, images: &Tensor) -> Result<Vec<Vec<(InstanceDetection, RowWiseMaps)>>> {
        let mut tape = Tape::new();
        let bindings = Bindings::bind(&mut tape, &self.params, false);
        let mut buffers = self.buffers.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let input = tape.constant(images.clone());
        let mut ctx = Ctx {
            tape: &mut tape,
            params: &bindings,
            buffers: &mut buffers,
            rng: &mut rng,
            training: false,
            norm: self.net.config.norm,
        };
        let out = self.net.forward(&mut ctx, input)?;
        let head = &self.net.config.head;
        let n = images.dims4()?[0];
        let mut all = Vec::with_capacity(n);
        for s in 0..n {
            let heat = tape.value(out.heatmap).sample(s)?.map(sigmoid);
            let [_, _, h16, w16] = heat.dims4()?;
            let heat = heat.reshape(&[h16, w16])?;
            let kernel_map = tape.value(out.kernels).sample(s)?;
            let shared = tape.value(out.shared).sample(s)?;
            let mut found = Vec::new();
            for (row, col, score) in generate_proposals(&heat, head.proposal_threshold, head.nms_kernel)?
                .into_iter()
                .take(head.max_lanes)
            {
                let kernel = regress_dynamic_kernels(&kernel_map, row, col)?;
                let maps = conditional_shape_forward(
                    &shared,
                    &kernel,
                    tape.value(out.range_weight),
                    tape.value(out.range_bias),
                )?;
                found.push((InstanceDetection { row, col, score, kernel }, maps));
            }
            all.push(found);
        }
        Ok(all)
    }

    /// Lanes for a batch of preprocessed images, mapped back through each transform.
    pub fn predict_batch(&self, images: &Tensor, transforms: &[CoordTransform]) -> Result<Vec<Vec<LanePrediction>>> {
        let n = images.dims4()?[0];
        if transforms.len() != n {
            return Err(Error::shape("predict_batch", &[n], &[transforms.len()]));
        }
        let threshold = self.net.config.head.range_threshold;
        self.infer(images)?
            .into_iter()
            .zip(transforms)
            .map(|(dets, t)| {
                let mut lanes = Vec::new();
                for (det, maps) in dets {
                    if let Some(l) = rowwise_decode(&maps, det.score as f64, t, threshold)? {
                        lanes.push(l);
                    }
                }
                Ok(lanes)
            })
            .collect()
    }

    pub fn predict_lanes(&self, image: &Tensor, transform: &CoordTransform) -> Result<Vec<LanePrediction>> {
        let mut v = self.predict_batch(image, std::slice::from_ref(transform))?;
        Ok(v.pop().unwrap_or_default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity() -> CoordTransform {
        CoordTransform::identity(128, 256)
    }

    #[test]
    fn one_hot_and_uniform_expectations() {
        let mut l = Tensor::<f32>::full(&[2, 8], -1e4);
        l.data_mut()[5] = 0.0;
        for v in &mut l.data_mut()[8..12] {
            *v = 0.0;
        }
        let e = row_expectations(&l).unwrap();
        assert!((e[0] - 5.0).abs() < 1e-9);
        assert!((e[1] - 1.5).abs() < 1e-6);
    }

    #[test]
    fn negative_range_drops_lane() {
        let maps = RowWiseMaps {
            location_logits: Tensor::zeros(&[4, 4]),
            range_logits: vec![-1.0; 4],
        };
        assert!(rowwise_decode(&maps, 1.0, &identity(), 0.5).unwrap().is_none());
    }

    #[test]
    fn decoded_rows_increase() {
        let maps = RowWiseMaps {
            location_logits: Tensor::zeros(&[6, 4]),
            range_logits: vec![1.0; 6],
        };
        let lane = rowwise_decode(&maps, 1.0, &identity(), 0.5).unwrap().unwrap();
        assert_eq!(lane.points.len(), 6);
        assert!(lane.points.windows(2).all(|p| p[0].1 < p[1].1));
        assert!(lane.points.iter().all(|&(x, _)| (x - shape_cell_center(1.5)).abs() < 1e-5));
    }

    #[test]
    fn zero_kernel_gives_centred_expectation() {
        let shared = Tensor::from_fn(&[3, 5, 7], |i| (i as f32 * 0.37).sin());
        let maps = conditional_shape_forward(&shared, &[0.0; 4], &Tensor::zeros(&[3]), &Tensor::zeros(&[1])).unwrap();
        assert_eq!(maps.location_logits.shape(), &[5, 7]);
        assert_eq!(maps.range_logits.len(), 5);
        for e in row_expectations(&maps.location_logits).unwrap() {
            assert!((e - 3.0).abs() < 1e-5);
        }
        assert!(conditional_shape_forward(&shared, &[0.0; 3], &Tensor::zeros(&[3]), &Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn proposals_single_bump_and_threshold() {
        let heat = Tensor::from_fn(&[8, 6], |i| {
            let (r, c) = ((i / 6) as f32, (i % 6) as f32);
            0.9 * (-((r - 5.0).powi(2) + (c - 2.0).powi(2)) / 8.0).exp()
        });
        let p = generate_proposals(&heat, 0.4, 3).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].0, p[0].1), (5, 2));
        assert!(generate_proposals(&heat, 0.95, 3).unwrap().is_empty());
    }

    #[test]
    fn plateau_yields_one_proposal() {
        let heat = Tensor::<f32>::full(&[3, 3], 0.8);
        assert_eq!(generate_proposals(&heat, 0.5, 3).unwrap(), vec![(0, 0, 0.8)]);
    }

    #[test]
    fn kernel_lookup_bounds() {
        let map = Tensor::from_fn(&[65, 2, 3], |i| i as f32);
        let k = regress_dynamic_kernels(&map, 1, 2).unwrap();
        assert_eq!(k.len(), 65);
        assert_eq!(k[1], 6.0 + 5.0);
        assert!(regress_dynamic_kernels(&map, 2, 0).is_err());
    }

    #[test]
    fn basis_shape_and_range() {
        let b = positional_basis::<f32>(2, 4, 6, 3);
        assert_eq!(b.shape(), &[2, 8, 4, 6]);
        assert!(b.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
