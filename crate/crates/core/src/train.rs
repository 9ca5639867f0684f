//! Losses, the Adam optimizer, the training loop and checkpoint files.

use std::path::Path;

use indexmap::IndexMap;
use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{build_targets, LanePolyline, PreparedFrame};
use crate::error::{CheckpointError, Error, Result};
use crate::graph::{Bindings, Ctx};
use crate::head::{LaneModel, LaneNet};
use crate::tensor::kernels::{bce_logit_term, focal_term, softmax_in_place, PROB_CLAMP};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub heatmap: f64,
    pub location: f64,
    pub range: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            heatmap: 1.0,
            location: 1.0,
            range: 0.4,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBundle {
    pub heatmap: f64,
    pub location: f64,
    pub range: f64,
    pub total: f64,
}

pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_BETA: f64 = 4.0;

/// Focal loss of heatmap probabilities against a Gaussian target, normalized
/// by the number of positive cells (`gt == 1`, at least one).
pub fn focal_heatmap_loss(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("focal_heatmap_loss", gt.shape(), pred.shape()));
    }
    if pred.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Config("focal_heatmap_loss: prediction outside [0, 1]".into()));
    }
    let positives = gt.data().iter().filter(|&&g| g == 1.0).count().max(1);
    let total: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| focal_term(p as f64, g as f64, FOCAL_ALPHA, FOCAL_BETA))
        .sum();
    Ok(total / positives as f64)
}

/// Mean cross-entropy over rows with a target column; 0 without any.
pub fn rowwise_location_loss(logits: &Tensor, gt_columns: &[Option<usize>]) -> Result<f64> {
    let (h, w) = match logits.shape() {
        &[h, w] => (h, w),
        s => return Err(Error::invalid("rowwise_location_loss", format!("expected [H, W], got {s:?}"))),
    };
    if gt_columns.len() != h {
        return Err(Error::shape("rowwise_location_loss", &[h], &[gt_columns.len()]));
    }
    let (mut total, mut n) = (0.0, 0usize);
    let mut row = vec![0f64; w];
    for (r, col) in gt_columns.iter().enumerate() {
        let Some(c) = *col else { continue };
        if c >= w {
            return Err(Error::invalid("rowwise_location_loss", format!("column {c} outside [0, {w})")));
        }
        for (dst, &z) in row.iter_mut().zip(&logits.data()[r * w..(r + 1) * w]) {
            *dst = z as f64;
        }
        softmax_in_place(&mut row);
        total -= row[c].max(PROB_CLAMP).ln();
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Mean binary cross-entropy of `sigmoid(logits)` against a 0/1 mask.
pub fn vertical_range_loss(logits: &[f32], mask: &[f32]) -> Result<f64> {
    if logits.len() != mask.len() {
        return Err(Error::shape("vertical_range_loss", &[mask.len()], &[logits.len()]));
    }
    if logits.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = logits
        .iter()
        .zip(mask)
        .map(|(&z, &m)| bce_logit_term(z as f64, m as f64))
        .sum();
    Ok(total / logits.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub moments: IndexMap<String, (Vec<f32>, Vec<f32>)>,
}

/// One bias-corrected Adam update. Parameters without a gradient are left alone.
pub fn adam_step(
    params: &mut crate::graph::ParamStore,
    grads: &[(String, Tensor)],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
        for ((pv, &gv), (mv, vv)) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut())) {
            let gv = gv as f64;
            *mv = (b1 * *mv as f64 + (1.0 - b1) * gv) as f32;
            *vv = (b2 * *vv as f64 + (1.0 - b2) * gv * gv) as f32;
            let mhat = *mv as f64 / c1;
            let vhat = *vv as f64 / c2;
            *pv = (*pv as f64 - cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps)) as f32;
        }
    }
    Ok(())
}

fn default_iterations() -> usize {
    500
}
fn default_batch() -> usize {
    4
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub loss_weights: LossWeights,
    /// Mirror each sample with probability one half.
    #[serde(default = "default_true")]
    pub flip_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: default_iterations(),
            batch_size: default_batch(),
            optimizer: AdamConfig::default(),
            loss_weights: LossWeights::default(),
            flip_augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.optimizer.learning_rate > 0.0 && self.optimizer.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        let w = self.loss_weights;
        if [w.heatmap, w.location, w.range].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Mirrors a prepared frame inside the model input (`u -> W - 1 - u`) and rebuilds its targets.
pub fn hflip_prepared(frame: &PreparedFrame) -> Result<PreparedFrame> {
    let [n, c, h, w] = frame.input.dims4()?;
    let mut data = frame.input.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    let lanes: Vec<LanePolyline> = frame
        .input_lanes
        .iter()
        .map(|l| l.map(|x, y| (w as f64 - 1.0 - x, y)))
        .collect();
    Ok(PreparedFrame {
        input: Tensor::new(&[n, c, h, w], data)?,
        transform: frame.transform,
        targets: build_targets(&lanes, (h, w), frame.targets.sigma)?,
        input_lanes: lanes,
        gt_lanes: frame.gt_lanes.clone(),
        category: frame.category.clone(),
    })
}

/// Training frames with their mirrored copies.
pub struct TrainingSet {
    frames: Vec<PreparedFrame>,
    flipped: Vec<PreparedFrame>,
}

impl TrainingSet {
    pub fn new(frames: Vec<PreparedFrame>, with_flips: bool) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let flipped = if with_flips {
            frames.iter().map(hflip_prepared).collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Self { frames, flipped })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    fn pick(&self, i: usize, rng: &mut ChaCha8Rng) -> &PreparedFrame {
        if !self.flipped.is_empty() && rng.random_bool(0.5) {
            &self.flipped[i]
        } else {
            &self.frames[i]
        }
    }
}

/// Loss of one batch on a fresh tape, with gradients for every trainable parameter that received one.
pub fn batch_loss(
    model: &mut LaneModel,
    batch: &[&PreparedFrame],
    weights: &LossWeights,
    rng: &mut ChaCha8Rng,
) -> Result<(LossBundle, Vec<(String, Tensor)>)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let inputs: Vec<Tensor> = batch.iter().map(|f| f.input.clone()).collect();
    let heat: Vec<Tensor> = batch
        .iter()
        .map(|f| {
            let [h, w] = [f.targets.heatmap.shape()[0], f.targets.heatmap.shape()[1]];
            f.targets.heatmap.clone().reshape(&[1, 1, h, w])
        })
        .collect::<Result<_>>()?;
    let heat = Tensor::stack(&heat)?;

    let mut tape = Tape::new();
    let bindings = Bindings::bind(&mut tape, &model.params, true);
    let input = tape.constant(Tensor::stack(&inputs)?);
    let net: &LaneNet = &model.net;
    let out = {
        let mut ctx = Ctx {
            tape: &mut tape,
            params: &bindings,
            buffers: &mut model.buffers,
            rng,
            training: true,
            norm: net.config.norm,
        };
        net.forward(&mut ctx, input)?
    };

    let focal = tape.focal_loss(out.heatmap, &heat, FOCAL_ALPHA as f32, FOCAL_BETA as f32)?;
    let mut ce_terms = Vec::new();
    let mut bce_terms = Vec::new();
    for (s, f) in batch.iter().enumerate() {
        for lane in &f.targets.lanes {
            let k = tape.gather_pixel(out.kernels, s, lane.anchor.0, lane.anchor.1)?;
            let loc = tape.dynamic_conv1x1(out.shared, s, k)?;
            let range = tape.row_pool_linear(out.shared, s, loc, out.range_weight, out.range_bias)?;
            ce_terms.push(tape.row_cross_entropy(loc, &lane.columns)?);
            bce_terms.push(tape.binary_cross_entropy(range, &lane.range)?);
        }
    }
    let mean = |tape: &mut Tape, terms: &[Var]| -> Result<Option<Var>> {
        let Some((&first, rest)) = terms.split_first() else { return Ok(None) };
        let mut acc = first;
        for &t in rest {
            acc = tape.add(acc, t)?;
        }
        Ok(Some(tape.scale(acc, 1.0 / terms.len() as f32)))
    };
    let ce = mean(&mut tape, &ce_terms)?;
    let bce = mean(&mut tape, &bce_terms)?;
    let mut total = tape.scale(focal, weights.heatmap as f32);
    if let Some(ce) = ce {
        let t = tape.scale(ce, weights.location as f32);
        total = tape.add(total, t)?;
    }
    if let Some(bce) = bce {
        let t = tape.scale(bce, weights.range as f32);
        total = tape.add(total, t)?;
    }
    let scalar = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item() as f64);
    let bundle = LossBundle {
        heatmap: tape.value(focal).item() as f64,
        location: scalar(ce),
        range: scalar(bce),
        total: tape.value(total).item() as f64,
    };
    if !bundle.total.is_finite() {
        return Err(Error::NonFinite { op: "batch_loss" });
    }
    let mut grads = tape.backward(total)?;
    let named = bindings
        .iter()
        .filter_map(|(name, v)| grads.take(v).map(|g| (name.to_string(), g)))
        .collect();
    Ok((bundle, named))
}

/// Optimizer plus the RNG stream that drives batching, flips and dropout.
pub struct Trainer {
    pub config: TrainConfig,
    pub state: AdamState,
    rng: ChaCha8Rng,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub iterations: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: AdamState::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// One optimizer step on the given frame indices.
    pub fn step(&mut self, model: &mut LaneModel, data: &TrainingSet, indices: &[usize]) -> Result<LossBundle> {
        let batch: Vec<&PreparedFrame> = indices.iter().map(|&i| data.pick(i, &mut self.rng)).collect();
        let (loss, grads) = batch_loss(model, &batch, &self.config.loss_weights, &mut self.rng)?;
        adam_step(&mut model.params, &grads, &mut self.state, &self.config.optimizer)?;
        Ok(loss)
    }

    fn shuffled(&mut self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        order
    }

    /// One pass over the data in a seed-determined order; the last batch may be short.
    pub fn train_epoch(&mut self, model: &mut LaneModel, data: &TrainingSet) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let order = self.shuffled(data.len());
        let mut total = 0.0;
        let mut iterations = 0;
        for chunk in order.chunks(self.config.batch_size) {
            total += self.step(model, data, chunk)?.total;
            iterations += 1;
        }
        Ok(EpochStats {
            mean_loss: total / iterations as f64,
            iterations,
        })
    }

    /// Runs `config.iterations` steps of full batches drawn epoch by epoch.
    /// Returns the loss of every step.
    pub fn train_iterations(&mut self, model: &mut LaneModel, data: &TrainingSet) -> Result<Vec<LossBundle>> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let bs = self.config.batch_size.min(data.len());
        let mut trace = Vec::with_capacity(self.config.iterations);
        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0;
        for it in 0..self.config.iterations {
            if cursor + bs > order.len() {
                order = self.shuffled(data.len());
                cursor = 0;
            }
            let idx: Vec<usize> = order[cursor..cursor + bs].to_vec();
            cursor += bs;
            let loss = self.step(model, data, &idx)?;
            if it % 50 == 0 {
                debug!(
                    "iter {it}: total {:.4} (heatmap {:.4}, location {:.4}, range {:.4})",
                    loss.total, loss.heatmap, loss.location, loss.range
                );
            }
            trace.push(loss);
        }
        Ok(trace)
    }
}

const MAGIC: &[u8; 4] = b"ERFC";
const VERSION: u32 = 1;

/// Bytes of a checkpoint other than tensor payloads, for tensors given as `(name, rank)`.
pub fn checkpoint_header_bytes<'a>(tensors: impl IntoIterator<Item = (&'a str, usize)>) -> usize {
    12 + tensors
        .into_iter()
        .map(|(name, rank)| 4 + name.len() + 1 + 4 * rank)
        .sum::<usize>()
}

/// Serializes named tensors in order.
pub fn encode_checkpoint<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>> {
    let tensors: Vec<(&str, &Tensor)> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(tensors.len()).map_err(|_| Error::Config("too many tensors".into()))?.to_le_bytes());
    for (name, t) in tensors {
        let len = u32::try_from(name.len()).map_err(|_| Error::Config("tensor name too long".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Config(format!("{name}: rank too large")))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Config(format!("{name}: dimension too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated(what))?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated(what))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| CheckpointError::BadName)?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dims")? as usize);
        }
        if dims.is_empty() || dims.contains(&0) {
            return Err(CheckpointError::BadDims { name });
        }
        let numel: usize = dims.iter().product();
        let payload = r.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated("payload"))?, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&dims, data).map_err(|_| CheckpointError::BadDims { name: name.clone() })?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(out)
}

pub fn write_checkpoint<'a>(path: &Path, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<usize> {
    let bytes = encode_checkpoint(tensors)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(bytes.len())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(decode_checkpoint(&bytes)?)
}

/// Parameters only, in declaration order.
pub fn encode_params(model: &LaneModel) -> Result<Vec<u8>> {
    encode_checkpoint(model.params.iter())
}

/// Parameters followed by batch-norm running statistics.
pub fn encode_model(model: &LaneModel) -> Result<Vec<u8>> {
    let buffers: Vec<(String, Tensor)> = model
        .buffers
        .iter()
        .map(|(n, v)| Ok((n.to_string(), Tensor::new(&[v.len()], v.to_vec())?)))
        .collect::<Result<_>>()?;
    encode_checkpoint(
        model
            .params
            .iter()
            .chain(buffers.iter().map(|(n, t)| (n.as_str(), t))),
    )
}

/// Fills a model's parameters and buffers from decoded tensors. Every
/// parameter must be present; buffers are optional.
pub fn restore_model(model: &mut LaneModel, tensors: Vec<(String, Tensor)>) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for (name, t) in tensors {
        if let Ok(p) = model.params.get_mut(&name) {
            if p.shape() != t.shape() {
                return Err(Error::shape("checkpoint", p.shape(), t.shape()));
            }
            *p = t;
        } else if model.buffers.get(&name).is_ok() {
            model.buffers.set(&name, t.into_data())?;
        } else {
            return Err(Error::UnknownParameter(name));
        }
        seen.insert(name);
    }
    if let Some((missing, _)) = model.params.iter().find(|(n, _)| !seen.contains(*n)) {
        return Err(Error::Config(format!("checkpoint lacks parameter {missing:?}")));
    }
    Ok(())
}
