//! Lane-level F1 (stroke rasterization and IoU matching), segmentation IoU
//! and TuSimple point accuracy.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::data::{LanePolyline, TUSIMPLE_ABSENT};
use crate::error::{Error, Result};

/// Stroke width used when rasterizing lanes for matching.
pub const LANE_WIDTH: f64 = 30.0;
pub const IOU_THRESHOLD: f64 = 0.5;

/// Binary mask stored as a bitset, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<u64>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![0; (width * height).div_ceil(64)],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn set(&mut self, x: usize, y: usize) {
        let i = y * self.width + x;
        self.bits[i / 64] |= 1 << (i % 64);
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        let i = y * self.width + x;
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn from_bools(width: usize, height: usize, values: &[bool]) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape("mask", &[height, width], &[values.len()]));
        }
        let mut m = Self::new(width, height);
        for (i, &v) in values.iter().enumerate() {
            if v {
                m.set(i % width, i / width);
            }
        }
        Ok(m)
    }

    fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::shape(op, &[self.height, self.width], &[other.height, other.width]));
        }
        Ok(())
    }

    /// `(|A and B|, |A or B|)`.
    pub fn overlap(&self, other: &Self) -> Result<(usize, usize)> {
        self.check_same(other, "mask overlap")?;
        let (mut inter, mut union) = (0, 0);
        for (a, b) in self.bits.iter().zip(&other.bits) {
            inter += (a & b).count_ones() as usize;
            union += (a | b).count_ones() as usize;
        }
        Ok((inter, union))
    }
}

fn dist2_to_segment(px: f64, py: f64, (ax, ay): (f64, f64), (bx, by): (f64, f64)) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (ax + t * dx - px, ay + t * dy - py);
    qx * qx + qy * qy
}

/// Pixels whose centre lies within `width / 2` of the polyline (round caps).
/// Pixel `(i, j)` has its centre at integer coordinates `(i, j)`.
pub fn rasterize_lane(lane: &LanePolyline, size: (usize, usize), width: f64) -> Result<Mask> {
    if lane.points.len() < 2 {
        return Err(Error::Geometry(format!("cannot rasterize a lane with {} point(s)", lane.points.len())));
    }
    let (w, h) = size;
    let mut mask = Mask::new(w, h);
    if w == 0 || h == 0 {
        return Ok(mask);
    }
    let r = width / 2.0;
    let r2 = r * r;
    for seg in lane.points.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let x0 = (a.0.min(b.0) - r).floor().max(0.0);
        let x1 = (a.0.max(b.0) + r).ceil().min(w as f64 - 1.0);
        let y0 = (a.1.min(b.1) - r).floor().max(0.0);
        let y1 = (a.1.max(b.1) + r).ceil().min(h as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for y in y0 as usize..=y1 as usize {
            for x in x0 as usize..=x1 as usize {
                if dist2_to_segment(x as f64, y as f64, a, b) <= r2 {
                    mask.set(x, y);
                }
            }
        }
    }
    Ok(mask)
}

/// Intersection over union; 0 when both masks are empty.
pub fn lane_iou(a: &Mask, b: &Mask) -> Result<f64> {
    let (inter, union) = a.overlap(b)?;
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `(prediction index, ground-truth index, IoU)`.
    pub pairs: Vec<(usize, usize, f64)>,
}

/// IoU of every prediction against every ground truth, `[pred][gt]`.
pub fn iou_matrix(preds: &[Mask], gts: &[Mask]) -> Result<Vec<Vec<f64>>> {
    preds
        .iter()
        .map(|p| gts.iter().map(|g| lane_iou(p, g)).collect())
        .collect()
}

/// Greedy one-to-one matching in descending IoU order; pairs below the
/// threshold never match.
pub fn match_from_ious(ious: &[Vec<f64>], n_gt: usize, threshold: f64) -> Result<MatchResult> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!("IoU threshold {threshold} outside (0, 1]")));
    }
    let mut cands: Vec<(usize, usize, f64)> = Vec::new();
    for (p, row) in ious.iter().enumerate() {
        if row.len() != n_gt {
            return Err(Error::shape("match_lanes", &[n_gt], &[row.len()]));
        }
        for (g, &v) in row.iter().enumerate() {
            if v >= threshold {
                cands.push((p, g, v));
            }
        }
    }
    cands.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    let mut used_p = vec![false; ious.len()];
    let mut used_g = vec![false; n_gt];
    let mut pairs = Vec::new();
    for (p, g, v) in cands {
        if !used_p[p] && !used_g[g] {
            used_p[p] = true;
            used_g[g] = true;
            pairs.push((p, g, v));
        }
    }
    Ok(MatchResult {
        tp: pairs.len(),
        fp: ious.len() - pairs.len(),
        fn_: n_gt - pairs.len(),
        pairs,
    })
}

pub fn match_lanes(preds: &[Mask], gts: &[Mask], threshold: f64) -> Result<MatchResult> {
    match_from_ious(&iou_matrix(preds, gts)?, gts.len(), threshold)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 from counts. A zero denominator gives 0, except
/// that all-zero counts (nothing to find, nothing found) score 1.
pub fn prf1(tp: usize, fp: usize, fn_: usize) -> Prf1 {
    if tp == 0 && fp == 0 && fn_ == 0 {
        return Prf1 {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Prf1 {
        precision,
        recall,
        f1: f1_score(precision, recall),
    }
}

/// Harmonic mean; 0 when `p + r == 0`.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Foreground IoU of two segmentations, as a percentage. Two empty
/// segmentations agree completely and score 100.
pub fn pixel_iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("pixel_iou", &[gt.len()], &[pred.len()]));
    }
    let inter = pred.iter().zip(gt).filter(|(a, b)| **a && **b).count();
    let union = pred.iter().zip(gt).filter(|(a, b)| **a || **b).count();
    Ok(if union == 0 { 100.0 } else { 100.0 * inter as f64 / union as f64 })
}

/// X of `lane` at each sample row, [`TUSIMPLE_ABSENT`] where the lane has no point.
pub fn sample_lane(lane: &LanePolyline, h_samples: &[f64]) -> Vec<f64> {
    h_samples
        .iter()
        .map(|&y| lane.x_at(y).unwrap_or(TUSIMPLE_ABSENT))
        .collect()
}

/// Fraction of ground-truth points matched within `px_threshold` at the same row.
/// Each ground-truth lane is scored against the prediction that matches it
/// best. Lanes are given as x values on the shared `h_samples` grid.
pub fn tusimple_accuracy(pred: &[Vec<f64>], gt: &[Vec<f64>], h_samples: &[f64], px_threshold: f64) -> Result<f64> {
    for lane in pred.iter().chain(gt) {
        if lane.len() != h_samples.len() {
            return Err(Error::shape("tusimple_accuracy", &[h_samples.len()], &[lane.len()]));
        }
    }
    let (mut correct, mut total) = (0usize, 0usize);
    for g in gt {
        let points = g.iter().filter(|&&x| x != TUSIMPLE_ABSENT).count();
        total += points;
        let best = pred
            .iter()
            .map(|p| {
                g.iter()
                    .zip(p)
                    .filter(|(&gx, &px)| gx != TUSIMPLE_ABSENT && px != TUSIMPLE_ABSENT && (gx - px).abs() < px_threshold)
                    .count()
            })
            .max()
            .unwrap_or(0);
        correct += best;
    }
    Ok(if total == 0 { 1.0 } else { correct as f64 / total as f64 })
}

/// Summed counts over frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, m: &MatchResult) {
        self.tp += m.tp;
        self.fp += m.fp;
        self.fn_ += m.fn_;
    }

    pub fn scores(&self) -> Prf1 {
        prf1(self.tp, self.fp, self.fn_)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
    /// Present when any frame carries a category other than `"none"`.
    pub per_category: BTreeMap<String, Counts>,
    /// TuSimple point accuracy, when that protocol was requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

/// One frame to score: lanes in original pixels on a `(width, height)` canvas.
pub struct FrameEval<'a> {
    pub predictions: &'a [LanePolyline],
    pub ground_truth: &'a [LanePolyline],
    pub size: (usize, usize),
    pub category: &'a str,
}

pub fn evaluate_frame(frame: &FrameEval<'_>, width: f64, threshold: f64) -> Result<MatchResult> {
    let raster = |lanes: &[LanePolyline]| -> Result<Vec<Mask>> {
        lanes.iter().map(|l| rasterize_lane(l, frame.size, width)).collect()
    };
    match_lanes(&raster(frame.predictions)?, &raster(frame.ground_truth)?, threshold)
}

/// Accumulates matches over frames into precision, recall and F1.
pub fn evaluate<'a>(frames: impl IntoIterator<Item = FrameEval<'a>>, width: f64, threshold: f64) -> Result<EvalReport> {
    let mut total = Counts::default();
    let mut per_category: BTreeMap<String, Counts> = BTreeMap::new();
    for f in frames {
        let m = evaluate_frame(&f, width, threshold)?;
        total.add(&m);
        if f.category != "none" {
            per_category.entry(f.category.to_string()).or_default().add(&m);
        }
    }
    let s = total.scores();
    Ok(EvalReport {
        precision: s.precision,
        recall: s.recall,
        f1: s.f1,
        counts: total,
        per_category,
        accuracy: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lane(points: &[(f64, f64)]) -> LanePolyline {
        LanePolyline::new(points.to_vec()).unwrap()
    }

    #[test]
    fn prf1_edge_cases() {
        assert_eq!(prf1(0, 0, 0).f1, 1.0);
        assert_eq!(prf1(4, 0, 0).f1, 1.0);
        assert_eq!(prf1(0, 3, 2).f1, 0.0);
        assert_eq!(prf1(0, 0, 2).precision, 0.0);
    }

    #[test]
    fn minimal_stroke() {
        let m = rasterize_lane(&lane(&[(0.0, 0.0), (1.0, 0.0)]), (4, 4), 1.0).unwrap();
        assert_eq!(m.count(), 2);
        let m = rasterize_lane(&lane(&[(-50.0, -50.0), (-40.0, -60.0)]), (10, 10), 3.0).unwrap();
        assert_eq!(m.count(), 0);
        assert!(rasterize_lane(&LanePolyline { points: vec![(1.0, 1.0)] }, (4, 4), 1.0).is_err());
    }

    #[test]
    fn iou_basics() {
        let a = rasterize_lane(&lane(&[(10.0, 10.0), (10.0, 50.0)]), (64, 64), 5.0).unwrap();
        let b = rasterize_lane(&lane(&[(50.0, 10.0), (50.0, 50.0)]), (64, 64), 5.0).unwrap();
        assert_eq!(lane_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(lane_iou(&a, &b).unwrap(), 0.0);
        assert_eq!(lane_iou(&Mask::new(3, 3), &Mask::new(3, 3)).unwrap(), 0.0);
        assert!(lane_iou(&Mask::new(3, 3), &Mask::new(3, 4)).is_err());
    }

    #[test]
    fn one_prediction_two_gts() {
        let m = match_from_ious(&[vec![0.8, 0.6]], 2, 0.5).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 1));
        assert_eq!(m.pairs, vec![(0, 0, 0.8)]);
        let m = match_from_ious(&[], 3, 0.5).unwrap();
        assert_eq!(m.fn_, 3);
    }

    #[test]
    fn pixel_iou_cases() {
        assert_eq!(pixel_iou(&[true, false], &[true, false]).unwrap(), 100.0);
        assert_eq!(pixel_iou(&[true, false], &[false, true]).unwrap(), 0.0);
        let p = pixel_iou(&[true, true, false], &[false, true, true]).unwrap();
        assert!((p - 100.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn tusimple_cases() {
        let h = [10.0, 20.0, 30.0, 40.0];
        let gt = vec![vec![100.0, 110.0, 120.0, 130.0]];
        assert_eq!(tusimple_accuracy(&gt, &gt, &h, 20.0).unwrap(), 1.0);
        let far = vec![vec![200.0; 4]];
        assert_eq!(tusimple_accuracy(&far, &gt, &h, 20.0).unwrap(), 0.0);
        let half = vec![vec![100.0, 110.0, 190.0, 200.0]];
        assert_eq!(tusimple_accuracy(&half, &gt, &h, 20.0).unwrap(), 0.5);
    }
}
