//! Lane annotations: CULane, CurveLanes and TuSimple parsers and writers, the
//! synthetic lane generator, preprocessing and training targets.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{imageops, ImageFormat, Rgb, RgbImage};
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, ParseError, Result};
use crate::head::{shape_cell_center, PROPOSAL_STRIDE, SHAPE_STRIDE};
use crate::tensor::Tensor;

/// Ordered lane points `(x, y)` in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanePolyline {
    pub points: Vec<(f64, f64)>,
}

impl LanePolyline {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Geometry(format!("lane needs at least 2 points, got {}", points.len())));
        }
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::Geometry("lane has non-finite coordinates".into()));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Point with the largest `y` (closest to the bottom of the image).
    pub fn bottom_point(&self) -> (f64, f64) {
        self.points
            .iter()
            .copied()
            .fold((f64::NAN, f64::NEG_INFINITY), |best, p| if p.1 > best.1 { p } else { best })
    }

    /// Linear interpolation of `x` at row `y`; `None` outside the lane's vertical span.
    pub fn x_at(&self, y: f64) -> Option<f64> {
        let mut pts = self.points.clone();
        pts.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (lo, hi) = (pts.first()?.1, pts.last()?.1);
        if y < lo || y > hi {
            return None;
        }
        for w in pts.windows(2) {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            if y >= y0 && y <= y1 {
                if y1 - y0 < 1e-12 {
                    return Some(x0);
                }
                return Some(x0 + (x1 - x0) * (y - y0) / (y1 - y0));
            }
        }
        None
    }

    pub fn map(&self, f: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        Self {
            points: self.points.iter().map(|&(x, y)| f(x, y)).collect(),
        }
    }
}

/// One image with its lanes.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedFrame {
    pub source_id: String,
    pub image: Option<RgbImage>,
    pub image_path: Option<PathBuf>,
    /// `(width, height)` of the original image.
    pub size: (usize, usize),
    pub lanes: Vec<LanePolyline>,
    /// CULane test category, or `"none"`.
    pub category: String,
}

impl AnnotatedFrame {
    /// Loads the image from `image_path` if not already present and updates `size`.
    pub fn load_image(&mut self) -> Result<&RgbImage> {
        if self.image.is_none() {
            let path = self
                .image_path
                .clone()
                .ok_or_else(|| Error::Config(format!("{}: no image path", self.source_id)))?;
            self.image = Some(read_image(&path)?);
        }
        let img = self.image.as_ref().expect("image loaded above");
        self.size = (img.width() as usize, img.height() as usize);
        Ok(img)
    }

    /// Mirror image and lanes about the vertical centre line.
    pub fn hflip(&self) -> Self {
        let w = self.size.0 as f64;
        Self {
            source_id: format!("{}#flip", self.source_id),
            image: self.image.as_ref().map(imageops::flip_horizontal),
            image_path: None,
            size: self.size,
            lanes: self.lanes.iter().map(|l| l.map(|x, y| (w - 1.0 - x, y))).collect(),
            category: self.category.clone(),
        }
    }
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    img.save_with_format(path, ImageFormat::Pnm).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parses one CULane `.lines.txt` body: one lane per line, `x1 y1 x2 y2 ...`.
/// Lanes with fewer than two points are skipped.
pub fn parse_culane_lines(text: &str, source_id: &str) -> Result<Vec<LanePolyline>, ParseError> {
    let mut lanes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() % 2 != 0 {
            return Err(ParseError::OddTokenCount {
                source_id: source_id.into(),
                line: i + 1,
                count: tokens.len(),
            });
        }
        let mut vals = Vec::with_capacity(tokens.len());
        for t in &tokens {
            let v: f64 = t.parse().map_err(|_| ParseError::BadNumber {
                source_id: source_id.into(),
                line: i + 1,
                token: t.to_string(),
            })?;
            if !v.is_finite() {
                return Err(ParseError::BadNumber {
                    source_id: source_id.into(),
                    line: i + 1,
                    token: t.to_string(),
                });
            }
            vals.push(v);
        }
        let points: Vec<(f64, f64)> = vals.chunks(2).map(|c| (c[0], c[1])).collect();
        if points.len() < 2 {
            warn!("{source_id}:{}: lane with {} point(s) skipped", i + 1, points.len());
            continue;
        }
        lanes.push(LanePolyline { points });
    }
    Ok(lanes)
}

pub fn write_culane_lines(lanes: &[LanePolyline]) -> String {
    let mut s = String::new();
    for lane in lanes {
        let line: Vec<String> = lane.points.iter().map(|(x, y)| format!("{x} {y}")).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    s
}

/// Annotation path for a CULane image path: `a/b.jpg` becomes `a/b.lines.txt`.
pub fn culane_annotation_path(image: &Path) -> PathBuf {
    image.with_extension("lines.txt")
}

/// Category encoded in CULane test list names such as `test3_shadow.txt`.
fn culane_category(list_file: &Path) -> String {
    let stem = list_file.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    match stem.split_once('_') {
        Some((prefix, name))
            if prefix.starts_with("test") && prefix[4..].chars().all(|c| c.is_ascii_digit()) && !prefix[4..].is_empty() =>
        {
            name.to_string()
        }
        _ => "none".into(),
    }
}

pub const CULANE_SIZE: (usize, usize) = (1640, 590);
pub const CURVELANES_SIZE: (usize, usize) = (2560, 1440);
pub const TUSIMPLE_SIZE: (usize, usize) = (1280, 720);

/// Reads a CULane split list (relative image paths, extra columns ignored) and
/// the `.lines.txt` file next to each image under `root`.
pub fn parse_culane(list_file: &Path, root: &Path) -> Result<Vec<AnnotatedFrame>> {
    let category = culane_category(list_file);
    let list = read_text(list_file)?;
    let mut frames = Vec::new();
    for line in list.lines() {
        let Some(rel) = line.split_whitespace().next() else { continue };
        let rel = rel.trim_start_matches('/');
        let image_path = root.join(rel);
        let ann = culane_annotation_path(&image_path);
        let lanes = parse_culane_lines(&read_text(&ann)?, &ann.display().to_string())?;
        frames.push(AnnotatedFrame {
            source_id: rel.to_string(),
            image: None,
            image_path: Some(image_path),
            size: CULANE_SIZE,
            lanes,
            category: category.clone(),
        });
    }
    Ok(frames)
}

fn json_number(v: &Value, source_id: &str, line: usize) -> Result<f64, ParseError> {
    let bad = |token: String| ParseError::BadNumber {
        source_id: source_id.into(),
        line,
        token,
    };
    match v {
        Value::String(s) => s.trim().parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| bad(s.clone())),
        Value::Number(n) => n.as_f64().ok_or_else(|| bad(n.to_string())),
        other => Err(bad(other.to_string())),
    }
}

/// Parses a CurveLanes label: `{"Lines": [[{"x": "..", "y": ".."}, ...], ...]}`.
pub fn parse_curvelanes_str(text: &str, source_id: &str) -> Result<Vec<LanePolyline>, ParseError> {
    let malformed = |reason: String| ParseError::Malformed {
        source_id: source_id.into(),
        reason,
    };
    let root: Value = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    let lines = root.get("Lines").ok_or_else(|| ParseError::MissingKey {
        source_id: source_id.into(),
        key: "Lines".into(),
    })?;
    let lines = lines.as_array().ok_or_else(|| malformed("\"Lines\" is not an array".into()))?;
    let mut lanes = Vec::new();
    for (li, lane) in lines.iter().enumerate() {
        let pts = lane
            .as_array()
            .ok_or_else(|| malformed(format!("lane {li} is not an array")))?;
        let mut points = Vec::with_capacity(pts.len());
        for p in pts {
            let get = |k: &str| {
                p.get(k).ok_or_else(|| ParseError::MissingKey {
                    source_id: source_id.into(),
                    key: k.into(),
                })
            };
            points.push((json_number(get("x")?, source_id, li + 1)?, json_number(get("y")?, source_id, li + 1)?));
        }
        if points.len() < 2 {
            warn!("{source_id}: lane {li} with {} point(s) skipped", points.len());
            continue;
        }
        lanes.push(LanePolyline { points });
    }
    Ok(lanes)
}

pub fn write_curvelanes(lanes: &[LanePolyline]) -> String {
    let lines: Vec<Value> = lanes
        .iter()
        .map(|l| {
            Value::Array(
                l.points
                    .iter()
                    .map(|(x, y)| serde_json::json!({"x": x.to_string(), "y": y.to_string()}))
                    .collect(),
            )
        })
        .collect();
    serde_json::json!({ "Lines": lines }).to_string()
}

/// CurveLanes label path: `.../images/a.jpg` maps to `.../labels/a.lines.json`.
pub fn curvelanes_annotation_path(image: &Path) -> PathBuf {
    let mut parts: Vec<_> = image.components().map(|c| c.as_os_str().to_owned()).collect();
    if let Some(i) = parts.iter().rposition(|p| p == "images") {
        parts[i] = "labels".into();
    }
    let p: PathBuf = parts.iter().collect();
    p.with_extension("lines.json")
}

/// Reads a list of image paths relative to `root` and their CurveLanes labels.
pub fn parse_curvelanes(list_file: &Path, root: &Path) -> Result<Vec<AnnotatedFrame>> {
    let list = read_text(list_file)?;
    let mut frames = Vec::new();
    for line in list.lines() {
        let Some(rel) = line.split_whitespace().next() else { continue };
        let rel = rel.trim_start_matches('/');
        let image_path = root.join(rel);
        let ann = curvelanes_annotation_path(&image_path);
        let lanes = parse_curvelanes_str(&read_text(&ann)?, &ann.display().to_string())?;
        frames.push(AnnotatedFrame {
            source_id: rel.to_string(),
            image: None,
            image_path: Some(image_path),
            size: CURVELANES_SIZE,
            lanes,
            category: "none".into(),
        });
    }
    Ok(frames)
}

/// One TuSimple label record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuSimpleRecord {
    pub lanes: Vec<Vec<f64>>,
    pub h_samples: Vec<f64>,
    pub raw_file: String,
}

/// Marker for "no lane at this row" in TuSimple `lanes` arrays.
pub const TUSIMPLE_ABSENT: f64 = -2.0;

impl TuSimpleRecord {
    /// Polylines with absent samples removed; lanes left with fewer than two points are dropped.
    pub fn polylines(&self) -> Vec<LanePolyline> {
        self.lanes
            .iter()
            .filter_map(|xs| {
                let points: Vec<(f64, f64)> = xs
                    .iter()
                    .zip(&self.h_samples)
                    .filter(|(x, _)| **x != TUSIMPLE_ABSENT)
                    .map(|(&x, &y)| (x, y))
                    .collect();
                (points.len() >= 2).then_some(LanePolyline { points })
            })
            .collect()
    }

    pub fn to_frame(&self, root: &Path) -> AnnotatedFrame {
        AnnotatedFrame {
            source_id: self.raw_file.clone(),
            image: None,
            image_path: Some(root.join(&self.raw_file)),
            size: TUSIMPLE_SIZE,
            lanes: self.polylines(),
            category: "none".into(),
        }
    }
}

/// Parses TuSimple JSON lines. Blank lines are ignored.
pub fn parse_tusimple_str(text: &str, source_id: &str) -> Result<Vec<TuSimpleRecord>, ParseError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).map_err(|e| ParseError::Malformed {
            source_id: source_id.into(),
            reason: format!("line {}: {e}", i + 1),
        })?;
        let field = |k: &str| {
            v.get(k).ok_or_else(|| ParseError::MissingKey {
                source_id: source_id.into(),
                key: k.into(),
            })
        };
        let numbers = |val: &Value| -> Result<Vec<f64>, ParseError> {
            val.as_array()
                .ok_or_else(|| ParseError::Malformed {
                    source_id: source_id.into(),
                    reason: format!("line {}: expected an array", i + 1),
                })?
                .iter()
                .map(|x| json_number(x, source_id, i + 1))
                .collect()
        };
        let h_samples = numbers(field("h_samples")?)?;
        let lanes_val = field("lanes")?.as_array().ok_or_else(|| ParseError::Malformed {
            source_id: source_id.into(),
            reason: format!("line {}: \"lanes\" is not an array", i + 1),
        })?;
        let mut lanes = Vec::with_capacity(lanes_val.len());
        for (li, lane) in lanes_val.iter().enumerate() {
            let xs = numbers(lane)?;
            if xs.len() != h_samples.len() {
                return Err(ParseError::LengthMismatch {
                    source_id: source_id.into(),
                    line: i + 1,
                    lane: li,
                    lane_len: xs.len(),
                    samples: h_samples.len(),
                });
            }
            lanes.push(xs);
        }
        let raw_file = field("raw_file")?
            .as_str()
            .ok_or_else(|| ParseError::Malformed {
                source_id: source_id.into(),
                reason: format!("line {}: \"raw_file\" is not a string", i + 1),
            })?
            .to_string();
        out.push(TuSimpleRecord {
            lanes,
            h_samples,
            raw_file,
        });
    }
    Ok(out)
}

pub fn write_tusimple(records: &[TuSimpleRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(s, "{}", serde_json::to_string(r).expect("records serialize"));
    }
    s
}

pub fn parse_tusimple(label_file: &Path, root: &Path) -> Result<Vec<AnnotatedFrame>> {
    let text = read_text(label_file)?;
    Ok(parse_tusimple_str(&text, &label_file.display().to_string())?
        .iter()
        .map(|r| r.to_frame(root))
        .collect())
}

fn default_frames() -> usize {
    200
}
fn default_width() -> usize {
    256
}
fn default_height() -> usize {
    512
}
fn default_noise() -> f64 {
    10.0
}
fn default_spacing() -> (f64, f64) {
    (0.3, 0.38)
}
fn default_true() -> bool {
    true
}

/// Procedural road scenes: quadratic lanes converging towards a vanishing point.
///
/// In normalized height `s` (0 at the bottom row, 1 at the horizon) a lane
/// follows `x(s) = c + b s + a W s^2`, where `c` is its bottom crossing and
/// `b` makes straight lanes meet at the vanishing point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    #[serde(default = "default_frames")]
    pub frames: usize,
    /// Inclusive range of lanes per frame.
    pub n_lanes: (usize, usize),
    /// Range of the curvature coefficient `a`.
    pub curvature: (f64, f64),
    /// Flip the sign of `a` with probability one half.
    #[serde(default = "default_true")]
    pub random_curve_direction: bool,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_height")]
    pub height: usize,
    /// Standard deviation of per-pixel noise, in 8-bit units.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Range of the gap between neighbouring lanes at the bottom row, as a fraction of the width.
    #[serde(default = "default_spacing")]
    pub lane_spacing: (f64, f64),
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn straight(frames: usize, seed: u64) -> Self {
        Self {
            frames,
            n_lanes: (2, 3),
            curvature: (0.0, 0.0),
            random_curve_direction: true,
            width: default_width(),
            height: default_height(),
            noise: default_noise(),
            lane_spacing: default_spacing(),
            seed,
        }
    }

    pub fn mild(frames: usize, seed: u64) -> Self {
        Self {
            curvature: (-0.15, 0.15),
            ..Self::straight(frames, seed)
        }
    }

    pub fn curved(frames: usize, seed: u64) -> Self {
        Self {
            n_lanes: (3, 5),
            curvature: (0.2, 0.4),
            ..Self::straight(frames, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_lanes.0 > self.n_lanes.1 {
            return Err(Error::Config(format!("n_lanes range {:?} is reversed", self.n_lanes)));
        }
        if !(self.curvature.0 <= self.curvature.1) {
            return Err(Error::Config(format!("curvature range {:?} is reversed", self.curvature)));
        }
        if self.width < 16 || self.height < 16 {
            return Err(Error::Config(format!("synthetic image {}x{} is too small", self.width, self.height)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise {} must be finite and >= 0", self.noise)));
        }
        let (lo, hi) = self.lane_spacing;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("lane_spacing {:?} must be positive and ordered", self.lane_spacing)));
        }
        Ok(())
    }
}

/// Rows between ground-truth samples.
pub const SYNTHETIC_ROW_STEP: usize = 10;

struct LaneCurve {
    c: f64,
    b: f64,
    a: f64,
    s_top: f64,
}

impl LaneCurve {
    fn x(&self, s: f64, w: f64) -> f64 {
        self.c + self.b * s + self.a * w * s * s
    }
}

/// Generates `config.frames` frames; a pure function of `config`.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Vec<AnnotatedFrame>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.frames)
        .map(|i| synthetic_frame(config, &mut rng, i))
        .collect()
}

fn synthetic_frame(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng, index: usize) -> Result<AnnotatedFrame> {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let horizon = h * rng.random_range(0.32..0.40);
    let vp = w * (0.5 + rng.random_range(-0.06..0.06));
    let n = rng.random_range(cfg.n_lanes.0..=cfg.n_lanes.1);
    let spacing = w * rng.random_range(cfg.lane_spacing.0..=cfg.lane_spacing.1);
    let shift = w * rng.random_range(-0.05..0.05);
    let mut a = if cfg.curvature.0 < cfg.curvature.1 {
        rng.random_range(cfg.curvature.0..=cfg.curvature.1)
    } else {
        cfg.curvature.0
    };
    if cfg.random_curve_direction && rng.random_bool(0.5) {
        a = -a;
    }
    let curves: Vec<LaneCurve> = (0..n)
        .map(|k| {
            let c = w / 2.0 + shift + (k as f64 - (n as f64 - 1.0) / 2.0) * spacing;
            LaneCurve {
                c,
                b: vp - c - a * w,
                a,
                s_top: rng.random_range(0.78..0.92),
            }
        })
        .collect();

    let span = h - 1.0 - horizon;
    let s_of = |y: f64| (h - 1.0 - y) / span;
    let mut lanes = Vec::new();
    let mut drawn = Vec::new();
    for curve in &curves {
        // Longest run of in-image samples, bottom to top.
        let mut best: Vec<(f64, f64)> = Vec::new();
        let mut run: Vec<(f64, f64)> = Vec::new();
        let mut y = h - 1.0;
        while s_of(y) <= curve.s_top {
            let x = curve.x(s_of(y), w);
            if (0.0..=w - 1.0).contains(&x) {
                run.push(((x * 1000.0).round() / 1000.0, y));
            } else if !run.is_empty() {
                if run.len() > best.len() {
                    best = std::mem::take(&mut run);
                }
                run.clear();
            }
            y -= SYNTHETIC_ROW_STEP as f64;
        }
        if run.len() > best.len() {
            best = run;
        }
        if best.len() >= 2 {
            let y_bottom = best[0].1;
            let y_top = best[best.len() - 1].1;
            drawn.push((curve, y_top, y_bottom));
            lanes.push(LanePolyline { points: best });
        }
    }

    let image = render_scene(cfg, rng, horizon, &drawn, &s_of)?;
    Ok(AnnotatedFrame {
        source_id: format!("synthetic_{:05}", index),
        image: Some(image),
        image_path: None,
        size: (cfg.width, cfg.height),
        lanes,
        category: "none".into(),
    })
}

fn render_scene(
    cfg: &SyntheticConfig,
    rng: &mut ChaCha8Rng,
    horizon: f64,
    lanes: &[(&LaneCurve, f64, f64)],
    s_of: &dyn Fn(f64) -> f64,
) -> Result<RgbImage> {
    let (wu, hu) = (cfg.width, cfg.height);
    let w = wu as f64;
    let road = rng.random_range(55.0..95.0);
    let sky = [
        rng.random_range(140.0..180.0),
        rng.random_range(160.0..190.0),
        rng.random_range(180.0..215.0),
    ];
    let paint = rng.random_range(190.0..240.0);
    let mut buf = vec![[0f64; 3]; wu * hu];
    for y in 0..hu {
        let base = if (y as f64) < horizon {
            sky
        } else {
            let t = (y as f64 - horizon) / (cfg.height as f64 - horizon);
            let g = road * (0.85 + 0.3 * t);
            [g, g, g * 1.02]
        };
        for x in 0..wu {
            buf[y * wu + x] = base;
        }
    }
    let lane_px = 0.035 * w;
    for (curve, y_top, y_bottom) in lanes {
        let (y0, y1) = (y_top.floor().max(0.0) as usize, (y_bottom.ceil() as usize).min(hu - 1));
        for y in y0..=y1 {
            let s = s_of(y as f64);
            let cx = curve.x(s, w);
            let half = 0.5 * lane_px * (1.0 - 0.8 * s).max(0.15);
            let lo = ((cx - half - 1.0).floor().max(0.0)) as usize;
            let hi = ((cx + half + 1.0).ceil().min(w - 1.0)).max(0.0) as usize;
            for x in lo..=hi {
                let d = (x as f64 + 0.5 - (cx + 0.5)).abs();
                let alpha = (half + 0.5 - d).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    let px = &mut buf[y * wu + x];
                    for ch in px.iter_mut() {
                        *ch = *ch * (1.0 - alpha) + paint * alpha;
                    }
                }
            }
        }
    }
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).map_err(|e| Error::Config(e.to_string()))?;
    let mut img = RgbImage::new(wu as u32, hu as u32);
    for (i, px) in buf.iter().enumerate() {
        let mut out = [0u8; 3];
        for ch in 0..3 {
            let n = if cfg.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            out[ch] = (px[ch] + n).round().clamp(0.0, 255.0) as u8;
        }
        img.put_pixel((i % wu) as u32, (i / wu) as u32, Rgb(out));
    }
    Ok(img)
}

/// Writes frames as `<id>.ppm` plus `<id>.lines.txt`, and a `list.txt` of image names.
pub fn write_synthetic_dataset(frames: &[AnnotatedFrame], dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut list = String::new();
    for f in frames {
        let img = f
            .image
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{}: frame has no image", f.source_id)))?;
        let name = format!("{}.ppm", f.source_id);
        let path = dir.join(&name);
        write_ppm(&path, img)?;
        let ann = culane_annotation_path(&path);
        std::fs::write(&ann, write_culane_lines(&f.lanes)).map_err(|e| Error::io(ann.display().to_string(), e))?;
        let _ = writeln!(list, "{name}");
    }
    let list_path = dir.join("list.txt");
    std::fs::write(&list_path, list).map_err(|e| Error::io(list_path.display().to_string(), e))?;
    Ok(list_path)
}

/// Maps original-image pixels to model-input pixels: `u = (x - offset_x) * sx`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordTransform {
    pub sx: f64,
    pub sy: f64,
    pub offset_x: f64,
    pub offset_y: f64,
    pub original_width: usize,
    pub original_height: usize,
}

impl CoordTransform {
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            sx: 1.0,
            sy: 1.0,
            offset_x: 0.0,
            offset_y: 0.0,
            original_width: width,
            original_height: height,
        }
    }

    /// Plain resize from `(width, height)` to `(target_w, target_h)`.
    pub fn resize(width: usize, height: usize, target_w: usize, target_h: usize) -> Result<Self> {
        if width == 0 || height == 0 || target_w == 0 || target_h == 0 {
            return Err(Error::Geometry(format!(
                "degenerate resize {width}x{height} -> {target_w}x{target_h}"
            )));
        }
        Ok(Self {
            sx: target_w as f64 / width as f64,
            sy: target_h as f64 / height as f64,
            offset_x: 0.0,
            offset_y: 0.0,
            original_width: width,
            original_height: height,
        })
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.offset_x) * self.sx, (y - self.offset_y) * self.sy)
    }

    pub fn invert(&self, u: f64, v: f64) -> (f64, f64) {
        (u / self.sx + self.offset_x, v / self.sy + self.offset_y)
    }
}

/// Resizes the frame to `(height, width)` and maps pixels to `[0, 1] - 0.5`.
/// Returns the `[1, 3, H, W]` input and the coordinate transform.
pub fn preprocess_frame(frame: &AnnotatedFrame, geometry: (usize, usize)) -> Result<(Tensor, CoordTransform)> {
    let (th, tw) = geometry;
    let img = frame
        .image
        .as_ref()
        .ok_or_else(|| Error::Config(format!("{}: image not loaded", frame.source_id)))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let transform = CoordTransform::resize(w, h, tw, th)?;
    let resized;
    let src = if (w, h) == (tw, th) {
        img
    } else {
        resized = imageops::resize(img, tw as u32, th as u32, imageops::FilterType::Triangle);
        &resized
    };
    let plane = th * tw;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in src.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * plane + i] = px.0[ch] as f32 / 255.0 - 0.5;
        }
    }
    Ok((Tensor::new(&[1, 3, th, tw], data)?, transform))
}

/// Gaussian spread of heatmap targets, in heatmap cells.
pub const HEATMAP_SIGMA: f64 = 2.0;

/// Row-wise supervision for one lane.
#[derive(Clone, Debug, PartialEq)]
pub struct LaneTarget {
    /// Heatmap cell `(row, col)` of the lane's bottom-most point.
    pub anchor: (usize, usize),
    /// Target column per shape-grid row, `None` outside the lane.
    pub columns: Vec<Option<usize>>,
    /// 1 for rows spanned by the lane, else 0.
    pub range: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameTargets {
    /// `[H/16, W/16]` Gaussian heatmap, max-combined across lanes.
    pub heatmap: Tensor,
    pub lanes: Vec<LaneTarget>,
    /// Bump spread the heatmap was rendered with.
    pub sigma: f64,
}

/// Targets for lanes given in model-input pixels, for an input of `(height, width)`.
///
/// Lanes with no shape-grid row inside their span are skipped; a lane whose
/// anchor cell is already taken by an earlier lane keeps only its heatmap bump.
pub fn build_targets(lanes: &[LanePolyline], geometry: (usize, usize), sigma: f64) -> Result<FrameTargets> {
    let (h, w) = geometry;
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("heatmap sigma must be positive, got {sigma}")));
    }
    if h % PROPOSAL_STRIDE != 0 || w % PROPOSAL_STRIDE != 0 || h == 0 || w == 0 {
        return Err(Error::Geometry(format!("geometry {h}x{w} is not a multiple of {PROPOSAL_STRIDE}")));
    }
    let (h16, w16) = (h / PROPOSAL_STRIDE, w / PROPOSAL_STRIDE);
    let (h4, w4) = (h / SHAPE_STRIDE, w / SHAPE_STRIDE);
    let mut heat = vec![0f32; h16 * w16];
    let mut targets: Vec<LaneTarget> = Vec::new();
    for lane in lanes {
        let inside = lane
            .points
            .iter()
            .any(|&(x, y)| (0.0..=w as f64).contains(&x) && (0.0..=h as f64).contains(&y));
        if !inside {
            return Err(Error::Geometry("lane lies entirely outside the image".into()));
        }
        let mut columns = vec![None; h4];
        let mut range = vec![0f32; h4];
        for (r, (col, rng)) in columns.iter_mut().zip(range.iter_mut()).enumerate() {
            if let Some(x) = lane.x_at(shape_cell_center(r as f64)) {
                let c = ((x - shape_cell_center(0.0)) / SHAPE_STRIDE as f64).round();
                *col = Some(c.clamp(0.0, (w4 - 1) as f64) as usize);
                *rng = 1.0;
            }
        }
        if columns.iter().all(Option::is_none) {
            warn!("lane spans no feature row; skipped");
            continue;
        }
        let (bx, by) = lane.bottom_point();
        let cell = |v: f64, n: usize| ((v / PROPOSAL_STRIDE as f64).floor().max(0.0) as usize).min(n - 1);
        let anchor = (cell(by, h16), cell(bx, w16));
        for r in 0..h16 {
            for c in 0..w16 {
                let d2 = (r as f64 - anchor.0 as f64).powi(2) + (c as f64 - anchor.1 as f64).powi(2);
                let g = (-d2 / (2.0 * sigma * sigma)).exp() as f32;
                let v = &mut heat[r * w16 + c];
                *v = v.max(g);
            }
        }
        if targets.iter().any(|t| t.anchor == anchor) {
            warn!("two lanes share anchor cell {anchor:?}; keeping the first");
            continue;
        }
        targets.push(LaneTarget { anchor, columns, range });
    }
    Ok(FrameTargets {
        heatmap: Tensor::new(&[h16, w16], heat)?,
        lanes: targets,
        sigma,
    })
}

/// A frame ready for training or evaluation.
#[derive(Clone, Debug)]
pub struct PreparedFrame {
    pub input: Tensor,
    pub transform: CoordTransform,
    pub targets: FrameTargets,
    /// Lanes in model-input pixels.
    pub input_lanes: Vec<LanePolyline>,
    /// Ground truth in original-image pixels.
    pub gt_lanes: Vec<LanePolyline>,
    pub category: String,
}

/// Preprocesses a frame and builds its targets.
pub fn prepare_frame(frame: &AnnotatedFrame, geometry: (usize, usize), sigma: f64) -> Result<PreparedFrame> {
    let (input, transform) = preprocess_frame(frame, geometry)?;
    let scaled: Vec<LanePolyline> = frame.lanes.iter().map(|l| l.map(|x, y| transform.apply(x, y))).collect();
    let targets = build_targets(&scaled, geometry, sigma)?;
    Ok(PreparedFrame {
        input,
        transform,
        targets,
        input_lanes: scaled,
        gt_lanes: frame.lanes.clone(),
        category: frame.category.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn culane_basic_and_odd() {
        let lanes = parse_culane_lines("1.0 2.0 3.0 4.0\n", "t").unwrap();
        assert_eq!(lanes[0].points, vec![(1.0, 2.0), (3.0, 4.0)]);
        assert!(matches!(
            parse_culane_lines("1.0 2.0 3.0", "t"),
            Err(ParseError::OddTokenCount { count: 3, line: 1, .. })
        ));
        assert!(matches!(
            parse_culane_lines("1.0 x", "t"),
            Err(ParseError::BadNumber { .. })
        ));
        assert!(parse_culane_lines("1.0 2.0\n", "t").unwrap().is_empty());
    }

    #[test]
    fn curvelanes_basic() {
        let l = parse_curvelanes_str(r#"{"Lines":[[{"x":"10.0","y":"20.0"},{"x":"11.0","y":"30.0"}]]}"#, "c").unwrap();
        assert_eq!(l[0].points, vec![(10.0, 20.0), (11.0, 30.0)]);
        assert!(parse_curvelanes_str(r#"{"Lines":[]}"#, "c").unwrap().is_empty());
        assert!(matches!(
            parse_curvelanes_str(r#"{"lines":[]}"#, "c"),
            Err(ParseError::MissingKey { .. })
        ));
    }

    #[test]
    fn tusimple_absent_marker() {
        let r = parse_tusimple_str(
            r#"{"lanes":[[-2,-2,50,60],[-2,-2,-2,-2]],"h_samples":[10,20,30,40],"raw_file":"a.jpg"}"#,
            "t",
        )
        .unwrap();
        let p = r[0].polylines();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].points, vec![(50.0, 30.0), (60.0, 40.0)]);
    }

    #[test]
    fn transform_roundtrip_and_halving() {
        let t = CoordTransform::resize(512, 256, 256, 128).unwrap();
        assert_eq!(t.apply(100.0, 50.0), (50.0, 25.0));
        let (x, y) = t.invert(t.apply(123.4, 56.7).0, t.apply(123.4, 56.7).1);
        assert!((x - 123.4).abs() < 1e-9 && (y - 56.7).abs() < 1e-9);
        assert!(CoordTransform::resize(0, 1, 1, 1).is_err());
    }

    #[test]
    fn vertical_lane_targets() {
        let (h, w) = (64, 32);
        let lane = LanePolyline::new(vec![(16.0, 10.0), (16.0, 63.0)]).unwrap();
        let t = build_targets(&[lane], (h, w), HEATMAP_SIGMA).unwrap();
        let lt = &t.lanes[0];
        for (r, c) in lt.columns.iter().enumerate() {
            if lt.range[r] == 1.0 {
                assert_eq!(*c, Some(4));
            } else {
                assert!(c.is_none());
            }
        }
        assert_eq!(lt.range[0], 0.0);
        assert_eq!(lt.anchor, (3, 1));
        assert_eq!(t.heatmap.data()[3 * 2 + 1], 1.0);
    }

    #[test]
    fn culane_categories() {
        assert_eq!(culane_category(Path::new("list/test3_shadow.txt")), "shadow");
        assert_eq!(culane_category(Path::new("list/train_gt.txt")), "none");
    }

    #[test]
    fn curvelanes_label_path() {
        assert_eq!(
            curvelanes_annotation_path(Path::new("train/images/a.jpg")),
            PathBuf::from("train/labels/a.lines.json")
        );
    }
}
