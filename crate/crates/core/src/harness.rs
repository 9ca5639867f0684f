//! Experiment configuration, training and evaluation runs, the cross-domain
//! matrix and report tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::data::{
    generate_synthetic, parse_culane, parse_curvelanes, parse_tusimple, prepare_frame, AnnotatedFrame, LanePolyline,
    PreparedFrame, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::head::{LaneModel, ModelConfig};
use crate::metrics::{evaluate, sample_lane, tusimple_accuracy, EvalReport, FrameEval, IOU_THRESHOLD, LANE_WIDTH};
use crate::train::{encode_model, LossBundle, TrainConfig, Trainer, TrainingSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticPreset {
    Straight,
    Mild,
    Curved,
}

impl SyntheticPreset {
    pub fn config(self, frames: usize, seed: u64) -> SyntheticConfig {
        match self {
            Self::Straight => SyntheticConfig::straight(frames, seed),
            Self::Mild => SyntheticConfig::mild(frames, seed),
            Self::Curved => SyntheticConfig::curved(frames, seed),
        }
    }
}

fn default_frames() -> usize {
    200
}

/// Where a domain's frames come from. Relative paths are resolved against
/// the config file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        preset: SyntheticPreset,
        #[serde(default = "default_frames")]
        frames: usize,
        /// Overrides the preset's curvature range.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        curvature: Option<(f64, f64)>,
    },
    Culane {
        list: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        root: Option<PathBuf>,
    },
    Curvelanes {
        list: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        root: Option<PathBuf>,
    },
    Tusimple {
        labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        root: Option<PathBuf>,
    },
}

impl DataSource {
    fn files_mut(&mut self) -> Vec<&mut PathBuf> {
        match self {
            Self::Synthetic { .. } => Vec::new(),
            Self::Culane { list, root } | Self::Curvelanes { list, root } | Self::Tusimple { labels: list, root } => {
                let mut v = vec![list];
                v.extend(root.as_mut());
                v
            }
        }
    }

    fn resolve(&mut self, base: &Path) -> Result<()> {
        for p in self.files_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if !p.exists() {
                return Err(Error::MissingPath(p.clone()));
            }
        }
        Ok(())
    }

    /// Reads or generates the frames, images included.
    pub fn load(&self, seed: u64) -> Result<Vec<AnnotatedFrame>> {
        let root_of = |list: &Path, root: &Option<PathBuf>| {
            root.clone()
                .unwrap_or_else(|| list.parent().map(Path::to_path_buf).unwrap_or_default())
        };
        let mut frames = match self {
            Self::Synthetic {
                preset,
                frames,
                curvature,
            } => {
                let mut cfg = preset.config(*frames, seed);
                if let Some(c) = curvature {
                    cfg.curvature = *c;
                }
                return generate_synthetic(&cfg);
            }
            Self::Culane { list, root } => parse_culane(list, &root_of(list, root))?,
            Self::Curvelanes { list, root } => parse_curvelanes(list, &root_of(list, root))?,
            Self::Tusimple { labels, root } => parse_tusimple(labels, &root_of(labels, root))?,
        };
        for f in &mut frames {
            f.load_image()?;
        }
        Ok(frames)
    }
}

fn default_split() -> f64 {
    0.7
}

/// One dataset domain. Without a `test` source the `train` source is split
/// by `split_ratio` into train and test parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub name: String,
    pub train: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<DataSource>,
    #[serde(default = "default_split")]
    pub split_ratio: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    #[default]
    Culane,
    Tusimple,
}

fn default_lane_width() -> f64 {
    LANE_WIDTH
}
fn default_iou() -> f64 {
    IOU_THRESHOLD
}
fn default_px() -> f64 {
    20.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default)]
    pub protocol: Protocol,
    #[serde(default = "default_lane_width")]
    pub lane_width: f64,
    #[serde(default = "default_iou")]
    pub iou_threshold: f64,
    /// Point tolerance of the TuSimple protocol, in pixels.
    #[serde(default = "default_px")]
    pub tusimple_threshold_px: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::default(),
            lane_width: default_lane_width(),
            iou_threshold: default_iou(),
            tusimple_threshold_px: default_px(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    pub domains: Vec<DomainConfig>,
}

impl ExperimentConfig {
    /// The small synthetic setup: 256x128 input, width x0.25, 200 frames per preset.
    pub fn toy(seed: u64, presets: &[SyntheticPreset]) -> Self {
        let mut model = ModelConfig {
            backbone: BackboneConfig::erf_modified(),
            head: Default::default(),
            norm: Default::default(),
        };
        model.backbone.width_multiplier = 0.25;
        model.backbone.input_geometry = (256, 128);
        model.head.heatmap_sigma = 1.0;
        let mut training = TrainConfig::default();
        training.optimizer.learning_rate = 4e-3;
        let domains = presets
            .iter()
            .map(|&p| DomainConfig {
                name: serde_json::to_value(p)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default(),
                train: DataSource::Synthetic {
                    preset: p,
                    frames: 200,
                    curvature: None,
                },
                test: Some(DataSource::Synthetic {
                    preset: p,
                    frames: 50,
                    curvature: None,
                }),
                split_ratio: default_split(),
            })
            .collect();
        Self {
            seed,
            model,
            training,
            evaluation: EvaluationConfig::default(),
            domains,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.head.validate()?;
        self.training.validate()?;
        crate::head::LaneNet::build(&self.model)?;
        if self.domains.is_empty() {
            return Err(Error::Config("at least one domain is required".into()));
        }
        for (i, d) in self.domains.iter().enumerate() {
            if d.name.is_empty() {
                return Err(Error::Config(format!("domain {i} has an empty name")));
            }
            if self.domains[..i].iter().any(|o| o.name == d.name) {
                return Err(Error::Config(format!("duplicate domain name {:?}", d.name)));
            }
            if d.test.is_none() && !(d.split_ratio > 0.0 && d.split_ratio < 1.0) {
                return Err(Error::Config(format!(
                    "domain {:?}: split_ratio {} outside (0, 1)",
                    d.name, d.split_ratio
                )));
            }
        }
        let e = &self.evaluation;
        if !(e.iou_threshold > 0.0 && e.iou_threshold <= 1.0) {
            return Err(Error::Config(format!("iou_threshold {} outside (0, 1]", e.iou_threshold)));
        }
        if !(e.lane_width > 0.0) || !(e.tusimple_threshold_px > 0.0) {
            return Err(Error::Config("evaluation widths must be positive".into()));
        }
        Ok(())
    }

    pub fn domain(&self, name: &str) -> Result<&DomainConfig> {
        self.domains
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::Config(format!("no domain named {name:?}")))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parses a config, applies defaults, resolves relative paths against the
/// file's directory and checks that they exist.
pub fn parse_config(text: &str, base: &Path) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = serde_json::from_str(text)?;
    for d in &mut cfg.domains {
        d.train.resolve(base)?;
        if let Some(t) = &mut d.test {
            t.resolve(base)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn validate_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base)
}

/// Mixes a base seed with string labels into an independent stream seed.
pub fn derive_seed(seed: u64, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for l in labels {
        h.update((l.len() as u64).to_le_bytes());
        h.update(l.as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Prepared train and test frames of one domain.
pub struct DomainData {
    pub name: String,
    pub train: Vec<PreparedFrame>,
    pub test: Vec<PreparedFrame>,
}

pub fn load_domain(config: &ExperimentConfig, domain: &DomainConfig) -> Result<DomainData> {
    let geometry = config.model.backbone.input_geometry;
    let sigma = config.model.head.heatmap_sigma;
    let prep = |frames: Vec<AnnotatedFrame>| -> Result<Vec<PreparedFrame>> {
        frames.iter().map(|f| prepare_frame(f, geometry, sigma)).collect()
    };
    let train_frames = domain.train.load(derive_seed(config.seed, &["data", &domain.name, "train"]))?;
    let (train, test) = match &domain.test {
        Some(src) => (
            train_frames,
            src.load(derive_seed(config.seed, &["data", &domain.name, "test"]))?,
        ),
        None => {
            let mut frames = train_frames;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &["split", &domain.name]));
            frames.shuffle(&mut rng);
            let cut = ((frames.len() as f64) * domain.split_ratio).round() as usize;
            let test = frames.split_off(cut.min(frames.len()));
            (frames, test)
        }
    };
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(DomainData {
        name: domain.name.clone(),
        train: prep(train)?,
        test: prep(test)?,
    })
}

/// Trains a fresh model on a domain's training frames. Returns the model and
/// its per-step loss trace.
pub fn train_model(config: &ExperimentConfig, data: &DomainData) -> Result<(LaneModel, Vec<LossBundle>)> {
    let mut model = LaneModel::new(&config.model, derive_seed(config.seed, &["init", &data.name]))?;
    let set = TrainingSet::new(data.train.clone(), config.training.flip_augment)?;
    let mut trainer = Trainer::new(config.training.clone(), derive_seed(config.seed, &["train", &data.name]))?;
    let trace = trainer.train_iterations(&mut model, &set)?;
    Ok((model, trace))
}

/// Scores a model on prepared frames under the configured protocol.
pub fn evaluate_model(model: &LaneModel, frames: &[PreparedFrame], eval: &EvaluationConfig) -> Result<EvalReport> {
    let mut predicted: Vec<Vec<LanePolyline>> = Vec::with_capacity(frames.len());
    for f in frames {
        let lanes = model.predict_lanes(&f.input, &f.transform)?;
        predicted.push(lanes.into_iter().map(|l| LanePolyline::new(l.points)).collect::<Result<_>>()?);
    }
    let mut report = evaluate(
        frames.iter().zip(&predicted).map(|(f, p)| FrameEval {
            predictions: p,
            ground_truth: &f.gt_lanes,
            size: (f.transform.original_width, f.transform.original_height),
            category: &f.category,
        }),
        eval.lane_width,
        eval.iou_threshold,
    )?;
    if eval.protocol == Protocol::Tusimple {
        let (mut sum, mut n) = (0.0, 0usize);
        for (f, p) in frames.iter().zip(&predicted) {
            let mut rows: Vec<f64> = f.gt_lanes.iter().flat_map(|l| l.points.iter().map(|&(_, y)| y)).collect();
            rows.sort_by(f64::total_cmp);
            rows.dedup();
            let gt: Vec<Vec<f64>> = f.gt_lanes.iter().map(|l| sample_lane(l, &rows)).collect();
            let pred: Vec<Vec<f64>> = p.iter().map(|l| sample_lane(l, &rows)).collect();
            sum += tusimple_accuracy(&pred, &gt, &rows, eval.tusimple_threshold_px)?;
            n += 1;
        }
        report.accuracy = Some(if n == 0 { 1.0 } else { sum / n as f64 });
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub domain: String,
    pub config_digest: String,
    pub checkpoint: PathBuf,
    pub metrics: EvalReport,
    pub loss_trace: Vec<f64>,
    pub wall_clock_secs: f64,
    pub seed: u64,
}

/// Trains on `domain`, evaluates on its test frames and writes
/// `<domain>.erfc` and `<domain>.report.json` into `out`.
pub fn run_experiment(config: &ExperimentConfig, domain: &str, out: &Path) -> Result<RunReport> {
    config.validate()?;
    let start = Instant::now();
    let dc = config.domain(domain)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let data = load_domain(config, dc)?;
    info!("{domain}: {} train / {} test frames", data.train.len(), data.test.len());
    let (model, trace) = train_model(config, &data)?;
    let checkpoint = out.join(format!("{domain}.erfc"));
    std::fs::write(&checkpoint, encode_model(&model)?).map_err(|e| Error::io(checkpoint.display().to_string(), e))?;
    let metrics = evaluate_model(&model, &data.test, &config.evaluation)?;
    let report = RunReport {
        domain: domain.to_string(),
        config_digest: config.digest(),
        checkpoint,
        metrics,
        loss_trace: trace.iter().map(|l| l.total).collect(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        seed: config.seed,
    };
    let path = out.join(format!("{domain}.report.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellOutcome {
    Ok(EvalReport),
    Failed { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatrixCell {
    pub train: String,
    pub test: String,
    pub outcome: CellOutcome,
}

/// Every ordered (train, test) pair of domains, sorted by names.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CrossDatasetMatrix {
    pub cells: Vec<MatrixCell>,
}

impl CrossDatasetMatrix {
    pub fn cell(&self, train: &str, test: &str) -> Option<&MatrixCell> {
        self.cells.iter().find(|c| c.train == train && c.test == test)
    }

    pub fn failures(&self) -> usize {
        self.cells
            .iter()
            .filter(|c| matches!(c.outcome, CellOutcome::Failed { .. }))
            .count()
    }
}

/// Trains one model per domain and evaluates it on every domain's test
/// frames. Failures are recorded per cell; checkpoints go to `out`.
pub fn run_cross_matrix(config: &ExperimentConfig, out: &Path) -> Result<CrossDatasetMatrix> {
    config.validate()?;
    if config.domains.len() < 2 {
        return Err(Error::Config("the cross-dataset matrix needs at least two domains".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let data: Vec<std::result::Result<DomainData, String>> = config
        .domains
        .iter()
        .map(|d| load_domain(config, d).map_err(|e| format!("loading {}: {e}", d.name)))
        .collect();
    let mut cells = Vec::new();
    for (dc, train_data) in config.domains.iter().zip(&data) {
        let model = match train_data {
            Ok(td) => train_model(config, td)
                .and_then(|(m, _)| {
                    let path = out.join(format!("{}.erfc", dc.name));
                    std::fs::write(&path, encode_model(&m)?).map_err(|e| Error::io(path.display().to_string(), e))?;
                    Ok(m)
                })
                .map_err(|e| format!("training on {}: {e}", dc.name)),
            Err(e) => Err(e.clone()),
        };
        for (tc, test_data) in config.domains.iter().zip(&data) {
            let outcome = match (&model, test_data) {
                (Ok(m), Ok(td)) => match evaluate_model(m, &td.test, &config.evaluation) {
                    Ok(r) => CellOutcome::Ok(r),
                    Err(e) => CellOutcome::Failed {
                        reason: format!("evaluating on {}: {e}", tc.name),
                    },
                },
                (Err(e), _) | (_, Err(e)) => CellOutcome::Failed { reason: e.clone() },
            };
            if let CellOutcome::Failed { reason } = &outcome {
                warn!("{} -> {}: {reason}", dc.name, tc.name);
            }
            cells.push(MatrixCell {
                train: dc.name.clone(),
                test: tc.name.clone(),
                outcome,
            });
        }
    }
    cells.sort_by(|a, b| (&a.train, &a.test).cmp(&(&b.train, &b.test)));
    Ok(CrossDatasetMatrix { cells })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Markdown => "md",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            other => Err(Error::UnsupportedFormat(other.to_string())),
        }
    }
}

pub const REPORT_COLUMNS: [&str; 6] = [
    "Training Dataset",
    "Testing Dataset",
    "F-1 Score",
    "Precision",
    "Recall",
    "Status",
];

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Renders cells as a table, one row per cell in (train, test) order.
pub fn emit_report(cells: &[MatrixCell], format: ReportFormat) -> String {
    let mut cells: Vec<&MatrixCell> = cells.iter().collect();
    cells.sort_by(|a, b| (&a.train, &a.test).cmp(&(&b.train, &b.test)));
    let rows: Vec<[String; 6]> = cells
        .iter()
        .map(|c| {
            let (f1, p, r, status) = match &c.outcome {
                CellOutcome::Ok(m) => (
                    format!("{:.4}", m.f1),
                    format!("{:.4}", m.precision),
                    format!("{:.4}", m.recall),
                    "ok".to_string(),
                ),
                CellOutcome::Failed { reason } => ("-".into(), "-".into(), "-".into(), format!("failed: {reason}")),
            };
            [c.train.clone(), c.test.clone(), f1, p, r, status]
        })
        .collect();
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            let _ = writeln!(out, "{}", REPORT_COLUMNS.join(","));
            for row in rows {
                let fields: Vec<String> = row.iter().map(|f| csv_field(f)).collect();
                let _ = writeln!(out, "{}", fields.join(","));
            }
        }
        ReportFormat::Markdown => {
            let _ = writeln!(out, "| {} |", REPORT_COLUMNS.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(REPORT_COLUMNS.len()));
            for row in rows {
                let fields: Vec<String> = row.iter().map(|f| f.replace('|', "\\|")).collect();
                let _ = writeln!(out, "| {} |", fields.join(" | "));
            }
        }
    }
    out
}

impl RunReport {
    /// The run as a single diagonal cell.
    pub fn as_cell(&self) -> MatrixCell {
        MatrixCell {
            train: self.domain.clone(),
            test: self.domain.clone(),
            outcome: CellOutcome::Ok(self.metrics.clone()),
        }
    }
}
