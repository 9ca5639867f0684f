use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use erfcond_core::backbone::{audit_parameters, build_backbone, compare_backbones, layer_census, BackboneConfig};
use erfcond_core::data::{generate_synthetic, parse_culane, parse_curvelanes, parse_tusimple, write_synthetic_dataset, AnnotatedFrame};
use erfcond_core::harness::{
    emit_report, evaluate_model, load_domain, run_cross_matrix, run_experiment, validate_config, CellOutcome, ExperimentConfig,
    MatrixCell, ReportFormat, SyntheticPreset,
};
use erfcond_core::head::LaneModel;
use erfcond_core::train::{read_checkpoint, restore_model};
use log::info;

#[derive(Parser, Debug)]
#[command(name = "erfcond", version, about = "Lane detection experiments: training, evaluation and cross-dataset matrices")]
struct Cli {
    /// JSON experiment config. Without one, the toy synthetic setup is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for checkpoints, reports and generated data.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Table format: csv or markdown.
    #[arg(long, global = true, default_value = "markdown")]
    format: ReportFormat,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on one domain (or each in turn) and evaluate on its test split.
    Train {
        #[arg(long)]
        domain: Option<String>,
    },
    /// Evaluate a checkpoint on a domain's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        domain: String,
    },
    /// Train on every domain and test on every domain.
    CrossMatrix,
    /// Per-layer parameter counts of the configured backbone.
    AuditParams {
        /// Also compare against the ResNet backbone.
        #[arg(long)]
        compare: bool,
    },
    /// Write a synthetic dataset in CULane layout.
    SynthGen {
        #[arg(long, value_enum, default_value = "straight")]
        preset: Preset,
        #[arg(long, default_value_t = 200)]
        frames: usize,
    },
    /// Parse annotations and report counts, without loading images.
    ParseCheck {
        #[arg(long, value_enum)]
        dataset: DatasetKind,
        /// List file (CULane, CurveLanes) or label file (TuSimple).
        path: PathBuf,
        /// Dataset root; defaults to the directory holding `path`.
        #[arg(long)]
        root: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Straight,
    Mild,
    Curved,
}

impl From<Preset> for SyntheticPreset {
    fn from(p: Preset) -> Self {
        match p {
            Preset::Straight => Self::Straight,
            Preset::Mild => Self::Mild,
            Preset::Curved => Self::Curved,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DatasetKind {
    Culane,
    Curvelanes,
    Tusimple,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => validate_config(path).with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::toy(0, &[SyntheticPreset::Straight, SyntheticPreset::Curved]),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn write_table(out: &Path, stem: &str, format: ReportFormat, text: &str) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(format!("{stem}.{}", format.extension()));
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    print!("{text}");
    info!("wrote {}", path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Train { domain } => {
            let config = load_config(cli)?;
            let names: Vec<String> = match domain {
                Some(d) => vec![d.clone()],
                None => config.domains.iter().map(|d| d.name.clone()).collect(),
            };
            let mut cells = Vec::new();
            for name in &names {
                let report = run_experiment(&config, name, &cli.out).with_context(|| format!("training on {name}"))?;
                info!("{name}: F1 {:.4} in {:.1} s", report.metrics.f1, report.wall_clock_secs);
                cells.push(report.as_cell());
            }
            write_table(&cli.out, "train", cli.format, &emit_report(&cells, cli.format))?;
            Ok(true)
        }
        Command::Eval { checkpoint, domain } => {
            let config = load_config(cli)?;
            let dc = config.domain(domain)?;
            let mut model = LaneModel::new(&config.model, 0)?;
            let tensors = read_checkpoint(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
            restore_model(&mut model, tensors).context("checkpoint does not fit the configured model")?;
            let data = load_domain(&config, dc)?;
            let metrics = evaluate_model(&model, &data.test, &config.evaluation)?;
            let train = checkpoint
                .file_stem()
                .map_or_else(|| "checkpoint".to_string(), |s| s.to_string_lossy().into_owned());
            let cell = MatrixCell {
                train,
                test: domain.clone(),
                outcome: CellOutcome::Ok(metrics),
            };
            write_table(&cli.out, "eval", cli.format, &emit_report(&[cell], cli.format))?;
            Ok(true)
        }
        Command::CrossMatrix => {
            let config = load_config(cli)?;
            let matrix = run_cross_matrix(&config, &cli.out)?;
            write_table(&cli.out, "matrix", cli.format, &emit_report(&matrix.cells, cli.format))?;
            let json = cli.out.join("matrix.json");
            fs::write(&json, serde_json::to_string_pretty(&matrix)?).with_context(|| format!("writing {}", json.display()))?;
            let failed = matrix.failures();
            if failed > 0 {
                eprintln!("{failed} of {} cells failed", matrix.cells.len());
            }
            Ok(failed == 0)
        }
        Command::AuditParams { compare } => {
            let backbone = match &cli.config {
                Some(_) => load_config(cli)?.model.backbone,
                None => BackboneConfig::erf_modified(),
            };
            let graph = build_backbone(&backbone)?.graph;
            let audit = audit_parameters(&graph);
            let mut text = match cli.format {
                ReportFormat::Csv => audit.to_csv(),
                ReportFormat::Markdown => audit.to_markdown(),
            };
            if *compare {
                let cmp = compare_backbones(&backbone, &BackboneConfig::resnet())?;
                text.push('\n');
                text.push_str(&match cli.format {
                    ReportFormat::Csv => cmp.to_csv(),
                    ReportFormat::Markdown => cmp.to_markdown(),
                });
            }
            info!("layer census: {:?}", layer_census(&graph));
            write_table(&cli.out, "params", cli.format, &text)?;
            Ok(true)
        }
        Command::SynthGen { preset, frames } => {
            let preset = SyntheticPreset::from(*preset);
            let generated = generate_synthetic(&preset.config(*frames, cli.seed.unwrap_or(0)))?;
            let list = write_synthetic_dataset(&generated, &cli.out)?;
            println!("{}", list.display());
            Ok(true)
        }
        Command::ParseCheck { dataset, path, root } => {
            if !path.exists() {
                bail!("path does not exist: {}", path.display());
            }
            let root = root
                .clone()
                .unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());
            let frames: Vec<AnnotatedFrame> = match dataset {
                DatasetKind::Culane => parse_culane(path, &root)?,
                DatasetKind::Curvelanes => parse_curvelanes(path, &root)?,
                DatasetKind::Tusimple => parse_tusimple(path, &root)?,
            };
            let lanes: usize = frames.iter().map(|f| f.lanes.len()).sum();
            let points: usize = frames.iter().flat_map(|f| &f.lanes).map(|l| l.points.len()).sum();
            println!("{} frames, {lanes} lanes, {points} points", frames.len());
            Ok(true)
        }
    }
}

/// The error and its causes, skipping causes already quoted by their parent.
fn error_chain(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if parts.last().is_none_or(|prev| !prev.contains(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            ExitCode::from(2)
        }
    }
}
