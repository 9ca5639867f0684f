use erfcond_core::harness::*;
use erfcond_core::Error;

fn tiny(seed: u64) -> ExperimentConfig {
    let mut config = ExperimentConfig::toy(seed, &[SyntheticPreset::Straight, SyntheticPreset::Curved]);
    config.training.iterations = 3;
    config.training.batch_size = 2;
    for d in &mut config.domains {
        d.train = DataSource::Synthetic {
            preset: if d.name == "straight" { SyntheticPreset::Straight } else { SyntheticPreset::Curved },
            frames: 6,
            curvature: None,
        };
        d.test = None;
    }
    config
}

const MINIMAL: &str = r#"{
  "seed": 4,
  "model": { "backbone": { "variant": "erf_modified" } },
  "domains": [ { "name": "s", "train": { "type": "synthetic", "preset": "straight" } } ]
}"#;

#[test]
fn minimal_config_gets_defaults() {
    let c = parse_config(MINIMAL, std::path::Path::new(".")).unwrap();
    assert_eq!(c.seed, 4);
    assert_eq!(c.model.backbone.input_geometry, (320, 800));
    assert_eq!(c.model.backbone.width_multiplier, 1.0);
    assert_eq!(c.training.iterations, 500);
    assert_eq!(c.evaluation.lane_width, 30.0);
    assert_eq!(c.evaluation.iou_threshold, 0.5);
    assert_eq!(c.domains[0].split_ratio, 0.7);
    assert!(matches!(c.domains[0].train, DataSource::Synthetic { frames: 200, .. }));
}

#[test]
fn misspelled_keys_are_named() {
    let cases = [
        ("\"seed\": 4,", "\"seed\": 4, \"sede\": 1,", "sede"),
        ("\"preset\"", "\"presett\"", "presett"),
        ("\"variant\"", "\"widht\": 1, \"variant\"", "widht"),
    ];
    for (from, to, key) in cases {
        let text = MINIMAL.replacen(from, to, 1);
        let err = parse_config(&text, std::path::Path::new(".")).unwrap_err().to_string();
        assert!(err.contains("unknown field") && err.contains(key), "{err}");
    }
}

#[test]
fn config_round_trips_through_json() {
    let c = ExperimentConfig::toy(9, &[SyntheticPreset::Straight, SyntheticPreset::Mild]);
    let text = serde_json::to_string_pretty(&c).unwrap();
    assert_eq!(parse_config(&text, std::path::Path::new(".")).unwrap(), c);
    assert_eq!(c.digest(), parse_config(&text, std::path::Path::new(".")).unwrap().digest());
}

#[test]
fn missing_dataset_path_fails_before_training() {
    let text = MINIMAL.replace(
        r#"{ "type": "synthetic", "preset": "straight" }"#,
        r#"{ "type": "tusimple", "labels": "absent/label_data.json" }"#,
    );
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, text).unwrap();
    assert!(matches!(validate_config(&path), Err(Error::MissingPath(p)) if p.ends_with("absent/label_data.json")));
}

#[test]
fn seeds_are_label_dependent() {
    assert_eq!(derive_seed(1, &["a", "b"]), derive_seed(1, &["a", "b"]));
    assert_ne!(derive_seed(1, &["a", "b"]), derive_seed(2, &["a", "b"]));
    assert_ne!(derive_seed(1, &["ab"]), derive_seed(1, &["a", "b"]));
}

#[test]
fn two_domains_give_four_cells_and_match_standalone_runs() {
    let config = tiny(21);
    let dir = tempfile::tempdir().unwrap();
    let matrix = run_cross_matrix(&config, dir.path()).unwrap();
    let keys: Vec<(&str, &str)> = matrix.cells.iter().map(|c| (c.train.as_str(), c.test.as_str())).collect();
    assert_eq!(keys, [("curved", "curved"), ("curved", "straight"), ("straight", "curved"), ("straight", "straight")]);
    assert_eq!(matrix.failures(), 0);

    let again = run_cross_matrix(&config, tempfile::tempdir().unwrap().path()).unwrap();
    assert_eq!(again, matrix);

    for name in ["straight", "curved"] {
        let run = run_experiment(&config, name, dir.path()).unwrap();
        let cell = matrix.cell(name, name).unwrap();
        assert_eq!(cell.outcome, CellOutcome::Ok(run.metrics.clone()));
        assert_eq!(run.loss_trace.len(), 3);
        assert!(run.metrics.f1.is_finite());
        assert!(dir.path().join(format!("{name}.report.json")).exists());
    }

    let csv = emit_report(&matrix.cells, ReportFormat::Csv);
    let md = emit_report(&matrix.cells, ReportFormat::Markdown);
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(md.lines().count(), 6);
    assert_eq!(csv, emit_report(&matrix.cells, ReportFormat::Csv));
    let numbers = |s: &str| -> Vec<String> {
        s.split(|c: char| c == ',' || c == '|' || c.is_whitespace())
            .filter(|t| t.parse::<f64>().is_ok() && t.contains('.'))
            .map(str::to_string)
            .collect()
    };
    assert_eq!(numbers(&csv), numbers(&md));
    assert_eq!(numbers(&csv).len(), 12);
}

#[test]
fn unloadable_domain_fails_its_cells_only() {
    let mut config = tiny(5);
    config.domains[1].train = DataSource::Synthetic {
        preset: SyntheticPreset::Curved,
        frames: 0,
        curvature: None,
    };
    let matrix = run_cross_matrix(&config, tempfile::tempdir().unwrap().path()).unwrap();
    assert_eq!(matrix.cells.len(), 4);
    assert_eq!(matrix.failures(), 3);
    assert!(matches!(matrix.cell("straight", "straight").unwrap().outcome, CellOutcome::Ok(_)));
    let csv = emit_report(&matrix.cells, ReportFormat::Csv);
    assert_eq!(csv.lines().filter(|l| l.contains("failed: ")).count(), 3);
}

#[test]
fn single_domain_matrix_is_rejected() {
    let mut config = tiny(5);
    config.domains.truncate(1);
    assert!(matches!(run_cross_matrix(&config, tempfile::tempdir().unwrap().path()), Err(Error::Config(_))));
}

#[test]
fn unknown_report_format_is_rejected() {
    assert_eq!("csv".parse::<ReportFormat>().unwrap(), ReportFormat::Csv);
    assert_eq!("markdown".parse::<ReportFormat>().unwrap(), ReportFormat::Markdown);
    assert!(matches!("xlsx".parse::<ReportFormat>(), Err(Error::UnsupportedFormat(f)) if f == "xlsx"));
}
