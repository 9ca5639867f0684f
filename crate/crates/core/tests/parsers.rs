mod common;

use common::fixture;
use erfcond_core::data::*;
use erfcond_core::{Error, ParseError};
use proptest::prelude::*;

fn read(rel: &str) -> String {
    std::fs::read_to_string(fixture(rel)).unwrap()
}

#[test]
fn culane_fixture_matches_hand_values() {
    let frames = parse_culane(&fixture("culane/list/test3_shadow.txt"), &fixture("culane")).unwrap();
    assert_eq!(frames.len(), 2);
    assert_eq!(frames[0].source_id, "driver_100_30frame/05251517_0433.MP4/00000.jpg");
    assert_eq!(frames[0].category, "shadow");
    assert_eq!(frames[0].size, CULANE_SIZE);
    assert_eq!(
        frames[0].lanes[0].points,
        vec![(532.989, 590.0), (561.449, 580.0), (589.909, 570.0), (618.369, 560.0)]
    );
    assert_eq!(
        frames[0].lanes[1].points,
        vec![(1019.84, 590.0), (995.05, 580.0), (970.26, 570.0)]
    );
    assert_eq!(frames[1].lanes.len(), 1);
    assert_eq!(frames[1].lanes[0].points, vec![(1211.5, 590.0), (1180.0, 575.5)]);
    assert!(frames[1]
        .image_path
        .as_ref()
        .unwrap()
        .ends_with("driver_100_30frame/05251517_0433.MP4/00030.jpg"));
}

#[test]
fn curvelanes_fixture_accepts_strings_and_numbers() {
    let frames = parse_curvelanes(&fixture("curvelanes/valid.txt"), &fixture("curvelanes")).unwrap();
    assert_eq!(frames.len(), 1);
    assert_eq!(frames[0].size, CURVELANES_SIZE);
    assert_eq!(frames[0].lanes[0].points, vec![(1022.5, 1439.0), (1110.25, 1300.5)]);
    assert_eq!(
        frames[0].lanes[1].points,
        vec![(1800.0, 1439.0), (1750.0, 1200.0), (1700.5, 1000.0)]
    );
}

#[test]
fn tusimple_fixture_drops_absent_samples() {
    let records = parse_tusimple_str(&read("tusimple/label_data.json"), "t").unwrap();
    assert_eq!(records.len(), 2);
    assert_eq!(records[0].h_samples, vec![240.0, 250.0, 260.0, 270.0]);
    let lanes = records[0].polylines();
    assert_eq!(lanes.len(), 2, "a lane with one visible sample is dropped");
    assert_eq!(lanes[0].points, vec![(632.0, 250.0), (625.0, 260.0), (617.0, 270.0)]);
    assert_eq!(
        lanes[1].points,
        vec![(719.0, 240.0), (734.0, 250.0), (748.0, 260.0), (762.0, 270.0)]
    );
    assert_eq!(records[1].polylines()[0].points, vec![(400.5, 300.0), (390.0, 310.0)]);
    let frames = parse_tusimple(&fixture("tusimple/label_data.json"), &fixture("tusimple")).unwrap();
    assert_eq!(frames[1].source_id, "clips/0313-1/6060/20.jpg");
}

#[test]
fn malformed_culane_reports_line_and_cause() {
    assert_eq!(
        parse_culane_lines(&read("malformed/odd.lines.txt"), "odd"),
        Err(ParseError::OddTokenCount {
            source_id: "odd".into(),
            line: 1,
            count: 3
        })
    );
    assert_eq!(
        parse_culane_lines(&read("malformed/bad_number.lines.txt"), "bad"),
        Err(ParseError::BadNumber {
            source_id: "bad".into(),
            line: 2,
            token: "abc".into()
        })
    );
}

#[test]
fn malformed_curvelanes_reports_key_or_token() {
    assert!(matches!(
        parse_curvelanes_str(&read("malformed/missing_lines.json"), "m"),
        Err(ParseError::MissingKey { key, .. }) if key == "Lines"
    ));
    assert!(matches!(
        parse_curvelanes_str(&read("malformed/bad_number.json"), "m"),
        Err(ParseError::BadNumber { token, .. }) if token == "n/a"
    ));
    assert!(matches!(
        parse_curvelanes_str(&read("malformed/missing_y.json"), "m"),
        Err(ParseError::MissingKey { key, .. }) if key == "y"
    ));
}

#[test]
fn malformed_tusimple_reports_mismatch_and_missing_keys() {
    assert_eq!(
        parse_tusimple_str(&read("malformed/length_mismatch.json"), "m"),
        Err(ParseError::LengthMismatch {
            source_id: "m".into(),
            line: 1,
            lane: 0,
            lane_len: 3,
            samples: 2
        })
    );
    assert!(matches!(
        parse_tusimple_str(&read("malformed/missing_h_samples.json"), "m"),
        Err(ParseError::MissingKey { key, .. }) if key == "h_samples"
    ));
    assert!(matches!(
        parse_tusimple_str(&read("malformed/truncated.json"), "m"),
        Err(ParseError::Malformed { .. })
    ));
}

#[test]
fn missing_annotation_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let list = dir.path().join("list.txt");
    std::fs::write(&list, "nowhere/0001.jpg\n").unwrap();
    assert!(matches!(parse_culane(&list, dir.path()), Err(Error::Io { .. })));
}

fn lanes_strategy() -> impl Strategy<Value = Vec<LanePolyline>> {
    let point = (-100.0f64..3000.0, 0.0f64..1500.0);
    prop::collection::vec(prop::collection::vec(point, 2..12), 0..5)
        .prop_map(|ls| ls.into_iter().map(|p| LanePolyline::new(p).unwrap()).collect())
}

proptest! {
    #[test]
    fn culane_round_trip(lanes in lanes_strategy()) {
        let text = write_culane_lines(&lanes);
        prop_assert_eq!(parse_culane_lines(&text, "p").unwrap(), lanes);
    }

    #[test]
    fn curvelanes_round_trip(lanes in lanes_strategy()) {
        let text = write_curvelanes(&lanes);
        prop_assert_eq!(parse_curvelanes_str(&text, "p").unwrap(), lanes);
    }

    #[test]
    fn tusimple_round_trip(rows in 2usize..20, n in 0usize..4, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let h_samples: Vec<f64> = (0..rows).map(|i| 160.0 + 10.0 * i as f64).collect();
        let lanes: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..rows).map(|_| if rng.random_bool(0.2) { TUSIMPLE_ABSENT } else { rng.random_range(0..1280) as f64 }).collect())
            .collect();
        let rec = TuSimpleRecord { lanes, h_samples, raw_file: "clips/x/1.jpg".into() };
        let back = parse_tusimple_str(&write_tusimple(std::slice::from_ref(&rec)), "p").unwrap();
        prop_assert_eq!(back, vec![rec]);
    }
}
