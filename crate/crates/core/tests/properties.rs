mod common;

use erfcond_core::blocks::factorization_savings;
use erfcond_core::data::{generate_synthetic, CoordTransform, LanePolyline, SyntheticConfig};
use erfcond_core::head::{generate_proposals, row_expectations};
use erfcond_core::metrics::*;
use erfcond_core::tensor::{conv2d, ConvGeometry};
use erfcond_core::train::{checkpoint_header_bytes, decode_checkpoint, encode_checkpoint};
use erfcond_core::Tensor;
use proptest::prelude::*;

const GRID: usize = 8;

/// Up to `n` masks on an 8x8 grid with no pixel in two masks.
fn disjoint_masks(n: usize) -> impl Strategy<Value = Vec<Mask>> {
    prop::collection::vec(0..=n, GRID * GRID).prop_map(move |owner| {
        let mut masks: Vec<Mask> = (0..n).map(|_| Mask::new(GRID, GRID)).collect();
        for (i, &o) in owner.iter().enumerate() {
            if o < n {
                masks[o].set(i % GRID, i / GRID);
            }
        }
        masks.retain(|m| m.count() > 0);
        masks
    })
}

/// Largest number of above-threshold pairs over all one-to-one assignments.
fn brute_force_tp(ious: &[Vec<f64>], n_gt: usize, threshold: f64) -> usize {
    fn go(p: usize, ious: &[Vec<f64>], used: &mut Vec<bool>, thr: f64) -> usize {
        if p == ious.len() {
            return 0;
        }
        let mut best = go(p + 1, ious, used, thr);
        for g in 0..used.len() {
            if !used[g] && ious[p][g] >= thr {
                used[g] = true;
                best = best.max(1 + go(p + 1, ious, used, thr));
                used[g] = false;
            }
        }
        best
    }
    go(0, ious, &mut vec![false; n_gt], threshold)
}

fn naive_conv(x: &Tensor, w: &Tensor, pad: (usize, usize)) -> Tensor {
    let [n, c, h, wd] = x.dims4().unwrap();
    let [o, _, kh, kw] = w.dims4().unwrap();
    let (oh, ow) = (h + 2 * pad.0 - kh + 1, wd + 2 * pad.1 - kw + 1);
    Tensor::from_fn(&[n, o, oh, ow], |idx| {
        let (b, rest) = (idx / (o * oh * ow), idx % (o * oh * ow));
        let (oc, rest) = (rest / (oh * ow), rest % (oh * ow));
        let (y, xx) = (rest / ow, rest % ow);
        let mut acc = 0f64;
        for ic in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let (iy, ix) = ((y + ky) as isize - pad.0 as isize, (xx + kx) as isize - pad.1 as isize);
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                        continue;
                    }
                    let xv = x.data()[((b * c + ic) * h + iy as usize) * wd + ix as usize] as f64;
                    acc += xv * w.data()[((oc * c + ic) * kh + ky) * kw + kx] as f64;
                }
            }
        }
        acc as f32
    })
}

proptest! {
    #[test]
    fn scores_are_bounded(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50) {
        let s = prf1(tp, fp, fn_);
        for v in [s.precision, s.recall, s.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn prf1_matches_definition(tp in 1usize..50, fp in 0usize..50, fn_ in 0usize..50) {
        let s = prf1(tp, fp, fn_);
        let p = tp as f64 / (tp + fp) as f64;
        let r = tp as f64 / (tp + fn_) as f64;
        prop_assert!((s.f1 - 2.0 * p * r / (p + r)).abs() < 1e-12);
    }

    #[test]
    fn swapping_sets_swaps_precision_and_recall(
        preds in disjoint_masks(4),
        gts in disjoint_masks(4),
        thr in 0.51f64..1.0,
    ) {
        let a = match_lanes(&preds, &gts, thr).unwrap();
        let b = match_lanes(&gts, &preds, thr).unwrap();
        let (sa, sb) = (prf1(a.tp, a.fp, a.fn_), prf1(b.tp, b.fp, b.fn_));
        prop_assert_eq!(sa.precision, sb.recall);
        prop_assert_eq!(sa.recall, sb.precision);
        prop_assert_eq!(sa.f1, sb.f1);
    }

    #[test]
    fn greedy_agrees_with_exhaustive_matching(
        preds in prop::collection::vec(disjoint_masks(1), 0..5),
        gts in disjoint_masks(4),
        thr in 0.51f64..1.0,
    ) {
        let preds: Vec<Mask> = preds.into_iter().flatten().collect();
        let ious = iou_matrix(&preds, &gts).unwrap();
        let m = match_from_ious(&ious, gts.len(), thr).unwrap();
        prop_assert_eq!(m.tp, brute_force_tp(&ious, gts.len(), thr));
        for &(p, g, v) in &m.pairs {
            prop_assert!(v >= thr);
            prop_assert_eq!(v, ious[p][g]);
        }
        prop_assert_eq!(m.tp + m.fp, preds.len());
        prop_assert_eq!(m.tp + m.fn_, gts.len());
    }

    #[test]
    fn self_iou_is_one(masks in disjoint_masks(1)) {
        for m in &masks {
            prop_assert_eq!(lane_iou(m, m).unwrap(), 1.0);
        }
    }

    #[test]
    fn iou_is_bounded(a in disjoint_masks(2), b in disjoint_masks(2)) {
        for x in a.iter().chain(&b) {
            for y in a.iter().chain(&b) {
                let v = lane_iou(x, y).unwrap();
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn factorized_pair_uses_two_thirds(c in 1u64..=512) {
        let s = factorization_savings(3, c).unwrap();
        prop_assert_eq!(s.ratio, 2.0 / 3.0);
        prop_assert_eq!(s.factorized_weights * 3, s.full_weights * 2);
    }

    #[test]
    fn conv2d_matches_direct_sum(
        seed in any::<u64>(),
        c in 1usize..4,
        o in 1usize..4,
        h in 3usize..8,
        w in 3usize..8,
        pad in 0usize..2,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[2, c, h, w], |_| rng.random_range(-1.0..1.0));
        let k = Tensor::from_fn(&[o, c, 3, 3], |_| rng.random_range(-1.0..1.0));
        let got = conv2d(&x, &k, None, ConvGeometry::new(1, pad, 1)).unwrap();
        let want = naive_conv(&x, &k, (pad, pad));
        prop_assert!(got.max_abs_diff(&want) < 1e-5);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise(
        shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..4), 0..6),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let tensors: Vec<(String, Tensor)> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("layer{i}.weight"), Tensor::from_fn(s, |_| f32::from_bits(rng.random::<u32>() & 0xbf7f_ffff))))
            .collect();
        let bytes = encode_checkpoint(tensors.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        let payload: usize = tensors.iter().map(|(_, t)| 4 * t.numel()).sum();
        prop_assert_eq!(bytes.len(), checkpoint_header_bytes(tensors.iter().map(|(n, t)| (n.as_str(), t.rank()))) + payload);
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(back.len(), tensors.len());
        for ((na, a), (nb, b)) in back.iter().zip(&tensors) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn proposals_are_strict_local_maxima_above_threshold(
        values in prop::collection::vec(0.0f32..1.0, 6 * 5),
        thr in 0.05f64..0.95,
    ) {
        let heat = Tensor::new(&[6, 5], values.clone()).unwrap();
        let props = generate_proposals(&heat, thr, 3).unwrap();
        for w in props.windows(2) {
            prop_assert!(w[0].2 >= w[1].2);
        }
        for &(r, c, s) in &props {
            prop_assert!(s as f64 >= thr);
            for dr in -1i32..=1 {
                for dc in -1i32..=1 {
                    let (nr, nc) = (r as i32 + dr, c as i32 + dc);
                    if (dr, dc) != (0, 0) && (0..6).contains(&nr) && (0..5).contains(&nc) {
                        prop_assert!(values[(nr * 5 + nc) as usize] <= s);
                    }
                }
            }
        }
        // Every cell above threshold that beats all neighbours is found.
        for r in 0..6usize {
            for c in 0..5usize {
                let v = values[r * 5 + c];
                let strict = (-1i32..=1).all(|dr| (-1i32..=1).all(|dc| {
                    let (nr, nc) = (r as i32 + dr, c as i32 + dc);
                    (dr, dc) == (0, 0) || !(0..6).contains(&nr) || !(0..5).contains(&nc) || values[(nr * 5 + nc) as usize] < v
                }));
                if strict && v as f64 >= thr {
                    prop_assert!(props.iter().any(|&(pr, pc, _)| (pr, pc) == (r, c)));
                }
            }
        }
    }

    #[test]
    fn row_expectations_stay_in_range(values in prop::collection::vec(-20.0f32..20.0, 4 * 7)) {
        let xs = row_expectations(&Tensor::new(&[4, 7], values).unwrap()).unwrap();
        for x in xs {
            prop_assert!((0.0..=6.0).contains(&x));
        }
    }

    #[test]
    fn coord_transform_inverts(w in 16usize..3000, h in 16usize..2000, x in 0.0f64..3000.0, y in 0.0f64..2000.0) {
        let t = CoordTransform::resize(w, h, 128, 256).unwrap();
        let (u, v) = t.apply(x, y);
        let (bx, by) = t.invert(u, v);
        prop_assert!((bx - x).abs() < 1e-9 * x.max(1.0) && (by - y).abs() < 1e-9 * y.max(1.0));
    }
}

/// Largest distance of any point from the chord through a lane's end points.
fn chord_deviation(lane: &LanePolyline) -> f64 {
    let (a, b) = (lane.points[0], *lane.points.last().unwrap());
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len = dx.hypot(dy);
    lane.points
        .iter()
        .map(|p| ((p.0 - a.0) * dy - (p.1 - a.1) * dx).abs() / len)
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn straight_synthetic_lanes_are_collinear(seed in any::<u64>()) {
        let frames = generate_synthetic(&SyntheticConfig::straight(3, seed)).unwrap();
        for f in &frames {
            prop_assert!((2..=3).contains(&f.lanes.len()));
            for lane in &f.lanes {
                prop_assert!(chord_deviation(lane) < 0.5, "{}", chord_deviation(lane));
            }
        }
    }

    #[test]
    fn synthetic_generation_is_a_function_of_the_config(seed in any::<u64>()) {
        let cfg = SyntheticConfig::curved(2, seed);
        prop_assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
    }
}

#[test]
fn one_prediction_over_two_ground_truths_matches_once() {
    let ious = vec![vec![0.7, 0.6]];
    let m = match_from_ious(&ious, 2, 0.5).unwrap();
    assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 1));
    assert_eq!(brute_force_tp(&ious, 2, 0.5), 1);
}

#[test]
fn half_overlapping_segmentations_score_a_third() {
    let a = [true, true, false];
    let b = [false, true, true];
    assert!((pixel_iou(&a, &b).unwrap() - 100.0 / 3.0).abs() < 1e-9);
    assert_eq!(pixel_iou(&a, &a).unwrap(), 100.0);
    assert_eq!(pixel_iou(&[true, false], &[false, true]).unwrap(), 0.0);
    assert!(pixel_iou(&a, &[true]).is_err());
}

#[test]
fn tusimple_accuracy_counts_rows() {
    let rows = [10.0, 20.0, 30.0, 40.0];
    let gt = vec![vec![100.0, 100.0, 100.0, 100.0]];
    assert_eq!(tusimple_accuracy(&gt, &gt, &rows, 20.0).unwrap(), 1.0);
    let off = vec![vec![150.0; 4]];
    assert_eq!(tusimple_accuracy(&off, &gt, &rows, 20.0).unwrap(), 0.0);
    let half = vec![vec![105.0, 95.0, 130.0, 170.0]];
    assert_eq!(tusimple_accuracy(&half, &gt, &rows, 20.0).unwrap(), 0.5);
}

#[test]
fn identical_and_empty_lane_sets() {
    let lanes: Vec<LanePolyline> = (0..3)
        .map(|i| LanePolyline::new(vec![(40.0 + 80.0 * i as f64, 0.0), (60.0 + 80.0 * i as f64, 199.0)]).unwrap())
        .collect();
    let masks: Vec<Mask> = lanes.iter().map(|l| rasterize_lane(l, (300, 200), LANE_WIDTH).unwrap()).collect();
    let m = match_lanes(&masks, &masks, IOU_THRESHOLD).unwrap();
    assert_eq!((m.tp, m.fp, m.fn_), (3, 0, 0));
    let m = match_lanes(&[], &masks, IOU_THRESHOLD).unwrap();
    assert_eq!((m.tp, m.fp, m.fn_), (0, 0, 3));
}
