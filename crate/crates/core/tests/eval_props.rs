mod common;

use common::{enumerate_ap, mann_whitney, raster_tube_iou, IBox, ITube};
use proptest::prelude::*;
use tubemil::cues::OverlapVector;
use tubemil::eval::{
    ap_from_ranked, roc_auc, score_test_video, sweep, Detection, GroundTruth, Interpolation,
    SweepOptions, DEFAULT_THRESHOLDS,
};
use tubemil::geometry::{BBox, Tube};
use tubemil::mil::{FeatureMatrix, LinearModel, VideoBag};

fn ibox() -> impl Strategy<Value = IBox> {
    (0..20i32, 0..20i32, 1..12i32, 1..12i32).prop_map(|(x, y, w, h)| (x, y, x + w, y + h))
}

fn itube() -> impl Strategy<Value = ITube> {
    (0..4u32, prop::collection::vec(ibox(), 1..5)).prop_map(|(start, boxes)| ITube { start, boxes })
}

fn to_tube(t: &ITube) -> Tube {
    let boxes = t
        .boxes
        .iter()
        .map(|b| BBox::new(b.0.into(), b.1.into(), b.2.into(), b.3.into()).unwrap())
        .collect();
    Tube::new(t.start, boxes).unwrap()
}

/// Per video: detection tube, one or two ground-truth tubes, score.
type Case = Vec<(ITube, Vec<ITube>, i32)>;

fn case() -> impl Strategy<Value = Case> {
    prop::collection::vec(
        (itube(), prop::collection::vec(itube(), 1..3), -50..50i32),
        1..20,
    )
}

fn build(case: &Case) -> (Vec<Detection>, GroundTruth) {
    let mut gt = GroundTruth::default();
    let mut dets = Vec::new();
    for (i, (det, tubes, score)) in case.iter().enumerate() {
        let id = format!("v{i:02}");
        for t in tubes {
            gt.insert(&id, 0, to_tube(t));
        }
        dets.push(Detection {
            video_id: id,
            class_id: 0,
            proposal: 0,
            tube: to_tube(det),
            score: f64::from(*score),
        });
    }
    (dets, gt)
}

/// Ranked flags by the naive rule: one detection per video is correct when any
/// of its ground-truth tubes reaches `sigma`.
fn naive_flags(case: &Case, sigma: f64) -> Vec<(f64, bool)> {
    let mut rows: Vec<(i32, usize, bool)> = case
        .iter()
        .enumerate()
        .map(|(i, (det, tubes, s))| {
            let best = tubes
                .iter()
                .map(|t| raster_tube_iou(det, t))
                .fold(0.0, f64::max);
            (*s, i, best >= sigma)
        })
        .collect();
    rows.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    rows.into_iter()
        .map(|(s, _, f)| (f64::from(s), f))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn ap_matches_enumeration(c in case(), sigma in 0.05..0.9f64) {
        let (dets, gt) = build(&c);
        let npos = c.iter().map(|v| v.1.len()).sum();
        let flags: Vec<bool> = naive_flags(&c, sigma).into_iter().map(|x| x.1).collect();
        let report = sweep(&dets, &gt, &[sigma], SweepOptions::default()).unwrap();
        prop_assert!((report.map[0] - enumerate_ap(&flags, npos)).abs() < 1e-9);
    }

    #[test]
    fn auc_matches_pair_count(c in case(), sigma in 0.05..0.9f64) {
        let scored = naive_flags(&c, sigma);
        match (roc_auc(&scored), mann_whitney(&scored)) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn metrics_ignore_monotone_score_maps(c in case()) {
        let (dets, gt) = build(&c);
        let mapped: Vec<Detection> = dets
            .iter()
            .map(|d| Detection { score: (d.score / 10.0).exp() * 3.0 + 1.0, ..d.clone() })
            .collect();
        let a = sweep(&dets, &gt, &DEFAULT_THRESHOLDS, SweepOptions::default()).unwrap();
        let b = sweep(&mapped, &gt, &DEFAULT_THRESHOLDS, SweepOptions::default()).unwrap();
        prop_assert_eq!(a.map, b.map);
        prop_assert_eq!(a.auc, b.auc);
    }

    #[test]
    fn map_non_increasing_in_sigma(c in case()) {
        let (dets, gt) = build(&c);
        let thresholds: Vec<f64> = (1..20).map(|k| f64::from(k) / 20.0).collect();
        for interp in [Interpolation::AllPoint, Interpolation::ElevenPoint] {
            let opts = SweepOptions { interpolation: interp, ..SweepOptions::default() };
            let r = sweep(&dets, &gt, &thresholds, opts).unwrap();
            for w in r.map.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
            prop_assert!(r.map.iter().all(|m| (0.0..=1.0).contains(m)));
        }
    }

    #[test]
    fn zero_alpha_plus_plus_is_plain(rows in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 3), 2..20),
                                     w in prop::collection::vec(-1.0..1.0f64, 3),
                                     seed in 0u64..1000) {
        let n = rows.len();
        let overlaps: Vec<f64> = (0..n).map(|i| ((i as u64 * 7919 + seed) % 101) as f64 / 100.0).collect();
        let bag = VideoBag::new("v", FeatureMatrix::from_rows(&rows).unwrap(), vec![0], None).unwrap();
        let model = LinearModel { weights: w, ..LinearModel::zero(3, 10.0) };
        let ov = OverlapVector(overlaps);
        prop_assert_eq!(score_test_video(&bag, &model, Some(&ov), 0.0), score_test_video(&bag, &model, None, 1.0));
        let (pick, score) = score_test_video(&bag, &model, Some(&ov), 1.0);
        let raw = model.scores(&bag.features);
        let z = common::oracle_zscore(ov.as_slice());
        let zs = common::oracle_zscore(&raw);
        let best = (0..n).map(|i| zs[i] + z[i]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((zs[pick] + z[pick] - best).abs() < 1e-9);
        let n_f = n as f64;
        let mean = raw.iter().sum::<f64>() / n_f;
        let sd = (raw.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n_f).sqrt();
        prop_assert!((score - (raw[pick] + sd * z[pick])).abs() < 1e-9);
    }
}

#[test]
fn fixed_precision_recall_examples() {
    // hits at ranks 1 and 3 of 4, two positives: (1 + 2/3) / 2
    let ap = ap_from_ranked(&[true, false, true, false], 2, Interpolation::AllPoint);
    assert!((ap - 5.0 / 6.0).abs() < 1e-15);
    assert_eq!(
        ap_from_ranked(&[false, false], 3, Interpolation::AllPoint),
        0.0
    );
    assert_eq!(
        ap_from_ranked(&[true, true], 2, Interpolation::ElevenPoint),
        1.0
    );
    assert_eq!(roc_auc(&[(1.0, true), (0.0, false)]), Some(1.0));
    assert_eq!(roc_auc(&[(1.0, true), (1.0, false)]), Some(0.5));
    assert_eq!(roc_auc(&[(1.0, true)]), None);
}
