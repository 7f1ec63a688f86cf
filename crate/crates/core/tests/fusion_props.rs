mod common;

use std::collections::BTreeMap;

use common::{first_max, pearson_one_pass};
use proptest::prelude::*;
use tubemil::cues::{CueId, OverlapVector};
use tubemil::fusion::{
    correlate_cues, fuse_overlaps, pearson, select_top_cues, CueCorrelation, FusionConfig,
    VideoCueOverlaps,
};

const OTHERS: [CueId; 4] = [
    CueId::IndependentMotion,
    CueId::ActionProposals,
    CueId::FrameCenter,
    CueId::ObjectProposals,
];

fn pair(n: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    n.prop_flat_map(|n| {
        (
            prop::collection::vec(-1.0..1.0f64, n),
            prop::collection::vec(-1.0..1.0f64, n),
        )
    })
}

/// Five cue vectors of common length per video.
fn videos() -> impl Strategy<Value = Vec<VideoCueOverlaps>> {
    let video = (3usize..30)
        .prop_flat_map(|n| prop::collection::vec(prop::collection::vec(-1.0..1.0f64, n), 5));
    prop::collection::vec(video, 1..6).prop_map(|vs| {
        vs.into_iter()
            .map(|cols| {
                let ids = std::iter::once(CueId::Person).chain(OTHERS);
                ids.zip(cols).map(|(c, v)| (c, OverlapVector(v))).collect()
            })
            .collect()
    })
}

fn eta_of(c: &[CueCorrelation], cue: CueId) -> f64 {
    c.iter().find(|x| x.cue == cue).unwrap().eta
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn pearson_matches_one_pass((a, b) in pair(2..100)) {
        match (pearson(&a, &b), pearson_one_pass(&a, &b)) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-9),
            (x, y) => prop_assert_eq!(x.is_some(), y.is_some()),
        }
    }

    #[test]
    fn pearson_affine_invariant((a, b) in pair(3..60), s in 0.1..10.0f64, t in -5.0..5.0f64, u in -10.0..-0.1f64) {
        let Some(r) = pearson(&a, &b) else { return Ok(()); };
        let a2: Vec<f64> = a.iter().map(|x| s * x + t).collect();
        prop_assert!((pearson(&a2, &b).unwrap() - r).abs() < 1e-9);
        let a3: Vec<f64> = a.iter().map(|x| u * x + t).collect();
        prop_assert!((pearson(&a3, &b).unwrap() + r).abs() < 1e-9);
    }

    #[test]
    fn eta_is_mean_per_video_correlation(vs in videos()) {
        let corr = correlate_cues(&vs).unwrap();
        prop_assert_eq!(eta_of(&corr, CueId::Person), 1.0);
        for cue in OTHERS {
            let rs: Vec<f64> = vs
                .iter()
                .filter_map(|v| pearson_one_pass(v[&cue].as_slice(), v[&CueId::Person].as_slice()))
                .collect();
            if rs.is_empty() {
                continue;
            }
            let mean = rs.iter().sum::<f64>() / rs.len() as f64;
            prop_assert!((eta_of(&corr, cue) - mean).abs() < 1e-9);
        }
    }

    #[test]
    fn fused_is_weighted_sum(vs in videos(), k in 1usize..=5) {
        let corr = correlate_cues(&vs).unwrap();
        let config = select_top_cues(&corr, k).unwrap();
        prop_assert_eq!(config.included.len(), k);
        for v in &vs {
            let fused = fuse_overlaps(v, &corr, &config).unwrap();
            for i in 0..fused.len() {
                let mut want = 0.0;
                for cue in &config.included {
                    want += eta_of(&corr, *cue) * v[cue].as_slice()[i];
                }
                prop_assert!((fused.as_slice()[i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fused_argmax_survives_constant_shift(v in prop::collection::vec(-1.0..1.0f64, 2..40), c in -3.0..3.0f64) {
        let corr = vec![CueCorrelation { cue: CueId::Person, eta: 1.0, videos_used: 1, videos_skipped: 0 }];
        let config = FusionConfig::with_threshold(0.5, &corr);
        let base: VideoCueOverlaps = BTreeMap::from([(CueId::Person, OverlapVector(v.clone()))]);
        let shifted: VideoCueOverlaps =
            BTreeMap::from([(CueId::Person, OverlapVector(v.iter().map(|x| x + c).collect()))]);
        let a = fuse_overlaps(&base, &corr, &config).unwrap();
        let b = fuse_overlaps(&shifted, &corr, &config).unwrap();
        prop_assert_eq!(first_max(a.as_slice()), first_max(b.as_slice()));
    }

    #[test]
    fn single_person_cue_is_identity(v in prop::collection::vec(-1.0..1.0f64, 2..40)) {
        let video: VideoCueOverlaps = BTreeMap::from([(CueId::Person, OverlapVector(v.clone()))]);
        let corr = correlate_cues(std::slice::from_ref(&video)).unwrap();
        let config = select_top_cues(&corr, 1).unwrap();
        prop_assert_eq!(fuse_overlaps(&video, &corr, &config).unwrap().0, v);
    }
}

#[test]
fn top_k_threshold_is_midpoint() {
    let c = |cue, eta| CueCorrelation {
        cue,
        eta,
        videos_used: 1,
        videos_skipped: 0,
    };
    let corr = vec![
        c(CueId::Person, 1.0),
        c(CueId::IndependentMotion, 0.8),
        c(CueId::ActionProposals, 0.6),
        c(CueId::FrameCenter, 0.2),
    ];
    let config = select_top_cues(&corr, 2).unwrap();
    assert_eq!(
        config.included,
        vec![CueId::Person, CueId::IndependentMotion]
    );
    assert!((config.threshold - 0.7).abs() < 1e-15);
    assert_eq!(select_top_cues(&corr, 4).unwrap().threshold, 0.2);
}
