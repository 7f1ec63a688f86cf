//! Person-anchored cue correlation and thresholded fusion of overlap vectors.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cues::{CueId, OverlapVector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error("cue {0}: every video was skipped (missing anchor or zero variance)")]
    NoValidVideos(CueId),
    #[error("vectors have zero variance")]
    ZeroVariance,
    #[error("vector lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 entries, got {0}")]
    TooShort(usize),
    #[error("cannot keep top {k} of {available} cues")]
    TooManyCues { k: usize, available: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("no included cue is available for this video")]
    NoIncludedCues,
    #[error("cue {0} has no correlation score")]
    MissingCorrelation(CueId),
}

/// Mean per-video Pearson correlation of one cue against the person anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueCorrelation {
    pub cue: CueId,
    pub eta: f64,
    pub videos_used: usize,
    pub videos_skipped: usize,
}

/// Which cues enter the fused overlap. The person cue is always included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub threshold: f64,
    pub included: Vec<CueId>,
}

/// How to pick the fusion threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    TopK(usize),
    Absolute(f64),
}

impl Default for ThresholdRule {
    fn default() -> Self {
        ThresholdRule::TopK(3)
    }
}

/// Overlap vectors of every available cue for one video.
pub type VideoCueOverlaps = BTreeMap<CueId, OverlapVector>;

/// Pearson correlation from centered sums. `None` if either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    if a.len() < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation score for every cue seen in `videos`, anchored on the person cue.
///
/// Videos without a person vector, without the cue, or where either vector has
/// zero variance are skipped for that cue. The person cue scores exactly 1.
pub fn correlate_cues(videos: &[VideoCueOverlaps]) -> Result<Vec<CueCorrelation>, FusionError> {
    let mut cues: Vec<CueId> = videos.iter().flat_map(|v| v.keys().copied()).collect();
    cues.sort();
    cues.dedup();

    let per_video: Vec<BTreeMap<CueId, Option<f64>>> = videos
        .par_iter()
        .map(|video| {
            let anchor = video.get(&CueId::Person);
            cues.iter()
                .map(|cue| {
                    let r = match (anchor, video.get(cue)) {
                        (Some(h), Some(s)) if h.len() == s.len() => {
                            let anchor_ok = pearson(h.as_slice(), h.as_slice()).is_some();
                            if *cue == CueId::Person {
                                anchor_ok.then_some(1.0)
                            } else if anchor_ok {
                                pearson(s.as_slice(), h.as_slice())
                            } else {
                                None
                            }
                        }
                        _ => None,
                    };
                    (*cue, r)
                })
                .collect()
        })
        .collect();

    cues.iter()
        .map(|cue| {
            let (mut sum, mut used) = (0.0, 0usize);
            for r in per_video.iter().filter_map(|v| v[cue]) {
                sum += r;
                used += 1;
            }
            if used == 0 {
                return Err(FusionError::NoValidVideos(*cue));
            }
            let eta = if *cue == CueId::Person {
                1.0
            } else {
                sum / used as f64
            };
            Ok(CueCorrelation {
                cue: *cue,
                eta,
                videos_used: used,
                videos_skipped: videos.len() - used,
            })
        })
        .collect()
}

fn sorted_by_eta(correlations: &[CueCorrelation]) -> Vec<&CueCorrelation> {
    let mut sorted: Vec<&CueCorrelation> = correlations.iter().collect();
    sorted.sort_by(|a, b| b.eta.total_cmp(&a.eta).then(a.cue.cmp(&b.cue)));
    sorted
}

impl FusionConfig {
    /// Every cue with `eta >= threshold`, plus the person cue.
    pub fn with_threshold(threshold: f64, correlations: &[CueCorrelation]) -> Self {
        let mut included: Vec<CueId> = correlations
            .iter()
            .filter(|c| c.eta >= threshold || c.cue == CueId::Person)
            .map(|c| c.cue)
            .collect();
        if !included.contains(&CueId::Person) {
            included.push(CueId::Person);
        }
        included.sort();
        Self {
            threshold,
            included,
        }
    }

    pub fn from_rule(
        rule: ThresholdRule,
        correlations: &[CueCorrelation],
    ) -> Result<Self, FusionError> {
        match rule {
            ThresholdRule::TopK(k) => select_top_cues(correlations, k),
            ThresholdRule::Absolute(t) => Ok(Self::with_threshold(t, correlations)),
        }
    }
}

/// Keep the `k` best-correlated cues. The threshold is the midpoint between the
/// k-th and (k+1)-th scores, or the k-th score when all cues are kept. Equal
/// scores are ordered by cue id, so exactly `k` cues are included.
pub fn select_top_cues(
    correlations: &[CueCorrelation],
    k: usize,
) -> Result<FusionConfig, FusionError> {
    if k == 0 {
        return Err(FusionError::ZeroK);
    }
    if k > correlations.len() {
        return Err(FusionError::TooManyCues {
            k,
            available: correlations.len(),
        });
    }
    let sorted = sorted_by_eta(correlations);
    let threshold = match sorted.get(k) {
        Some(next) => 0.5 * (sorted[k - 1].eta + next.eta),
        None => sorted[k - 1].eta,
    };
    let mut included: Vec<CueId> = sorted[..k].iter().map(|c| c.cue).collect();
    included.sort();
    Ok(FusionConfig {
        threshold,
        included,
    })
}

/// `sum_i eta_i * S_i` over the included cues present in this video.
pub fn fuse_overlaps(
    vectors: &VideoCueOverlaps,
    correlations: &[CueCorrelation],
    config: &FusionConfig,
) -> Result<OverlapVector, FusionError> {
    let mut fused: Option<Vec<f64>> = None;
    for cue in &config.included {
        let Some(s) = vectors.get(cue) else {
            continue;
        };
        let eta = correlations
            .iter()
            .find(|c| c.cue == *cue)
            .map(|c| c.eta)
            .ok_or(FusionError::MissingCorrelation(*cue))?;
        let acc = fused.get_or_insert_with(|| vec![0.0; s.len()]);
        if acc.len() != s.len() {
            return Err(FusionError::LengthMismatch(acc.len(), s.len()));
        }
        for (a, x) in acc.iter_mut().zip(s.as_slice()) {
            *a += eta * x;
        }
    }
    fused.map(OverlapVector).ok_or(FusionError::NoIncludedCues)
}

/// Pearson correlation between pseudo-annotation overlaps and ground-truth overlaps.
pub fn gt_pearson_diagnostic(
    pseudo: &OverlapVector,
    ground_truth: &OverlapVector,
) -> Result<f64, FusionError> {
    if pseudo.len() != ground_truth.len() {
        return Err(FusionError::LengthMismatch(
            pseudo.len(),
            ground_truth.len(),
        ));
    }
    if pseudo.len() < 2 {
        return Err(FusionError::TooShort(pseudo.len()));
    }
    pearson(pseudo.as_slice(), ground_truth.as_slice()).ok_or(FusionError::ZeroVariance)
}
