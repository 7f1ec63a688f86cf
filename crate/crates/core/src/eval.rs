//! Top-proposal test protocol, average precision, ROC-AUC and threshold sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cues::OverlapVector;
use crate::geometry::{tube_iou, Tube};
use crate::mil::{argmax, combined_scores, zscore, LinearModel, VideoBag};
use crate::FORMAT_VERSION;

/// Overlap thresholds reported by default.
pub const DEFAULT_THRESHOLDS: [f64; 6] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("no detections to evaluate")]
    NoDetections,
    #[error("class {0} has no ground-truth tubes")]
    NoPositives(u32),
    #[error("thresholds must be finite, in [0, 1] and strictly ascending")]
    BadThresholds,
    #[error("mAP increases from threshold {low} to {high}")]
    NonMonotone { low: f64, high: f64 },
}

/// The proposal kept for one (video, class) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video_id: String,
    pub class_id: u32,
    pub proposal: usize,
    pub tube: Tube,
    pub score: f64,
}

/// Ground-truth tubes per video and class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth(pub BTreeMap<(String, u32), Vec<Tube>>);

impl GroundTruth {
    pub fn insert(&mut self, video_id: &str, class_id: u32, tube: Tube) {
        self.0
            .entry((video_id.to_string(), class_id))
            .or_default()
            .push(tube);
    }

    pub fn tubes(&self, video_id: &str, class_id: u32) -> &[Tube] {
        self.0
            .get(&(video_id.to_string(), class_id))
            .map_or(&[], Vec::as_slice)
    }

    pub fn count(&self, class_id: u32) -> usize {
        self.0
            .iter()
            .filter(|((_, c), _)| *c == class_id)
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn classes(&self) -> BTreeSet<u32> {
        self.0.keys().map(|(_, c)| *c).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    AllPoint,
    ElevenPoint,
}

/// Pick one proposal of a test video and score it.
///
/// Plain mode keeps the highest classifier score. With overlaps and
/// `alpha_test > 0`, the proposal maximizing `zscore(score) + alpha_test *
/// zscore(overlap)` is kept, and its detection score is that combined value
/// mapped back to classifier-score units (`mean + sd * combined`, i.e. the raw
/// score plus `alpha_test * sd * zscore(overlap)`), so it stays comparable across
/// videos and equals the plain score when `alpha_test = 0`.
pub fn score_test_video(
    bag: &VideoBag,
    model: &LinearModel,
    overlaps: Option<&OverlapVector>,
    alpha_test: f64,
) -> (usize, f64) {
    let scores = model.scores(&bag.features);
    match overlaps {
        Some(o) if alpha_test > 0.0 => {
            let n = scores.len() as f64;
            let mean = scores.iter().sum::<f64>() / n;
            let sd = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
            let pick = if alpha_test.is_infinite() {
                argmax(o.as_slice())
            } else {
                argmax(&combined_scores(&scores, o.as_slice(), alpha_test))
            };
            let bonus = if alpha_test.is_infinite() {
                0.0
            } else {
                alpha_test * sd * zscore(o.as_slice())[pick]
            };
            (pick, scores[pick] + bonus)
        }
        _ => {
            let pick = argmax(&scores);
            (pick, scores[pick])
        }
    }
}

/// Detections of one class in ranked order, each flagged true or false positive.
///
/// Ranked by score descending, ties by video id. Each detection greedily takes
/// the unmatched ground-truth tube of its video with the highest IoU.
pub fn match_detections(
    detections: &[Detection],
    gt: &GroundTruth,
    class_id: u32,
    sigma: f64,
) -> Vec<(f64, bool)> {
    let mut ranked: Vec<&Detection> = detections
        .iter()
        .filter(|d| d.class_id == class_id)
        .collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.video_id.cmp(&b.video_id))
            .then_with(|| a.proposal.cmp(&b.proposal))
    });
    let mut matched: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    ranked
        .into_iter()
        .map(|d| {
            let tubes = gt.tubes(&d.video_id, class_id);
            let used = matched
                .entry(d.video_id.as_str())
                .or_insert_with(|| vec![false; tubes.len()]);
            let best = tubes
                .iter()
                .enumerate()
                .filter(|(i, _)| !used[*i])
                .map(|(i, t)| (i, tube_iou(&d.tube, t)))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            let tp = match best {
                Some((i, iou)) if iou >= sigma => {
                    used[i] = true;
                    true
                }
                _ => false,
            };
            (d.score, tp)
        })
        .collect()
}

/// Area under the precision-recall curve of ranked TP/FP flags.
pub fn ap_from_ranked(flags: &[bool], num_positives: usize, interpolation: Interpolation) -> f64 {
    if num_positives == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (rank, &hit) in flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / num_positives as f64);
    }
    // precision envelope, non-increasing in rank
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    match interpolation {
        Interpolation::AllPoint => {
            let mut area = 0.0;
            let mut prev_recall = 0.0;
            for (p, r) in precision.iter().zip(&recall) {
                area += (r - prev_recall) * p;
                prev_recall = *r;
            }
            area
        }
        Interpolation::ElevenPoint => {
            (0..=10)
                .map(|k| {
                    let level = k as f64 / 10.0;
                    recall
                        .iter()
                        .zip(&precision)
                        .filter(|(r, _)| **r >= level - 1e-12)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

pub fn average_precision(
    detections: &[Detection],
    gt: &GroundTruth,
    class_id: u32,
    sigma: f64,
    interpolation: Interpolation,
) -> Result<f64, EvalError> {
    let num_positives = gt.count(class_id);
    if num_positives == 0 {
        return Err(EvalError::NoPositives(class_id));
    }
    let flags: Vec<bool> = match_detections(detections, gt, class_id, sigma)
        .into_iter()
        .map(|(_, tp)| tp)
        .collect();
    Ok(ap_from_ranked(&flags, num_positives, interpolation))
}

/// ROC-AUC by the rank-sum statistic with average ranks for tied scores.
/// `None` when every label is the same.
pub fn roc_auc(scored: &[(f64, bool)]) -> Option<f64> {
    let positives = scored.iter().filter(|(_, l)| *l).count();
    let negatives = scored.len() - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    let mut sorted: Vec<(f64, bool)> = scored.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
            j += 1;
        }
        let avg_rank = 0.5 * ((i + 1) + (j + 1)) as f64;
        rank_sum += avg_rank * sorted[i..=j].iter().filter(|(_, l)| *l).count() as f64;
        i = j + 1;
    }
    let p = positives as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

/// Class-averaged ROC-AUC of detection correctness at `sigma`; classes whose
/// detections are all correct or all wrong are left out.
pub fn auc(detections: &[Detection], gt: &GroundTruth, classes: &[u32], sigma: f64) -> Option<f64> {
    let per_class: Vec<f64> = classes
        .iter()
        .filter_map(|&c| roc_auc(&match_detections(detections, gt, c, sigma)))
        .collect();
    (!per_class.is_empty()).then(|| per_class.iter().sum::<f64>() / per_class.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class_id: u32,
    pub ap: Vec<f64>,
    pub auc: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub pseudo_annotations_at_test: bool,
    pub alpha_test: f64,
    pub interpolation: Interpolation,
    pub thresholds: Vec<f64>,
    pub classes: Vec<ClassRow>,
    pub map: Vec<f64>,
    pub auc: Vec<Option<f64>>,
    pub mean_auc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    pub pseudo_annotations_at_test: bool,
    pub alpha_test: f64,
    pub interpolation: Interpolation,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            pseudo_annotations_at_test: false,
            alpha_test: 0.0,
            interpolation: Interpolation::AllPoint,
        }
    }
}

/// AP and AUC for every class at every threshold.
pub fn sweep(
    detections: &[Detection],
    gt: &GroundTruth,
    thresholds: &[f64],
    options: SweepOptions,
) -> Result<EvalReport, EvalError> {
    if detections.is_empty() {
        return Err(EvalError::NoDetections);
    }
    if thresholds.is_empty()
        || thresholds.iter().any(|t| !(0.0..=1.0).contains(t))
        || thresholds.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(EvalError::BadThresholds);
    }
    let classes: Vec<u32> = detections
        .iter()
        .map(|d| d.class_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let mut rows = Vec::with_capacity(classes.len());
    for &c in &classes {
        let mut ap = Vec::with_capacity(thresholds.len());
        let mut class_auc = Vec::with_capacity(thresholds.len());
        for &sigma in thresholds {
            ap.push(average_precision(
                detections,
                gt,
                c,
                sigma,
                options.interpolation,
            )?);
            class_auc.push(roc_auc(&match_detections(detections, gt, c, sigma)));
        }
        rows.push(ClassRow {
            class_id: c,
            ap,
            auc: class_auc,
        });
    }

    let n = rows.len() as f64;
    let map: Vec<f64> = (0..thresholds.len())
        .map(|k| rows.iter().map(|r| r.ap[k]).sum::<f64>() / n)
        .collect();
    for (k, w) in map.windows(2).enumerate() {
        if w[1] > w[0] + 1e-12 {
            return Err(EvalError::NonMonotone {
                low: thresholds[k],
                high: thresholds[k + 1],
            });
        }
    }
    let auc: Vec<Option<f64>> = (0..thresholds.len())
        .map(|k| {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r.auc[k]).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect();
    let defined: Vec<f64> = auc.iter().flatten().copied().collect();
    let mean_auc =
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);

    Ok(EvalReport {
        format_version: FORMAT_VERSION,
        pseudo_annotations_at_test: options.pseudo_annotations_at_test,
        alpha_test: options.alpha_test,
        interpolation: options.interpolation,
        thresholds: thresholds.to_vec(),
        classes: rows,
        map,
        auc,
        mean_auc,
    })
}

impl EvalReport {
    /// One line per (class, threshold), plus `mAP` rows with the class column set to `all`.
    pub fn to_csv(&self) -> String {
        let fmt_opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        let mut out = String::from("class,threshold,ap,auc\n");
        for row in &self.classes {
            for (k, t) in self.thresholds.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{}",
                    row.class_id,
                    t,
                    row.ap[k],
                    fmt_opt(row.auc[k])
                );
            }
        }
        for (k, t) in self.thresholds.iter().enumerate() {
            let _ = writeln!(out, "all,{},{},{}", t, self.map[k], fmt_opt(self.auc[k]));
        }
        out
    }

    /// mAP (thick) and per-class AP (thin) against the overlap threshold.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (480.0, 320.0, 40.0);
        let t_lo = self.thresholds.first().copied().unwrap_or(0.0);
        let t_hi = self.thresholds.last().copied().unwrap_or(1.0);
        let span = if t_hi > t_lo { t_hi - t_lo } else { 1.0 };
        let px = |t: f64| pad + (t - t_lo) / span * (w - 2.0 * pad);
        let py = |v: f64| h - pad - v * (h - 2.0 * pad);
        let polyline = |values: &[f64]| {
            self.thresholds
                .iter()
                .zip(values)
                .map(|(t, v)| format!("{:.2},{:.2}", px(*t), py(*v)))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
        );
        let _ = writeln!(
            svg,
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>",
            h - pad,
            w - pad,
            h - pad,
            h - pad
        );
        for t in &self.thresholds {
            let _ = writeln!(
                svg,
                "<text x=\"{:.2}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{t}</text>",
                px(*t),
                h - pad + 14.0
            );
        }
        for row in &self.classes {
            let _ = writeln!(
                svg,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"#999\" stroke-width=\"1\"/>",
                polyline(&row.ap)
            );
        }
        let label = if self.pseudo_annotations_at_test {
            "mAP ++"
        } else {
            "mAP"
        };
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"3\"/>\n<text x=\"{}\" y=\"{}\" font-size=\"12\">{label}</text>\n</svg>",
            polyline(&self.map),
            w - pad - 50.0,
            pad - 10.0
        );
        svg
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::mil::FeatureMatrix;

    fn tube(x: f64) -> Tube {
        Tube::new(0, vec![BBox::new(x, 0.0, x + 10.0, 10.0).unwrap(); 2]).unwrap()
    }

    fn detection(video: &str, class_id: u32, x: f64, score: f64) -> Detection {
        Detection {
            video_id: video.into(),
            class_id,
            proposal: 0,
            tube: tube(x),
            score,
        }
    }

    fn model() -> LinearModel {
        LinearModel {
            weights: vec![1.0],
            ..LinearModel::zero(1, 10.0)
        }
    }

    #[test]
    fn plain_scoring_keeps_top_score() {
        let bag = VideoBag::new(
            "v",
            FeatureMatrix::from_rows(&[vec![0.2], vec![0.7]]).unwrap(),
            vec![],
            None,
        )
        .unwrap();
        assert_eq!(score_test_video(&bag, &model(), None, 1.0), (1, 0.7));
        let o = OverlapVector(vec![1.0, 0.0]);
        assert_eq!(score_test_video(&bag, &model(), Some(&o), 0.0), (1, 0.7));
        let (pick, score) = score_test_video(&bag, &model(), Some(&o), 2.0);
        assert_eq!(pick, 0);
        // sd of scores is 0.25, zscore of the picked overlap is +1
        assert!((score - (0.2 + 2.0 * 0.25)).abs() < 1e-12);
    }

    #[test]
    fn single_hit_and_all_miss() {
        let mut gt = GroundTruth::default();
        gt.insert("a", 0, tube(0.0));
        let hit = vec![detection("a", 0, 1.0, 1.0)];
        assert_eq!(
            average_precision(&hit, &gt, 0, 0.5, Interpolation::AllPoint).unwrap(),
            1.0
        );
        let miss = vec![detection("a", 0, 50.0, 1.0)];
        assert_eq!(
            average_precision(&miss, &gt, 0, 0.5, Interpolation::AllPoint).unwrap(),
            0.0
        );
        assert_eq!(
            average_precision(&hit, &gt, 3, 0.5, Interpolation::AllPoint).unwrap_err(),
            EvalError::NoPositives(3)
        );
    }

    #[test]
    fn greedy_matching_uses_each_tube_once() {
        let mut gt = GroundTruth::default();
        gt.insert("a", 0, tube(0.0));
        let dets = vec![detection("a", 0, 0.0, 2.0), detection("a", 0, 0.0, 1.0)];
        let flags: Vec<bool> = match_detections(&dets, &gt, 0, 0.5)
            .into_iter()
            .map(|x| x.1)
            .collect();
        assert_eq!(flags, vec![true, false]);
    }

    #[test]
    fn ap_known_pattern() {
        // TP FP TP with 3 positives: envelope precision (1, 2/3, 2/3)
        let ap = ap_from_ranked(&[true, false, true], 3, Interpolation::AllPoint);
        assert!((ap - (1.0 / 3.0 + (2.0 / 3.0) / 3.0)).abs() < 1e-15);
        let eleven = ap_from_ranked(&[true], 1, Interpolation::ElevenPoint);
        assert_eq!(eleven, 1.0);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(
            roc_auc(&[(0.9, true), (0.8, true), (0.1, false)]),
            Some(1.0)
        );
        assert_eq!(
            roc_auc(&[(0.1, true), (0.8, false), (0.9, false)]),
            Some(0.0)
        );
        assert_eq!(roc_auc(&[(0.5, true), (0.5, false)]), Some(0.5));
        assert_eq!(roc_auc(&[(0.5, true)]), None);
    }

    #[test]
    fn sweep_errors() {
        let gt = GroundTruth::default();
        assert_eq!(
            sweep(&[], &gt, &DEFAULT_THRESHOLDS, SweepOptions::default()).unwrap_err(),
            EvalError::NoDetections
        );
        let mut gt = GroundTruth::default();
        gt.insert("a", 0, tube(0.0));
        let dets = vec![detection("a", 0, 0.0, 1.0)];
        assert_eq!(
            sweep(&dets, &gt, &[0.5, 0.2], SweepOptions::default()).unwrap_err(),
            EvalError::BadThresholds
        );
    }

    #[test]
    fn perfect_detections_score_one() {
        let mut gt = GroundTruth::default();
        gt.insert("a", 0, tube(0.0));
        gt.insert("b", 0, tube(20.0));
        let dets = vec![detection("a", 0, 0.0, 1.0), detection("b", 0, 20.0, 0.5)];
        let report = sweep(&dets, &gt, &DEFAULT_THRESHOLDS, SweepOptions::default()).unwrap();
        assert!(report.map.iter().all(|m| *m == 1.0));
        assert!(report
            .to_csv()
            .starts_with("class,threshold,ap,auc\n0,0.1,1,"));
        assert!(report.to_svg().contains("<polyline"));
    }
}
