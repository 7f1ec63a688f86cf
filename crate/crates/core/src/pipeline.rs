//! The end-to-end flow: cues → correlation → fusion → MIL training → evaluation,
//! both in memory and as file-to-file stages.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cues::{
    cue_overlap_vector, frame_center_cue, independent_motion_cue, object_count_cue, person_cue,
    proposal_count_cue, CueAnnotation, CueError, CueId, CuePayload, OverlapVector, ScoredBoxFrame,
    WeightGrid, DEFAULT_OBJECT_TOP_K,
};
use crate::datagen::{read_video, Dataset, VideoData, VideoInputs};
use crate::eval::{
    score_test_video, sweep, Detection, EvalError, EvalReport, GroundTruth, Interpolation,
    SweepOptions, DEFAULT_THRESHOLDS,
};
use crate::fusion::{
    correlate_cues, fuse_overlaps, CueCorrelation, FusionConfig, FusionError, ThresholdRule,
    VideoCueOverlaps,
};
use crate::geometry::{BBox, BoxTrack, Point, PointTrack, Tube, VideoExtent};
use crate::io::{
    self, feature_rows_path, CueRecord, DataError, FeatureRowRecord, FrameBox, FramePoint,
    FusedRecord, GtRecord, ProposalRecord, Split, VideoListRecord, VideoMetaRecord,
};
use crate::mil::{
    train_mil, FeatureMatrix, LinearModel, MilError, MilOutcome, RetrainRecord, TrainConfig,
    VideoBag,
};
use crate::FORMAT_VERSION;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Cue(#[from] CueError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Mil(#[from] MilError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Input(String),
}

/// Borrowed cue inputs of one video.
#[derive(Debug, Clone, Copy)]
pub struct CueInputs<'a> {
    pub extent: &'a VideoExtent,
    pub proposals: &'a [Tube],
    pub detections: &'a [ScoredBoxFrame],
    pub motion: &'a [WeightGrid],
    pub objects: &'a [ScoredBoxFrame],
}

impl<'a> From<&'a VideoData> for CueInputs<'a> {
    fn from(v: &'a VideoData) -> Self {
        Self {
            extent: &v.extent,
            proposals: &v.proposals,
            detections: &v.detections,
            motion: &v.motion,
            objects: &v.objects,
        }
    }
}

impl<'a> From<&'a VideoInputs> for CueInputs<'a> {
    fn from(v: &'a VideoInputs) -> Self {
        Self {
            extent: &v.extent,
            proposals: &v.proposals,
            detections: &v.detections,
            motion: &v.motion,
            objects: &v.objects,
        }
    }
}

/// Pseudo-annotations for the requested cues. A cue with nothing to annotate
/// (no detections, no motion) is left out rather than failing the video.
pub fn compute_cues(
    inputs: CueInputs<'_>,
    cues: &[CueId],
    object_top_k: usize,
) -> Result<Vec<CueAnnotation>, CueError> {
    let mut out = Vec::with_capacity(cues.len());
    for cue in cues {
        let result = match cue {
            CueId::Person => person_cue(inputs.detections),
            CueId::IndependentMotion => independent_motion_cue(inputs.motion, inputs.extent),
            CueId::ActionProposals => proposal_count_cue(inputs.proposals, inputs.extent),
            CueId::FrameCenter => Ok(frame_center_cue(inputs.extent)),
            CueId::ObjectProposals => object_count_cue(inputs.objects, inputs.extent, object_top_k),
        };
        match result {
            Ok(a) => out.push(a),
            Err(CueError::AllFramesEmpty | CueError::EmptyTrack(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

pub fn overlap_vectors(
    proposals: &[Tube],
    extent: &VideoExtent,
    annotations: &[CueAnnotation],
) -> Result<VideoCueOverlaps, CueError> {
    annotations
        .iter()
        .map(|a| Ok((a.cue(), cue_overlap_vector(proposals, a, extent)?)))
        .collect()
}

/// Correlation scores from the training videos, and the fusion they select.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub format_version: u32,
    pub rule: ThresholdRule,
    pub videos: usize,
    pub correlations: Vec<CueCorrelation>,
    pub fusion: FusionConfig,
}

pub fn correlate<'a, I>(train: I, rule: ThresholdRule) -> Result<CorrelationReport, FusionError>
where
    I: IntoIterator<Item = &'a VideoCueOverlaps>,
{
    let videos: Vec<VideoCueOverlaps> = train.into_iter().cloned().collect();
    let correlations = correlate_cues(&videos)?;
    let fusion = FusionConfig::from_rule(rule, &correlations)?;
    Ok(CorrelationReport {
        format_version: FORMAT_VERSION,
        rule,
        videos: videos.len(),
        correlations,
        fusion,
    })
}

pub fn fuse_all(
    overlaps: &BTreeMap<String, VideoCueOverlaps>,
    report: &CorrelationReport,
) -> Result<BTreeMap<String, OverlapVector>, FusionError> {
    overlaps
        .iter()
        .map(|(id, o)| {
            Ok((
                id.clone(),
                fuse_overlaps(o, &report.correlations, &report.fusion)?,
            ))
        })
        .collect()
}

/// One detection per (test video, class model).
pub fn detect(
    bags: &[VideoBag],
    proposals: &BTreeMap<String, Vec<Tube>>,
    models: &[(u32, LinearModel)],
    fused: Option<&BTreeMap<String, OverlapVector>>,
    alpha_test: f64,
) -> Result<Vec<Detection>, PipelineError> {
    let mut out = Vec::with_capacity(bags.len() * models.len());
    for bag in bags {
        let tubes = proposals.get(&bag.video_id).ok_or_else(|| {
            PipelineError::Input(format!("no proposals for test video `{}`", bag.video_id))
        })?;
        if tubes.len() != bag.len() {
            return Err(PipelineError::Input(format!(
                "`{}` has {} proposals but {} feature rows",
                bag.video_id,
                tubes.len(),
                bag.len()
            )));
        }
        let overlaps = match fused {
            Some(map) => Some(map.get(&bag.video_id).ok_or_else(|| {
                PipelineError::Input(format!("no fused overlaps for `{}`", bag.video_id))
            })?),
            None => None,
        };
        for (class_id, model) in models {
            let (pick, score) = score_test_video(bag, model, overlaps, alpha_test);
            out.push(Detection {
                video_id: bag.video_id.clone(),
                class_id: *class_id,
                proposal: pick,
                tube: tubes[pick].clone(),
                score,
            });
        }
    }
    Ok(out)
}

/// Settings of an in-memory run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub cues: Vec<CueId>,
    pub object_top_k: usize,
    pub rule: ThresholdRule,
    pub train: TrainConfig,
    /// Train with fused overlaps; otherwise the label-only baseline.
    pub pseudo_annotations: bool,
    pub alpha_test: f64,
    pub thresholds: Vec<f64>,
    pub interpolation: Interpolation,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            cues: CueId::ALL.to_vec(),
            object_top_k: DEFAULT_OBJECT_TOP_K,
            rule: ThresholdRule::default(),
            train: TrainConfig::default(),
            pseudo_annotations: true,
            alpha_test: 1.0,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            interpolation: Interpolation::AllPoint,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub overlaps: BTreeMap<String, VideoCueOverlaps>,
    pub correlation: CorrelationReport,
    pub fused: BTreeMap<String, OverlapVector>,
    pub outcome: MilOutcome,
    pub train_bags: Vec<VideoBag>,
    pub plain: EvalReport,
    pub pp: EvalReport,
}

impl PipelineRun {
    pub fn models(&self) -> Vec<(u32, LinearModel)> {
        self.outcome
            .classes
            .iter()
            .map(|c| (c.class_id, c.model.clone()))
            .collect()
    }
}

/// Cue overlap vectors of every video in the dataset.
pub fn dataset_overlaps(
    dataset: &Dataset,
    cues: &[CueId],
    object_top_k: usize,
) -> Result<BTreeMap<String, VideoCueOverlaps>, CueError> {
    dataset
        .videos
        .par_iter()
        .map(|v| {
            let annotations = compute_cues(v.into(), cues, object_top_k)?;
            Ok((
                v.video_id.clone(),
                overlap_vectors(&v.proposals, &v.extent, &annotations)?,
            ))
        })
        .collect()
}

/// Run every stage in memory and evaluate with and without pseudo-annotations at test.
pub fn run(dataset: &Dataset, config: &PipelineConfig) -> Result<PipelineRun, PipelineError> {
    let overlaps = dataset_overlaps(dataset, &config.cues, config.object_top_k)?;
    let correlation = correlate(
        dataset.split(Split::Train).map(|v| &overlaps[&v.video_id]),
        config.rule,
    )?;
    let fused = fuse_all(&overlaps, &correlation)?;
    let train_bags = dataset.bags(Split::Train, config.pseudo_annotations.then_some(&fused))?;
    let classes = dataset.classes();
    let outcome = train_mil(&train_bags, &classes, &config.train)?;

    let test_bags = dataset.bags(Split::Test, None)?;
    let proposals: BTreeMap<String, Vec<Tube>> = dataset
        .split(Split::Test)
        .map(|v| (v.video_id.clone(), v.proposals.clone()))
        .collect();
    let gt = dataset.ground_truth(Split::Test);
    let models: Vec<(u32, LinearModel)> = outcome
        .classes
        .iter()
        .map(|c| (c.class_id, c.model.clone()))
        .collect();
    let plain = sweep(
        &detect(&test_bags, &proposals, &models, None, 0.0)?,
        &gt,
        &config.thresholds,
        SweepOptions {
            pseudo_annotations_at_test: false,
            alpha_test: 0.0,
            interpolation: config.interpolation,
        },
    )?;
    let pp = sweep(
        &detect(
            &test_bags,
            &proposals,
            &models,
            Some(&fused),
            config.alpha_test,
        )?,
        &gt,
        &config.thresholds,
        SweepOptions {
            pseudo_annotations_at_test: true,
            alpha_test: config.alpha_test,
            interpolation: config.interpolation,
        },
    )?;
    Ok(PipelineRun {
        overlaps,
        correlation,
        fused,
        outcome,
        train_bags,
        plain,
        pp,
    })
}

// ---------------------------------------------------------------------------
// File stages

fn cue_record(video_id: &str, extent: &VideoExtent, a: &CueAnnotation) -> CueRecord {
    let (points, boxes) = match a.payload() {
        CuePayload::Points(t) => (
            Some(
                t.iter()
                    .map(|(frame, p)| FramePoint {
                        frame,
                        x: p.x,
                        y: p.y,
                    })
                    .collect(),
            ),
            None,
        ),
        CuePayload::Boxes(t) => (
            None,
            Some(
                t.iter()
                    .map(|(frame, b)| FrameBox {
                        frame,
                        x1: b.x1,
                        y1: b.y1,
                        x2: b.x2,
                        y2: b.y2,
                    })
                    .collect(),
            ),
        ),
    };
    CueRecord {
        format_version: FORMAT_VERSION,
        video_id: video_id.to_string(),
        width: extent.width,
        height: extent.height,
        num_frames: extent.num_frames,
        cue: a.cue(),
        points,
        boxes,
    }
}

fn annotation_from_record(
    path: &Path,
    line: usize,
    r: &CueRecord,
) -> Result<(VideoExtent, CueAnnotation), DataError> {
    let bad = |m: String| DataError::record(path, line, m);
    let extent =
        VideoExtent::new(r.width, r.height, r.num_frames).map_err(|e| bad(e.to_string()))?;
    let payload = match (&r.points, &r.boxes) {
        (Some(points), None) => {
            let mut t = PointTrack::default();
            for p in points {
                if !(p.x.is_finite() && p.y.is_finite()) {
                    return Err(bad(format!("non-finite point on frame {}", p.frame)));
                }
                t.0.insert(p.frame, Point::new(p.x, p.y));
            }
            CuePayload::Points(t)
        }
        (None, Some(boxes)) => {
            let mut t = BoxTrack::default();
            for b in boxes {
                let bb = BBox::new(b.x1, b.y1, b.x2, b.y2).map_err(|e| bad(e.to_string()))?;
                t.0.insert(b.frame, bb);
            }
            CuePayload::Boxes(t)
        }
        _ => {
            return Err(bad(
                "a cue record needs exactly one of `points` or `boxes`".into()
            ))
        }
    };
    let a = CueAnnotation::new(r.cue, payload).map_err(|e| bad(e.to_string()))?;
    Ok((extent, a))
}

/// Video directories listed in a dataset's `videos.jsonl`.
pub fn dataset_video_dirs(data: &Path) -> Result<Vec<PathBuf>, DataError> {
    Ok(
        io::read_jsonl::<VideoMetaRecord>(&data.join("videos.jsonl"))?
            .into_iter()
            .map(|m| data.join("videos").join(m.video_id))
            .collect(),
    )
}

/// Compute pseudo-annotations for each video directory and write `cues.jsonl`.
pub fn cues_stage(
    video_dirs: &[PathBuf],
    cues: &[CueId],
    object_top_k: usize,
    out: &Path,
) -> Result<usize, PipelineError> {
    let per_video: Vec<Vec<CueRecord>> = video_dirs
        .par_iter()
        .map(|dir| {
            let inputs = read_video(dir)?;
            let annotations = compute_cues((&inputs).into(), cues, object_top_k)?;
            Ok::<_, PipelineError>(
                annotations
                    .iter()
                    .map(|a| cue_record(&inputs.video_id, &inputs.extent, a))
                    .collect(),
            )
        })
        .collect::<Result<_, _>>()?;
    let records: Vec<CueRecord> = per_video.into_iter().flatten().collect();
    io::write_jsonl(out, &records)?;
    Ok(records.len())
}

/// Proposals of a multi-video `proposals.jsonl`, as gap-free tubes indexed by proposal id.
pub fn read_proposals(path: &Path) -> Result<BTreeMap<String, Vec<Tube>>, DataError> {
    let mut frames: BTreeMap<String, BTreeMap<u32, BTreeMap<u32, BBox>>> = BTreeMap::new();
    for (line, r) in io::read_jsonl_numbered::<ProposalRecord>(path)? {
        let b = BBox::new(r.x1, r.y1, r.x2, r.y2)
            .map_err(|e| DataError::record(path, line, e.to_string()))?;
        let slot = frames
            .entry(r.video_id)
            .or_default()
            .entry(r.proposal_id)
            .or_default();
        if slot.insert(r.frame, b).is_some() {
            return Err(DataError::record(
                path,
                line,
                format!("duplicate frame {}", r.frame),
            ));
        }
    }
    frames
        .into_iter()
        .map(|(video, props)| {
            let mut tubes = Vec::with_capacity(props.len());
            for (i, (pid, boxes)) in props.into_iter().enumerate() {
                if pid as usize != i {
                    return Err(DataError::invalid(
                        path,
                        format!("`{video}`: proposal ids must be 0..n, missing {i}"),
                    ));
                }
                tubes.push(Tube::from_frames(boxes).map_err(|e| {
                    DataError::invalid(path, format!("`{video}` proposal {pid}: {e}"))
                })?);
            }
            Ok((video, tubes))
        })
        .collect()
}

/// Cue records grouped per video, with overlap vectors against that video's proposals.
fn cue_overlaps_from_files(
    cues_path: &Path,
    proposals: &BTreeMap<String, Vec<Tube>>,
    keep: Option<&BTreeSet<String>>,
) -> Result<BTreeMap<String, VideoCueOverlaps>, PipelineError> {
    let mut grouped: BTreeMap<String, (VideoExtent, Vec<CueAnnotation>)> = BTreeMap::new();
    for (line, r) in io::read_jsonl_numbered::<CueRecord>(cues_path)? {
        if keep.is_some_and(|k| !k.contains(&r.video_id)) {
            continue;
        }
        let (extent, a) = annotation_from_record(cues_path, line, &r)?;
        let entry = grouped
            .entry(r.video_id.clone())
            .or_insert_with(|| (extent, Vec::new()));
        if entry.0 != extent {
            return Err(DataError::record(
                cues_path,
                line,
                "extent differs from earlier records of this video",
            )
            .into());
        }
        entry.1.push(a);
    }
    grouped
        .into_par_iter()
        .map(|(video, (extent, annotations))| {
            let tubes = proposals
                .get(&video)
                .ok_or_else(|| PipelineError::Input(format!("no proposals for video `{video}`")))?;
            Ok((video, overlap_vectors(tubes, &extent, &annotations)?))
        })
        .collect()
}

fn read_video_list(path: &Path) -> Result<BTreeSet<String>, DataError> {
    Ok(io::read_jsonl::<VideoListRecord>(path)?
        .into_iter()
        .map(|r| r.video_id)
        .collect())
}

/// Correlation scores over the videos in `videos` (normally the training list).
pub fn correlate_stage(
    cues_path: &Path,
    proposals_path: &Path,
    videos: Option<&Path>,
    rule: ThresholdRule,
    out: &Path,
) -> Result<CorrelationReport, PipelineError> {
    let proposals = read_proposals(proposals_path)?;
    let keep = videos.map(read_video_list).transpose()?;
    let overlaps = cue_overlaps_from_files(cues_path, &proposals, keep.as_ref())?;
    let report = correlate(overlaps.values(), rule)?;
    io::write_json(out, &report)?;
    Ok(report)
}

/// Fused overlap vector of every video in the cues file.
pub fn fuse_stage(
    cues_path: &Path,
    proposals_path: &Path,
    correlations_path: &Path,
    out: &Path,
) -> Result<usize, PipelineError> {
    let proposals = read_proposals(proposals_path)?;
    let report: CorrelationReport = io::read_json(correlations_path)?;
    if report.format_version != FORMAT_VERSION {
        return Err(DataError::invalid(correlations_path, "unsupported format_version").into());
    }
    let overlaps = cue_overlaps_from_files(cues_path, &proposals, None)?;
    let fused = fuse_all(&overlaps, &report)?;
    let records: Vec<FusedRecord> = fused
        .into_iter()
        .map(|(video_id, o)| FusedRecord {
            format_version: FORMAT_VERSION,
            video_id,
            overlaps: o.0,
        })
        .collect();
    io::write_jsonl(out, &records)?;
    Ok(records.len())
}

pub fn read_fused(path: &Path) -> Result<BTreeMap<String, OverlapVector>, DataError> {
    let mut out = BTreeMap::new();
    for (line, r) in io::read_jsonl_numbered::<FusedRecord>(path)? {
        if r.overlaps.iter().any(|v| !v.is_finite()) {
            return Err(DataError::record(path, line, "non-finite overlap"));
        }
        if out
            .insert(r.video_id.clone(), OverlapVector(r.overlaps))
            .is_some()
        {
            return Err(DataError::record(
                path,
                line,
                format!("duplicate video `{}`", r.video_id),
            ));
        }
    }
    Ok(out)
}

/// Per-video feature matrices from a feature file and its row sidecar.
pub fn read_feature_matrices(
    features_path: &Path,
) -> Result<BTreeMap<String, FeatureMatrix>, DataError> {
    let table = io::read_features(features_path)?;
    let rows_path = feature_rows_path(features_path);
    let mut rows: BTreeMap<String, BTreeMap<u32, u64>> = BTreeMap::new();
    for (line, r) in io::read_jsonl_numbered::<FeatureRowRecord>(&rows_path)? {
        if r.row >= table.rows() as u64 {
            return Err(DataError::record(
                &rows_path,
                line,
                format!(
                    "row {} beyond the {} rows of the feature file",
                    r.row,
                    table.rows()
                ),
            ));
        }
        if rows
            .entry(r.video_id)
            .or_default()
            .insert(r.proposal_id, r.row)
            .is_some()
        {
            return Err(DataError::record(
                &rows_path,
                line,
                "proposal mapped to two feature rows",
            ));
        }
    }
    rows.into_iter()
        .map(|(video, map)| {
            let mut data = Vec::with_capacity(map.len() * table.dim);
            for (i, (pid, row)) in map.into_iter().enumerate() {
                if pid as usize != i {
                    return Err(DataError::invalid(
                        &rows_path,
                        format!("`{video}`: no feature row for proposal {i}"),
                    ));
                }
                data.extend(table.row(row as usize).iter().map(|&v| f64::from(v)));
            }
            let m = FeatureMatrix::new(table.dim, data)
                .map_err(|e| DataError::invalid(&rows_path, e.to_string()))?;
            Ok((video, m))
        })
        .collect()
}

/// A trained class model as stored in `models/class_<c>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub class_id: u32,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub lambda: f64,
    pub objective: f64,
    pub degenerate: bool,
    pub iterations: usize,
    pub folds: usize,
    pub pseudo_annotations: bool,
    pub config_hash: String,
}

impl ModelFile {
    pub fn model(&self) -> LinearModel {
        LinearModel {
            weights: self.weights.clone(),
            bias: self.bias,
            lambda: self.lambda,
            objective: self.objective,
            degenerate: self.degenerate,
            iterations: self.iterations,
            folds: self.folds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub video_id: String,
    pub proposal: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTraining {
    pub class_id: u32,
    pub selections: Vec<SelectionRecord>,
    pub retrains: Vec<RetrainRecord>,
}

/// `models/training.json`: configuration and per-class selections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub format_version: u32,
    pub config: TrainConfig,
    pub pseudo_annotations: bool,
    pub config_hash: String,
    pub classes: Vec<ClassTraining>,
}

/// SHA-256 of the training configuration and the overlap switch.
pub fn config_hash(config: &TrainConfig, pseudo_annotations: bool) -> String {
    let text = serde_json::to_string(&(config, pseudo_annotations)).expect("config serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn labels_by_split(path: &Path, split: Split) -> Result<Vec<(String, u32)>, DataError> {
    Ok(io::read_labels(path)?
        .into_iter()
        .filter(|r| r.split == split)
        .map(|r| (r.video_id, r.class_id))
        .collect())
}

/// Train one model per class on the training videos of `labels`.
pub fn train_stage(
    features_path: &Path,
    labels_path: &Path,
    fused_path: Option<&Path>,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainingSummary, PipelineError> {
    let mut matrices = read_feature_matrices(features_path)?;
    let fused = fused_path.map(read_fused).transpose()?;
    let mut bags = Vec::new();
    for (video, class_id) in labels_by_split(labels_path, Split::Train)? {
        let features = matrices.remove(&video).ok_or_else(|| {
            PipelineError::Input(format!("training video `{video}` has no feature rows"))
        })?;
        let overlaps = match &fused {
            Some(map) => Some(map.get(&video).cloned().ok_or_else(|| {
                PipelineError::Input(format!("training video `{video}` has no fused overlaps"))
            })?),
            None => None,
        };
        bags.push(VideoBag::new(&video, features, vec![class_id], overlaps)?);
    }
    let classes: Vec<u32> = bags
        .iter()
        .flat_map(|b| b.labels.iter().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let outcome = train_mil(&bags, &classes, config)?;
    let pseudo = fused.is_some();
    let hash = config_hash(config, pseudo);

    fs::create_dir_all(out_dir).map_err(|e| DataError::io(out_dir, e))?;
    let mut summary = TrainingSummary {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        pseudo_annotations: pseudo,
        config_hash: hash.clone(),
        classes: Vec::new(),
    };
    for c in &outcome.classes {
        let file = ModelFile {
            format_version: FORMAT_VERSION,
            class_id: c.class_id,
            dim: c.model.weights.len(),
            weights: c.model.weights.clone(),
            bias: c.model.bias,
            lambda: c.model.lambda,
            objective: c.model.objective,
            degenerate: c.model.degenerate,
            iterations: c.model.iterations,
            folds: c.model.folds,
            pseudo_annotations: pseudo,
            config_hash: hash.clone(),
        };
        io::write_json(&out_dir.join(format!("class_{}.json", c.class_id)), &file)?;
        summary.classes.push(ClassTraining {
            class_id: c.class_id,
            selections: c
                .positive_bags
                .iter()
                .zip(&c.selections)
                .map(|(&b, &s)| SelectionRecord {
                    video_id: bags[b].video_id.clone(),
                    proposal: s,
                })
                .collect(),
            retrains: c.retrains.clone(),
        });
    }
    io::write_json(&out_dir.join("training.json"), &summary)?;
    Ok(summary)
}

/// The selection weight used in training, from `training.json`; 1 when the
/// directory has no summary.
pub fn training_alpha(models_dir: &Path) -> Result<f64, DataError> {
    let path = models_dir.join("training.json");
    if !path.exists() {
        return Ok(TrainConfig::default().alpha);
    }
    let summary: TrainingSummary = io::read_json(&path)?;
    Ok(summary.config.alpha)
}

/// Every `class_<c>.json` in a model directory, ordered by class.
pub fn read_models(dir: &Path) -> Result<Vec<(u32, LinearModel)>, DataError> {
    let mut models = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| DataError::io(dir, e))? {
        let path = entry.map_err(|e| DataError::io(dir, e))?.path();
        let is_model = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("class_") && n.ends_with(".json"));
        if !is_model {
            continue;
        }
        let file: ModelFile = io::read_json(&path)?;
        if file.format_version != FORMAT_VERSION {
            return Err(DataError::invalid(&path, "unsupported format_version"));
        }
        if file.weights.len() != file.dim {
            return Err(DataError::invalid(&path, "weight count differs from `dim`"));
        }
        models.push((file.class_id, file.model()));
    }
    if models.is_empty() {
        return Err(DataError::invalid(dir, "no class_<c>.json models found"));
    }
    models.sort_by_key(|(c, _)| *c);
    Ok(models)
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth, DataError> {
    let mut frames: BTreeMap<(String, u32, u32), BTreeMap<u32, BBox>> = BTreeMap::new();
    for (line, r) in io::read_jsonl_numbered::<GtRecord>(path)? {
        let b = BBox::new(r.x1, r.y1, r.x2, r.y2)
            .map_err(|e| DataError::record(path, line, e.to_string()))?;
        let slot = frames
            .entry((r.video_id, r.class_id, r.instance))
            .or_default();
        if slot.insert(r.frame, b).is_some() {
            return Err(DataError::record(
                path,
                line,
                format!("duplicate frame {}", r.frame),
            ));
        }
    }
    let mut gt = GroundTruth::default();
    for ((video, class_id, instance), boxes) in frames {
        let tube = Tube::from_frames(boxes).map_err(|e| {
            DataError::invalid(path, format!("`{video}` GT instance {instance}: {e}"))
        })?;
        gt.insert(&video, class_id, tube);
    }
    Ok(gt)
}

/// Inputs and options of the evaluation stage.
#[derive(Debug, Clone)]
pub struct EvalPaths<'a> {
    pub models: &'a Path,
    pub test: &'a Path,
    pub gt: &'a Path,
    pub features: &'a Path,
    pub proposals: &'a Path,
    pub fused: Option<&'a Path>,
}

pub fn eval_stage(
    paths: &EvalPaths<'_>,
    pp: bool,
    alpha_test: f64,
    thresholds: &[f64],
    interpolation: Interpolation,
) -> Result<EvalReport, PipelineError> {
    let models = read_models(paths.models)?;
    let test: Vec<String> = io::read_jsonl::<VideoListRecord>(paths.test)?
        .into_iter()
        .map(|r| r.video_id)
        .collect();
    let mut gt = read_ground_truth(paths.gt)?;
    // tubes of videos outside the test list would count as misses
    gt.0.retain(|(video, _), _| test.contains(video));
    let mut matrices = read_feature_matrices(paths.features)?;
    let proposals = read_proposals(paths.proposals)?;
    let fused = match (pp, paths.fused) {
        (true, Some(p)) => Some(read_fused(p)?),
        (true, None) => {
            return Err(PipelineError::Input(
                "--pp needs fused overlaps (--fused)".into(),
            ))
        }
        (false, _) => None,
    };
    let bags = test
        .iter()
        .map(|video| {
            let features = matrices.remove(video).ok_or_else(|| {
                PipelineError::Input(format!("test video `{video}` has no feature rows"))
            })?;
            // test labels are not used
            Ok(VideoBag::new(video, features, Vec::new(), None)?)
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let alpha = if pp { alpha_test } else { 0.0 };
    let detections = detect(&bags, &proposals, &models, fused.as_ref(), alpha)?;
    Ok(sweep(
        &detections,
        &gt,
        thresholds,
        SweepOptions {
            pseudo_annotations_at_test: pp,
            alpha_test: alpha,
            interpolation,
        },
    )?)
}
