//! The five pseudo-annotation cues and their per-proposal overlap vectors.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    box_track_overlap, point_overlap, BBox, BoxTrack, Point, PointTrack, Tube, VideoExtent,
};

/// Top object proposals kept per frame by default.
pub const DEFAULT_OBJECT_TOP_K: usize = 1000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CueError {
    #[error("no frame contains a person detection")]
    AllFramesEmpty,
    #[error("cue {0} produced no annotated frames")]
    EmptyTrack(CueId),
    #[error("frame {frame}: weight grid {grid_width}x{grid_height} at downsample {downsample} does not match a {width}x{height} frame")]
    GridShape {
        frame: u32,
        grid_width: u32,
        grid_height: u32,
        downsample: u32,
        width: u32,
        height: u32,
    },
    #[error("frame {frame}: weight grid has an invalid entry {value}")]
    InvalidWeight { frame: u32, value: f64 },
    #[error("frame {frame}: non-finite detection confidence")]
    NonFiniteConfidence { frame: u32 },
    #[error("cue {cue} carries a {found} payload")]
    PayloadKind { cue: CueId, found: &'static str },
    #[error("overlap vectors need at least 2 proposals, got {0}")]
    TooFewProposals(usize),
    #[error("unknown cue '{0}'")]
    UnknownCue(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CueId {
    #[serde(rename = "person")]
    Person,
    #[serde(rename = "im")]
    IndependentMotion,
    #[serde(rename = "ap")]
    ActionProposals,
    #[serde(rename = "fc")]
    FrameCenter,
    #[serde(rename = "oa")]
    ObjectProposals,
}

impl CueId {
    pub const ALL: [CueId; 5] = [
        CueId::Person,
        CueId::IndependentMotion,
        CueId::ActionProposals,
        CueId::FrameCenter,
        CueId::ObjectProposals,
    ];

    pub fn short_name(&self) -> &'static str {
        match self {
            CueId::Person => "person",
            CueId::IndependentMotion => "im",
            CueId::ActionProposals => "ap",
            CueId::FrameCenter => "fc",
            CueId::ObjectProposals => "oa",
        }
    }

    pub fn is_box_cue(&self) -> bool {
        matches!(self, CueId::Person)
    }
}

impl fmt::Display for CueId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for CueId {
    type Err = CueError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CueId::ALL
            .into_iter()
            .find(|c| c.short_name() == s)
            .ok_or_else(|| CueError::UnknownCue(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub confidence: f64,
}

/// Detector output for one frame. An empty list is a detector miss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBoxFrame {
    pub frame: u32,
    pub detections: Vec<ScoredBox>,
}

/// Per-frame independent-motion weights on a grid downsampled by `downsample`.
/// Row-major: `weights[row * grid_width + col]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightGrid {
    pub frame: u32,
    pub grid_width: u32,
    pub grid_height: u32,
    pub downsample: u32,
    pub weights: Vec<f64>,
}

impl WeightGrid {
    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn check(&self, extent: &VideoExtent) -> Result<(), CueError> {
        let ds = self.downsample;
        let expected = |full: u32| if ds == 0 { 0 } else { full.div_ceil(ds) };
        if ds == 0
            || self.grid_width != expected(extent.width)
            || self.grid_height != expected(extent.height)
            || self.weights.len() != (self.grid_width * self.grid_height) as usize
        {
            return Err(CueError::GridShape {
                frame: self.frame,
                grid_width: self.grid_width,
                grid_height: self.grid_height,
                downsample: ds,
                width: extent.width,
                height: extent.height,
            });
        }
        if let Some(&value) = self.weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(CueError::InvalidWeight {
                frame: self.frame,
                value,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CuePayload {
    Boxes(BoxTrack),
    Points(PointTrack),
}

impl CuePayload {
    fn kind(&self) -> &'static str {
        match self {
            CuePayload::Boxes(_) => "box",
            CuePayload::Points(_) => "point",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            CuePayload::Boxes(t) => t.len(),
            CuePayload::Points(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One pseudo-annotation track. The person cue carries boxes, every other cue points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueAnnotation {
    cue: CueId,
    payload: CuePayload,
}

impl CueAnnotation {
    pub fn new(cue: CueId, payload: CuePayload) -> Result<Self, CueError> {
        let ok = matches!(
            (cue.is_box_cue(), &payload),
            (true, CuePayload::Boxes(_)) | (false, CuePayload::Points(_))
        );
        if !ok {
            return Err(CueError::PayloadKind {
                cue,
                found: payload.kind(),
            });
        }
        if payload.is_empty() {
            return Err(CueError::EmptyTrack(cue));
        }
        Ok(Self { cue, payload })
    }

    pub fn cue(&self) -> CueId {
        self.cue
    }

    pub fn payload(&self) -> &CuePayload {
        &self.payload
    }
}

/// Per-proposal overlap scores of one cue within one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OverlapVector(pub Vec<f64>);

impl OverlapVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Higher confidence wins; ties go to the larger box, then the lexicographically
/// smaller `(x1, y1, x2, y2)`.
fn detection_order(a: &ScoredBox, b: &ScoredBox) -> Ordering {
    a.confidence
        .total_cmp(&b.confidence)
        .then_with(|| a.bbox.area().total_cmp(&b.bbox.area()))
        .then_with(|| {
            let key = |d: &ScoredBox| [d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2];
            let (ka, kb) = (key(a), key(b));
            ka.iter()
                .zip(&kb)
                .map(|(x, y)| y.total_cmp(x))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

fn check_confidences(frame: &ScoredBoxFrame) -> Result<(), CueError> {
    if frame.detections.iter().any(|d| !d.confidence.is_finite()) {
        return Err(CueError::NonFiniteConfidence { frame: frame.frame });
    }
    Ok(())
}

/// Highest-confidence person box per frame. Frames without detections are left out.
pub fn person_cue(frames: &[ScoredBoxFrame]) -> Result<CueAnnotation, CueError> {
    let mut track = BoxTrack::default();
    for frame in frames {
        check_confidences(frame)?;
        if let Some(best) = frame.detections.iter().max_by(|a, b| detection_order(a, b)) {
            track.0.insert(frame.frame, best.bbox);
        }
    }
    if track.is_empty() {
        return Err(CueError::AllFramesEmpty);
    }
    CueAnnotation::new(CueId::Person, CuePayload::Boxes(track))
}

/// Motion-weighted center of mass per frame. Grid cells map back to full
/// resolution as their pixel footprint clipped to the frame; a cell's mass sits
/// at the footprint center. Zero-mass frames are left out.
pub fn independent_motion_cue(
    grids: &[WeightGrid],
    extent: &VideoExtent,
) -> Result<CueAnnotation, CueError> {
    let (fw, fh) = (f64::from(extent.width), f64::from(extent.height));
    let mut track = PointTrack::default();
    for grid in grids {
        grid.check(extent)?;
        let ds = f64::from(grid.downsample);
        let cell_center = |i: u32, full: f64| {
            let lo = f64::from(i) * ds;
            0.5 * (lo + (lo + ds).min(full))
        };
        let (mut mass, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for row in 0..grid.grid_height {
            let cy = cell_center(row, fh);
            for col in 0..grid.grid_width {
                let w = grid.weights[(row * grid.grid_width + col) as usize];
                if w > 0.0 {
                    mass += w;
                    sx += w * cell_center(col, fw);
                    sy += w * cy;
                }
            }
        }
        if mass > 0.0 {
            track.0.insert(grid.frame, Point::new(sx / mass, sy / mass));
        }
    }
    if track.is_empty() {
        return Err(CueError::EmptyTrack(CueId::IndependentMotion));
    }
    CueAnnotation::new(CueId::IndependentMotion, CuePayload::Points(track))
}

/// Center of mass of the box-count field `C(x, y) = #{b : (x, y) ∈ b}`.
///
/// The field is a sum of box indicators, so its first moment is the
/// area-weighted mean of box centers. Returns `None` when the boxes cover no area.
pub fn count_field_center<'a, I>(boxes: I) -> Option<Point>
where
    I: IntoIterator<Item = &'a BBox>,
{
    let (mut mass, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for b in boxes {
        let a = b.area();
        if a > 0.0 {
            let c = b.center();
            mass += a;
            sx += a * c.x;
            sy += a * c.y;
        }
    }
    (mass > 0.0).then(|| Point::new(sx / mass, sy / mass))
}

fn clip_to_extent(b: &BBox, extent: &VideoExtent) -> BBox {
    b.clipped(f64::from(extent.width), f64::from(extent.height))
}

/// Count-field center of the action proposals present on each frame.
pub fn proposal_count_cue(
    proposals: &[Tube],
    extent: &VideoExtent,
) -> Result<CueAnnotation, CueError> {
    let mut track = PointTrack::default();
    for frame in 0..extent.num_frames {
        let boxes: Vec<BBox> = proposals
            .iter()
            .filter_map(|t| t.get(frame))
            .map(|b| clip_to_extent(b, extent))
            .collect();
        if let Some(p) = count_field_center(&boxes) {
            track.0.insert(frame, p);
        }
    }
    if track.is_empty() {
        return Err(CueError::EmptyTrack(CueId::ActionProposals));
    }
    CueAnnotation::new(CueId::ActionProposals, CuePayload::Points(track))
}

/// The frame center on every frame of the video.
pub fn frame_center_cue(extent: &VideoExtent) -> CueAnnotation {
    let c = extent.center();
    let track = PointTrack((0..extent.num_frames).map(|f| (f, c)).collect());
    CueAnnotation {
        cue: CueId::FrameCenter,
        payload: CuePayload::Points(track),
    }
}

/// Count-field center of the `top_k` most confident object boxes on each frame.
/// Confidences only rank; every kept box counts once.
pub fn object_count_cue(
    frames: &[ScoredBoxFrame],
    extent: &VideoExtent,
    top_k: usize,
) -> Result<CueAnnotation, CueError> {
    let mut track = PointTrack::default();
    for frame in frames {
        check_confidences(frame)?;
        let mut ranked: Vec<&ScoredBox> = frame.detections.iter().collect();
        ranked.sort_by(|a, b| detection_order(b, a));
        let kept: Vec<BBox> = ranked
            .into_iter()
            .take(top_k)
            .map(|d| clip_to_extent(&d.bbox, extent))
            .collect();
        if let Some(p) = count_field_center(&kept) {
            track.0.insert(frame.frame, p);
        }
    }
    if track.is_empty() {
        return Err(CueError::EmptyTrack(CueId::ObjectProposals));
    }
    CueAnnotation::new(CueId::ObjectProposals, CuePayload::Points(track))
}

/// Overlap of every proposal with one cue: spatio-temporal IoU for the person
/// box track, point overlap for point cues.
pub fn cue_overlap_vector(
    proposals: &[Tube],
    cue: &CueAnnotation,
    extent: &VideoExtent,
) -> Result<OverlapVector, CueError> {
    if proposals.len() < 2 {
        return Err(CueError::TooFewProposals(proposals.len()));
    }
    let scores = match cue.payload() {
        CuePayload::Boxes(track) => proposals
            .iter()
            .map(|p| box_track_overlap(p, track))
            .collect(),
        CuePayload::Points(points) => proposals
            .iter()
            .map(|p| point_overlap(p, points, extent))
            .collect(),
    };
    Ok(OverlapVector(scores))
}
