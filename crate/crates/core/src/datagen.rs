//! Synthetic benchmark generation and dataset ingestion.
//!
//! A generated video has one ground-truth tube, a proposal set containing one
//! planted high-overlap proposal, cue inputs whose noise is set per cue, and
//! features whose class signal grows with proposal-to-GT overlap.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cues::OverlapVector;
use crate::cues::{ScoredBox, ScoredBoxFrame, WeightGrid};
use crate::eval::GroundTruth;
use crate::geometry::{tube_iou, BBox, Tube, VideoExtent};
use crate::io::{
    self, feature_rows_path, DataError, FeatureRowRecord, FeatureTable, GtRecord, LabelRow,
    MotionRecord, ProposalRecord, ScoredBoxRecord, Split, VideoListRecord, VideoMetaRecord,
};
use crate::mil::{FeatureMatrix, MilError, VideoBag};
use crate::FORMAT_VERSION;

/// Motion grids are stored at this downsampling factor.
pub const MOTION_DOWNSAMPLE: u32 = 8;
const MAX_DISTRACTORS: usize = 4;
const OBJECTS_PER_FRAME: usize = 30;
const LARGE_FRACTION: f64 = 0.05;
/// Every non-planted proposal stays at least this far below the planted IoU.
const IOU_MARGIN: f64 = 0.05;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Per-cue noise, each in `[0, 1]`. All zeros gives clean cues.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseLevels {
    /// Probability that the person detector misses the actor on a frame.
    pub detector_miss: f64,
    /// Distractor rate and localization jitter of person detections.
    pub detector_clutter: f64,
    /// Weight of background motion in the motion grids.
    pub motion_clutter: f64,
    /// How far the actor may sit from the frame center, as a fraction of the slack.
    pub center_offset: f64,
    /// Fraction of object boxes that land off the actor.
    pub object_clutter: f64,
}

impl NoiseLevels {
    pub fn uniform(level: f64) -> Self {
        Self {
            detector_miss: level,
            detector_clutter: level,
            motion_clutter: level,
            center_offset: level,
            object_clutter: level,
        }
    }

    fn values(&self) -> [(&'static str, f64); 5] {
        [
            ("detector_miss", self.detector_miss),
            ("detector_clutter", self.detector_clutter),
            ("motion_clutter", self.motion_clutter),
            ("center_offset", self.center_offset),
            ("object_clutter", self.object_clutter),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub num_classes: u32,
    pub train_videos_per_class: u32,
    pub test_videos_per_class: u32,
    pub width: u32,
    pub height: u32,
    pub num_frames: u32,
    pub proposals_per_video: u32,
    /// The planted proposal's IoU with the GT tube is at least this.
    pub planted_min_iou: f64,
    /// Share of proposals that partially overlap the GT tube.
    pub near_fraction: f64,
    pub feature_dim: u32,
    /// Distance between a class cluster and the background cluster, in units of
    /// the per-dimension noise deviation.
    pub feature_snr: f64,
    pub noise: NoiseLevels,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_classes: 5,
            train_videos_per_class: 20,
            test_videos_per_class: 10,
            width: 160,
            height: 120,
            num_frames: 16,
            proposals_per_video: 100,
            planted_min_iou: 0.7,
            near_fraction: 0.1,
            feature_dim: 64,
            feature_snr: 4.0,
            noise: NoiseLevels::default(),
        }
    }
}

impl ScenarioConfig {
    /// Parse a TOML scenario. Every field but `seed` has a default.
    pub fn from_toml(text: &str) -> Result<Self, DatagenError> {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| DatagenError::Config(e.to_string()))?;
        if !table.contains_key("seed") {
            return Err(DatagenError::Config("`seed` is required".into()));
        }
        let config: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| DatagenError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let fail = |m: String| Err(DatagenError::Config(m));
        for (name, v) in [
            ("num_classes", self.num_classes),
            ("train_videos_per_class", self.train_videos_per_class),
            ("test_videos_per_class", self.test_videos_per_class),
            ("feature_dim", self.feature_dim),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.width < 16 || self.height < 16 || self.num_frames < 4 {
            return fail("extent must be at least 16x16 pixels and 4 frames".into());
        }
        if self.num_classes < 2 {
            return fail("at least two classes are needed for negatives".into());
        }
        for (name, v) in self.noise.values() {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("noise.{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.planted_min_iou > IOU_MARGIN && self.planted_min_iou <= 1.0) {
            return fail("planted_min_iou must lie in (0.05, 1]".into());
        }
        if !(0.0..=0.5).contains(&self.near_fraction) {
            return fail("near_fraction must lie in [0, 0.5]".into());
        }
        if !(self.feature_snr >= 0.0 && self.feature_snr.is_finite()) {
            return fail("feature_snr must be a non-negative number".into());
        }
        let (near, large) = self.special_counts();
        if (self.proposals_per_video as usize) < 2 + near + large {
            return fail(format!(
                "proposals_per_video must be at least {}",
                2 + near + large
            ));
        }
        Ok(())
    }

    fn special_counts(&self) -> (usize, usize) {
        let p = f64::from(self.proposals_per_video);
        (
            (p * self.near_fraction).round() as usize,
            (p * LARGE_FRACTION).round() as usize,
        )
    }

    pub fn extent(&self) -> VideoExtent {
        VideoExtent {
            width: self.width,
            height: self.height,
            num_frames: self.num_frames,
        }
    }
}

/// One video of a dataset together with its cue inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoData {
    pub video_id: String,
    pub extent: VideoExtent,
    pub split: Split,
    pub class_id: u32,
    pub proposals: Vec<Tube>,
    /// Person detections, one entry per frame that has any.
    pub detections: Vec<ScoredBoxFrame>,
    pub motion: Vec<WeightGrid>,
    pub objects: Vec<ScoredBoxFrame>,
    pub gt: Vec<Tube>,
    /// Feature-table row of each proposal.
    pub feature_rows: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub videos: Vec<VideoData>,
    pub features: FeatureTable,
}

impl Dataset {
    pub fn video(&self, video_id: &str) -> Option<&VideoData> {
        self.videos.iter().find(|v| v.video_id == video_id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &VideoData> + '_ {
        self.videos.iter().filter(move |v| v.split == split)
    }

    pub fn classes(&self) -> Vec<u32> {
        self.videos
            .iter()
            .map(|v| v.class_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn feature_matrix(&self, video: &VideoData) -> FeatureMatrix {
        let dim = self.features.dim;
        let mut data = Vec::with_capacity(dim * video.feature_rows.len());
        for &r in &video.feature_rows {
            data.extend(self.features.row(r as usize).iter().map(|&v| f64::from(v)));
        }
        FeatureMatrix::new(dim, data).expect("feature rows have the table dimension")
    }

    /// MIL bags for one split. Overlaps are looked up by video id.
    pub fn bags(
        &self,
        split: Split,
        overlaps: Option<&BTreeMap<String, OverlapVector>>,
    ) -> Result<Vec<VideoBag>, MilError> {
        self.split(split)
            .map(|v| {
                let o = overlaps.and_then(|m| m.get(&v.video_id)).cloned();
                VideoBag::new(&v.video_id, self.feature_matrix(v), vec![v.class_id], o)
            })
            .collect()
    }

    pub fn ground_truth(&self, split: Split) -> GroundTruth {
        let mut gt = GroundTruth::default();
        for v in self.split(split) {
            for t in &v.gt {
                gt.insert(&v.video_id, v.class_id, t.clone());
            }
        }
        gt
    }
}

/// What the generator drew for a video's cue inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueDraws {
    pub missed_frames: u32,
    pub distractor_boxes: u32,
    pub clutter_blobs: u32,
    /// GT centre at its first frame minus the frame centre.
    pub center_offset: (f64, f64),
    pub objects_on_actor: u32,
    pub objects_off_actor: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoLedger {
    pub video_id: String,
    pub split: Split,
    pub class_id: u32,
    pub gt: Vec<Tube>,
    pub planted_proposal: usize,
    /// IoU of every proposal with the GT tube.
    pub proposal_iou: Vec<f64>,
    pub draws: CueDraws,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorLedger {
    pub format_version: u32,
    pub scenario: ScenarioConfig,
    pub videos: Vec<VideoLedger>,
}

impl GeneratorLedger {
    pub fn video(&self, video_id: &str) -> Option<&VideoLedger> {
        self.videos.iter().find(|v| v.video_id == video_id)
    }
}

fn r2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn r3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Box of the given centre and size pushed inside the frame, at least a pixel wide.
fn make_box(cx: f64, cy: f64, w: f64, h: f64, extent: &VideoExtent) -> BBox {
    let (fw, fh) = (f64::from(extent.width), f64::from(extent.height));
    let x1 = r2((cx - w / 2.0).clamp(0.0, fw - 1.0));
    let y1 = r2((cy - h / 2.0).clamp(0.0, fh - 1.0));
    let x2 = r2((cx + w / 2.0).clamp(x1 + 1.0, fw));
    let y2 = r2((cy + h / 2.0).clamp(y1 + 1.0, fh));
    BBox::new(x1, y1, x2, y2).expect("clamped box is valid")
}

/// Moving box of constant size over `start..=end`.
fn moving_tube(
    start: u32,
    end: u32,
    (cx, cy): (f64, f64),
    (vx, vy): (f64, f64),
    (w, h): (f64, f64),
    extent: &VideoExtent,
) -> Tube {
    let boxes = (start..=end)
        .map(|f| {
            let t = f64::from(f - start);
            make_box(cx + vx * t, cy + vy * t, w, h, extent)
        })
        .collect();
    Tube::new(start, boxes).expect("non-empty tube")
}

fn jittered(tube: &Tube, amount: f64, rng: &mut ChaCha8Rng, extent: &VideoExtent) -> Tube {
    let boxes = tube
        .boxes()
        .iter()
        .map(|b| {
            let (w, h) = (b.width(), b.height());
            let c = b.center();
            let dx = uniform(rng, -amount, amount) * w;
            let dy = uniform(rng, -amount, amount) * h;
            let sw = 1.0 + uniform(rng, -amount, amount);
            let sh = 1.0 + uniform(rng, -amount, amount);
            make_box(c.x + dx, c.y + dy, w * sw, h * sh, extent)
        })
        .collect();
    Tube::new(tube.first_frame(), boxes).expect("non-empty tube")
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Planted,
    Near,
    Large,
    Background,
}

struct GeneratedVideo {
    video: VideoData,
    features: Vec<f32>,
    ledger: VideoLedger,
}

fn class_directions(config: &ScenarioConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0);
    (0..config.num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..config.feature_dim)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn gt_tube(
    config: &ScenarioConfig,
    rng: &mut ChaCha8Rng,
    extent: &VideoExtent,
) -> (Tube, (f64, f64)) {
    let (fw, fh) = (f64::from(extent.width), f64::from(extent.height));
    let n = extent.num_frames;
    let w = fw * uniform(rng, 0.22, 0.35);
    let h = fh * uniform(rng, 0.45, 0.65);
    let start = rng.random_range(0..=n / 5);
    let end = rng.random_range(n - 1 - n / 5..=n - 1);
    let span = f64::from(end - start);
    let drift = 0.4;
    let (vx, vy) = (
        uniform(rng, -drift, drift),
        uniform(rng, -drift, drift) * 0.5,
    );
    // keep the whole path inside the frame
    let slack_x = ((fw - w) / 2.0 - (vx * span).abs() - 1.0).max(0.0);
    let slack_y = ((fh - h) / 2.0 - (vy * span).abs() - 1.0).max(0.0);
    let off = config.noise.center_offset;
    let ox = off * uniform(rng, -1.0, 1.0) * slack_x;
    let oy = off * uniform(rng, -1.0, 1.0) * slack_y;
    // centre the path, then offset
    let cx = fw / 2.0 + ox - vx * span / 2.0;
    let cy = fh / 2.0 + oy - vy * span / 2.0;
    let tube = moving_tube(start, end, (cx, cy), (vx, vy), (w, h), extent);
    let c = tube.boxes()[0].center();
    (tube, (r3(c.x - fw / 2.0), r3(c.y - fh / 2.0)))
}

fn random_span(rng: &mut ChaCha8Rng, n: u32, min_len: u32) -> (u32, u32) {
    let len = rng.random_range(min_len.min(n)..=n);
    let start = rng.random_range(0..=n - len);
    (start, start + len - 1)
}

fn proposal(kind: Kind, gt: &Tube, rng: &mut ChaCha8Rng, extent: &VideoExtent) -> Tube {
    let (fw, fh) = (f64::from(extent.width), f64::from(extent.height));
    let n = extent.num_frames;
    let g0 = gt.boxes()[0];
    let (gw, gh) = (g0.width(), g0.height());
    match kind {
        Kind::Planted => jittered(gt, 0.04, rng, extent),
        Kind::Near => {
            let sx = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let sy = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let dx = sx * uniform(rng, 0.2, 0.45) * gw;
            let dy = sy * uniform(rng, 0.0, 0.3) * gh;
            let s = uniform(rng, 0.85, 1.25);
            let start = (i64::from(gt.first_frame()) + rng.random_range(-3..=3))
                .clamp(0, i64::from(n) - 1) as u32;
            let end = (i64::from(gt.last_frame()) + rng.random_range(-3..=3))
                .clamp(i64::from(start), i64::from(n) - 1) as u32;
            let boxes = (start..=end)
                .map(|f| {
                    let f = f.clamp(gt.first_frame(), gt.last_frame());
                    let c = gt.get(f).expect("inside GT span").center();
                    make_box(c.x + dx, c.y + dy, gw * s, gh * s, extent)
                })
                .collect();
            Tube::new(start, boxes).expect("non-empty tube")
        }
        Kind::Large => {
            let c = g0.center();
            let w = fw * uniform(rng, 0.6, 0.9);
            let h = fh * uniform(rng, 0.7, 0.95);
            let cx = c.x + uniform(rng, -0.1, 0.1) * fw;
            let cy = c.y + uniform(rng, -0.1, 0.1) * fh;
            moving_tube(0, n - 1, (cx, cy), (0.0, 0.0), (w, h), extent)
        }
        Kind::Background => {
            let w = fw * uniform(rng, 0.15, 0.45);
            let h = fh * uniform(rng, 0.3, 0.7);
            let cx = uniform(rng, 0.0, fw);
            let cy = uniform(rng, 0.0, fh);
            let (start, end) = random_span(rng, n, n / 3);
            let v = (uniform(rng, -1.0, 1.0), uniform(rng, -0.5, 0.5));
            moving_tube(start, end, (cx, cy), v, (w, h), extent)
        }
    }
}

fn proposals(
    config: &ScenarioConfig,
    gt: &Tube,
    rng: &mut ChaCha8Rng,
    extent: &VideoExtent,
) -> (Vec<Tube>, Vec<f64>, usize) {
    let p = config.proposals_per_video as usize;
    let (near, large) = config.special_counts();
    let mut kinds = vec![Kind::Near; near];
    kinds.extend(std::iter::repeat_n(Kind::Large, large));
    kinds.extend(std::iter::repeat_n(Kind::Background, p - 1 - near - large));
    kinds.shuffle(rng);
    let planted = rng.random_range(0..p);
    kinds.insert(planted, Kind::Planted);

    let mut planted_tube = gt.clone();
    for _ in 0..50 {
        let t = proposal(Kind::Planted, gt, rng, extent);
        if tube_iou(&t, gt) >= config.planted_min_iou {
            planted_tube = t;
            break;
        }
    }
    let planted_iou = tube_iou(&planted_tube, gt);
    let ceiling = planted_iou - IOU_MARGIN;

    let mut tubes = Vec::with_capacity(p);
    let mut ious = Vec::with_capacity(p);
    for &kind in &kinds {
        let t = if kind == Kind::Planted {
            planted_tube.clone()
        } else {
            let mut t = proposal(kind, gt, rng, extent);
            let mut tries = 0;
            while tube_iou(&t, gt) > ceiling {
                tries += 1;
                let k = if tries < 20 { kind } else { Kind::Background };
                t = proposal(k, gt, rng, extent);
            }
            t
        };
        ious.push(tube_iou(&t, gt));
        tubes.push(t);
    }
    (tubes, ious, planted)
}

fn person_detections(
    config: &ScenarioConfig,
    gt: &Tube,
    rng: &mut ChaCha8Rng,
    extent: &VideoExtent,
    draws: &mut CueDraws,
) -> Vec<ScoredBoxFrame> {
    let (fw, fh) = (f64::from(extent.width), f64::from(extent.height));
    let clutter = config.noise.detector_clutter;
    let g0 = gt.boxes()[0];
    let mut out = Vec::new();
    for f in 0..extent.num_frames {
        let mut dets = Vec::new();
        if let Some(b) = gt.get(f) {
            if rng.random_bool(config.noise.detector_miss) {
                draws.missed_frames += 1;
            } else {
                let j = 0.15 * clutter;
                let c = b.center();
                let (w, h) = (b.width(), b.height());
                let bbox = if j > 0.0 {
                    make_box(
                        c.x + uniform(rng, -j, j) * w,
                        c.y + uniform(rng, -j, j) * h,
                        w * (1.0 + uniform(rng, -j, j)),
                        h * (1.0 + uniform(rng, -j, j)),
                        extent,
                    )
                } else {
                    *b
                };
                dets.push(ScoredBox {
                    bbox,
                    confidence: r3(uniform(rng, 0.6, 1.0)),
                });
            }
        }
        for _ in 0..MAX_DISTRACTORS {
            if rng.random_bool(clutter) {
                draws.distractor_boxes += 1;
                let s = uniform(rng, 0.7, 1.3);
                dets.push(ScoredBox {
                    bbox: make_box(
                        uniform(rng, 0.0, fw),
                        uniform(rng, 0.0, fh),
                        g0.width() * s,
                        g0.height() * s,
                        extent,
                    ),
                    confidence: r3(uniform(rng, 0.1, 0.95)),
                });
            }
        }
        if !dets.is_empty() {
            out.push(ScoredBoxFrame {
                frame: f,
                detections: dets,
            });
        }
    }
    out
}

fn motion_grids(
    config: &ScenarioConfig,
    gt: &Tube,
    rng: &mut ChaCha8Rng,
    extent: &VideoExtent,
    draws: &mut CueDraws,
) -> Vec<WeightGrid> {
    let ds = MOTION_DOWNSAMPLE;
    let (gw, gh) = (extent.width.div_ceil(ds), extent.height.div_ceil(ds));
    let (fw, fh) = (f64::from(extent.width), f64::from(extent.height));
    let cell_center = |i: u32, full: f64| {
        let lo = f64::from(i * ds);
        0.5 * (lo + (lo + f64::from(ds)).min(full))
    };
    let clutter = config.noise.motion_clutter;
    let mut out = Vec::new();
    for f in 0..extent.num_frames {
        let actor = gt.get(f);
        let blob = if rng.random_bool(clutter) {
            draws.clutter_blobs += 1;
            let (w, h) = (fw * uniform(rng, 0.15, 0.4), fh * uniform(rng, 0.2, 0.5));
            Some(make_box(
                uniform(rng, 0.0, fw),
                uniform(rng, 0.0, fh),
                w,
                h,
                extent,
            ))
        } else {
            None
        };
        let mut weights = Vec::with_capacity((gw * gh) as usize);
        for row in 0..gh {
            for col in 0..gw {
                let p = crate::geometry::Point::new(cell_center(col, fw), cell_center(row, fh));
                let mut w = 0.0;
                if actor.is_some_and(|b| b.contains(&p)) {
                    w += 1.0;
                }
                if blob.is_some_and(|b| b.contains(&p)) {
                    w += uniform(rng, 0.5, 1.0);
                }
                if clutter > 0.0 {
                    w += 0.5 * clutter * rng.random::<f64>();
                }
                weights.push(r3(w.min(1.0)));
            }
        }
        if weights.iter().any(|&w| w > 0.0) {
            out.push(WeightGrid {
                frame: f,
                grid_width: gw,
                grid_height: gh,
                downsample: ds,
                weights,
            });
        }
    }
    out
}

fn object_boxes(
    config: &ScenarioConfig,
    gt: &Tube,
    rng: &mut ChaCha8Rng,
    extent: &VideoExtent,
    draws: &mut CueDraws,
) -> Vec<ScoredBoxFrame> {
    let (fw, fh) = (f64::from(extent.width), f64::from(extent.height));
    let mut out = Vec::new();
    for f in 0..extent.num_frames {
        let actor = gt.get(f);
        let mut dets = Vec::new();
        for _ in 0..OBJECTS_PER_FRAME {
            if rng.random_bool(config.noise.object_clutter) {
                draws.objects_off_actor += 1;
                let (w, h) = (fw * uniform(rng, 0.05, 0.4), fh * uniform(rng, 0.05, 0.4));
                dets.push(ScoredBox {
                    bbox: make_box(uniform(rng, 0.0, fw), uniform(rng, 0.0, fh), w, h, extent),
                    confidence: r3(rng.random::<f64>()),
                });
            } else if let Some(b) = actor {
                draws.objects_on_actor += 1;
                let c = b.center();
                let (bw, bh) = (b.width(), b.height());
                dets.push(ScoredBox {
                    bbox: make_box(
                        c.x + uniform(rng, -0.25, 0.25) * bw,
                        c.y + uniform(rng, -0.25, 0.25) * bh,
                        bw * uniform(rng, 0.3, 1.0),
                        bh * uniform(rng, 0.3, 1.0),
                        extent,
                    ),
                    confidence: r3(uniform(rng, 0.3, 1.0)),
                });
            }
        }
        if !dets.is_empty() {
            out.push(ScoredBoxFrame {
                frame: f,
                detections: dets,
            });
        }
    }
    out
}

fn generate_video(
    config: &ScenarioConfig,
    directions: &[Vec<f64>],
    index: usize,
    split: Split,
    class_id: u32,
    local: u32,
) -> GeneratedVideo {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64 + 1);
    let extent = config.extent();
    let split_name = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let video_id = format!("c{class_id}_{split_name}_{local:03}");

    let (gt, center_offset) = gt_tube(config, &mut rng, &extent);
    let (proposals, proposal_iou, planted) = proposals(config, &gt, &mut rng, &extent);

    let dir = &directions[class_id as usize];
    let mut features = Vec::with_capacity(proposals.len() * dir.len());
    for &u in &proposal_iou {
        let signal = u * config.feature_snr;
        for d in dir {
            let noise: f64 = rng.sample(StandardNormal);
            features.push((signal * d + noise) as f32);
        }
    }

    let mut draws = CueDraws {
        missed_frames: 0,
        distractor_boxes: 0,
        clutter_blobs: 0,
        center_offset,
        objects_on_actor: 0,
        objects_off_actor: 0,
    };
    let detections = person_detections(config, &gt, &mut rng, &extent, &mut draws);
    let motion = motion_grids(config, &gt, &mut rng, &extent, &mut draws);
    let objects = object_boxes(config, &gt, &mut rng, &extent, &mut draws);

    let ledger = VideoLedger {
        video_id: video_id.clone(),
        split,
        class_id,
        gt: vec![gt.clone()],
        planted_proposal: planted,
        proposal_iou,
        draws,
    };
    GeneratedVideo {
        video: VideoData {
            video_id,
            extent,
            split,
            class_id,
            proposals,
            detections,
            motion,
            objects,
            gt: vec![gt],
            feature_rows: Vec::new(),
        },
        features,
        ledger,
    }
}

/// Generate a scenario in memory. Each video draws from its own stream of the
/// seeded generator, so the result does not depend on thread scheduling.
pub fn generate(config: &ScenarioConfig) -> Result<(Dataset, GeneratorLedger), DatagenError> {
    config.validate()?;
    let directions = class_directions(config);
    let mut jobs = Vec::new();
    for (split, per_class) in [
        (Split::Train, config.train_videos_per_class),
        (Split::Test, config.test_videos_per_class),
    ] {
        for c in 0..config.num_classes {
            for i in 0..per_class {
                jobs.push((split, c, i));
            }
        }
    }
    let generated: Vec<GeneratedVideo> = jobs
        .par_iter()
        .enumerate()
        .map(|(index, &(split, c, i))| generate_video(config, &directions, index, split, c, i))
        .collect();

    let dim = config.feature_dim as usize;
    let mut data = Vec::new();
    let mut videos = Vec::with_capacity(generated.len());
    let mut ledgers = Vec::with_capacity(generated.len());
    for g in generated {
        let mut video = g.video;
        let first = (data.len() / dim) as u64;
        video.feature_rows = (first..first + video.proposals.len() as u64).collect();
        data.extend(g.features);
        videos.push(video);
        ledgers.push(g.ledger);
    }
    Ok((
        Dataset {
            videos,
            features: FeatureTable { dim, data },
        },
        GeneratorLedger {
            format_version: FORMAT_VERSION,
            scenario: config.clone(),
            videos: ledgers,
        },
    ))
}

/// Generate a scenario and write it, with its ledger, to `out`.
pub fn generate_to_dir(config: &ScenarioConfig, out: &Path) -> Result<Dataset, DatagenError> {
    let (dataset, ledger) = generate(config)?;
    write_dataset(&dataset, out)?;
    io::write_json(&out.join("ledger.json"), &ledger)?;
    Ok(dataset)
}

fn meta_record(v: &VideoData) -> VideoMetaRecord {
    VideoMetaRecord {
        format_version: FORMAT_VERSION,
        video_id: v.video_id.clone(),
        width: v.extent.width,
        height: v.extent.height,
        num_frames: v.extent.num_frames,
    }
}

pub fn proposal_records(v: &VideoData) -> Vec<ProposalRecord> {
    v.proposals
        .iter()
        .enumerate()
        .flat_map(|(pid, t)| {
            t.iter().map(move |(frame, b)| ProposalRecord {
                format_version: FORMAT_VERSION,
                video_id: v.video_id.clone(),
                proposal_id: pid as u32,
                frame,
                x1: b.x1,
                y1: b.y1,
                x2: b.x2,
                y2: b.y2,
            })
        })
        .collect()
}

fn scored_records(video_id: &str, frames: &[ScoredBoxFrame]) -> Vec<ScoredBoxRecord> {
    frames
        .iter()
        .flat_map(|f| {
            f.detections.iter().map(move |d| ScoredBoxRecord {
                format_version: FORMAT_VERSION,
                video_id: video_id.to_string(),
                frame: f.frame,
                x1: d.bbox.x1,
                y1: d.bbox.y1,
                x2: d.bbox.x2,
                y2: d.bbox.y2,
                confidence: d.confidence,
            })
        })
        .collect()
}

/// Write a dataset in the internal layout.
pub fn write_dataset(dataset: &Dataset, out: &Path) -> Result<(), DataError> {
    let metas: Vec<VideoMetaRecord> = dataset.videos.iter().map(meta_record).collect();
    io::write_jsonl(&out.join("videos.jsonl"), &metas)?;
    let labels: Vec<LabelRow> = dataset
        .videos
        .iter()
        .map(|v| LabelRow {
            video_id: v.video_id.clone(),
            split: v.split,
            class_id: v.class_id,
        })
        .collect();
    io::write_labels(&out.join("labels.csv"), &labels)?;
    for split in [Split::Train, Split::Test] {
        let list: Vec<VideoListRecord> = dataset
            .split(split)
            .map(|v| VideoListRecord {
                format_version: FORMAT_VERSION,
                video_id: v.video_id.clone(),
            })
            .collect();
        let name = match split {
            Split::Train => "train.jsonl",
            Split::Test => "test.jsonl",
        };
        io::write_jsonl(&out.join(name), &list)?;
    }

    let mut gt = Vec::new();
    for v in &dataset.videos {
        for (instance, t) in v.gt.iter().enumerate() {
            gt.extend(t.iter().map(|(frame, b)| GtRecord {
                format_version: FORMAT_VERSION,
                video_id: v.video_id.clone(),
                class_id: v.class_id,
                instance: instance as u32,
                frame,
                x1: b.x1,
                y1: b.y1,
                x2: b.x2,
                y2: b.y2,
            }));
        }
    }
    io::write_jsonl(&out.join("gt.jsonl"), &gt)?;

    let mut all_proposals = Vec::new();
    for v in &dataset.videos {
        let dir = out.join("videos").join(&v.video_id);
        io::write_json(&dir.join("video.json"), &meta_record(v))?;
        let props = proposal_records(v);
        io::write_jsonl(&dir.join("proposals.jsonl"), &props)?;
        all_proposals.extend(props);
        io::write_jsonl(
            &dir.join("detections.jsonl"),
            &scored_records(&v.video_id, &v.detections),
        )?;
        let motion: Vec<MotionRecord> = v
            .motion
            .iter()
            .map(|g| MotionRecord {
                format_version: FORMAT_VERSION,
                video_id: v.video_id.clone(),
                frame: g.frame,
                grid_width: g.grid_width,
                grid_height: g.grid_height,
                downsample: g.downsample,
                weights: g.weights.clone(),
            })
            .collect();
        io::write_jsonl(&dir.join("motion.jsonl"), &motion)?;
        io::write_jsonl(
            &dir.join("objects.jsonl"),
            &scored_records(&v.video_id, &v.objects),
        )?;
    }
    io::write_jsonl(&out.join("proposals.jsonl"), &all_proposals)?;

    let features = out.join("features.bin");
    io::write_features(&features, &dataset.features)?;
    let rows: Vec<FeatureRowRecord> = dataset
        .videos
        .iter()
        .flat_map(|v| {
            v.feature_rows
                .iter()
                .enumerate()
                .map(move |(pid, &row)| FeatureRowRecord {
                    format_version: FORMAT_VERSION,
                    video_id: v.video_id.clone(),
                    proposal_id: pid as u32,
                    row,
                })
        })
        .collect();
    io::write_jsonl(&feature_rows_path(&features), &rows)
}

fn check_box(
    path: &Path,
    line: usize,
    (x1, y1, x2, y2): (f64, f64, f64, f64),
    frame: u32,
    extent: &VideoExtent,
) -> Result<BBox, DataError> {
    if frame >= extent.num_frames {
        return Err(DataError::record(
            path,
            line,
            format!(
                "frame {frame} outside video of {} frames",
                extent.num_frames
            ),
        ));
    }
    let b = BBox::new(x1, y1, x2, y2).map_err(|e| DataError::record(path, line, e.to_string()))?;
    let (fw, fh) = (f64::from(extent.width), f64::from(extent.height));
    if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > fw || b.y2 > fh {
        return Err(DataError::record(
            path,
            line,
            format!("box outside the {}x{} frame", extent.width, extent.height),
        ));
    }
    Ok(b)
}

fn check_video_id(path: &Path, line: usize, found: &str, expected: &str) -> Result<(), DataError> {
    if found != expected {
        return Err(DataError::record(
            path,
            line,
            format!("video_id `{found}` in the directory of `{expected}`"),
        ));
    }
    Ok(())
}

/// Group per-frame box records into gap-free tubes keyed by an id.
fn assemble_tubes(
    path: &Path,
    what: &str,
    frames: BTreeMap<u32, BTreeMap<u32, BBox>>,
) -> Result<BTreeMap<u32, Tube>, DataError> {
    frames
        .into_iter()
        .map(|(id, boxes)| {
            Tube::from_frames(boxes)
                .map(|t| (id, t))
                .map_err(|e| DataError::invalid(path, format!("{what} {id}: {e}")))
        })
        .collect()
}

fn insert_frame(
    map: &mut BTreeMap<u32, BTreeMap<u32, BBox>>,
    path: &Path,
    line: usize,
    id: u32,
    frame: u32,
    b: BBox,
) -> Result<(), DataError> {
    if map.entry(id).or_default().insert(frame, b).is_some() {
        return Err(DataError::record(
            path,
            line,
            format!("duplicate frame {frame} for id {id}"),
        ));
    }
    Ok(())
}

fn read_scored(
    path: &Path,
    video_id: &str,
    extent: &VideoExtent,
) -> Result<Vec<ScoredBoxFrame>, DataError> {
    let mut frames: BTreeMap<u32, Vec<ScoredBox>> = BTreeMap::new();
    for (line, r) in io::read_jsonl_numbered::<ScoredBoxRecord>(path)? {
        check_video_id(path, line, &r.video_id, video_id)?;
        let bbox = check_box(path, line, (r.x1, r.y1, r.x2, r.y2), r.frame, extent)?;
        if !r.confidence.is_finite() {
            return Err(DataError::record(path, line, "non-finite confidence"));
        }
        frames.entry(r.frame).or_default().push(ScoredBox {
            bbox,
            confidence: r.confidence,
        });
    }
    Ok(frames
        .into_iter()
        .map(|(frame, detections)| ScoredBoxFrame { frame, detections })
        .collect())
}

fn read_video_dir(dir: &Path, meta: &VideoMetaRecord) -> Result<VideoInputs, DataError> {
    let extent = VideoExtent::new(meta.width, meta.height, meta.num_frames)
        .map_err(|e| DataError::invalid(dir, e.to_string()))?;
    let video_json = dir.join("video.json");
    let local: VideoMetaRecord = io::read_json(&video_json)?;
    if local != *meta {
        return Err(DataError::invalid(
            &video_json,
            "does not match the entry in videos.jsonl",
        ));
    }
    read_video_inputs(dir, &meta.video_id, extent)
}

/// Cue inputs and proposals of one video directory.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoInputs {
    pub video_id: String,
    pub extent: VideoExtent,
    pub proposals: Vec<Tube>,
    pub detections: Vec<ScoredBoxFrame>,
    pub motion: Vec<WeightGrid>,
    pub objects: Vec<ScoredBoxFrame>,
}

/// Read `video.json` and the cue input files of a single video directory.
pub fn read_video(dir: &Path) -> Result<VideoInputs, DataError> {
    let video_json = dir.join("video.json");
    let meta: VideoMetaRecord = io::read_json(&video_json)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(DataError::invalid(
            &video_json,
            "unsupported format_version",
        ));
    }
    let extent = VideoExtent::new(meta.width, meta.height, meta.num_frames)
        .map_err(|e| DataError::invalid(&video_json, e.to_string()))?;
    read_video_inputs(dir, &meta.video_id, extent)
}

fn read_video_inputs(
    dir: &Path,
    video_id: &str,
    extent: VideoExtent,
) -> Result<VideoInputs, DataError> {
    let path = dir.join("proposals.jsonl");
    let mut frames = BTreeMap::new();
    for (line, r) in io::read_jsonl_numbered::<ProposalRecord>(&path)? {
        check_video_id(&path, line, &r.video_id, video_id)?;
        let b = check_box(&path, line, (r.x1, r.y1, r.x2, r.y2), r.frame, &extent)?;
        insert_frame(&mut frames, &path, line, r.proposal_id, r.frame, b)?;
    }
    let tubes = assemble_tubes(&path, "proposal", frames)?;
    if let Some((pos, id)) = tubes.keys().enumerate().find(|(i, id)| **id as usize != *i) {
        return Err(DataError::invalid(
            &path,
            format!("proposal ids must be 0..n without holes; expected {pos}, found {id}"),
        ));
    }
    let proposals: Vec<Tube> = tubes.into_values().collect();
    if proposals.is_empty() {
        return Err(DataError::invalid(&path, "video has no proposals"));
    }

    let detections = read_scored(&dir.join("detections.jsonl"), video_id, &extent)?;
    let objects = read_scored(&dir.join("objects.jsonl"), video_id, &extent)?;

    let path = dir.join("motion.jsonl");
    let mut motion: Vec<WeightGrid> = Vec::new();
    for (line, r) in io::read_jsonl_numbered::<MotionRecord>(&path)? {
        check_video_id(&path, line, &r.video_id, video_id)?;
        if r.frame >= extent.num_frames {
            return Err(DataError::record(
                &path,
                line,
                format!("frame {} outside video", r.frame),
            ));
        }
        if motion.last().is_some_and(|g| g.frame >= r.frame) {
            return Err(DataError::record(
                &path,
                line,
                "motion frames must be strictly increasing",
            ));
        }
        if r.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(DataError::record(
                &path,
                line,
                "weights must be finite and non-negative",
            ));
        }
        let grid = WeightGrid {
            frame: r.frame,
            grid_width: r.grid_width,
            grid_height: r.grid_height,
            downsample: r.downsample,
            weights: r.weights,
        };
        grid.check(&extent)
            .map_err(|e| DataError::record(&path, line, e.to_string()))?;
        motion.push(grid);
    }

    Ok(VideoInputs {
        video_id: video_id.to_string(),
        extent,
        proposals,
        detections,
        motion,
        objects,
    })
}

/// Read and validate a dataset directory in the internal layout.
pub fn read_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let videos_path = dir.join("videos.jsonl");
    let metas = io::read_jsonl_numbered::<VideoMetaRecord>(&videos_path)?;
    let mut seen = BTreeSet::new();
    for (line, m) in &metas {
        if !seen.insert(m.video_id.clone()) {
            return Err(DataError::record(
                &videos_path,
                *line,
                format!("duplicate video `{}`", m.video_id),
            ));
        }
    }

    let labels_path = dir.join("labels.csv");
    let mut labels: HashMap<String, (Split, u32)> = HashMap::new();
    for (i, row) in io::read_labels(&labels_path)?.into_iter().enumerate() {
        if !seen.contains(&row.video_id) {
            return Err(DataError::record(
                &labels_path,
                i + 2,
                format!("unknown video `{}`", row.video_id),
            ));
        }
        if labels
            .insert(row.video_id.clone(), (row.split, row.class_id))
            .is_some()
        {
            return Err(DataError::record(
                &labels_path,
                i + 2,
                format!(
                    "video `{}` labeled twice; one class per video",
                    row.video_id
                ),
            ));
        }
    }

    let mut videos = Vec::with_capacity(metas.len());
    for (_, meta) in &metas {
        let Some(&(split, class_id)) = labels.get(&meta.video_id) else {
            return Err(DataError::invalid(
                &labels_path,
                format!("no label for `{}`", meta.video_id),
            ));
        };
        let inputs = read_video_dir(&dir.join("videos").join(&meta.video_id), meta)?;
        videos.push(VideoData {
            video_id: inputs.video_id,
            extent: inputs.extent,
            split,
            class_id,
            proposals: inputs.proposals,
            detections: inputs.detections,
            motion: inputs.motion,
            objects: inputs.objects,
            gt: Vec::new(),
            feature_rows: Vec::new(),
        });
    }
    let index: HashMap<String, usize> = videos
        .iter()
        .enumerate()
        .map(|(i, v)| (v.video_id.clone(), i))
        .collect();

    for (split, name) in [(Split::Train, "train.jsonl"), (Split::Test, "test.jsonl")] {
        let path = dir.join(name);
        if !path.exists() {
            continue;
        }
        for (line, r) in io::read_jsonl_numbered::<VideoListRecord>(&path)? {
            match labels.get(&r.video_id) {
                Some((s, _)) if *s == split => {}
                Some(_) => {
                    return Err(DataError::record(
                        &path,
                        line,
                        format!("`{}` belongs to the other split", r.video_id),
                    ))
                }
                None => {
                    return Err(DataError::record(
                        &path,
                        line,
                        format!("unknown video `{}`", r.video_id),
                    ))
                }
            }
        }
    }

    let gt_path = dir.join("gt.jsonl");
    let mut gt_frames: BTreeMap<usize, BTreeMap<u32, BTreeMap<u32, BBox>>> = BTreeMap::new();
    for (line, r) in io::read_jsonl_numbered::<GtRecord>(&gt_path)? {
        let Some(&vi) = index.get(&r.video_id) else {
            return Err(DataError::record(
                &gt_path,
                line,
                format!("unknown video `{}`", r.video_id),
            ));
        };
        let v = &videos[vi];
        if r.class_id != v.class_id {
            return Err(DataError::record(
                &gt_path,
                line,
                format!(
                    "class {} but `{}` is labeled {}",
                    r.class_id, v.video_id, v.class_id
                ),
            ));
        }
        let b = check_box(&gt_path, line, (r.x1, r.y1, r.x2, r.y2), r.frame, &v.extent)?;
        insert_frame(
            gt_frames.entry(vi).or_default(),
            &gt_path,
            line,
            r.instance,
            r.frame,
            b,
        )?;
    }
    for (vi, frames) in gt_frames {
        let what = format!("`{}` GT instance", videos[vi].video_id);
        videos[vi].gt = assemble_tubes(&gt_path, &what, frames)?
            .into_values()
            .collect();
    }

    let features_path = dir.join("features.bin");
    let features = io::read_features(&features_path)?;
    let rows_path = feature_rows_path(&features_path);
    let mut rows: Vec<Vec<Option<u64>>> = videos
        .iter()
        .map(|v| vec![None; v.proposals.len()])
        .collect();
    for (line, r) in io::read_jsonl_numbered::<FeatureRowRecord>(&rows_path)? {
        let Some(&vi) = index.get(&r.video_id) else {
            return Err(DataError::record(
                &rows_path,
                line,
                format!("dangling feature row: unknown video `{}`", r.video_id),
            ));
        };
        let Some(slot) = rows[vi].get_mut(r.proposal_id as usize) else {
            return Err(DataError::record(
                &rows_path,
                line,
                format!(
                    "dangling feature row: `{}` has no proposal {}",
                    r.video_id, r.proposal_id
                ),
            ));
        };
        if r.row >= features.rows() as u64 {
            return Err(DataError::record(
                &rows_path,
                line,
                format!(
                    "row {} beyond the {} rows of the feature file",
                    r.row,
                    features.rows()
                ),
            ));
        }
        if slot.replace(r.row).is_some() {
            return Err(DataError::record(
                &rows_path,
                line,
                "proposal mapped to two feature rows",
            ));
        }
    }
    for (v, r) in videos.iter_mut().zip(rows) {
        v.feature_rows = r
            .into_iter()
            .enumerate()
            .map(|(pid, row)| {
                row.ok_or_else(|| {
                    DataError::invalid(
                        &rows_path,
                        format!("`{}` proposal {pid} has no feature row", v.video_id),
                    )
                })
            })
            .collect::<Result<_, _>>()?;
    }

    Ok(Dataset { videos, features })
}

/// Validate an external dataset and rewrite it in the internal layout.
pub fn ingest(input: &Path, out: &Path) -> Result<Dataset, DataError> {
    let dataset = read_dataset(input)?;
    write_dataset(&dataset, out)?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            seed: 3,
            num_classes: 2,
            train_videos_per_class: 2,
            test_videos_per_class: 1,
            proposals_per_video: 30,
            feature_dim: 8,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn seed_is_required() {
        assert!(ScenarioConfig::from_toml("num_classes = 3").is_err());
        let c = ScenarioConfig::from_toml("seed = 9\n[noise]\ndetector_miss = 0.2\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.noise.detector_miss, 0.2);
        assert_eq!(c.num_classes, 5);
    }

    #[test]
    fn rejects_bad_noise() {
        let mut c = small();
        c.noise.motion_clutter = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn planted_is_best_and_above_floor() {
        let (_, ledger) = generate(&small()).unwrap();
        for v in &ledger.videos {
            let best = v.proposal_iou[v.planted_proposal];
            assert!(best >= 0.7);
            for (i, u) in v.proposal_iou.iter().enumerate() {
                if i != v.planted_proposal {
                    assert!(*u <= best - IOU_MARGIN);
                }
            }
        }
    }

    #[test]
    fn clean_person_cue_is_gt() {
        let (d, _) = generate(&small()).unwrap();
        for v in &d.videos {
            let gt = &v.gt[0];
            assert_eq!(v.detections.len(), gt.len());
            for f in &v.detections {
                assert_eq!(f.detections.len(), 1);
                assert_eq!(Some(&f.detections[0].bbox), gt.get(f.frame));
            }
        }
    }
}
