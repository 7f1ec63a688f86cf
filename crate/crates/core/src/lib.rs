//! Weakly-supervised spatio-temporal action localization.
//!
//! Action proposals (box tubes) are scored against automatically computed
//! pseudo-annotations, the cues are fused by their agreement with a person
//! detector, and a multiple-instance max-margin classifier is trained from
//! video labels alone. Evaluation sweeps tube-IoU thresholds.

pub mod cues;
pub mod datagen;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod mil;
pub mod pipeline;

/// Schema version written into every record.
pub const FORMAT_VERSION: u32 = 1;

pub use cues::{CueAnnotation, CueId, OverlapVector};
pub use geometry::{BBox, Point, Tube, VideoExtent};
