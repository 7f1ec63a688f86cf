//! Box, tube and point-track overlap measures.
//!
//! Coordinates are continuous pixel coordinates with the origin at the top-left
//! corner of the frame. A pixel `(x, y)` covers `[x, x + 1) × [y, y + 1)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("box coordinates must be finite, got ({x1}, {y1}, {x2}, {y2})")]
    NonFinite { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("box corners out of order: ({x1}, {y1}, {x2}, {y2})")]
    Inverted { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("tube has no frames")]
    EmptyTube,
    #[error("tube frames not strictly increasing at frame {frame}")]
    UnorderedFrame { frame: u32 },
    #[error("tube is missing frame {missing}")]
    MissingFrame { missing: u32 },
    #[error("video extent must be positive, got {width}x{height}x{num_frames}")]
    InvalidExtent {
        width: u32,
        height: u32,
        num_frames: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Axis-aligned rectangle `(x1, y1)`–`(x2, y2)` with `x1 <= x2` and `y1 <= y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(GeometryError::NonFinite { x1, y1, x2, y2 });
        }
        if x1 > x2 || y1 > y2 {
            return Err(GeometryError::Inverted { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point {
        Point::new(0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Largest distance from the center to any point on the boundary.
    pub fn half_diagonal(&self) -> f64 {
        0.5 * self.width().hypot(self.height())
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn scaled(&self, s: f64) -> BBox {
        BBox {
            x1: self.x1 * s,
            y1: self.y1 * s,
            x2: self.x2 * s,
            y2: self.y2 * s,
        }
    }

    /// Clamp to `[0, width] × [0, height]`.
    pub fn clipped(&self, width: f64, height: f64) -> BBox {
        let cx = |v: f64| v.clamp(0.0, width);
        let cy = |v: f64| v.clamp(0.0, height);
        BBox {
            x1: cx(self.x1),
            y1: cy(self.y1),
            x2: cx(self.x2),
            y2: cy(self.y2),
        }
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.x1 && p.x <= self.x2 && p.y >= self.y1 && p.y <= self.y2
    }
}

/// Contiguous sequence of boxes covering frames `first_frame..=last_frame`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tube {
    start: u32,
    boxes: Vec<BBox>,
}

impl Tube {
    pub fn new(start: u32, boxes: Vec<BBox>) -> Result<Self, GeometryError> {
        if boxes.is_empty() {
            return Err(GeometryError::EmptyTube);
        }
        Ok(Self { start, boxes })
    }

    /// Build from `(frame, box)` pairs, which must be strictly increasing and gap-free.
    pub fn from_frames<I>(frames: I) -> Result<Self, GeometryError>
    where
        I: IntoIterator<Item = (u32, BBox)>,
    {
        let mut iter = frames.into_iter();
        let (start, first) = iter.next().ok_or(GeometryError::EmptyTube)?;
        let mut boxes = vec![first];
        let mut prev = start;
        for (frame, b) in iter {
            if frame <= prev {
                return Err(GeometryError::UnorderedFrame { frame });
            }
            if frame != prev + 1 {
                return Err(GeometryError::MissingFrame { missing: prev + 1 });
            }
            boxes.push(b);
            prev = frame;
        }
        Ok(Self { start, boxes })
    }

    pub fn first_frame(&self) -> u32 {
        self.start
    }

    pub fn last_frame(&self) -> u32 {
        self.start + self.boxes.len() as u32 - 1
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn get(&self, frame: u32) -> Option<&BBox> {
        frame
            .checked_sub(self.start)
            .and_then(|i| self.boxes.get(i as usize))
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &BBox)> + '_ {
        self.boxes
            .iter()
            .enumerate()
            .map(move |(i, b)| (self.start + i as u32, b))
    }

    pub fn total_area(&self) -> f64 {
        self.boxes.iter().map(BBox::area).sum()
    }

    pub fn scaled(&self, s: f64) -> Tube {
        Tube {
            start: self.start,
            boxes: self.boxes.iter().map(|b| b.scaled(s)).collect(),
        }
    }
}

/// Frame-indexed boxes that may skip frames (e.g. a detector track with misses).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxTrack(pub BTreeMap<u32, BBox>);

impl BoxTrack {
    pub fn iter(&self) -> impl Iterator<Item = (u32, &BBox)> + '_ {
        self.0.iter().map(|(f, b)| (*f, b))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<&Tube> for BoxTrack {
    fn from(tube: &Tube) -> Self {
        BoxTrack(tube.iter().map(|(f, b)| (f, *b)).collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointTrack(pub BTreeMap<u32, Point>);

impl PointTrack {
    pub fn iter(&self) -> impl Iterator<Item = (u32, &Point)> + '_ {
        self.0.iter().map(|(f, p)| (*f, p))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Constant-resolution video: `width × height` pixels over `num_frames` frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoExtent {
    pub width: u32,
    pub height: u32,
    pub num_frames: u32,
}

impl VideoExtent {
    pub fn new(width: u32, height: u32, num_frames: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 || num_frames == 0 {
            return Err(GeometryError::InvalidExtent {
                width,
                height,
                num_frames,
            });
        }
        Ok(Self {
            width,
            height,
            num_frames,
        })
    }

    pub fn frame_area(&self) -> f64 {
        f64::from(self.width) * f64::from(self.height)
    }

    pub fn total_area(&self) -> f64 {
        self.frame_area() * f64::from(self.num_frames)
    }

    pub fn diagonal(&self) -> f64 {
        f64::from(self.width).hypot(f64::from(self.height))
    }

    pub fn center(&self) -> Point {
        Point::new(0.5 * f64::from(self.width), 0.5 * f64::from(self.height))
    }

    pub fn frame_box(&self) -> BBox {
        BBox {
            x1: 0.0,
            y1: 0.0,
            x2: f64::from(self.width),
            y2: f64::from(self.height),
        }
    }
}

/// Intersection over union of two boxes; 0 when the union is empty.
pub fn frame_iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Merge-join over two frame-sorted box sequences, averaging IoU over the union of frames.
fn spatio_temporal_iou<'a, A, B>(a: A, b: B) -> f64
where
    A: Iterator<Item = (u32, &'a BBox)>,
    B: Iterator<Item = (u32, &'a BBox)>,
{
    let mut a = a.peekable();
    let mut b = b.peekable();
    let mut frames = 0usize;
    let mut total = 0.0;
    loop {
        match (a.peek(), b.peek()) {
            (Some(&(fa, ba)), Some(&(fb, bb))) => {
                frames += 1;
                match fa.cmp(&fb) {
                    std::cmp::Ordering::Less => {
                        a.next();
                    }
                    std::cmp::Ordering::Greater => {
                        b.next();
                    }
                    std::cmp::Ordering::Equal => {
                        total += frame_iou(ba, bb);
                        a.next();
                        b.next();
                    }
                }
            }
            (Some(_), None) => {
                frames += a.by_ref().count();
            }
            (None, Some(_)) => {
                frames += b.by_ref().count();
            }
            (None, None) => break,
        }
    }
    if frames == 0 {
        0.0
    } else {
        total / frames as f64
    }
}

/// Spatio-temporal IoU: mean frame IoU over every frame where either tube exists.
pub fn tube_iou(a: &Tube, b: &Tube) -> f64 {
    spatio_temporal_iou(a.iter(), b.iter())
}

/// Overlap of a proposal with a box pseudo-annotation track. Same measure as
/// [`tube_iou`], but the track may have gaps; missing frames are simply absent.
pub fn box_track_overlap(a: &Tube, track: &BoxTrack) -> f64 {
    spatio_temporal_iou(a.iter(), track.iter())
}

/// Mean over annotated frames of `max(0, 1 - d / r)`, where `d` is the distance
/// from the point to the proposal box center and `r` the box half-diagonal.
/// Frames where the proposal has no box, or a zero-size box, contribute 0.
pub fn point_match(a: &Tube, points: &PointTrack) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let total: f64 = points
        .iter()
        .map(|(frame, p)| match a.get(frame) {
            Some(b) => {
                let r = b.half_diagonal();
                if r > 0.0 {
                    (1.0 - p.distance(&b.center()) / r).max(0.0)
                } else {
                    0.0
                }
            }
            None => 0.0,
        })
        .sum();
    total / points.len() as f64
}

/// Squared ratio of the summed proposal box area to the summed area of all frames.
pub fn size_regularizer(a: &Tube, extent: &VideoExtent) -> f64 {
    let ratio = a.total_area() / extent.total_area();
    ratio * ratio
}

/// Point pseudo-annotation overlap: [`point_match`] minus [`size_regularizer`].
pub fn point_overlap(a: &Tube, points: &PointTrack, extent: &VideoExtent) -> f64 {
    point_match(a, points) - size_regularizer(a, extent)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn frame_iou_trivial_cases() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(frame_iou(&a, &a), 1.0);
        assert_eq!(frame_iou(&a, &bx(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert_eq!(frame_iou(&a, &bx(5.0, 0.0, 15.0, 10.0)), 50.0 / 150.0);
    }

    #[test]
    fn degenerate_boxes_have_zero_iou() {
        let p = bx(3.0, 3.0, 3.0, 3.0);
        assert_eq!(frame_iou(&p, &p), 0.0);
    }

    #[test]
    fn inverted_box_rejected() {
        assert!(matches!(
            BBox::new(5.0, 0.0, 1.0, 1.0),
            Err(GeometryError::Inverted { .. })
        ));
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn tube_iou_partial_temporal_overlap() {
        let b = bx(0.0, 0.0, 4.0, 4.0);
        let a = Tube::new(1, vec![bx(10.0, 10.0, 12.0, 12.0), b]).unwrap();
        let c = Tube::new(2, vec![b, bx(6.0, 6.0, 8.0, 8.0)]).unwrap();
        assert!((tube_iou(&a, &c) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(tube_iou(&a, &a), 1.0);
    }

    #[test]
    fn tube_with_gap_rejected() {
        let b = bx(0.0, 0.0, 1.0, 1.0);
        let err = Tube::from_frames([(0, b), (1, b), (3, b)]).unwrap_err();
        assert_eq!(err, GeometryError::MissingFrame { missing: 2 });
        let err = Tube::from_frames([(4, b), (4, b)]).unwrap_err();
        assert_eq!(err, GeometryError::UnorderedFrame { frame: 4 });
        assert_eq!(
            Tube::from_frames(std::iter::empty()).unwrap_err(),
            GeometryError::EmptyTube
        );
    }

    #[test]
    fn point_match_cases() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        let tube = Tube::new(0, vec![b; 3]).unwrap();
        let at = |p: Point| PointTrack((0..3).map(|f| (f, p)).collect());
        assert_eq!(point_match(&tube, &at(Point::new(5.0, 5.0))), 1.0);
        assert_eq!(point_match(&tube, &at(Point::new(0.0, 10.0))), 0.0);
        let expected = 1.0 - 2.5 / 50f64.sqrt();
        assert!((point_match(&tube, &at(Point::new(7.5, 5.0))) - expected).abs() < 1e-15);
        assert!((expected - 0.6464).abs() < 1e-4);
    }

    #[test]
    fn point_match_counts_missing_frames_as_zero() {
        let tube = Tube::new(0, vec![bx(0.0, 0.0, 10.0, 10.0)]).unwrap();
        let points = PointTrack(
            [(0, Point::new(5.0, 5.0)), (7, Point::new(5.0, 5.0))]
                .into_iter()
                .collect(),
        );
        assert_eq!(point_match(&tube, &points), 0.5);
    }

    #[test]
    fn size_regularizer_cases() {
        let extent = VideoExtent::new(100, 100, 10).unwrap();
        let full = Tube::new(0, vec![extent.frame_box(); 10]).unwrap();
        assert_eq!(size_regularizer(&full, &extent), 1.0);
        let half = Tube::new(0, vec![extent.frame_box(); 5]).unwrap();
        assert_eq!(size_regularizer(&half, &extent), 0.25);
        let small = Tube::new(2, vec![bx(0.0, 0.0, 10.0, 10.0); 5]).unwrap();
        assert!((size_regularizer(&small, &extent) - 2.5e-5).abs() < 1e-18);
    }

    #[test]
    fn point_overlap_extremes() {
        let extent = VideoExtent::new(100, 100, 4).unwrap();
        let full = Tube::new(0, vec![extent.frame_box(); 4]).unwrap();
        let corners = PointTrack((0..4).map(|f| (f, Point::new(0.0, 0.0))).collect());
        assert_eq!(point_overlap(&full, &corners, &extent), -1.0);

        let tiny = Tube::new(0, vec![bx(49.99, 49.99, 50.01, 50.01); 4]).unwrap();
        let centered = PointTrack((0..4).map(|f| (f, Point::new(50.0, 50.0))).collect());
        let o = point_overlap(&tiny, &centered, &extent);
        assert!(o > 1.0 - 1e-12 && o <= 1.0);
    }

    #[test]
    fn extent_validation() {
        assert!(VideoExtent::new(0, 10, 10).is_err());
        assert_eq!(
            VideoExtent::new(1, 1, 1).unwrap().center(),
            Point::new(0.5, 0.5)
        );
    }
}
