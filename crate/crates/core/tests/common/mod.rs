//! Straight-line reference implementations used as test oracles. None of them
//! call into the library's numerical code.

#![allow(dead_code)]

use std::collections::BTreeMap;

/// Integer box `[x1, x2) x [y1, y2)` in pixel units.
pub type IBox = (i32, i32, i32, i32);

/// A tube on an integer grid: start frame and one box per frame.
#[derive(Debug, Clone)]
pub struct ITube {
    pub start: u32,
    pub boxes: Vec<IBox>,
}

impl ITube {
    pub fn get(&self, frame: u32) -> Option<IBox> {
        frame
            .checked_sub(self.start)
            .and_then(|i| self.boxes.get(i as usize).copied())
    }

    pub fn frames(&self) -> std::ops::Range<u32> {
        self.start..self.start + self.boxes.len() as u32
    }
}

fn covers(b: IBox, px: i32, py: i32) -> bool {
    px >= b.0 && px < b.2 && py >= b.1 && py < b.3
}

/// IoU by counting unit pixels on an integer grid.
pub fn raster_iou(a: IBox, b: IBox) -> f64 {
    let lo_x = a.0.min(b.0);
    let hi_x = a.2.max(b.2);
    let lo_y = a.1.min(b.1);
    let hi_y = a.3.max(b.3);
    let (mut inter, mut union) = (0u64, 0u64);
    for py in lo_y..hi_y {
        for px in lo_x..hi_x {
            let (ia, ib) = (covers(a, px, py), covers(b, px, py));
            if ia && ib {
                inter += 1;
            }
            if ia || ib {
                union += 1;
            }
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean raster IoU over every frame on which either tube exists.
pub fn raster_tube_iou(a: &ITube, b: &ITube) -> f64 {
    let first = a.start.min(b.start);
    let last = (a.start + a.boxes.len() as u32).max(b.start + b.boxes.len() as u32);
    let mut frames = 0;
    let mut total = 0.0;
    for f in first..last {
        match (a.get(f), b.get(f)) {
            (Some(x), Some(y)) => {
                frames += 1;
                total += raster_iou(x, y);
            }
            (Some(_), None) | (None, Some(_)) => frames += 1,
            (None, None) => {}
        }
    }
    total / frames as f64
}

/// Point match with the normalizer found as the farthest of the four corners.
pub fn oracle_point_match(
    boxes: &BTreeMap<u32, (f64, f64, f64, f64)>,
    points: &BTreeMap<u32, (f64, f64)>,
) -> f64 {
    let mut sum = 0.0;
    for (f, &(px, py)) in points {
        if let Some(&(x1, y1, x2, y2)) = boxes.get(f) {
            let cx = (x1 + x2) / 2.0;
            let cy = (y1 + y2) / 2.0;
            let mut r: f64 = 0.0;
            for (ex, ey) in [(x1, y1), (x1, y2), (x2, y1), (x2, y2)] {
                r = r.max(((ex - cx).powi(2) + (ey - cy).powi(2)).sqrt());
            }
            if r > 0.0 {
                let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
                let term = 1.0 - d / r;
                if term > 0.0 {
                    sum += term;
                }
            }
        }
    }
    sum / points.len() as f64
}

pub fn oracle_size_regularizer(
    boxes: &BTreeMap<u32, (f64, f64, f64, f64)>,
    w: f64,
    h: f64,
    n: u32,
) -> f64 {
    let mut area = 0.0;
    for &(x1, y1, x2, y2) in boxes.values() {
        area += (x2 - x1) * (y2 - y1);
    }
    let video = w * h * f64::from(n);
    (area / video) * (area / video)
}

/// Center of mass of the per-pixel box count on the integer grid.
pub fn raster_count_center(boxes: &[IBox], width: i32, height: i32) -> Option<(f64, f64)> {
    let (mut mass, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for py in 0..height {
        for px in 0..width {
            let count = boxes.iter().filter(|b| covers(**b, px, py)).count() as f64;
            if count > 0.0 {
                mass += count;
                sx += count * (f64::from(px) + 0.5);
                sy += count * (f64::from(py) + 0.5);
            }
        }
    }
    (mass > 0.0).then(|| (sx / mass, sy / mass))
}

/// Pearson correlation from raw one-pass sums.
pub fn pearson_one_pass(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sa += x;
        sb += y;
        saa += x * x;
        sbb += y * y;
        sab += x * y;
    }
    let cov = n * sab - sa * sb;
    let va = n * saa - sa * sa;
    let vb = n * sbb - sb * sb;
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some(cov / (va.sqrt() * vb.sqrt()))
}

/// Population z-score, zeros for constant input.
pub fn oracle_zscore(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    if sd == 0.0 {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| (x - mean) / sd).collect()
    }
}

/// Scan every index, keeping the first maximum.
pub fn first_max(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 0..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// All-point AP by enumerating the precision at every true positive and taking
/// the best precision at that recall or beyond.
pub fn enumerate_ap(ranked: &[bool], num_positives: usize) -> f64 {
    if num_positives == 0 {
        return 0.0;
    }
    let mut precisions = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (k, hit) in ranked.iter().enumerate() {
        if *hit {
            tp += 1;
        }
        precisions.push(tp as f64 / (k + 1) as f64);
    }
    let mut ap = 0.0;
    for (k, hit) in ranked.iter().enumerate() {
        if *hit {
            let best = precisions[k..].iter().cloned().fold(0.0, f64::max);
            ap += best / num_positives as f64;
        }
    }
    ap
}

/// ROC-AUC as the share of (positive, negative) pairs ordered correctly; ties count half.
pub fn mann_whitney(scored: &[(f64, bool)]) -> Option<f64> {
    let pos: Vec<f64> = scored.iter().filter(|s| s.1).map(|s| s.0).collect();
    let neg: Vec<f64> = scored.iter().filter(|s| !s.1).map(|s| s.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// Objective `0.5 |w|^2 + lambda * sum hinge` for 2-D points.
pub fn objective_2d(
    w: (f64, f64),
    b: f64,
    lambda: f64,
    pos: &[(f64, f64)],
    neg: &[(f64, f64)],
) -> f64 {
    let mut loss = 0.0;
    for &(x, y) in pos {
        loss += (1.0 - (w.0 * x + w.1 * y + b)).max(0.0);
    }
    for &(x, y) in neg {
        loss += (1.0 + (w.0 * x + w.1 * y + b)).max(0.0);
    }
    0.5 * (w.0 * w.0 + w.1 * w.1) + lambda * loss
}

/// Minimum of [`objective_2d`] over a grid of spacing `step` on `[-r, r]^3`.
pub fn grid_search_2d(
    lambda: f64,
    pos: &[(f64, f64)],
    neg: &[(f64, f64)],
    r: f64,
    step: f64,
) -> f64 {
    let n = (2.0 * r / step).round() as i64;
    let at = |i: i64| -r + i as f64 * step;
    let mut best = f64::INFINITY;
    for i in 0..=n {
        for j in 0..=n {
            for k in 0..=n {
                best = best.min(objective_2d((at(i), at(j)), at(k), lambda, pos, neg));
            }
        }
    }
    best
}
