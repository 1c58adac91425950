//! Score thresholding, box decoding, NMS and rotated-box overlap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{sigmoid, Predictions};
use crate::targets::{decode_box, iou2d_axis_aligned, Residuals};
use crate::types::Box3D;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub boxed: Box3D,
    pub score: f64,
    pub class: usize,
    pub anchor: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Candidates per class kept ahead of NMS.
    pub top_k: usize,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.5,
            top_k: 1000,
        }
    }
}

impl PostprocConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config(format!("thresholds must lie in [0, 1]: {self:?}")));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be positive".into()));
        }
        Ok(())
    }
}

/// Score descending, then anchor index, then class.
fn rank(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.anchor.cmp(&b.anchor))
        .then(a.class.cmp(&b.class))
}

pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(rank);
}

/// Every (anchor, class) whose probability reaches `score_thr`, decoded
/// against that class's anchor with the argmax direction bin.
pub fn decode_predictions(pred: &Predictions, anchors_per_class: &[Vec<Box3D>], score_thr: f64) -> Result<Vec<Detection>> {
    if anchors_per_class.len() != pred.n_classes {
        return Err(Error::Shape {
            name: "anchor sets".into(),
            expected: vec![pred.n_classes],
            found: vec![anchors_per_class.len()],
        });
    }
    for a in anchors_per_class {
        if a.len() != pred.n_anchors {
            return Err(Error::Shape {
                name: "anchors".into(),
                expected: vec![pred.n_anchors],
                found: vec![a.len()],
            });
        }
    }
    let mut out = Vec::new();
    for i in 0..pred.n_anchors {
        for (k, anchors) in anchors_per_class.iter().enumerate() {
            let score = sigmoid(pred.cls[i * pred.n_classes + k]);
            if score < score_thr {
                continue;
            }
            let mut res: Residuals = [0.0; 7];
            res.copy_from_slice(&pred.boxes[i * 7..i * 7 + 7]);
            let dir = u8::from(pred.dir[i * 2 + 1] > pred.dir[i * 2]);
            let decoded = decode_box(&res, &anchors[i], dir);
            if !decoded.boxed.is_valid() {
                log::debug!("dropping non-finite decoded box at anchor {i}");
                continue;
            }
            out.push(Detection {
                boxed: decoded.boxed,
                score,
                class: k,
                anchor: i,
            });
        }
    }
    sort_detections(&mut out);
    Ok(out)
}

/// Greedy suppression on axis-aligned BEV IoU. A detection is dropped when
/// its IoU with an already kept, better ranked one is strictly above
/// `iou_thr`. Class is ignored; group beforehand for per-class NMS.
pub fn nms_axis_aligned(dets: &[Detection], iou_thr: f64) -> Vec<Detection> {
    let mut order: Vec<Detection> = dets.to_vec();
    sort_detections(&mut order);
    let extents: Vec<_> = order.iter().map(|d| d.boxed.bev_aligned_extent()).collect();
    let mut suppressed = vec![false; order.len()];
    let mut kept = Vec::new();
    for i in 0..order.len() {
        if suppressed[i] {
            continue;
        }
        kept.push(order[i]);
        let a = extents[i];
        for j in i + 1..order.len() {
            if !suppressed[j] && crate::targets::iou_extents(a, extents[j]) > iou_thr {
                suppressed[j] = true;
            }
        }
    }
    kept
}

/// Threshold, per-class top-k, per-class NMS; merged back in rank order.
pub fn postprocess(pred: &Predictions, anchors_per_class: &[Vec<Box3D>], cfg: &PostprocConfig) -> Result<Vec<Detection>> {
    let all = decode_predictions(pred, anchors_per_class, cfg.score_threshold)?;
    let mut out = Vec::new();
    for k in 0..pred.n_classes {
        let mut per: Vec<Detection> = all.iter().filter(|d| d.class == k).copied().collect();
        per.truncate(cfg.top_k);
        out.extend(nms_axis_aligned(&per, cfg.nms_iou));
    }
    sort_detections(&mut out);
    Ok(out)
}

/// Areas below this count as degenerate.
const MIN_AREA: f64 = 1e-12;

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Signed shoelace area; positive for counter-clockwise polygons.
pub fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    let mut s = 0.0;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        s += a.0 * b.1 - b.0 * a.1;
    }
    0.5 * s
}

/// Point where segment `a-b` crosses the line through `p-q`. Coordinates on
/// an axis-parallel clip line are copied rather than interpolated.
fn crossing(a: (f64, f64), b: (f64, f64), p: (f64, f64), q: (f64, f64)) -> (f64, f64) {
    let da = cross(p, q, a);
    let db = cross(p, q, b);
    let t = da / (da - db);
    let mut r = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
    if p.0 == q.0 {
        r.0 = p.0;
    }
    if p.1 == q.1 {
        r.1 = p.1;
    }
    r
}

/// Intersection of two convex counter-clockwise polygons (Sutherland-Hodgman).
pub fn clip_convex(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = subject.to_vec();
    let n = clip.len();
    for e in 0..n {
        if out.is_empty() {
            break;
        }
        let (p, q) = (clip[e], clip[(e + 1) % n]);
        let input = std::mem::take(&mut out);
        let m = input.len();
        for i in 0..m {
            let cur = input[i];
            let prev = input[(i + m - 1) % m];
            let cur_in = cross(p, q, cur) >= 0.0;
            let prev_in = cross(p, q, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    out.push(crossing(prev, cur, p, q));
                }
                out.push(cur);
            } else if prev_in {
                out.push(crossing(prev, cur, p, q));
            }
        }
    }
    out
}

/// Exact BEV intersection area of two rotated boxes.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let pa = a.bev_corners();
    let pb = b.bev_corners();
    debug_assert!(polygon_area(&pa) > 0.0 && polygon_area(&pb) > 0.0, "corners must wind counter-clockwise");
    let inter = clip_convex(&pa, &pb);
    if inter.len() < 3 {
        return 0.0;
    }
    polygon_area(&inter).max(0.0)
}

fn degenerate(a: &Box3D, b: &Box3D) -> bool {
    if a.bev_area() < MIN_AREA || b.bev_area() < MIN_AREA || !a.is_valid() || !b.is_valid() {
        log::debug!("degenerate box in IoU: {a:?} / {b:?}");
        return true;
    }
    false
}

/// IoU of the rotated BEV rectangles.
pub fn iou_bev_rotated(a: &Box3D, b: &Box3D) -> f64 {
    if degenerate(a, b) {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b);
    let union = a.bev_area() + b.bev_area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn z_overlap(a: &Box3D, b: &Box3D) -> f64 {
    let (a0, a1) = a.z_range();
    let (b0, b1) = b.z_range();
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Rotated BEV intersection times z overlap, over the union volume.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    if degenerate(a, b) {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * z_overlap(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (a.volume() + b.volume() - inter)).clamp(0.0, 1.0)
}

/// Axis-aligned BEV IoU as used by NMS, re-exported for callers.
pub fn iou_bev_axis_aligned(a: &Box3D, b: &Box3D) -> f64 {
    iou2d_axis_aligned(a, b)
}
