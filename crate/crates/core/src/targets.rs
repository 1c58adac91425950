//! Anchors, anchor/ground-truth matching and box residual encoding.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{grid_dims, wrap_angle, Box3D, GridSpec};

/// Anchor geometry and matching thresholds for one object class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub anchor_w: f64,
    pub anchor_l: f64,
    pub anchor_h: f64,
    pub anchor_z: f64,
    pub pos_thr: f64,
    pub neg_thr: f64,
}

impl ClassSpec {
    pub fn car() -> Self {
        Self {
            name: "Car".into(),
            anchor_w: 1.6,
            anchor_l: 3.9,
            anchor_h: 1.5,
            anchor_z: -1.0,
            pos_thr: 0.6,
            neg_thr: 0.45,
        }
    }

    pub fn pedestrian() -> Self {
        Self {
            name: "Pedestrian".into(),
            anchor_w: 0.6,
            anchor_l: 0.8,
            anchor_h: 1.73,
            anchor_z: -0.6,
            pos_thr: 0.5,
            neg_thr: 0.35,
        }
    }

    pub fn cyclist() -> Self {
        Self {
            name: "Cyclist".into(),
            anchor_w: 0.6,
            anchor_l: 1.76,
            anchor_h: 1.73,
            anchor_z: -0.6,
            pos_thr: 0.5,
            neg_thr: 0.35,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.anchor_w > 0.0 && self.anchor_l > 0.0 && self.anchor_h > 0.0) {
            return Err(Error::Config(format!("{}: anchor dims must be positive", self.name)));
        }
        if !(0.0 <= self.neg_thr && self.neg_thr < self.pos_thr && self.pos_thr <= 1.0) {
            return Err(Error::Config(format!(
                "{}: need 0 <= neg_thr < pos_thr <= 1, got {} / {}",
                self.name, self.neg_thr, self.pos_thr
            )));
        }
        Ok(())
    }
}

/// Orientations every anchor location carries.
pub const ANCHOR_ANGLES: [f64; 2] = [0.0, FRAC_PI_2];

/// Mapping between flat anchor index and `(row, col, orientation)` on the
/// head output grid: `index = (row * width + col) * per_loc + orientation`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnchorLayout {
    pub height: usize,
    pub width: usize,
    pub per_loc: usize,
}

impl AnchorLayout {
    pub fn for_grid(spec: &GridSpec, output_stride: usize) -> Result<Self> {
        let (h, w) = grid_dims(spec)?;
        Ok(Self {
            height: h.div_ceil(output_stride),
            width: w.div_ceil(output_stride),
            per_loc: ANCHOR_ANGLES.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.per_loc
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, orientation: usize) -> usize {
        (row * self.width + col) * self.per_loc + orientation
    }

    #[inline]
    pub fn position(&self, index: usize) -> (usize, usize, usize) {
        let orientation = index % self.per_loc;
        let loc = index / self.per_loc;
        (loc / self.width, loc % self.width, orientation)
    }
}

/// One anchor per output cell and orientation, centered on the cell with the
/// class's canonical size and z.
pub fn generate_anchors(spec: &GridSpec, cls: &ClassSpec, output_stride: usize) -> Result<Vec<Box3D>> {
    cls.validate()?;
    let layout = AnchorLayout::for_grid(spec, output_stride)?;
    let step = spec.resolution * output_stride as f64;
    let mut anchors = Vec::with_capacity(layout.len());
    for row in 0..layout.height {
        let y = spec.y_min + (row as f64 + 0.5) * step;
        for col in 0..layout.width {
            let x = spec.x_min + (col as f64 + 0.5) * step;
            for &theta in &ANCHOR_ANGLES {
                anchors.push(Box3D {
                    x,
                    y,
                    z: cls.anchor_z,
                    w: cls.anchor_w,
                    l: cls.anchor_l,
                    h: cls.anchor_h,
                    theta,
                });
            }
        }
    }
    Ok(anchors)
}

/// IoU of two extents `(x0, y0, x1, y1)`.
pub fn iou_extents(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let iw = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let ih = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let area_a = (a.2 - a.0) * (a.3 - a.1);
    let area_b = (b.2 - b.0) * (b.3 - b.1);
    inter / (area_a + area_b - inter)
}

/// BEV IoU of the boxes' axis-aligned extents, headings folded to the
/// nearest multiple of 90 degrees.
pub fn iou2d_axis_aligned(a: &Box3D, b: &Box3D) -> f64 {
    iou_extents(a.bev_aligned_extent(), b.bev_aligned_extent())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Matched to the ground truth with this index.
    Positive(usize),
    Negative,
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub labels: Vec<AnchorLabel>,
    /// Best IoU of each anchor over all ground truths.
    pub max_iou: Vec<f64>,
}

impl MatchResult {
    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.labels.iter().enumerate().filter_map(|(i, l)| match l {
            AnchorLabel::Positive(g) => Some((i, *g)),
            _ => None,
        })
    }

    pub fn num_positive(&self) -> usize {
        self.positives().count()
    }
}

/// Assigns each anchor to positive, negative or ignored.
///
/// Rules, in order:
/// - an anchor whose best IoU is `>= pos_thr` is positive for that ground truth;
/// - `< neg_thr` is negative, anything in between is ignored;
/// - each ground truth's highest-IoU anchor (lowest index on ties) is forced
///   positive for it, whatever the thresholds say, provided that IoU is
///   non-zero. An anchor that is the argmax of several ground truths goes to
///   the one it overlaps most.
pub fn match_anchors(anchors: &[Box3D], gts: &[Box3D], cls: &ClassSpec) -> MatchResult {
    let n = anchors.len();
    let mut max_iou = vec![0.0f64; n];
    let mut best_gt = vec![usize::MAX; n];
    let mut gt_best: Vec<(f64, usize)> = vec![(0.0, usize::MAX); gts.len()];

    let anchor_ext: Vec<_> = anchors.iter().map(|a| a.bev_aligned_extent()).collect();
    for (g, gt) in gts.iter().enumerate() {
        let ge = gt.bev_aligned_extent();
        for (i, ae) in anchor_ext.iter().enumerate() {
            // cheap reject before computing the IoU
            if ae.0 >= ge.2 || ge.0 >= ae.2 || ae.1 >= ge.3 || ge.1 >= ae.3 {
                continue;
            }
            let iou = iou_extents(*ae, ge);
            if iou > max_iou[i] {
                max_iou[i] = iou;
                best_gt[i] = g;
            }
            if iou > gt_best[g].0 {
                gt_best[g] = (iou, i);
            }
        }
    }

    let mut labels: Vec<AnchorLabel> = (0..n)
        .map(|i| {
            if max_iou[i] >= cls.pos_thr && best_gt[i] != usize::MAX {
                AnchorLabel::Positive(best_gt[i])
            } else if max_iou[i] < cls.neg_thr {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignored
            }
        })
        .collect();

    let mut forced: Vec<Option<(f64, usize)>> = vec![None; n];
    for (g, &(iou, i)) in gt_best.iter().enumerate() {
        if i == usize::MAX || iou <= 0.0 {
            continue;
        }
        match forced[i] {
            Some((prev, _)) if prev >= iou => {}
            _ => forced[i] = Some((iou, g)),
        }
    }
    for (i, f) in forced.iter().enumerate() {
        if let Some((_, g)) = f {
            labels[i] = AnchorLabel::Positive(*g);
        }
    }
    MatchResult { labels, max_iou }
}

/// `(dx, dy, dz, dw, dl, dh, dtheta)`.
pub type Residuals = [f64; 7];

/// 1 iff the wrapped heading difference lies in `[0, pi)`.
pub fn direction_bit(relative: f64) -> u8 {
    let d = wrap_angle(relative);
    u8::from((0.0..PI).contains(&d))
}

/// Residuals of `gt` relative to `anchor`, plus the heading-hemisphere bit.
pub fn encode_box(gt: &Box3D, anchor: &Box3D) -> Result<(Residuals, u8)> {
    if !(gt.w > 0.0 && gt.l > 0.0 && gt.h > 0.0) {
        return Err(Error::Domain(format!("ground-truth dims must be positive: {gt:?}")));
    }
    if !(anchor.w > 0.0 && anchor.l > 0.0 && anchor.h > 0.0) {
        return Err(Error::Domain(format!("anchor dims must be positive: {anchor:?}")));
    }
    let diag = (anchor.w * anchor.w + anchor.l * anchor.l).sqrt();
    let dtheta = gt.theta - anchor.theta;
    Ok((
        [
            (gt.x - anchor.x) / diag,
            (gt.y - anchor.y) / diag,
            (gt.z - anchor.z) / anchor.h,
            (gt.w / anchor.w).ln(),
            (gt.l / anchor.l).ln(),
            (gt.h / anchor.h).ln(),
            dtheta.sin(),
        ],
        direction_bit(dtheta),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoded {
    pub boxed: Box3D,
    /// The angle residual was outside `[-1, 1]` and got clamped.
    pub clamped: bool,
}

/// Inverse of [`encode_box`].
///
/// The heading is `anchor.theta + asin(dtheta)`, turned by pi when its
/// hemisphere disagrees with `dir_bit`. Exact for heading differences within
/// `[-pi/2, pi/2]`.
pub fn decode_box(res: &Residuals, anchor: &Box3D, dir_bit: u8) -> Decoded {
    let diag = (anchor.w * anchor.w + anchor.l * anchor.l).sqrt();
    let clamped = !(-1.0..=1.0).contains(&res[6]);
    let rel = res[6].clamp(-1.0, 1.0).asin();
    let mut theta = anchor.theta + rel;
    if direction_bit(rel) != dir_bit {
        theta += PI;
    }
    Decoded {
        boxed: Box3D {
            x: anchor.x + res[0] * diag,
            y: anchor.y + res[1] * diag,
            z: anchor.z + res[2] * anchor.h,
            w: anchor.w * res[3].exp(),
            l: anchor.l * res[4].exp(),
            h: anchor.h * res[5].exp(),
            theta: wrap_angle(theta),
        },
        clamped,
    }
}

/// Per-(anchor, class) classification label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClsTarget {
    Positive,
    Negative,
    Ignored,
}

/// Regression target of a positive anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxTarget {
    pub residuals: Residuals,
    pub dir: u8,
    pub class: usize,
    pub gt: usize,
}

/// Training targets for one frame on a shared anchor layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub n_anchors: usize,
    pub n_classes: usize,
    /// `n_anchors * n_classes`, index `anchor * n_classes + class`.
    pub cls: Vec<ClsTarget>,
    /// Regression target for anchors positive for any class.
    pub boxes: Vec<Option<BoxTarget>>,
}

impl Targets {
    pub fn num_positive(&self) -> usize {
        self.boxes.iter().filter(|b| b.is_some()).count()
    }
}

/// Matches every class separately against its own anchors (all classes share
/// the same anchor layout). An anchor positive for several classes regresses
/// toward the match with the highest IoU.
pub fn build_targets(
    anchors_per_class: &[Vec<Box3D>],
    gts: &[(Box3D, usize)],
    classes: &[ClassSpec],
) -> Result<Targets> {
    let n_classes = classes.len();
    let n_anchors = anchors_per_class.first().map_or(0, |a| a.len());
    if anchors_per_class.len() != n_classes || anchors_per_class.iter().any(|a| a.len() != n_anchors) {
        return Err(Error::Internal("anchor sets must match the class list".into()));
    }
    let mut cls = vec![ClsTarget::Negative; n_anchors * n_classes];
    let mut boxes: Vec<Option<BoxTarget>> = vec![None; n_anchors];
    let mut box_iou = vec![f64::NEG_INFINITY; n_anchors];
    for (k, spec) in classes.iter().enumerate() {
        let (gt_idx, class_gts): (Vec<usize>, Vec<Box3D>) = gts
            .iter()
            .enumerate()
            .filter(|(_, (_, c))| *c == k)
            .map(|(i, (b, _))| (i, *b))
            .unzip();
        let m = match_anchors(&anchors_per_class[k], &class_gts, spec);
        for (a, label) in m.labels.iter().enumerate() {
            cls[a * n_classes + k] = match label {
                AnchorLabel::Positive(g) => {
                    if m.max_iou[a] > box_iou[a] || boxes[a].is_none() {
                        let (residuals, dir) = encode_box(&class_gts[*g], &anchors_per_class[k][a])?;
                        boxes[a] = Some(BoxTarget { residuals, dir, class: k, gt: gt_idx[*g] });
                        box_iou[a] = m.max_iou[a];
                    }
                    ClsTarget::Positive
                }
                AnchorLabel::Negative => ClsTarget::Negative,
                AnchorLabel::Ignored => ClsTarget::Ignored,
            };
        }
    }
    Ok(Targets { n_anchors, n_classes, cls, boxes })
}
