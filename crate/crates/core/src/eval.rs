//! Difficulty bands and average precision in the KITTI style.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kitti::{camera_to_lidar_box, CalibMatrices, LabelRecord};
use crate::postproc::{iou_3d, iou_bev_rotated};
use crate::types::Box3D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    pub fn band(self) -> DifficultyBand {
        match self {
            Difficulty::Easy => DifficultyBand { difficulty: self, min_height: 40.0, max_occlusion: 0, max_truncation: 0.15 },
            Difficulty::Moderate => DifficultyBand { difficulty: self, min_height: 25.0, max_occlusion: 1, max_truncation: 0.30 },
            Difficulty::Hard => DifficultyBand { difficulty: self, min_height: 25.0, max_occlusion: 2, max_truncation: 0.50 },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifficultyBand {
    pub difficulty: Difficulty,
    /// Minimum 2D box height in pixels.
    pub min_height: f64,
    pub max_occlusion: i32,
    pub max_truncation: f64,
}

impl DifficultyBand {
    pub fn admits(&self, r: &LabelRecord) -> bool {
        r.bbox_height() >= self.min_height && r.occlusion <= self.max_occlusion && r.truncation <= self.max_truncation
    }
}

/// Every band the record qualifies for; empty means ignored.
pub fn assign_difficulty(r: &LabelRecord) -> Vec<Difficulty> {
    Difficulty::ALL.into_iter().filter(|d| d.band().admits(r)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Bev,
    #[serde(rename = "3d")]
    ThreeD,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Bev => "BEV",
            Metric::ThreeD => "3D",
        }
    }

    pub fn iou(self, a: &Box3D, b: &Box3D) -> f64 {
        match self {
            Metric::Bev => iou_bev_rotated(a, b),
            Metric::ThreeD => iou_3d(a, b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interpolation {
    #[serde(rename = "11")]
    Eleven,
    #[serde(rename = "40")]
    Forty,
}

impl Interpolation {
    pub fn recall_points(self) -> Vec<f64> {
        match self {
            Interpolation::Eleven => (0..=10).map(|i| i as f64 / 10.0).collect(),
            Interpolation::Forty => (1..=40).map(|i| i as f64 / 40.0).collect(),
        }
    }
}

/// Class names that neither count as hits nor as misses for `class`.
pub fn neighbor_class(class: &str) -> Option<&'static str> {
    match class {
        "Car" => Some("Van"),
        "Pedestrian" => Some("Person_sitting"),
        _ => None,
    }
}

/// One frame prepared for evaluation: records plus lidar-frame boxes.
#[derive(Debug, Clone)]
pub struct EvalFrame {
    pub gts: Vec<(LabelRecord, Box3D)>,
    pub dets: Vec<(LabelRecord, Box3D)>,
}

impl EvalFrame {
    pub fn new(gts: Vec<LabelRecord>, dets: Vec<LabelRecord>, calib: &CalibMatrices) -> Result<Self> {
        let lift = |rs: Vec<LabelRecord>| -> Result<Vec<(LabelRecord, Box3D)>> {
            rs.into_iter()
                .map(|r| {
                    let b = camera_to_lidar_box(&r, calib)?;
                    Ok((r, b))
                })
                .collect()
        };
        Ok(Self { gts: lift(gts)?, dets: lift(dets)? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub iou_thr: f64,
    pub metric: Metric,
    pub interpolation: Interpolation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    pub n_gt: usize,
    /// `(recall, precision)` at each distinct score threshold.
    pub curve: Vec<(f64, f64)>,
}

enum GtRole {
    Valid,
    Ignored,
    Other,
}

fn gt_role(r: &LabelRecord, class: &str, band: Difficulty) -> GtRole {
    if r.class == class {
        if band.band().admits(r) {
            GtRole::Valid
        } else {
            GtRole::Ignored
        }
    } else if Some(r.class.as_str()) == neighbor_class(class) {
        GtRole::Ignored
    } else {
        GtRole::Other
    }
}

/// Share of `det`'s 2D box covered by `region`.
fn covered_fraction(det: &[f64; 4], region: &[f64; 4]) -> f64 {
    let iw = (det[2].min(region[2]) - det[0].max(region[0])).max(0.0);
    let ih = (det[3].min(region[3]) - det[1].max(region[1])).max(0.0);
    iw * ih / ((det[2] - det[0]) * (det[3] - det[1]))
}

/// Matches one frame. Returns `(score, true_positive)` per counted detection
/// and the number of valid ground truths.
fn match_frame(frame: &EvalFrame, class: &str, band: Difficulty, s: &EvalSettings) -> (Vec<(f64, bool)>, usize) {
    let roles: Vec<GtRole> = frame.gts.iter().map(|(r, _)| gt_role(r, class, band)).collect();
    let n_valid = roles.iter().filter(|r| matches!(r, GtRole::Valid)).count();
    let dont_care: Vec<&[f64; 4]> = frame.gts.iter().filter(|(r, _)| r.is_dont_care()).map(|(r, _)| &r.bbox).collect();

    let mut dets: Vec<&(LabelRecord, Box3D)> = frame.dets.iter().filter(|(r, _)| r.class == class).collect();
    dets.sort_by(|a, b| b.0.score.unwrap_or(0.0).total_cmp(&a.0.score.unwrap_or(0.0)));

    let mut taken = vec![false; frame.gts.len()];
    let mut out = Vec::new();
    for (rec, det) in dets {
        let best = |want_valid: bool, taken: &[bool]| -> Option<usize> {
            let mut best: Option<(f64, usize)> = None;
            for (g, (_, gt)) in frame.gts.iter().enumerate() {
                let eligible = match roles[g] {
                    GtRole::Valid => want_valid,
                    GtRole::Ignored => !want_valid,
                    GtRole::Other => false,
                };
                if !eligible || taken[g] {
                    continue;
                }
                let iou = s.metric.iou(det, gt);
                if iou >= s.iou_thr && best.is_none_or(|(b, _)| iou > b) {
                    best = Some((iou, g));
                }
            }
            best.map(|(_, g)| g)
        };
        let score = rec.score.unwrap_or(0.0);
        if let Some(g) = best(true, &taken) {
            taken[g] = true;
            out.push((score, true));
        } else if let Some(g) = best(false, &taken) {
            taken[g] = true;
        } else if rec.bbox_valid() && dont_care.iter().any(|r| covered_fraction(&rec.bbox, r) >= 0.5) {
            // inside an unlabeled region
        } else {
            out.push((score, false));
        }
    }
    (out, n_valid)
}

/// Interpolated AP for one class and band over all frames.
///
/// Precision/recall points are taken only at distinct score values, so the
/// result depends on the score ranking alone.
pub fn average_precision(frames: &[EvalFrame], class: &str, band: Difficulty, s: &EvalSettings) -> ApResult {
    let mut scored = Vec::new();
    let mut n_gt = 0;
    for f in frames {
        let (m, n) = match_frame(f, class, band, s);
        scored.extend(m);
        n_gt += n;
    }
    if n_gt == 0 {
        return ApResult { ap: 0.0, n_gt, curve: Vec::new() };
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(score, hit)) in scored.iter().enumerate() {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        if scored.get(i + 1).is_none_or(|next| next.0 != score) {
            curve.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    let points = s.interpolation.recall_points();
    let sum: f64 = points
        .iter()
        .map(|&r| {
            curve
                .iter()
                .filter(|(rec, _)| *rec + 1e-12 >= r)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum();
    ApResult { ap: sum / points.len() as f64, n_gt, curve }
}

/// Default IoU threshold per class.
pub fn default_iou_threshold(class: &str) -> f64 {
    if class == "Car" {
        0.7
    } else {
        0.5
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub class: String,
    pub metric: Metric,
    /// Easy, moderate, hard. `None` when the band has no ground truth.
    pub ap: [Option<f64>; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

pub fn evaluate(frames: &[EvalFrame], classes: &[&str], interpolation: Interpolation) -> EvalReport {
    let mut rows = Vec::new();
    for class in classes {
        for metric in [Metric::Bev, Metric::ThreeD] {
            let s = EvalSettings { iou_thr: default_iou_threshold(class), metric, interpolation };
            let ap = Difficulty::ALL.map(|d| {
                let r = average_precision(frames, class, d, &s);
                (r.n_gt > 0).then_some(r.ap)
            });
            rows.push(ReportRow { class: class.to_string(), metric, ap });
        }
    }
    EvalReport { rows }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:<6} {:>9} {:>9} {:>9}", "class", "metric", "easy", "moderate", "hard")?;
        for row in &self.rows {
            write!(f, "{:<12} {:<6}", row.class, row.metric.name())?;
            for ap in row.ap {
                match ap {
                    Some(v) => write!(f, " {:>9.4}", v)?,
                    None => write!(f, " {:>9}", "-")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
