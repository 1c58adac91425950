//! Synthetic scenes shaped like a 64-beam spinning lidar sweep, for tests,
//! benchmarks and demos when no recorded data is around.

use serde::{Deserialize, Serialize};

use crate::augment::Scene;
use crate::kitti::{lidar_to_camera_box, CalibMatrices, LabelRecord};
use crate::postproc::bev_intersection_area;
use crate::rng::{Draws, Rng};
use crate::types::{wrap_angle, Box3D, Point, CLASS_NAMES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub beams: usize,
    /// Elevation of the top and bottom beam, degrees.
    pub elevation: [f64; 2],
    pub azimuth_steps: usize,
    pub sensor_height: f64,
    pub max_range: f64,
    pub range_noise: f64,
    /// Objects per class: car, pedestrian, cyclist.
    pub objects: [usize; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            beams: 64,
            elevation: [2.0, -24.8],
            azimuth_steps: 2000,
            sensor_height: 1.73,
            max_range: 120.0,
            range_noise: 0.02,
            objects: [10, 4, 3],
        }
    }
}

/// Typical `(w, l, h)` per class.
const SIZES: [(f64, f64, f64); 3] = [(1.6, 3.9, 1.56), (0.6, 0.8, 1.73), (0.6, 1.76, 1.73)];

/// Distance along the unit ray `d` from the origin to the box surface.
fn ray_box(d: (f64, f64, f64), b: &Box3D) -> Option<f64> {
    let (lo_x, lo_y, lo_z) = b.to_local(0.0, 0.0, 0.0);
    let (s, c) = b.theta.sin_cos();
    let dir = [c * d.0 + s * d.1, -s * d.0 + c * d.1, d.2];
    let org = [lo_x, lo_y, lo_z];
    let half = [0.5 * b.l, 0.5 * b.w, 0.5 * b.h];
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for k in 0..3 {
        if dir[k].abs() < 1e-12 {
            if org[k].abs() > half[k] {
                return None;
            }
            continue;
        }
        let a = (-half[k] - org[k]) / dir[k];
        let bb = (half[k] - org[k]) / dir[k];
        t0 = t0.max(a.min(bb));
        t1 = t1.min(a.max(bb));
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

/// Background wall distance as a function of azimuth.
fn wall_radius(az: f64) -> f64 {
    40.0 + 15.0 * (3.0 * az).sin() + 8.0 * (7.0 * az + 1.0).cos()
}

const WALL_TOP: f64 = 3.0;

fn place_objects(cfg: &SynthConfig, rng: &mut Rng) -> Vec<(Box3D, usize)> {
    let mut boxes: Vec<(Box3D, usize)> = Vec::new();
    for (class, &count) in cfg.objects.iter().enumerate() {
        let (w, l, h) = SIZES[class];
        let mut placed = 0;
        let mut tries = 0;
        while placed < count && tries < 1000 {
            tries += 1;
            let x = rng.uniform(6.0, 55.0);
            let y = rng.uniform(-0.6, 0.6) * x;
            if x.hypot(y) > wall_radius(y.atan2(x)) - 3.0 {
                continue;
            }
            let b = Box3D::new(x, y, -cfg.sensor_height + 0.5 * h, w, l, h, rng.uniform(-std::f64::consts::PI, std::f64::consts::PI));
            let mut padded = b;
            padded.w += 0.5;
            padded.l += 0.5;
            if boxes.iter().any(|(o, _)| bev_intersection_area(o, &padded) > 0.0) {
                continue;
            }
            boxes.push((b, class));
            placed += 1;
        }
    }
    boxes
}

/// Ray-casts one sweep against the ground plane, the objects and a wall ring.
pub fn synth_frame(cfg: &SynthConfig, rng: &mut Rng) -> Scene {
    let boxes = place_objects(cfg, rng);
    let mut points = Vec::new();
    for beam in 0..cfg.beams {
        let frac = beam as f64 / (cfg.beams - 1).max(1) as f64;
        let elev = (cfg.elevation[0] + frac * (cfg.elevation[1] - cfg.elevation[0])).to_radians();
        let (se, ce) = elev.sin_cos();
        for step in 0..cfg.azimuth_steps {
            let az = (step as f64 + 0.5) / cfg.azimuth_steps as f64 * std::f64::consts::TAU;
            let (sa, ca) = az.sin_cos();
            let d = (ce * ca, ce * sa, se);
            let mut best = f64::INFINITY;
            let mut refl = 0.0;
            if se < 0.0 {
                best = cfg.sensor_height / -se;
                refl = 0.1;
            }
            let wall = wall_radius(az) / ce;
            if wall < best && wall * se < WALL_TOP {
                best = wall;
                refl = 0.3;
            }
            for (b, _) in &boxes {
                if let Some(t) = ray_box(d, b) {
                    if t < best {
                        best = t;
                        refl = 0.7;
                    }
                }
            }
            if !best.is_finite() || best > cfg.max_range {
                continue;
            }
            let r = best + rng.normal(0.0, cfg.range_noise);
            let jitter = rng.uniform(-0.05, 0.05);
            points.push(Point::new((r * d.0) as f32, (r * d.1) as f32, (r * d.2) as f32, (refl + jitter) as f32));
        }
    }
    Scene { points, boxes }
}

/// `n` points scattered within `spread` of `center`.
pub fn clustered_points(n: usize, center: (f64, f64, f64), spread: f64, rng: &mut Rng) -> Vec<Point> {
    (0..n)
        .map(|_| {
            Point::new(
                (center.0 + rng.uniform(-spread, spread)) as f32,
                (center.1 + rng.uniform(-spread, spread)) as f32,
                (center.2 + rng.uniform(-spread, spread)) as f32,
                rng.uniform(0.0, 1.0) as f32,
            )
        })
        .collect()
}

/// Label records for the boxes that project into the image; the 2D box is
/// the clipped projection of the corners and truncation the clipped share.
pub fn label_records(scene: &Scene, calib: &CalibMatrices, image_w: f64, image_h: f64) -> Vec<LabelRecord> {
    let mut out = Vec::new();
    for (b, class) in &scene.boxes {
        let (location, rotation_y) = lidar_to_camera_box(b, calib);
        if location[2] <= 0.5 {
            continue;
        }
        let mut u = (f64::MAX, f64::MIN);
        let mut v = (f64::MAX, f64::MIN);
        for (x, y) in b.bev_corners() {
            for z in [b.z - 0.5 * b.h, b.z + 0.5 * b.h] {
                let c = calib.lidar_to_rect(nalgebra::Vector3::new(x, y, z));
                let (pu, pv, _) = calib.project_rect(c);
                u = (u.0.min(pu), u.1.max(pu));
                v = (v.0.min(pv), v.1.max(pv));
            }
        }
        let full = (u.1 - u.0) * (v.1 - v.0);
        let cu = (u.0.max(0.0), u.1.min(image_w - 1.0));
        let cv = (v.0.max(0.0), v.1.min(image_h - 1.0));
        if cu.1 <= cu.0 || cv.1 <= cv.0 {
            continue;
        }
        let clipped = (cu.1 - cu.0) * (cv.1 - cv.0);
        out.push(LabelRecord {
            class: CLASS_NAMES[*class].to_string(),
            truncation: (1.0 - clipped / full).clamp(0.0, 1.0),
            occlusion: 0,
            alpha: wrap_angle(rotation_y - location[0].atan2(location[2])),
            bbox: [cu.0, cv.0, cu.1, cv.1],
            h: b.h,
            w: b.w,
            l: b.l,
            location,
            rotation_y,
            score: None,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::GridSpec;

    #[test]
    fn ray_hits_box_front_face() {
        let b = Box3D::new(10.0, 0.0, 0.0, 2.0, 4.0, 2.0, 0.0);
        assert!((ray_box((1.0, 0.0, 0.0), &b).unwrap() - 8.0).abs() < 1e-12);
        assert!(ray_box((-1.0, 0.0, 0.0), &b).is_none());
        assert!(ray_box((0.0, 1.0, 0.0), &b).is_none());
    }

    #[test]
    fn frame_is_deterministic_and_plausible() {
        let cfg = SynthConfig::default();
        let a = synth_frame(&cfg, &mut Rng::new(1));
        let b = synth_frame(&cfg, &mut Rng::new(1));
        assert_eq!(a, b);
        assert!(a.points.len() > 50_000 && a.points.len() <= cfg.beams * cfg.azimuth_steps);
        assert_eq!(a.boxes.len(), 17);
        let grid = GridSpec::car();
        let in_range = a.points.iter().filter(|p| grid.contains(p)).count();
        assert!(in_range > 10_000);
        // objects stand inside the wall ring, so few are hidden entirely
        let seen = a.boxes.iter().filter(|(bx, _)| a.points.iter().any(|p| bx.contains_point(p))).count();
        assert!(seen + 2 >= a.boxes.len(), "{seen}");
    }

    #[test]
    fn labels_round_trip_to_boxes() {
        let scene = synth_frame(&SynthConfig::default(), &mut Rng::new(2));
        let calib = CalibMatrices::permutation();
        let labels = label_records(&scene, &calib, 1242.0, 375.0);
        assert!(!labels.is_empty());
        for r in &labels {
            assert!(r.bbox_valid());
            let b = crate::kitti::camera_to_lidar_box(r, &calib).unwrap();
            assert!(scene.boxes.iter().any(|(s, _)| (s.x - b.x).abs() < 1e-9 && (s.y - b.y).abs() < 1e-9));
        }
    }
}
