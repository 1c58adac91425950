//! Training-time augmentation applied jointly to points and boxes.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, NdTensor, TensorMap};
use crate::error::{Error, Result};
use crate::postproc::bev_intersection_area;
use crate::rng::{Draws, Rng};
use crate::types::{Box3D, Point, CLASS_NAMES};

/// A point cloud with its labeled boxes `(box, class id)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene {
    pub points: Vec<Point>,
    pub boxes: Vec<(Box3D, usize)>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        for (b, c) in &self.boxes {
            if !b.is_valid() {
                return Err(Error::Domain(format!("invalid box {b:?}")));
            }
            if *c >= CLASS_NAMES.len() {
                return Err(Error::Domain(format!("unknown class id {c}")));
            }
        }
        Ok(())
    }

    /// Indices of the points inside each box.
    pub fn membership(&self) -> Vec<Vec<usize>> {
        self.boxes
            .iter()
            .map(|(b, _)| (0..self.points.len()).filter(|&i| b.contains_point(&self.points[i])).collect())
            .collect()
    }

    /// `scene.points` `[N, 4]` and `scene.boxes` `[M, 8]` (class, then the
    /// seven box values).
    pub fn to_tensors(&self) -> TensorMap {
        let mut m = TensorMap::new();
        let pts: Vec<f32> = self.points.iter().flat_map(|p| [p.x, p.y, p.z, p.r]).collect();
        m.insert("scene.points".into(), NdTensor { shape: vec![self.points.len(), 4], data: pts });
        let boxes: Vec<f32> = self
            .boxes
            .iter()
            .flat_map(|(b, c)| [*c as f64, b.x, b.y, b.z, b.w, b.l, b.h, b.theta].map(|v| v as f32))
            .collect();
        m.insert("scene.boxes".into(), NdTensor { shape: vec![self.boxes.len(), 8], data: boxes });
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Database samples per class: car, pedestrian, cyclist.
    pub sample_counts: [usize; 3],
    /// Per-box rotation is uniform on `[-box_rotation, box_rotation]`.
    pub box_rotation: f64,
    /// Standard deviation of the per-box translation on each axis.
    pub box_translation_std: f64,
    pub flip_probability: f64,
    /// Global rotation is uniform on `[-global_rotation, global_rotation]`.
    pub global_rotation: f64,
    pub scale_range: [f64; 2],
    pub global_translation_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            sample_counts: [15, 0, 8],
            box_rotation: PI / 20.0,
            box_translation_std: 0.25,
            flip_probability: 0.5,
            global_rotation: PI / 4.0,
            scale_range: [0.95, 1.05],
            global_translation_std: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.box_rotation >= 0.0
            && self.box_translation_std >= 0.0
            && (0.0..=1.0).contains(&self.flip_probability)
            && self.global_rotation >= 0.0
            && self.scale_range[0] > 0.0
            && self.scale_range[0] <= self.scale_range[1]
            && self.global_translation_std >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid augmentation settings: {self:?}")));
        }
        Ok(())
    }
}

/// One stored object: its pose and interior points in box-local coordinates
/// `(lx, ly, lz, reflectance)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GtEntry {
    pub class: usize,
    pub boxed: Box3D,
    pub points: Vec<[f64; 4]>,
}

impl GtEntry {
    /// Interior points placed back at the stored pose.
    pub fn world_points(&self) -> Vec<Point> {
        self.points
            .iter()
            .map(|&[lx, ly, lz, r]| {
                let (x, y, z) = self.boxed.to_world(lx, ly, lz);
                Point::new(x as f32, y as f32, z as f32, r as f32)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GtDatabase {
    /// Entries per class id.
    pub classes: Vec<Vec<GtEntry>>,
}

impl GtDatabase {
    pub fn len(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `db.meta` `[E, 16]`: class, the seven pose values each split into a
    /// high and low f32, and the point count. `db.points` `[total, 4]`.
    pub fn to_tensors(&self) -> TensorMap {
        let mut meta = Vec::new();
        let mut pts = Vec::new();
        let entries: Vec<&GtEntry> = self.classes.iter().flatten().collect();
        for e in &entries {
            meta.push(e.class as f32);
            let b = e.boxed;
            for v in [b.x, b.y, b.z, b.w, b.l, b.h, b.theta] {
                let hi = v as f32;
                meta.push(hi);
                meta.push((v - hi as f64) as f32);
            }
            meta.push(e.points.len() as f32);
            pts.extend(e.points.iter().flat_map(|p| p.map(|v| v as f32)));
        }
        let mut m = TensorMap::new();
        m.insert("db.meta".into(), NdTensor { shape: vec![entries.len(), 16], data: meta });
        m.insert("db.points".into(), NdTensor { shape: vec![pts.len() / 4, 4], data: pts });
        m
    }

    pub fn from_tensors(m: &TensorMap) -> Result<Self> {
        let get = |name: &str, width: usize| -> Result<&NdTensor> {
            let t = m.get(name).ok_or_else(|| Error::MissingTensor(name.into()))?;
            if t.shape.len() != 2 || t.shape[1] != width {
                return Err(Error::Shape { name: name.into(), expected: vec![0, width], found: t.shape.clone() });
            }
            Ok(t)
        };
        let meta = get("db.meta", 16)?;
        let pts = get("db.points", 4)?;
        let mut db = GtDatabase { classes: vec![Vec::new(); CLASS_NAMES.len()] };
        let mut offset = 0usize;
        for row in meta.data.chunks_exact(16) {
            let class = row[0] as usize;
            if class >= CLASS_NAMES.len() {
                return Err(Error::format("gt database", format!("unknown class id {}", row[0])));
            }
            let v = |i: usize| row[1 + 2 * i] as f64 + row[2 + 2 * i] as f64;
            let n = row[15] as usize;
            let end = offset + n;
            if end * 4 > pts.data.len() {
                return Err(Error::format("gt database", "point block shorter than the metadata says"));
            }
            let points = pts.data[offset * 4..end * 4]
                .chunks_exact(4)
                .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64, c[3] as f64])
                .collect();
            offset = end;
            db.classes[class].push(GtEntry {
                class,
                boxed: Box3D { x: v(0), y: v(1), z: v(2), w: v(3), l: v(4), h: v(5), theta: v(6) },
                points,
            });
        }
        if offset * 4 != pts.data.len() {
            return Err(Error::format("gt database", "unreferenced trailing points"));
        }
        Ok(db)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write(path, &self.to_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(&container::read(path)?)
    }
}

/// Collects every labeled box with the points inside it.
pub fn build_gt_database(frames: &[Scene]) -> GtDatabase {
    let mut db = GtDatabase { classes: vec![Vec::new(); CLASS_NAMES.len()] };
    for frame in frames {
        for (b, class) in &frame.boxes {
            let points = frame
                .points
                .iter()
                .filter(|p| b.contains_point(p))
                .map(|p| {
                    let (lx, ly, lz) = b.to_local(p.x as f64, p.y as f64, p.z as f64);
                    [lx, ly, lz, p.r as f64]
                })
                .collect();
            db.classes[*class].push(GtEntry { class: *class, boxed: *b, points });
        }
    }
    db
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SampleReport {
    /// Placed samples per class.
    pub placed: [usize; 3],
    /// Candidates dropped for colliding with another box.
    pub rejected: usize,
    /// Some class had fewer database entries than requested.
    pub short: bool,
}

/// Pastes database objects into the scene at their stored poses.
///
/// A candidate is skipped when its BEV footprint touches any box already in
/// the scene or placed before it. Scene points inside a placed box are
/// removed before the object's own points are added.
pub fn sample_gt(db: &GtDatabase, scene: &Scene, counts: [usize; 3], rng: &mut Rng) -> (Scene, SampleReport) {
    let mut report = SampleReport::default();
    let mut boxes = scene.boxes.clone();
    let mut placed: Vec<&GtEntry> = Vec::new();
    for (class, &want) in counts.iter().enumerate() {
        let pool = db.classes.get(class).map_or(&[][..], Vec::as_slice);
        if pool.len() < want {
            report.short = true;
            log::warn!("gt database has {} {} entries, {} requested", pool.len(), CLASS_NAMES[class], want);
        }
        for i in rng.choose_indices(pool.len(), want.min(pool.len())) {
            let cand = &pool[i];
            if boxes.iter().any(|(b, _)| bev_intersection_area(b, &cand.boxed) > 0.0) {
                report.rejected += 1;
                continue;
            }
            boxes.push((cand.boxed, class));
            placed.push(cand);
            report.placed[class] += 1;
        }
    }
    let mut points: Vec<Point> = scene
        .points
        .iter()
        .filter(|p| !placed.iter().any(|e| e.boxed.contains_point(p)))
        .copied()
        .collect();
    for e in &placed {
        points.extend(e.world_points());
    }
    (Scene { points, boxes }, report)
}

fn rotate_about(x: f64, y: f64, cx: f64, cy: f64, s: f64, c: f64) -> (f64, f64) {
    let (dx, dy) = (x - cx, y - cy);
    (cx + c * dx - s * dy, cy + s * dx + c * dy)
}

/// Turns and shifts each box together with its interior points. A point
/// inside several boxes follows the first.
pub fn perturb_boxes<D: Draws>(scene: &Scene, cfg: &AugmentConfig, rng: &mut D) -> Scene {
    let mut owner: Vec<Option<usize>> = vec![None; scene.points.len()];
    for (i, p) in scene.points.iter().enumerate() {
        owner[i] = scene.boxes.iter().position(|(b, _)| b.contains_point(p));
    }
    let mut out = scene.clone();
    for (k, (b, _)) in scene.boxes.iter().enumerate() {
        let rot = rng.uniform(-cfg.box_rotation, cfg.box_rotation);
        let t = [
            rng.normal(0.0, cfg.box_translation_std),
            rng.normal(0.0, cfg.box_translation_std),
            rng.normal(0.0, cfg.box_translation_std),
        ];
        let (s, c) = rot.sin_cos();
        for (i, p) in scene.points.iter().enumerate() {
            if owner[i] != Some(k) {
                continue;
            }
            let (x, y) = rotate_about(p.x as f64, p.y as f64, b.x, b.y, s, c);
            out.points[i] = Point::new((x + t[0]) as f32, (y + t[1]) as f32, (p.z as f64 + t[2]) as f32, p.r);
        }
        out.boxes[k].0 = Box3D::new(b.x + t[0], b.y + t[1], b.z + t[2], b.w, b.l, b.h, b.theta + rot);
    }
    out
}

/// The draws of one [`global_augment`] call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalDraws {
    pub flip: bool,
    pub rotation: f64,
    pub scale: f64,
    pub translation: [f64; 3],
}

impl GlobalDraws {
    pub fn draw<D: Draws>(cfg: &AugmentConfig, rng: &mut D) -> Self {
        let flip = rng.bernoulli(cfg.flip_probability);
        let rotation = rng.uniform(-cfg.global_rotation, cfg.global_rotation);
        let scale = rng.uniform(cfg.scale_range[0], cfg.scale_range[1]);
        let translation = [
            rng.normal(0.0, cfg.global_translation_std),
            rng.normal(0.0, cfg.global_translation_std),
            rng.normal(0.0, cfg.global_translation_std),
        ];
        Self { flip, rotation, scale, translation }
    }

    /// The map on a single 3D position.
    pub fn apply_point(&self, x: f64, y: f64, z: f64) -> (f64, f64, f64) {
        let y = if self.flip { -y } else { y };
        let (s, c) = self.rotation.sin_cos();
        let (x, y) = (c * x - s * y, s * x + c * y);
        let t = self.translation;
        (x * self.scale + t[0], y * self.scale + t[1], z * self.scale + t[2])
    }

    pub fn apply_box(&self, b: &Box3D) -> Box3D {
        let (x, y, z) = self.apply_point(b.x, b.y, b.z);
        let theta = if self.flip { -b.theta } else { b.theta };
        let s = self.scale;
        Box3D::new(x, y, z, b.w * s, b.l * s, b.h * s, theta + self.rotation)
    }

    pub fn apply(&self, scene: &Scene) -> Scene {
        Scene {
            points: scene
                .points
                .iter()
                .map(|p| {
                    let (x, y, z) = self.apply_point(p.x as f64, p.y as f64, p.z as f64);
                    Point::new(x as f32, y as f32, z as f32, p.r)
                })
                .collect(),
            boxes: scene.boxes.iter().map(|(b, c)| (self.apply_box(b), *c)).collect(),
        }
    }
}

/// Mirror `y -> -y` (with some probability), rotate about the origin, scale,
/// translate; in that order.
pub fn global_augment<D: Draws>(scene: &Scene, cfg: &AugmentConfig, rng: &mut D) -> Scene {
    GlobalDraws::draw(cfg, rng).apply(scene)
}

/// Database sampling, then per-box perturbation, then the global transform.
pub fn augment_scene(db: &GtDatabase, scene: &Scene, cfg: &AugmentConfig, rng: &mut Rng) -> (Scene, SampleReport) {
    let (sampled, report) = sample_gt(db, scene, cfg.sample_counts, rng);
    let perturbed = perturb_boxes(&sampled, cfg, rng);
    (global_augment(&perturbed, cfg, rng), report)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Uniform draws return the interval midpoint, normals their mean,
    /// coin flips `false`: every transform becomes the identity.
    struct Midpoint;

    impl Draws for Midpoint {
        fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
            0.5 * (lo + hi)
        }
        fn normal(&mut self, mean: f64, _std: f64) -> f64 {
            mean
        }
        fn bernoulli(&mut self, _p: f64) -> bool {
            false
        }
        fn below(&mut self, _n: usize) -> usize {
            0
        }
    }

    fn car_at(x: f64, y: f64, theta: f64) -> Box3D {
        Box3D::new(x, y, -1.0, 1.6, 3.9, 1.5, theta)
    }

    /// Boxes with a few interior points each, plus far-away background.
    fn scene() -> Scene {
        let boxes = vec![(car_at(10.0, 0.0, 0.3), 0), (car_at(20.0, 5.0, -1.0), 0), (car_at(30.0, -6.0, 2.0), 2)];
        let mut points = Vec::new();
        for (b, _) in &boxes {
            for (lx, ly, lz) in [(0.0, 0.0, 0.0), (1.0, 0.3, 0.2), (-1.2, -0.5, -0.4), (0.5, -0.2, 0.6)] {
                let (x, y, z) = b.to_world(lx, ly, lz);
                points.push(Point::new(x as f32, y as f32, z as f32, 0.5));
            }
        }
        points.push(Point::new(50.0, 30.0, 0.0, 0.1));
        points.push(Point::new(5.0, -30.0, 0.0, 0.1));
        Scene { points, boxes }
    }

    #[test]
    fn db_counts_interior_points() {
        let b = car_at(0.0, 0.0, 0.0);
        let mut points: Vec<Point> = (0..5).map(|i| Point::new(i as f32 * 0.3 - 0.6, 0.0, -1.0, 0.0)).collect();
        points.extend((0..5).map(|i| Point::new(10.0 + i as f32, 0.0, -1.0, 0.0)));
        let db = build_gt_database(&[Scene { points, boxes: vec![(b, 0)] }]);
        assert_eq!(db.classes[0].len(), 1);
        assert_eq!(db.classes[0][0].points.len(), 5);
        assert!(build_gt_database(&[]).is_empty());
    }

    #[test]
    fn db_entry_returns_to_original_points() {
        let s = scene();
        let db = build_gt_database(std::slice::from_ref(&s));
        let e = &db.classes[0][0];
        let original: Vec<&Point> = s.points.iter().filter(|p| e.boxed.contains_point(p)).collect();
        for (&[lx, ly, lz, _], p) in e.points.iter().zip(original) {
            let (x, y, z) = e.boxed.to_world(lx, ly, lz);
            let err = (x - p.x as f64).abs().max((y - p.y as f64).abs()).max((z - p.z as f64).abs());
            assert!(err < 1e-6);
        }
    }

    #[test]
    fn db_persistence_round_trip() {
        let db = build_gt_database(&[scene()]);
        let back = GtDatabase::from_tensors(&db.to_tensors()).unwrap();
        assert_eq!(back.len(), db.len());
        for (a, b) in db.classes.iter().flatten().zip(back.classes.iter().flatten()) {
            assert_eq!(a.class, b.class);
            assert!((a.boxed.x - b.boxed.x).abs() < 1e-12 && (a.boxed.theta - b.boxed.theta).abs() < 1e-12);
            assert_eq!(a.points.len(), b.points.len());
        }
    }

    #[test]
    fn zero_counts_leave_scene() {
        let db = build_gt_database(&[scene()]);
        let s = scene();
        let (out, report) = sample_gt(&db, &s, [0, 0, 0], &mut Rng::new(0));
        assert_eq!(out, s);
        assert_eq!(report.placed, [0; 3]);
    }

    #[test]
    fn empty_scene_accepts_all() {
        let db = build_gt_database(&[scene()]);
        let (out, report) = sample_gt(&db, &Scene::default(), [2, 0, 1], &mut Rng::new(0));
        assert_eq!(report.placed, [2, 0, 1]);
        assert_eq!(out.boxes.len(), 3);
        assert_eq!(out.points.len(), 12);
    }

    #[test]
    fn short_database_is_flagged() {
        let db = build_gt_database(&[scene()]);
        let (_, report) = sample_gt(&db, &Scene::default(), [15, 0, 8], &mut Rng::new(0));
        assert!(report.short);
        assert_eq!(report.placed, [2, 0, 1]);
    }

    #[test]
    fn overlapping_candidate_never_placed() {
        let target = scene();
        let db = build_gt_database(std::slice::from_ref(&target));
        for seed in 0..1000 {
            let (out, _) = sample_gt(&db, &target, [15, 0, 8], &mut Rng::new(seed));
            assert_eq!(out.boxes.len(), target.boxes.len());
        }
        // shifted half a car length: always touches the existing box
        let moved = Scene { points: vec![], boxes: vec![(car_at(11.5, 0.4, 0.3), 0)] };
        for seed in 0..1000 {
            let (out, r) = sample_gt(&db, &moved, [1, 0, 0], &mut Rng::new(seed));
            assert!(out.boxes.iter().skip(1).all(|(b, _)| bev_intersection_area(b, &moved.boxes[0].0) == 0.0));
            assert!(r.placed[0] <= 1);
        }
    }

    #[test]
    fn placed_box_clears_scene_points() {
        let db = build_gt_database(&[scene()]);
        let entry = &db.classes[2][0];
        let (x, y, z) = (entry.boxed.x, entry.boxed.y, entry.boxed.z);
        let background = Scene { points: vec![Point::new(x as f32, y as f32, z as f32, 9.0)], boxes: vec![] };
        let (out, _) = sample_gt(&db, &background, [0, 0, 1], &mut Rng::new(0));
        assert!(out.points.iter().all(|p| p.r != 9.0));
    }

    #[test]
    fn midpoint_draws_are_identity() {
        let s = scene();
        let cfg = AugmentConfig::default();
        assert_eq!(perturb_boxes(&s, &cfg, &mut Midpoint), s);
        assert_eq!(global_augment(&s, &cfg, &mut Midpoint), s);
    }

    #[test]
    fn center_point_follows_box() {
        let s = scene();
        let out = perturb_boxes(&s, &AugmentConfig::default(), &mut Rng::new(3));
        for (k, (b, _)) in out.boxes.iter().enumerate() {
            let p = out.points[4 * k];
            assert!((p.x as f64 - b.x).abs() < 1e-5 && (p.y as f64 - b.y).abs() < 1e-5 && (p.z as f64 - b.z).abs() < 1e-5);
        }
        assert_eq!(&out.points[12..], &s.points[12..]);
    }

    #[test]
    fn membership_preserved() {
        let s = scene();
        let before = s.membership();
        let cfg = AugmentConfig::default();
        for seed in 0..50 {
            let mut rng = Rng::new(seed);
            let a = perturb_boxes(&s, &cfg, &mut rng);
            assert_eq!(a.membership(), before);
            let g = global_augment(&a, &cfg, &mut rng);
            assert_eq!(g.membership(), before);
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let s = scene();
        let flip = GlobalDraws { flip: true, rotation: 0.0, scale: 1.0, translation: [0.0; 3] };
        let twice = flip.apply(&flip.apply(&s));
        assert_eq!(twice.points, s.points);
        for ((a, _), (b, _)) in twice.boxes.iter().zip(&s.boxes) {
            assert!((a.theta - b.theta).abs() < 1e-15 && a.y == b.y);
        }
    }

    #[test]
    fn corners_commute_with_global_transform() {
        let cfg = AugmentConfig::default();
        let mut rng = Rng::new(8);
        for _ in 0..200 {
            let g = GlobalDraws::draw(&cfg, &mut rng);
            let b = Box3D::new(rng.uniform(0.0, 60.0), rng.uniform(-30.0, 30.0), -1.0, 1.6, 3.9, 1.5, rng.uniform(-3.0, 3.0));
            let moved = g.apply_box(&b).bev_corners();
            let mut expect: Vec<(f64, f64)> = b.bev_corners().iter().map(|&(x, y)| {
                let (x, y, _) = g.apply_point(x, y, b.z);
                (x, y)
            }).collect();
            if g.flip {
                // mirroring reverses the winding, so compare as point sets
                expect.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
                let mut m = moved.to_vec();
                m.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
                for (a, e) in m.iter().zip(&expect) {
                    assert!((a.0 - e.0).abs() < 1e-9 && (a.1 - e.1).abs() < 1e-9);
                }
            } else {
                for (a, e) in moved.iter().zip(&expect) {
                    assert!((a.0 - e.0).abs() < 1e-9 && (a.1 - e.1).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn box_rotation_draws_are_uniform() {
        let cfg = AugmentConfig::default();
        let s = Scene { points: vec![], boxes: vec![(car_at(10.0, 0.0, 0.0), 0)] };
        let mut rng = Rng::new(12);
        let n = 100_000;
        let mut draws: Vec<f64> = (0..n).map(|_| perturb_boxes(&s, &cfg, &mut rng).boxes[0].0.theta).collect();
        draws.sort_by(f64::total_cmp);
        let a = cfg.box_rotation;
        let d = draws
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let cdf = (v + a) / (2.0 * a);
                (cdf - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - cdf).abs())
            })
            .fold(0.0, f64::max);
        // Kolmogorov-Smirnov critical value at the 0.1% level
        assert!(d < 1.95 / (n as f64).sqrt(), "{d}");
        assert!(draws[0] >= -a && draws[n - 1] <= a);
    }

    #[test]
    fn augment_is_deterministic() {
        let db = build_gt_database(&[scene()]);
        let cfg = AugmentConfig::default();
        let (a, _) = augment_scene(&db, &Scene::default(), &cfg, &mut Rng::new(5));
        let (b, _) = augment_scene(&db, &Scene::default(), &cfg, &mut Rng::new(5));
        assert_eq!(container::encode(&a.to_tensors()).unwrap(), container::encode(&b.to_tensors()).unwrap());
    }
}
