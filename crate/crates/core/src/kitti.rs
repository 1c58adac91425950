//! KITTI file formats: velodyne scans, label/result text, calibration, and
//! the lidar/camera frame conversions built on it.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::types::{wrap_angle, Box3D, Point};

pub const POINT_BYTES: usize = 16;

pub fn decode_velodyne(bytes: &[u8]) -> Result<Vec<Point>> {
    if bytes.len() % POINT_BYTES != 0 {
        return Err(Error::format(
            "velodyne scan",
            format!("length {} is not a multiple of {POINT_BYTES}", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(POINT_BYTES)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes([c[i], c[i + 1], c[i + 2], c[i + 3]]);
            Point::new(f(0), f(4), f(8), f(12))
        })
        .collect())
}

pub fn encode_velodyne(points: &[Point]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * POINT_BYTES);
    for p in points {
        for v in [p.x, p.y, p.z, p.r] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_velodyne_bin(path: &Path) -> Result<Vec<Point>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_velodyne(&bytes).map_err(|e| match e {
        Error::Format { message, .. } => Error::format(path.display().to_string(), message),
        other => other,
    })
}

pub fn write_velodyne_bin(path: &Path, points: &[Point]) -> Result<()> {
    fs::write(path, encode_velodyne(points)).map_err(|e| Error::io(path, e))
}

/// One line of a label or result file.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord {
    pub class: String,
    pub truncation: f64,
    pub occlusion: i32,
    pub alpha: f64,
    /// `(left, top, right, bottom)` in pixels.
    pub bbox: [f64; 4],
    pub h: f64,
    pub w: f64,
    pub l: f64,
    /// Camera frame, bottom center of the box.
    pub location: [f64; 3],
    pub rotation_y: f64,
    /// Present in result files only.
    pub score: Option<f64>,
}

impl LabelRecord {
    pub fn is_dont_care(&self) -> bool {
        self.class == "DontCare"
    }

    pub fn bbox_valid(&self) -> bool {
        self.bbox[2] > self.bbox[0] && self.bbox[3] > self.bbox[1]
    }

    pub fn bbox_height(&self) -> f64 {
        self.bbox[3] - self.bbox[1]
    }

    pub fn to_line(&self) -> String {
        let mut s = format!(
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            self.class,
            self.truncation,
            self.occlusion,
            self.alpha,
            self.bbox[0],
            self.bbox[1],
            self.bbox[2],
            self.bbox[3],
            self.h,
            self.w,
            self.l,
            self.location[0],
            self.location[1],
            self.location[2],
            self.rotation_y
        );
        if let Some(score) = self.score {
            let _ = write!(s, " {score}");
        }
        s
    }
}

fn parse_line(line: &str, path: &Path, lineno: usize) -> Result<LabelRecord> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    let err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line: lineno,
        message,
    };
    if fields.len() != 15 && fields.len() != 16 {
        return Err(err(format!("expected 15 or 16 fields, found {}", fields.len())));
    }
    let num = |i: usize| -> Result<f64> {
        let v: f64 = fields[i]
            .parse()
            .map_err(|_| err(format!("field {} is not a number: {:?}", i + 1, fields[i])))?;
        if !v.is_finite() {
            return Err(err(format!("field {} is not finite", i + 1)));
        }
        Ok(v)
    };
    let occ = num(2)?;
    if occ.fract() != 0.0 {
        return Err(err(format!("occlusion must be an integer: {occ}")));
    }
    Ok(LabelRecord {
        class: fields[0].to_string(),
        truncation: num(1)?,
        occlusion: occ as i32,
        alpha: num(3)?,
        bbox: [num(4)?, num(5)?, num(6)?, num(7)?],
        h: num(8)?,
        w: num(9)?,
        l: num(10)?,
        location: [num(11)?, num(12)?, num(13)?],
        rotation_y: num(14)?,
        score: if fields.len() == 16 { Some(num(15)?) } else { None },
    })
}

/// Parses label or result text; `path` only labels errors.
pub fn parse_labels_str(text: &str, path: &Path) -> Result<Vec<LabelRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, path, i + 1))
        .collect()
}

pub fn parse_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels_str(&text, path)
}

pub fn write_labels(path: &Path, records: &[LabelRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibMatrices {
    pub p2: Matrix3x4<f64>,
    pub r0_rect: Matrix3<f64>,
    pub tr_velo_to_cam: Matrix3x4<f64>,
}

fn affine(m: &Matrix3x4<f64>) -> Matrix4<f64> {
    let mut out = Matrix4::identity();
    out.fixed_view_mut::<3, 4>(0, 0).copy_from(m);
    out
}

impl CalibMatrices {
    /// Axis permutation between lidar (x fwd, y left, z up) and camera
    /// (x right, y down, z fwd) with no offsets, and a nominal KITTI P2.
    pub fn permutation() -> Self {
        Self {
            p2: Matrix3x4::new(721.5377, 0.0, 609.5593, 0.0, 0.0, 721.5377, 172.854, 0.0, 0.0, 0.0, 1.0, 0.0),
            r0_rect: Matrix3::identity(),
            tr_velo_to_cam: Matrix3x4::new(0.0, -1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.p2.iter().chain(self.r0_rect.iter()).chain(self.tr_velo_to_cam.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Domain("calibration has non-finite entries".into()));
        }
        let gap = (self.r0_rect * self.r0_rect.transpose() - Matrix3::identity()).abs().max();
        if gap > 1e-3 {
            return Err(Error::Domain(format!("R0_rect is not orthonormal (deviation {gap:.2e})")));
        }
        Ok(())
    }

    /// Lidar to rectified camera coordinates, as a 4x4 affine map.
    pub fn velo_to_rect(&self) -> Matrix4<f64> {
        let mut r = Matrix4::identity();
        r.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.r0_rect);
        r * affine(&self.tr_velo_to_cam)
    }

    pub fn rect_to_velo(&self) -> Result<Matrix4<f64>> {
        self.velo_to_rect()
            .try_inverse()
            .ok_or_else(|| Error::Domain("lidar-to-camera transform is singular".into()))
    }

    pub fn lidar_to_rect(&self, p: Vector3<f64>) -> Vector3<f64> {
        (self.velo_to_rect() * p.push(1.0)).xyz()
    }

    /// Pixel coordinates and depth of a rectified camera point.
    pub fn project_rect(&self, p: Vector3<f64>) -> (f64, f64, f64) {
        let q = self.p2 * Vector4::new(p.x, p.y, p.z, 1.0);
        (q.x / q.z, q.y / q.z, p.z)
    }
}

fn parse_values(line: &str) -> Option<(&str, Vec<f64>)> {
    let (key, rest) = line.split_once(':')?;
    let vals: Option<Vec<f64>> = rest.split_whitespace().map(|v| v.parse().ok()).collect();
    Some((key.trim(), vals?))
}

pub fn parse_calib_str(text: &str, path: &Path) -> Result<CalibMatrices> {
    let (mut p2, mut r0, mut tr) = (None, None, None);
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let (key, vals) = parse_values(line).ok_or_else(|| err("expected `key: numbers`".into()))?;
        let want = match key {
            "P2" | "Tr_velo_to_cam" => 12,
            "R0_rect" => 9,
            _ => continue,
        };
        if vals.len() != want {
            return Err(err(format!("{key} needs {want} values, found {}", vals.len())));
        }
        match key {
            "P2" => p2 = Some(Matrix3x4::from_row_slice(&vals)),
            "R0_rect" => r0 = Some(Matrix3::from_row_slice(&vals)),
            _ => tr = Some(Matrix3x4::from_row_slice(&vals)),
        }
    }
    let missing = |k: &str| Error::format(path.display().to_string(), format!("missing {k}"));
    let calib = CalibMatrices {
        p2: p2.ok_or_else(|| missing("P2"))?,
        r0_rect: r0.ok_or_else(|| missing("R0_rect"))?,
        tr_velo_to_cam: tr.ok_or_else(|| missing("Tr_velo_to_cam"))?,
    };
    calib.validate()?;
    Ok(calib)
}

pub fn parse_calib(path: &Path) -> Result<CalibMatrices> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_calib_str(&text, path)
}

pub fn calib_to_string(c: &CalibMatrices) -> String {
    let row = |vals: Vec<f64>| vals.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
    let rows34 = |m: &Matrix3x4<f64>| row(m.transpose().iter().copied().collect());
    format!(
        "P2: {}\nR0_rect: {}\nTr_velo_to_cam: {}\n",
        rows34(&c.p2),
        row(c.r0_rect.transpose().iter().copied().collect()),
        rows34(&c.tr_velo_to_cam)
    )
}

/// Label box (camera frame, bottom center) to a centered lidar box.
pub fn camera_to_lidar_box(rec: &LabelRecord, calib: &CalibMatrices) -> Result<Box3D> {
    let inv = calib.rect_to_velo()?;
    let [x, y, z] = rec.location;
    let bottom = (inv * Vector4::new(x, y, z, 1.0)).xyz();
    Ok(Box3D::new(
        bottom.x,
        bottom.y,
        bottom.z + 0.5 * rec.h,
        rec.w,
        rec.l,
        rec.h,
        -rec.rotation_y - FRAC_PI_2,
    ))
}

/// Inverse of [`camera_to_lidar_box`]: `(location, rotation_y)`.
pub fn lidar_to_camera_box(b: &Box3D, calib: &CalibMatrices) -> ([f64; 3], f64) {
    let bottom = calib.lidar_to_rect(Vector3::new(b.x, b.y, b.z - 0.5 * b.h));
    ([bottom.x, bottom.y, bottom.z], wrap_angle(-b.theta - FRAC_PI_2))
}

/// Result-file record for a lidar-frame detection; 2D fields are placeholders.
pub fn detection_record(class: &str, b: &Box3D, score: f64, calib: &CalibMatrices) -> LabelRecord {
    let (location, rotation_y) = lidar_to_camera_box(b, calib);
    LabelRecord {
        class: class.to_string(),
        truncation: -1.0,
        occlusion: -1,
        alpha: wrap_angle(rotation_y - location[0].atan2(location[2])),
        bbox: [-1.0; 4],
        h: b.h,
        w: b.w,
        l: b.l,
        location,
        rotation_y,
        score: Some(score),
    }
}

/// Keeps points in front of the camera whose projection lands inside the
/// `image_w x image_h` image.
pub fn fov_filter(points: &[Point], calib: &CalibMatrices, image_w: f64, image_h: f64) -> Vec<Point> {
    let m = calib.velo_to_rect();
    points
        .iter()
        .filter(|p| {
            let c = (m * Vector4::new(p.x as f64, p.y as f64, p.z as f64, 1.0)).xyz();
            if c.z <= 0.0 {
                return false;
            }
            let (u, v, _) = calib.project_rect(c);
            (0.0..image_w).contains(&u) && (0.0..image_h).contains(&v)
        })
        .copied()
        .collect()
}

/// Standard KITTI directory layout under one root.
#[derive(Debug, Clone)]
pub struct KittiLayout {
    pub root: PathBuf,
}

impl KittiLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn velodyne(&self, id: &str) -> PathBuf {
        self.root.join("velodyne").join(format!("{id}.bin"))
    }

    pub fn label(&self, id: &str) -> PathBuf {
        self.root.join("label_2").join(format!("{id}.txt"))
    }

    pub fn calib(&self, id: &str) -> PathBuf {
        self.root.join("calib").join(format!("{id}.txt"))
    }

    /// Frame ids with a velodyne scan, sorted.
    pub fn frame_ids(&self) -> Result<Vec<String>> {
        list_ids(&self.root.join("velodyne"), "bin")
    }

    /// Calibration of a frame, or the nominal permutation when absent.
    pub fn calib_or_default(&self, id: &str) -> Result<CalibMatrices> {
        let path = self.calib(id);
        if path.exists() {
            parse_calib(&path)
        } else {
            log::warn!("no calibration for frame {id}; using the nominal axis permutation");
            Ok(CalibMatrices::permutation())
        }
    }
}

/// File stems in `dir` with extension `ext`, sorted.
pub fn list_ids(dir: &Path, ext: &str) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Draws, Rng};

    fn car_record() -> LabelRecord {
        LabelRecord {
            class: "Car".into(),
            truncation: 0.0,
            occlusion: 0,
            alpha: -1.57,
            bbox: [614.24, 181.78, 727.31, 284.77],
            h: 1.57,
            w: 1.73,
            l: 4.15,
            location: [1.0, 1.75, 13.22],
            rotation_y: 1.62,
            score: None,
        }
    }

    #[test]
    fn velodyne_sizes() {
        assert_eq!(decode_velodyne(&[0u8; 32]).unwrap().len(), 2);
        assert!(decode_velodyne(&[]).unwrap().is_empty());
        assert!(decode_velodyne(&[0u8; 17]).is_err());
    }

    #[test]
    fn velodyne_round_trip_bit_exact() {
        let pts = vec![Point::new(1.5, -2.25, f32::MIN_POSITIVE, 0.3), Point::new(-0.0, 7.0, 1e-30, 1.0)];
        let back = decode_velodyne(&encode_velodyne(&pts)).unwrap();
        for (a, b) in pts.iter().zip(&back) {
            assert_eq!([a.x, a.y, a.z, a.r].map(f32::to_bits), [b.x, b.y, b.z, b.r].map(f32::to_bits));
        }
    }

    #[test]
    fn parse_15_field_label() {
        let line = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59";
        let r = parse_labels_str(line, Path::new("x.txt")).unwrap();
        assert_eq!(r[0].class, "Car");
        assert_eq!(r[0].location, [-0.65, 1.71, 46.70]);
        assert_eq!(r[0].score, None);
    }

    #[test]
    fn short_line_reports_line_number() {
        let text = "Car 0 0 0 0 0 1 1 1 1 1 0 0 10 0\nCar 0 0 0 0 0 1 1 1 1 1 0 0 10\n";
        match parse_labels_str(text, Path::new("l.txt")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn label_round_trip_field_exact() {
        let mut r = car_record();
        r.score = Some(0.123456789);
        let back = parse_labels_str(&r.to_line(), Path::new("r")).unwrap();
        assert_eq!(back, vec![r]);
    }

    #[test]
    fn permutation_calib_is_axis_swap() {
        let c = CalibMatrices::permutation();
        let b = Box3D::new(10.0, 2.0, -1.0, 1.6, 3.9, 1.5, 0.0);
        let (loc, ry) = lidar_to_camera_box(&b, &c);
        assert_eq!(loc, [-2.0, 1.75, 10.0]);
        assert!((ry + FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn half_height_shift() {
        let c = CalibMatrices::permutation();
        let mut r = car_record();
        r.h = 1.5;
        let b = camera_to_lidar_box(&r, &c).unwrap();
        assert!((b.z - (-r.location[1] + 0.75)).abs() < 1e-12);
    }

    fn random_calib(rng: &mut Rng) -> CalibMatrices {
        let rot = nalgebra::Rotation3::from_euler_angles(rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05));
        let mut c = CalibMatrices::permutation();
        c.r0_rect = *rot.matrix();
        for j in 0..3 {
            c.tr_velo_to_cam[(j, 3)] = rng.uniform(-0.5, 0.5);
        }
        c
    }

    #[test]
    fn camera_lidar_round_trip() {
        let mut rng = Rng::new(4);
        for _ in 0..1000 {
            let c = random_calib(&mut rng);
            let b = Box3D::new(
                rng.uniform(0.0, 70.0),
                rng.uniform(-40.0, 40.0),
                rng.uniform(-3.0, 1.0),
                rng.uniform(0.5, 3.0),
                rng.uniform(0.5, 5.0),
                rng.uniform(0.5, 2.5),
                rng.uniform(-3.0, 3.0),
            );
            let (loc, ry) = lidar_to_camera_box(&b, &c);
            let mut rec = car_record();
            (rec.location, rec.rotation_y, rec.h, rec.w, rec.l) = (loc, ry, b.h, b.w, b.l);
            let back = camera_to_lidar_box(&rec, &c).unwrap();
            let err = [(back.x - b.x), (back.y - b.y), (back.z - b.z)].iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "{err}");
            assert!(wrap_angle(back.theta - b.theta).abs() < 1e-9);
        }
    }

    #[test]
    fn calib_text_round_trip() {
        let c = random_calib(&mut Rng::new(2));
        let back = parse_calib_str(&calib_to_string(&c), Path::new("c")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn calib_rejects_non_orthonormal() {
        let mut c = CalibMatrices::permutation();
        c.r0_rect[(0, 0)] = 1.5;
        assert!(parse_calib_str(&calib_to_string(&c), Path::new("c")).is_err());
    }

    #[test]
    fn fov_filter_basic() {
        let c = CalibMatrices::permutation();
        let pts = vec![
            Point::new(-5.0, 0.0, 0.0, 0.0), // behind the camera
            Point::new(20.0, 0.0, 0.0, 0.0), // near the image center
            Point::new(5.0, 30.0, 0.0, 0.0), // far off to the left
        ];
        let kept = fov_filter(&pts, &c, 1242.0, 375.0);
        assert_eq!(kept, vec![pts[1]]);
        assert_eq!(fov_filter(&kept, &c, 1242.0, 375.0), kept);
    }

    #[test]
    fn detection_record_is_result_line() {
        let c = CalibMatrices::permutation();
        let r = detection_record("Car", &Box3D::new(10.0, 0.0, -1.0, 1.6, 3.9, 1.5, 0.0), 0.9, &c);
        let line = r.to_line();
        let fields: Vec<&str> = line.split(' ').collect();
        assert_eq!(fields.len(), 16);
        assert_eq!(&fields[1..3], &["-1", "-1"]);
        assert_eq!(&fields[4..8], &["-1"; 4]);
        assert_eq!(fields[15], "0.9");
    }
}
