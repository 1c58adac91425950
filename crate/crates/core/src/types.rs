//! Shared geometric and tensor types.
//!
//! Grid convention used everywhere: rows index y, columns index x, and cell
//! `(0, 0)` covers `[x_min, x_min + res) x [y_min, y_min + res)`. Cells are
//! half-open, so a point with `x == x_max` or `y == y_max` lies outside the
//! grid.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw lidar return.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    /// Reflectance in `[0, 1]`.
    pub r: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, r: f32) -> Self {
        Self { x, y, z, r }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.r.is_finite()
    }
}

/// Number of values in a decorated point.
pub const DECORATED_DIM: usize = 9;

/// A point augmented with its offsets to the pillar point mean (`xc, yc, zc`)
/// and to the pillar center (`xp, yp`), laid out as
/// `[x, y, z, r, xc, yc, zc, xp, yp]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DecoratedPoint(pub [f32; DECORATED_DIM]);

impl DecoratedPoint {
    pub fn values(&self) -> &[f32; DECORATED_DIM] {
        &self.0
    }
    pub fn xc(&self) -> f32 {
        self.0[4]
    }
    pub fn yc(&self) -> f32 {
        self.0[5]
    }
    pub fn zc(&self) -> f32 {
        self.0[6]
    }
    pub fn xp(&self) -> f32 {
        self.0[7]
    }
    pub fn yp(&self) -> f32 {
        self.0[8]
    }
}

/// A grid cell, `(row, col)` with rows along y and columns along x.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cell {
    pub row: u32,
    pub col: u32,
}

impl Cell {
    pub fn new(row: u32, col: u32) -> Self {
        Self { row, col }
    }
}

/// Point-cloud range, pillar resolution and dense-tensor capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    /// Cell edge length in meters.
    pub resolution: f64,
    /// Maximum number of non-empty pillars kept per frame (P).
    pub max_pillars: usize,
    /// Maximum number of points kept per pillar (N).
    pub max_points_per_pillar: usize,
}

impl GridSpec {
    /// Car range at 0.16 m, P = 12000, N = 100.
    pub fn car() -> Self {
        Self {
            x_min: 0.0,
            x_max: 70.4,
            y_min: -40.0,
            y_max: 40.0,
            z_min: -3.0,
            z_max: 1.0,
            resolution: 0.16,
            max_pillars: 12000,
            max_points_per_pillar: 100,
        }
    }

    /// Pedestrian / cyclist range at 0.16 m, P = 12000, N = 100.
    pub fn ped_cyc() -> Self {
        Self {
            x_min: 0.0,
            x_max: 48.0,
            y_min: -20.0,
            y_max: 20.0,
            z_min: -2.5,
            z_max: 0.5,
            resolution: 0.16,
            max_pillars: 12000,
            max_points_per_pillar: 100,
        }
    }

    /// Same range with another resolution and pillar budget.
    pub fn with_resolution(&self, resolution: f64, max_pillars: usize) -> Self {
        Self {
            resolution,
            max_pillars,
            ..self.clone()
        }
    }

    /// Like [`GridSpec::with_resolution`], but moves `x_max` and `y_max` to
    /// the nearest whole number of cells so any positive resolution is valid.
    pub fn snapped(&self, resolution: f64, max_pillars: usize) -> Self {
        let snap = |lo: f64, hi: f64| lo + ((hi - lo) / resolution).round().max(1.0) * resolution;
        Self {
            x_max: snap(self.x_min, self.x_max),
            y_max: snap(self.y_min, self.y_max),
            ..self.with_resolution(resolution, max_pillars)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.x_min,
            self.x_max,
            self.y_min,
            self.y_max,
            self.z_min,
            self.z_max,
            self.resolution,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("grid bounds must be finite".into()));
        }
        if self.x_max <= self.x_min || self.y_max <= self.y_min || self.z_max < self.z_min {
            return Err(Error::Config(format!(
                "grid ranges must be increasing: x [{}, {}], y [{}, {}], z [{}, {}]",
                self.x_min, self.x_max, self.y_min, self.y_max, self.z_min, self.z_max
            )));
        }
        if self.resolution <= 0.0 {
            return Err(Error::Config(format!(
                "resolution must be positive, got {}",
                self.resolution
            )));
        }
        if self.max_pillars == 0 || self.max_points_per_pillar == 0 {
            return Err(Error::Config(
                "max_pillars and max_points_per_pillar must be at least 1".into(),
            ));
        }
        cells_along("x", self.x_max - self.x_min, self.resolution)?;
        cells_along("y", self.y_max - self.y_min, self.resolution)?;
        Ok(())
    }

    /// Cell center in meters.
    pub fn cell_center(&self, cell: Cell) -> (f64, f64) {
        (
            self.x_min + (cell.col as f64 + 0.5) * self.resolution,
            self.y_min + (cell.row as f64 + 0.5) * self.resolution,
        )
    }

    /// Whether the point lies in `[x_min, x_max) x [y_min, y_max) x [z_min, z_max]`.
    pub fn contains(&self, p: &Point) -> bool {
        let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
        x >= self.x_min
            && x < self.x_max
            && y >= self.y_min
            && y < self.y_max
            && z >= self.z_min
            && z <= self.z_max
    }
}

fn cells_along(axis: &str, extent: f64, resolution: f64) -> Result<usize> {
    let ratio = extent / resolution;
    let cells = ratio.round();
    if cells < 1.0 || (ratio - cells).abs() > 1e-6 * cells.max(1.0) {
        return Err(Error::Config(format!(
            "{axis} extent {extent} is not an integer multiple of resolution {resolution}"
        )));
    }
    Ok(cells as usize)
}

/// Grid dimensions `(H, W)`: rows along y, columns along x.
pub fn grid_dims(spec: &GridSpec) -> Result<(usize, usize)> {
    spec.validate()?;
    let w = cells_along("x", spec.x_max - spec.x_min, spec.resolution)?;
    let h = cells_along("y", spec.y_max - spec.y_min, spec.resolution)?;
    Ok((h, w))
}

/// Maps an angle onto `(-pi, pi]`.
pub fn normalize_angle(theta: f64) -> Result<f64> {
    if !theta.is_finite() {
        return Err(Error::Domain(format!("angle must be finite, got {theta}")));
    }
    Ok(wrap_angle(theta))
}

/// [`normalize_angle`] for inputs already known to be finite.
pub(crate) fn wrap_angle(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    let mut r = theta.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    if r <= -PI {
        r += TAU;
    }
    r
}

/// Detected object classes, indexed by class id.
pub const CLASS_NAMES: [&str; 3] = ["Car", "Pedestrian", "Cyclist"];

pub fn class_id(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|n| *n == name)
}

/// Oriented 3D box. `(x, y, z)` is the box center, `l` runs along the heading
/// `theta` (yaw about +z, measured from +x), `w` across it, `h` along z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub theta: f64,
}

impl Box3D {
    pub fn new(x: f64, y: f64, z: f64, w: f64, l: f64, h: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            z,
            w,
            l,
            h,
            theta: wrap_angle(theta),
        }
    }

    pub fn is_valid(&self) -> bool {
        let vals = [self.x, self.y, self.z, self.w, self.l, self.h, self.theta];
        vals.iter().all(|v| v.is_finite()) && self.w > 0.0 && self.l > 0.0 && self.h > 0.0
    }

    pub fn volume(&self) -> f64 {
        self.w * self.l * self.h
    }

    pub fn bev_area(&self) -> f64 {
        self.w * self.l
    }

    pub fn z_range(&self) -> (f64, f64) {
        (self.z - 0.5 * self.h, self.z + 0.5 * self.h)
    }

    /// BEV corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.theta.sin_cos();
        let hl = 0.5 * self.l;
        let hw = 0.5 * self.w;
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(lx, ly)| {
            // local (lx, ly) ordered so that the polygon winds CCW
            (self.x + c * lx - s * ly, self.y + s * lx + c * ly)
        })
    }

    /// Axis-aligned BEV extent `(x0, y0, x1, y1)` with the heading folded to
    /// the nearest multiple of 90 degrees: `w` and `l` swap when
    /// `|sin theta| > |cos theta|`.
    pub fn bev_aligned_extent(&self) -> (f64, f64, f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let (ex, ey) = if s.abs() > c.abs() {
            (self.w, self.l)
        } else {
            (self.l, self.w)
        };
        (
            self.x - 0.5 * ex,
            self.y - 0.5 * ey,
            self.x + 0.5 * ex,
            self.y + 0.5 * ey,
        )
    }

    /// World point to box-local frame (box center at origin, heading along +x).
    pub fn to_local(&self, x: f64, y: f64, z: f64) -> (f64, f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let dx = x - self.x;
        let dy = y - self.y;
        (c * dx + s * dy, -s * dx + c * dy, z - self.z)
    }

    /// Box-local point back to world frame.
    pub fn to_world(&self, lx: f64, ly: f64, lz: f64) -> (f64, f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (self.x + c * lx - s * ly, self.y + s * lx + c * ly, self.z + lz)
    }

    /// Exact membership in the rotated box, boundary included.
    pub fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        let (lx, ly, lz) = self.to_local(x, y, z);
        lx.abs() <= 0.5 * self.l && ly.abs() <= 0.5 * self.w && lz.abs() <= 0.5 * self.h
    }

    pub fn contains_point(&self, p: &Point) -> bool {
        self.contains(p.x as f64, p.y as f64, p.z as f64)
    }
}

/// Dense `(C, H, W)` feature map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape {
                name: "tensor3".into(),
                expected: vec![channels, height, width],
                found: vec![data.len()],
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Element strides `(channel, row, col)`.
    pub fn strides(&self) -> (usize, usize, usize) {
        (self.height * self.width, self.width, 1)
    }

    #[inline]
    pub fn index(&self, c: usize, row: usize, col: usize) -> usize {
        (c * self.height + row) * self.width + col
    }

    #[inline]
    pub fn get(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data[self.index(c, row, col)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, row: usize, col: usize, v: f32) {
        let i = self.index(c, row, col);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Inner product in f64.
    pub fn dot(&self, other: &Tensor3) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum()
    }

    /// Channel-wise concatenation of maps with equal spatial size.
    pub fn concat_channels(parts: &[Tensor3]) -> Result<Tensor3> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Internal("concatenating zero tensors".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for part in parts {
            if part.height != h || part.width != w {
                return Err(Error::Shape {
                    name: "concat".into(),
                    expected: vec![part.channels, h, w],
                    found: vec![part.channels, part.height, part.width],
                });
            }
            channels += part.channels;
            data.extend_from_slice(&part.data);
        }
        Tensor3::from_vec(channels, h, w, data)
    }

    /// Top-left crop to `(height, width)`.
    pub fn crop(&self, height: usize, width: usize) -> Tensor3 {
        assert!(height <= self.height && width <= self.width);
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = Tensor3::zeros(self.channels, height, width);
        for c in 0..self.channels {
            for row in 0..height {
                let src = self.index(c, row, 0);
                let dst = out.index(c, row, 0);
                out.data[dst..dst + width].copy_from_slice(&self.data[src..src + width]);
            }
        }
        out
    }
}
