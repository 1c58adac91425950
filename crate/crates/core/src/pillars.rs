//! Point cloud to stacked pillars and back to a pseudo-image.

use crate::container::{NdTensor, TensorMap};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::types::{grid_dims, Cell, DecoratedPoint, GridSpec, Point, Tensor3, DECORATED_DIM};

/// One non-empty pillar: its cell and the indices of its member points.
#[derive(Debug, Clone, PartialEq)]
pub struct Pillar {
    pub cell: Cell,
    pub members: Vec<usize>,
}

/// Non-empty pillars in `(row, col)` order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PillarAssignment {
    pub pillars: Vec<Pillar>,
    pub height: usize,
    pub width: usize,
    /// Number of input points that fell inside the range.
    pub in_range: usize,
}

impl PillarAssignment {
    pub fn len(&self) -> usize {
        self.pillars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pillars.is_empty()
    }

    /// `1 - B / (H * W)`.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.pillars.len() as f64 / (self.height * self.width) as f64
    }
}

/// Cell of a point, or `None` if the point is out of range.
pub fn cell_of(p: &Point, spec: &GridSpec, height: usize, width: usize) -> Option<Cell> {
    if !p.is_finite() || !spec.contains(p) {
        return None;
    }
    let col = ((p.x as f64 - spec.x_min) / spec.resolution).floor() as usize;
    let row = ((p.y as f64 - spec.y_min) / spec.resolution).floor() as usize;
    // a point just below the max bound can round up onto the last edge
    Some(Cell::new(
        row.min(height - 1) as u32,
        col.min(width - 1) as u32,
    ))
}

/// Groups in-range points by grid cell. Points outside
/// `[x_min, x_max) x [y_min, y_max) x [z_min, z_max]` are dropped.
pub fn assign_pillars(points: &[Point], spec: &GridSpec) -> Result<PillarAssignment> {
    let (height, width) = grid_dims(spec)?;
    let mut keyed: Vec<(Cell, usize)> = points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| cell_of(p, spec, height, width).map(|c| (c, i)))
        .collect();
    let in_range = keyed.len();
    keyed.sort_unstable();

    let mut pillars: Vec<Pillar> = Vec::new();
    for (cell, idx) in keyed {
        match pillars.last_mut() {
            Some(last) if last.cell == cell => last.members.push(idx),
            _ => pillars.push(Pillar {
                cell,
                members: vec![idx],
            }),
        }
    }
    Ok(PillarAssignment {
        pillars,
        height,
        width,
        in_range,
    })
}

/// A pillar's decorated points, in member order.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoratedPillar {
    pub cell: Cell,
    pub points: Vec<DecoratedPoint>,
}

/// Adds the offsets to the pillar point mean and to the pillar center.
///
/// The mean is taken over all of the pillar's points, before any capacity
/// sampling in [`densify`].
pub fn decorate(
    assignment: &PillarAssignment,
    points: &[Point],
    spec: &GridSpec,
) -> Vec<DecoratedPillar> {
    assignment
        .pillars
        .iter()
        .map(|pillar| {
            let n = pillar.members.len() as f64;
            let (mut sx, mut sy, mut sz) = (0.0f64, 0.0f64, 0.0f64);
            for &i in &pillar.members {
                let p = &points[i];
                sx += p.x as f64;
                sy += p.y as f64;
                sz += p.z as f64;
            }
            let (mx, my, mz) = (sx / n, sy / n, sz / n);
            let (cx, cy) = spec.cell_center(pillar.cell);
            let decorated = pillar
                .members
                .iter()
                .map(|&i| {
                    let p = &points[i];
                    let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
                    DecoratedPoint([
                        p.x,
                        p.y,
                        p.z,
                        p.r,
                        (x - mx) as f32,
                        (y - my) as f32,
                        (z - mz) as f32,
                        (x - cx) as f32,
                        (y - cy) as f32,
                    ])
                })
                .collect();
            DecoratedPillar {
                cell: pillar.cell,
                points: decorated,
            }
        })
        .collect()
}

/// Dense `(D, P, N)` pillar tensor with its slot bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarTensor {
    pub max_pillars: usize,
    pub max_points: usize,
    /// `(D, P, N)` row-major.
    pub data: Vec<f32>,
    /// Cell of each slot; `None` marks an unused slot.
    pub indices: Vec<Option<Cell>>,
    pub valid_counts: Vec<u32>,
    /// `(P, N)` row-major; `true` marks a real point.
    pub mask: Vec<bool>,
}

impl PillarTensor {
    pub fn empty(max_pillars: usize, max_points: usize) -> Self {
        Self {
            max_pillars,
            max_points,
            data: vec![0.0; DECORATED_DIM * max_pillars * max_points],
            indices: vec![None; max_pillars],
            valid_counts: vec![0; max_pillars],
            mask: vec![false; max_pillars * max_points],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (DECORATED_DIM, self.max_pillars, self.max_points)
    }

    #[inline]
    pub fn at(&self, d: usize, p: usize, n: usize) -> f32 {
        self.data[(d * self.max_pillars + p) * self.max_points + n]
    }

    #[inline]
    fn set(&mut self, d: usize, p: usize, n: usize, v: f32) {
        self.data[(d * self.max_pillars + p) * self.max_points + n] = v;
    }

    /// Number of slots holding a pillar.
    pub fn used_slots(&self) -> usize {
        self.indices.iter().filter(|c| c.is_some()).count()
    }

    /// Decorated point stored in slot `(p, n)`.
    pub fn point(&self, p: usize, n: usize) -> [f32; DECORATED_DIM] {
        std::array::from_fn(|d| self.at(d, p, n))
    }

    /// Moves the point in slot `(p, from)` to `(p, to)` and vice versa.
    pub fn swap_points(&mut self, p: usize, a: usize, b: usize) {
        for d in 0..DECORATED_DIM {
            let va = self.at(d, p, a);
            let vb = self.at(d, p, b);
            self.set(d, p, a, vb);
            self.set(d, p, b, va);
        }
        self.mask.swap(p * self.max_points + a, p * self.max_points + b);
    }

    /// Checks the zero-padding, count and index invariants.
    pub fn check_invariants(&self) -> Result<()> {
        let (p_max, n_max) = (self.max_pillars, self.max_points);
        let mut seen = std::collections::HashSet::new();
        for p in 0..p_max {
            let count = (0..n_max).filter(|&n| self.mask[p * n_max + n]).count();
            if count as u32 != self.valid_counts[p] {
                return Err(Error::Internal(format!(
                    "slot {p}: valid_count {} but {count} masked points",
                    self.valid_counts[p]
                )));
            }
            if let Some(cell) = self.indices[p] {
                if !seen.insert(cell) {
                    return Err(Error::Internal(format!("duplicate cell {cell:?}")));
                }
            } else if count > 0 {
                return Err(Error::Internal(format!("unused slot {p} holds points")));
            }
            for n in 0..n_max {
                if !self.mask[p * n_max + n] && (0..DECORATED_DIM).any(|d| self.at(d, p, n) != 0.0)
                {
                    return Err(Error::Internal(format!("padding at ({p}, {n}) is non-zero")));
                }
            }
        }
        Ok(())
    }

    /// Debug dump as named tensors. Unused slots carry index `-1`.
    pub fn to_tensors(&self) -> TensorMap {
        let mut map = TensorMap::new();
        map.insert(
            "pillars.data".into(),
            NdTensor {
                shape: vec![DECORATED_DIM, self.max_pillars, self.max_points],
                data: self.data.clone(),
            },
        );
        let idx = self
            .indices
            .iter()
            .flat_map(|c| match c {
                Some(c) => [c.row as f32, c.col as f32],
                None => [-1.0, -1.0],
            })
            .collect();
        map.insert(
            "pillars.indices".into(),
            NdTensor {
                shape: vec![self.max_pillars, 2],
                data: idx,
            },
        );
        map.insert(
            "pillars.counts".into(),
            NdTensor {
                shape: vec![self.max_pillars],
                data: self.valid_counts.iter().map(|&c| c as f32).collect(),
            },
        );
        map
    }
}

/// Packs decorated pillars into the fixed-capacity tensor.
///
/// More than `P` pillars: `P` are chosen uniformly without replacement.
/// More than `N` points in a pillar: `N` are chosen by reservoir sampling.
/// Slots are ordered by descending point count, ties by `(row, col)`.
pub fn densify(pillars: &[DecoratedPillar], spec: &GridSpec, rng: &mut Rng) -> PillarTensor {
    let (p_max, n_max) = (spec.max_pillars, spec.max_points_per_pillar);
    let mut tensor = PillarTensor::empty(p_max, n_max);

    let mut chosen = rng.choose_indices(pillars.len(), p_max);
    chosen.sort_by(|&a, &b| {
        pillars[b]
            .points
            .len()
            .cmp(&pillars[a].points.len())
            .then(pillars[a].cell.cmp(&pillars[b].cell))
    });

    for (slot, &pi) in chosen.iter().enumerate() {
        let pillar = &pillars[pi];
        let kept = rng.reservoir(pillar.points.len(), n_max);
        tensor.indices[slot] = Some(pillar.cell);
        tensor.valid_counts[slot] = kept.len() as u32;
        for (n, &k) in kept.iter().enumerate() {
            for (d, &v) in pillar.points[k].0.iter().enumerate() {
                tensor.set(d, slot, n, v);
            }
            tensor.mask[slot * n_max + n] = true;
        }
    }
    tensor
}

/// Writes per-slot feature columns into a `(C, H, W)` canvas.
///
/// `features` is `(C, P)` row-major.
pub fn scatter(
    features: &[f32],
    channels: usize,
    indices: &[Option<Cell>],
    height: usize,
    width: usize,
) -> Result<Tensor3> {
    let slots = indices.len();
    if features.len() != channels * slots {
        return Err(Error::Shape {
            name: "scatter features".into(),
            expected: vec![channels, slots],
            found: vec![features.len()],
        });
    }
    let mut out = Tensor3::zeros(channels, height, width);
    let mut occupied = vec![false; height * width];
    for (p, cell) in indices.iter().enumerate() {
        let Some(cell) = cell else { continue };
        let (row, col) = (cell.row as usize, cell.col as usize);
        if row >= height || col >= width {
            return Err(Error::Internal(format!(
                "pillar index {cell:?} outside {height}x{width} canvas"
            )));
        }
        let flat = row * width + col;
        if std::mem::replace(&mut occupied[flat], true) {
            return Err(Error::Internal(format!("duplicate pillar index {cell:?}")));
        }
        for c in 0..channels {
            out.data[c * height * width + flat] = features[c * slots + p];
        }
    }
    Ok(out)
}

/// Inverse of [`scatter`] on used slots; unused slots read as zero.
pub fn gather(canvas: &Tensor3, indices: &[Option<Cell>]) -> Vec<f32> {
    let slots = indices.len();
    let mut out = vec![0.0; canvas.channels * slots];
    for (p, cell) in indices.iter().enumerate() {
        let Some(cell) = cell else { continue };
        for c in 0..canvas.channels {
            out[c * slots + p] = canvas.get(c, cell.row as usize, cell.col as usize);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Draws;

    fn small_spec() -> GridSpec {
        GridSpec {
            x_min: 0.0,
            x_max: 1.6,
            y_min: 0.0,
            y_max: 1.6,
            z_min: -3.0,
            z_max: 1.0,
            resolution: 0.16,
            max_pillars: 16,
            max_points_per_pillar: 100,
        }
    }

    #[test]
    fn min_corner_maps_to_origin_cell() {
        let a = assign_pillars(&[Point::new(0.0, -40.0, 0.0, 0.5)], &GridSpec::car()).unwrap();
        assert_eq!(a.pillars.len(), 1);
        assert_eq!(a.pillars[0].cell, Cell::new(0, 0));
    }

    #[test]
    fn out_of_range_dropped() {
        let a = assign_pillars(&[Point::new(80.0, 0.0, 0.0, 0.5)], &GridSpec::car()).unwrap();
        assert!(a.is_empty());
        // half-open upper bound
        let a = assign_pillars(&[Point::new(70.4, 0.0, 0.0, 0.5)], &GridSpec::car()).unwrap();
        assert!(a.is_empty());
        // z is closed at both ends
        let a = assign_pillars(&[Point::new(1.0, 0.0, 1.0, 0.5)], &GridSpec::car()).unwrap();
        assert_eq!(a.len(), 1);
    }

    #[test]
    fn empty_input() {
        let a = assign_pillars(&[], &GridSpec::car()).unwrap();
        assert!(a.is_empty());
        assert_eq!(a.sparsity(), 1.0);
    }

    #[test]
    fn single_point_at_center_decorates_to_zero_offsets() {
        let spec = small_spec();
        let pts = [Point::new(0.08, 0.08, -1.0, 0.3)];
        let a = assign_pillars(&pts, &spec).unwrap();
        let d = decorate(&a, &pts, &spec);
        let p = d[0].points[0];
        // only the f32 rounding of 0.08 is left over
        for v in [p.xc(), p.yc(), p.zc(), p.xp(), p.yp()] {
            assert!(v.abs() < 1e-7, "{v}");
        }
    }

    #[test]
    fn symmetric_pair_has_opposite_mean_offsets() {
        let spec = small_spec();
        let pts = [Point::new(0.02, 0.05, 0.0, 0.0), Point::new(0.12, 0.09, 0.4, 0.0)];
        let a = assign_pillars(&pts, &spec).unwrap();
        let d = decorate(&a, &pts, &spec);
        let (p0, p1) = (d[0].points[0], d[0].points[1]);
        assert!((p0.xc() + p1.xc()).abs() < 1e-7);
        assert!((p0.yc() + p1.yc()).abs() < 1e-7);
        assert!((p0.zc() + p1.zc()).abs() < 1e-7);
    }

    #[test]
    fn center_offset_hand_values() {
        let spec = small_spec();
        let pts = [Point::new(0.10, 0.05, 0.0, 0.0)];
        let a = assign_pillars(&pts, &spec).unwrap();
        let p = decorate(&a, &pts, &spec)[0].points[0];
        assert!((p.xp() - 0.02).abs() < 1e-7);
        assert!((p.yp() + 0.03).abs() < 1e-7);
    }

    #[test]
    fn densify_pads_short_pillar() {
        let spec = small_spec();
        let pts: Vec<Point> = (0..3).map(|i| Point::new(0.05, 0.05 + 0.01 * i as f32, 0.0, 1.0)).collect();
        let a = assign_pillars(&pts, &spec).unwrap();
        let t = densify(&decorate(&a, &pts, &spec), &spec, &mut Rng::new(0));
        assert_eq!(t.valid_counts[0], 3);
        assert_eq!(t.mask[..100].iter().filter(|m| **m).count(), 3);
        t.check_invariants().unwrap();
    }

    #[test]
    fn densify_empty() {
        let spec = small_spec();
        let t = densify(&[], &spec, &mut Rng::new(0));
        assert!(t.data.iter().all(|v| *v == 0.0));
        assert!(t.indices.iter().all(|c| c.is_none()));
    }

    #[test]
    fn subsampling_is_uniform_over_seeds() {
        let spec = small_spec();
        let pts: Vec<Point> = (0..150)
            .map(|i| Point::new(0.001 * i as f32, 0.05, 0.0, i as f32 / 150.0))
            .collect();
        let a = assign_pillars(&pts, &spec).unwrap();
        let dec = decorate(&a, &pts, &spec);
        let mut kept = vec![0u32; 150];
        let seeds = 1000;
        for seed in 0..seeds {
            let t = densify(&dec, &spec, &mut Rng::new(seed));
            assert_eq!(t.valid_counts[0], 100);
            for n in 0..100 {
                // reflectance encodes the original index
                let idx = (t.at(3, 0, n) * 150.0).round() as usize;
                kept[idx] += 1;
            }
        }
        // Binomial(1000, 2/3): sd ~ 14.9, allow 5 sd
        let expect = seeds as f64 * 100.0 / 150.0;
        let sd = (seeds as f64 * (2.0 / 3.0) * (1.0 / 3.0)).sqrt();
        for (i, &k) in kept.iter().enumerate() {
            assert!((k as f64 - expect).abs() < 5.0 * sd, "point {i} kept {k} times");
        }
    }

    #[test]
    fn pillar_cap_and_slot_order() {
        let mut spec = small_spec();
        spec.max_pillars = 3;
        // pillar k (k = 0..6) has k + 1 points
        let mut pts = Vec::new();
        for k in 0..6 {
            for j in 0..=k {
                pts.push(Point::new(0.16 * k as f32 + 0.01 + 0.001 * j as f32, 0.05, 0.0, 0.0));
            }
        }
        let a = assign_pillars(&pts, &spec).unwrap();
        let dec = decorate(&a, &pts, &spec);
        let t1 = densify(&dec, &spec, &mut Rng::new(9));
        let t2 = densify(&dec, &spec, &mut Rng::new(9));
        assert_eq!(t1, t2);
        assert_eq!(t1.used_slots(), 3);
        assert!(t1.valid_counts.windows(2).all(|w| w[0] >= w[1]));
        t1.check_invariants().unwrap();
        let differs = (0..50).any(|s| densify(&dec, &spec, &mut Rng::new(s)).indices != t1.indices);
        assert!(differs);
    }

    #[test]
    fn seeds_do_not_matter_when_limits_do_not_bind() {
        let spec = small_spec();
        let pts: Vec<Point> = (0..40)
            .map(|i| Point::new(0.04 * i as f32, 0.03 * i as f32, 0.0, 0.0))
            .collect();
        let a = assign_pillars(&pts, &spec).unwrap();
        let dec = decorate(&a, &pts, &spec);
        let t1 = densify(&dec, &spec, &mut Rng::new(1));
        let t2 = densify(&dec, &spec, &mut Rng::new(2));
        assert_eq!(t1, t2);
        let total: u32 = t1.valid_counts.iter().sum();
        assert_eq!(total as usize, a.in_range);
    }

    #[test]
    fn scatter_single_pillar() {
        let idx = [Some(Cell::new(2, 3)), None];
        let out = scatter(&[5.0, 0.0], 1, &idx, 4, 5).unwrap();
        for r in 0..4 {
            for c in 0..5 {
                let expect = if (r, c) == (2, 3) { 5.0 } else { 0.0 };
                assert_eq!(out.get(0, r, c), expect);
            }
        }
    }

    #[test]
    fn scatter_rejects_duplicates() {
        let idx = [Some(Cell::new(1, 1)), Some(Cell::new(1, 1))];
        assert!(matches!(
            scatter(&[1.0, 2.0], 1, &idx, 3, 3),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn scatter_car_shape() {
        let (h, w) = (500, 440);
        let idx: Vec<Option<Cell>> = (0..12000)
            .map(|i| Some(Cell::new((i / 440) as u32, (i % 440) as u32)))
            .collect();
        let feats = vec![1.0; 64 * 12000];
        let out = scatter(&feats, 64, &idx, h, w).unwrap();
        assert_eq!(out.shape(), (64, 500, 440));
    }

    proptest::proptest! {
        #[test]
        fn gather_inverts_scatter(
            cells in proptest::collection::btree_set((0u32..6, 0u32..7), 0..20),
            seed in 0u64..1000,
        ) {
            let mut idx: Vec<Option<Cell>> = cells.into_iter().map(|(r, c)| Some(Cell::new(r, c))).collect();
            idx.push(None);
            let mut rng = Rng::new(seed);
            let channels = 3;
            let feats: Vec<f32> = (0..channels * idx.len())
                .map(|i| if idx[i % idx.len()].is_some() { rng.next_f64() as f32 + 0.5 } else { 0.0 })
                .collect();
            let canvas = scatter(&feats, channels, &idx, 6, 7).unwrap();
            proptest::prop_assert_eq!(gather(&canvas, &idx), feats);
            let nonzero_cols = (0..42).filter(|&f| (0..channels).any(|c| canvas.data[c * 42 + f] != 0.0)).count();
            proptest::prop_assert_eq!(nonzero_cols, idx.len() - 1);
        }

        #[test]
        fn permutation_preserves_assignment(seed in 0u64..500) {
            let spec = small_spec();
            let mut rng = Rng::new(seed);
            let pts: Vec<Point> = (0..60)
                .map(|_| Point::new(
                    (rng.next_f64() * 2.0 - 0.2) as f32,
                    (rng.next_f64() * 2.0 - 0.2) as f32,
                    0.0,
                    0.0,
                ))
                .collect();
            let mut perm: Vec<usize> = (0..pts.len()).collect();
            for i in (1..perm.len()).rev() {
                let j = rng.below(i + 1);
                perm.swap(i, j);
            }
            let shuffled: Vec<Point> = perm.iter().map(|&i| pts[i]).collect();
            let a = assign_pillars(&pts, &spec).unwrap();
            let b = assign_pillars(&shuffled, &spec).unwrap();
            let as_set = |asg: &PillarAssignment, src: &[usize]| {
                let mut v: Vec<(Cell, usize)> = asg.pillars.iter()
                    .flat_map(|p| p.members.iter().map(move |&m| (p.cell, src[m])))
                    .collect();
                v.sort();
                v
            };
            let identity: Vec<usize> = (0..pts.len()).collect();
            proptest::prop_assert_eq!(as_set(&a, &identity), as_set(&b, &perm));
            for p in &a.pillars {
                for &m in &p.members {
                    proptest::prop_assert_eq!(cell_of(&pts[m], &spec, a.height, a.width), Some(p.cell));
                }
            }
        }
    }
}
