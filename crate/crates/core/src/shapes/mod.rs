//! Part-based shape representation.
//!
//! A shape of a class with `k` canonical parts carries one occupancy grid
//! per part, one axis-aligned box per part and a presence mask. Boxes live
//! in normalized shape coordinates (a unit cube enclosing the shape); each
//! grid spans its own box. Absent parts are all zeros.

mod dataset;
mod obj;

pub use dataset::{load_dataset, save_dataset, DatasetManifest, FORMAT_VERSION, SHAPE_MAGIC};
pub use obj::write_obj;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ShapeError {
    #[error("invalid part count {0}: at least two parts are required")]
    InvalidArity(usize),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("format error at byte {offset} of {file}: {detail}")]
    Format {
        file: String,
        offset: u64,
        detail: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
}

/// Class names with a fixed id; other ids are spelled `class-<id>`.
pub const KNOWN_CLASSES: [&str; 6] = ["joint", "airplane", "chair", "guitar", "lamp", "motor"];

pub fn class_name(id: u32) -> String {
    KNOWN_CLASSES
        .get(id as usize)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class-{id}"))
}

pub fn class_id(name: &str) -> Option<u32> {
    if let Some(i) = KNOWN_CLASSES.iter().position(|&c| c == name) {
        return Some(i as u32);
    }
    name.strip_prefix("class-").and_then(|s| s.parse().ok())
}

/// Cubic occupancy grid, x fastest, then y, then z.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    resolution: usize,
    occupancy: Vec<f32>,
}

impl VoxelGrid {
    pub fn empty(resolution: usize) -> Self {
        Self::filled(resolution, 0.0)
    }

    pub fn filled(resolution: usize, value: f32) -> Self {
        Self {
            resolution,
            occupancy: vec![value; resolution.pow(3)],
        }
    }

    pub fn from_values(resolution: usize, occupancy: Vec<f32>) -> Result<Self, ShapeError> {
        if resolution == 0 || occupancy.len() != resolution.pow(3) {
            return Err(ShapeError::Precondition(format!(
                "{} values do not fill a {resolution}^3 grid",
                occupancy.len()
            )));
        }
        if occupancy.iter().any(|v| !v.is_finite()) {
            return Err(ShapeError::Precondition("non-finite occupancy".into()));
        }
        Ok(Self { resolution, occupancy })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn values(&self) -> &[f32] {
        &self.occupancy
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.occupancy
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.resolution * (y + self.resolution * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.occupancy[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.index(x, y, z);
        self.occupancy[i] = v;
    }

    pub fn is_binary(&self) -> bool {
        self.occupancy.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&v| v >= 0.5).count()
    }

    pub fn is_empty(&self) -> bool {
        self.occupancy.iter().all(|&v| v == 0.0)
    }

    /// Threshold to {0, 1}; values `>= threshold` become occupied.
    pub fn binarized(&self, threshold: f32) -> Self {
        Self {
            resolution: self.resolution,
            occupancy: self
                .occupancy
                .iter()
                .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    /// Mirror along one axis (0 = x, 1 = y, 2 = z).
    pub fn flipped(&self, axis: usize) -> Self {
        let r = self.resolution;
        let mut out = Self::empty(r);
        for z in 0..r {
            for y in 0..r {
                for x in 0..r {
                    let mut src = [x, y, z];
                    src[axis] = r - 1 - src[axis];
                    out.set(x, y, z, self.get(src[0], src[1], src[2]));
                }
            }
        }
        out
    }

    /// Intersection over union of the occupied sets at `threshold`.
    pub fn iou(&self, other: &Self, threshold: f32) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.occupancy.iter().zip(&other.occupancy) {
            let (a, b) = (a >= threshold, b >= threshold);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Axis-aligned box: center and full extents (length, width, height).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Box6 {
    pub center: [f32; 3],
    pub extents: [f32; 3],
}

impl Box6 {
    pub const ZERO: Self = Self {
        center: [0.0; 3],
        extents: [0.0; 3],
    };

    pub fn new(center: [f32; 3], extents: [f32; 3]) -> Self {
        Self { center, extents }
    }

    pub fn from_array(v: [f32; 6]) -> Self {
        Self {
            center: [v[0], v[1], v[2]],
            extents: [v[3], v[4], v[5]],
        }
    }

    pub fn to_array(self) -> [f32; 6] {
        let [cx, cy, cz] = self.center;
        let [sx, sy, sz] = self.extents;
        [cx, cy, cz, sx, sy, sz]
    }

    pub fn min_corner(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.center[a] as f64 - self.extents[a] as f64 / 2.0)
    }

    pub fn max_corner(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.center[a] as f64 + self.extents[a] as f64 / 2.0)
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (lo, hi) = (self.min_corner(), self.max_corner());
        (0..3).all(|a| p[a] >= lo[a] && p[a] < hi[a])
    }

    pub fn has_positive_extents(&self) -> bool {
        self.extents.iter().all(|&e| e > 0.0)
    }

    /// Euclidean distance between the 6-D box vectors.
    pub fn distance(&self, other: &Self) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(&a, b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PartMask(Vec<bool>);

impl PartMask {
    pub fn new(flags: Vec<bool>) -> Self {
        Self(flags)
    }

    pub fn all(k: usize) -> Self {
        Self(vec![true; k])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn flags(&self) -> &[bool] {
        &self.0
    }

    pub fn set(&mut self, i: usize, v: bool) {
        self.0[i] = v;
    }

    pub fn any(&self) -> bool {
        self.0.iter().any(|&b| b)
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Lexicographic list of unordered part pairs `(i, j)`, `i < j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairIndex {
    k: usize,
    pairs: Vec<(usize, usize)>,
}

impl PairIndex {
    pub fn new(k: usize) -> Result<Self, ShapeError> {
        if k < 2 {
            return Err(ShapeError::InvalidArity(k));
        }
        let pairs = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect();
        Ok(Self { k, pairs })
    }

    pub fn parts(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn pair(&self, p: usize) -> (usize, usize) {
        self.pairs[p]
    }

    /// Position of the unordered pair `{i, j}`.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        if a == b || b >= self.k {
            return None;
        }
        // rows before `a` hold (k-1) + (k-2) + ... + (k-a) pairs
        Some(a * (2 * self.k - a - 1) / 2 + (b - a - 1))
    }

    /// Pairs containing part `i`, with whether `i` is the first member.
    pub fn incident(&self, i: usize) -> impl Iterator<Item = (usize, bool)> + '_ {
        self.pairs.iter().enumerate().filter_map(move |(p, &(a, b))| {
            if a == i {
                Some((p, true))
            } else if b == i {
                Some((p, false))
            } else {
                None
            }
        })
    }
}

/// Build the pair list for `k` parts.
pub fn pair_index_list(k: usize) -> Result<PairIndex, ShapeError> {
    PairIndex::new(k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSample {
    pub class_id: u32,
    pub parts: Vec<VoxelGrid>,
    pub boxes: Vec<Box6>,
    pub mask: PartMask,
}

impl ShapeSample {
    /// Build a sample, zeroing the voxels and boxes of absent parts.
    pub fn new(class_id: u32, parts: Vec<VoxelGrid>, boxes: Vec<Box6>, mask: PartMask) -> Result<Self, ShapeError> {
        let k = mask.len();
        if parts.len() != k || boxes.len() != k {
            return Err(ShapeError::Precondition(format!(
                "{} grids and {} boxes for a mask of {k} parts",
                parts.len(),
                boxes.len()
            )));
        }
        let r = parts.first().map(VoxelGrid::resolution).unwrap_or(0);
        if parts.iter().any(|p| p.resolution() != r) {
            return Err(ShapeError::Precondition("parts have different resolutions".into()));
        }
        let mut s = Self {
            class_id,
            parts,
            boxes,
            mask,
        };
        s.zero_absent();
        Ok(s)
    }

    pub fn k(&self) -> usize {
        self.mask.len()
    }

    pub fn resolution(&self) -> usize {
        self.parts.first().map(VoxelGrid::resolution).unwrap_or(0)
    }

    pub fn zero_absent(&mut self) {
        for i in 0..self.k() {
            if !self.mask.get(i) {
                self.parts[i] = VoxelGrid::empty(self.parts[i].resolution());
                self.boxes[i] = Box6::ZERO;
            }
        }
    }

    /// Structure input of pair `(i, j)`: both boxes, `i` first.
    pub fn pair_vector(&self, i: usize, j: usize) -> [f32; 12] {
        let a = self.boxes[i].to_array();
        let b = self.boxes[j].to_array();
        std::array::from_fn(|n| if n < 6 { a[n] } else { b[n - 6] })
    }

    pub fn binarized(&self, threshold: f32) -> Self {
        let mut s = self.clone();
        for p in &mut s.parts {
            *p = p.binarized(threshold);
        }
        s
    }

    pub fn all_finite(&self) -> bool {
        self.parts.iter().all(|p| p.values().iter().all(|v| v.is_finite()))
            && self
                .boxes
                .iter()
                .all(|b| b.to_array().iter().all(|v| v.is_finite()))
    }
}

/// One 3-D point per occupied voxel, cell centers mapped affinely into `bbox`.
pub fn voxel_to_points(grid: &VoxelGrid, bbox: &Box6) -> Result<Vec<[f64; 3]>, ShapeError> {
    if !grid.is_binary() {
        return Err(ShapeError::Precondition("voxel grid is not binary".into()));
    }
    if !bbox.has_positive_extents() {
        return Err(ShapeError::Precondition(format!("box extents {:?} not positive", bbox.extents)));
    }
    let r = grid.resolution();
    let lo = bbox.min_corner();
    let ext: [f64; 3] = std::array::from_fn(|a| bbox.extents[a] as f64);
    let mut points = Vec::with_capacity(grid.occupied_count());
    for z in 0..r {
        for y in 0..r {
            for x in 0..r {
                if grid.get(x, y, z) == 1.0 {
                    let cell = [x, y, z];
                    points.push(std::array::from_fn(|a| {
                        lo[a] + (cell[a] as f64 + 0.5) / r as f64 * ext[a]
                    }));
                }
            }
        }
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pair_index_small_cases() {
        assert_eq!(pair_index_list(2).unwrap().pairs(), &[(0, 1)]);
        assert_eq!(
            pair_index_list(4).unwrap().pairs(),
            &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
        );
        // seven chair parts give 21 relations
        assert_eq!(pair_index_list(7).unwrap().len(), 21);
    }

    #[test]
    fn pair_index_rejects_single_part() {
        assert!(matches!(pair_index_list(1), Err(ShapeError::InvalidArity(1))));
        assert!(matches!(pair_index_list(0), Err(ShapeError::InvalidArity(0))));
    }

    proptest! {
        #[test]
        fn pair_index_is_a_bijection(k in 2usize..=8) {
            let idx = pair_index_list(k).unwrap();
            prop_assert_eq!(idx.len(), k * (k - 1) / 2);
            for (p, &(i, j)) in idx.pairs().iter().enumerate() {
                prop_assert!(i < j && j < k);
                prop_assert_eq!(idx.position(i, j), Some(p));
                prop_assert_eq!(idx.position(j, i), Some(p));
            }
            for w in idx.pairs().windows(2) {
                prop_assert!(w[0] < w[1]);
            }
            for i in 0..k {
                prop_assert_eq!(idx.incident(i).count(), k - 1);
            }
        }
    }

    #[test]
    fn empty_grid_has_no_points() {
        let g = VoxelGrid::empty(4);
        let b = Box6::new([0.5; 3], [1.0; 3]);
        assert!(voxel_to_points(&g, &b).unwrap().is_empty());
    }

    #[test]
    fn center_voxel_maps_near_box_center() {
        let r = 8;
        let mut g = VoxelGrid::empty(r);
        g.set(r / 2, r / 2, r / 2, 1.0);
        let b = Box6::new([0.5; 3], [1.0; 3]);
        let pts = voxel_to_points(&g, &b).unwrap();
        assert_eq!(pts.len(), 1);
        let half = 0.5 / r as f64;
        for a in 0..3 {
            assert!((pts[0][a] - 0.5).abs() <= half + 1e-12);
        }
    }

    #[test]
    fn scaling_the_box_scales_point_distances() {
        let mut g = VoxelGrid::empty(6);
        g.set(1, 2, 0, 1.0);
        g.set(4, 0, 5, 1.0);
        let unit = Box6::new([0.3, 0.4, 0.5], [0.5, 0.25, 0.75]);
        let doubled = Box6::new([0.3, 0.4, 0.5], [1.0, 0.5, 1.5]);
        let d = |pts: &[[f64; 3]]| {
            (0..3).map(|a| (pts[0][a] - pts[1][a]).powi(2)).sum::<f64>().sqrt()
        };
        let p1 = voxel_to_points(&g, &unit).unwrap();
        let p2 = voxel_to_points(&g, &doubled).unwrap();
        // affine oracle: local offsets scale linearly with the extents
        assert!((d(&p2) - 2.0 * d(&p1)).abs() < 1e-9);
    }

    #[test]
    fn non_binary_grid_is_rejected() {
        let g = VoxelGrid::filled(2, 0.3);
        let b = Box6::new([0.5; 3], [1.0; 3]);
        assert!(matches!(voxel_to_points(&g, &b), Err(ShapeError::Precondition(_))));
    }

    proptest! {
        #[test]
        fn points_count_and_containment(
            bits in proptest::collection::vec(any::<bool>(), 64),
            c in proptest::array::uniform3(0.2f32..0.8),
            e in proptest::array::uniform3(0.05f32..0.4),
        ) {
            let g = VoxelGrid::from_values(4, bits.iter().map(|&b| b as u8 as f32).collect()).unwrap();
            let b = Box6::new(c, e);
            let pts = voxel_to_points(&g, &b).unwrap();
            prop_assert_eq!(pts.len(), g.occupied_count());
            for p in pts {
                prop_assert!(b.contains(p));
            }
        }
    }

    #[test]
    fn absent_parts_are_zeroed() {
        let s = ShapeSample::new(
            0,
            vec![VoxelGrid::filled(2, 1.0), VoxelGrid::filled(2, 1.0)],
            vec![Box6::new([0.5; 3], [0.2; 3]); 2],
            PartMask::new(vec![true, false]),
        )
        .unwrap();
        assert!(s.parts[1].is_empty());
        assert_eq!(s.boxes[1], Box6::ZERO);
        assert!(!s.parts[0].is_empty());
    }

    #[test]
    fn class_names_round_trip() {
        for id in [0u32, 2, 5, 17] {
            assert_eq!(class_id(&class_name(id)), Some(id));
        }
    }
}
