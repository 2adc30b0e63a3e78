//! Procedural tenon-mortise joints and the exact fit oracle.
//!
//! A joint has two parts: part 0 is the tenon, a solid box; part 1 is the
//! mortise, a solid block with a cavity that the tenon fills exactly. The
//! cavity is aligned to the mortise grid so that resampling both parts onto
//! the mortise lattice reproduces it voxel for voxel.
//!
//! Connection modes (a convention of this crate):
//!
//! | mode | cavity opens on |
//! |---|---|
//! | 0..=5 | one face: +x, -x, +y, -y, +z, -z |
//! | 6 | an edge notch: +x and +z |
//! | 7 | a corner notch: +x, +y and +z |

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::shapes::{Box6, PartMask, ShapeSample, VoxelGrid};
use crate::seeds::mix_seed;

pub const JOINT_CLASS_ID: u32 = 0;
pub const MODE_COUNT: u8 = 8;
pub const TENON: usize = 0;
pub const MORTISE: usize = 1;

#[derive(Debug, Error)]
pub enum JointError {
    #[error("invalid joint spec: {0}")]
    InvalidSpec(String),
    #[error("fit oracle needs exactly 2 parts, got {0}")]
    Arity(usize),
    #[error("fit oracle needs binary voxels")]
    NotBinary,
    #[error("labels io: {0}")]
    Labels(String),
}

/// Parameters of one joint. Sizes and offsets are in mortise-grid cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointSpec {
    pub mode: u8,
    pub resolution: usize,
    /// Block side lengths in world voxel units.
    pub block_dims: [u32; 3],
    /// Cavity extent along x, y, z.
    pub tenon_size: [usize; 3],
    /// Position of the cavity on the contact face, along the two lateral
    /// axes in increasing axis order. Unused for notch modes.
    pub tenon_offset: [usize; 2],
}

/// Uniform ranges used by [`sample_spec`].
#[derive(Clone, Debug, PartialEq)]
pub struct JointRanges {
    pub block_side: (u32, u32),
    /// Fraction of the face covered by the tenon cross-section.
    pub cross_section: (f64, f64),
    /// Fraction of the block side taken by the tenon depth.
    pub depth: (f64, f64),
}

impl Default for JointRanges {
    fn default() -> Self {
        Self {
            block_side: (16, 24),
            cross_section: (0.25, 0.5),
            depth: (0.4, 0.8),
        }
    }
}

impl JointSpec {
    /// Per axis: `Some(true)` if the cavity touches the + face, `Some(false)`
    /// for the - face, `None` if the axis is lateral.
    pub fn open_faces(&self) -> [Option<bool>; 3] {
        match self.mode {
            0 => [Some(true), None, None],
            1 => [Some(false), None, None],
            2 => [None, Some(true), None],
            3 => [None, Some(false), None],
            4 => [None, None, Some(true)],
            5 => [None, None, Some(false)],
            6 => [Some(true), None, Some(true)],
            _ => [Some(true), Some(true), Some(true)],
        }
    }

    pub fn validate(&self) -> Result<(), JointError> {
        let r = self.resolution;
        if self.mode >= MODE_COUNT {
            return Err(JointError::InvalidSpec(format!("mode {} out of range", self.mode)));
        }
        if r < 4 {
            return Err(JointError::InvalidSpec(format!("resolution {r} below 4")));
        }
        if self.block_dims.contains(&0) {
            return Err(JointError::InvalidSpec("zero block side".into()));
        }
        let mut lateral = 0;
        for (axis, open) in self.open_faces().into_iter().enumerate() {
            let size = self.tenon_size[axis];
            if size == 0 {
                return Err(JointError::InvalidSpec(format!("empty tenon along axis {axis}")));
            }
            match open {
                Some(_) if size >= r => {
                    return Err(JointError::InvalidSpec(format!(
                        "tenon depth {size} along axis {axis} reaches through a block of {r} cells"
                    )))
                }
                Some(_) => {}
                None => {
                    let off = self.tenon_offset[lateral];
                    if off < 1 || off + size > r - 1 {
                        return Err(JointError::InvalidSpec(format!(
                            "tenon {off}..{} along axis {axis} leaves no wall inside {r} cells",
                            off + size
                        )));
                    }
                    lateral += 1;
                }
            }
        }
        Ok(())
    }

    /// Half-open cavity cell range per axis.
    pub fn cavity_cells(&self) -> [(usize, usize); 3] {
        let r = self.resolution;
        let mut lateral = 0;
        let mut out = [(0, 0); 3];
        for (axis, open) in self.open_faces().into_iter().enumerate() {
            let size = self.tenon_size[axis];
            out[axis] = match open {
                Some(true) => (r - size, r),
                Some(false) => (0, size),
                None => {
                    let off = self.tenon_offset[lateral];
                    lateral += 1;
                    (off, off + size)
                }
            };
        }
        out
    }

    /// Mortise and tenon boxes in normalized shape coordinates.
    pub fn part_boxes(&self) -> [Box6; 2] {
        let longest = *self.block_dims.iter().max().expect("three sides") as f64;
        let ext: [f64; 3] = std::array::from_fn(|a| self.block_dims[a] as f64 / longest);
        let cells = self.cavity_cells();
        let r = self.resolution as f64;
        let mut tenon_center = [0f32; 3];
        let mut tenon_ext = [0f32; 3];
        for a in 0..3 {
            let lo = 0.5 - ext[a] / 2.0 + cells[a].0 as f64 / r * ext[a];
            let hi = 0.5 - ext[a] / 2.0 + cells[a].1 as f64 / r * ext[a];
            tenon_center[a] = ((lo + hi) / 2.0) as f32;
            tenon_ext[a] = (hi - lo) as f32;
        }
        let mortise = Box6::new([0.5; 3], ext.map(|e| e as f32));
        [Box6::new(tenon_center, tenon_ext), mortise]
    }
}

/// Draw a valid spec from `ranges`.
pub fn sample_spec(rng: &mut impl Rng, mode: u8, resolution: usize, ranges: &JointRanges) -> JointSpec {
    let r = resolution;
    let cells = |frac: (f64, f64), rng: &mut dyn rand::RngCore, max: usize| -> usize {
        let f = rng.random_range(frac.0..=frac.1);
        ((f * r as f64).round() as usize).clamp(1, max)
    };
    let block_dims = std::array::from_fn(|_| rng.random_range(ranges.block_side.0..=ranges.block_side.1));
    let probe = JointSpec {
        mode,
        resolution: r,
        block_dims,
        tenon_size: [1; 3],
        tenon_offset: [1; 2],
    };
    let notch = mode >= 6;
    let mut tenon_size = [0; 3];
    let mut tenon_offset = [0; 2];
    let mut lateral = 0;
    for (axis, open) in probe.open_faces().into_iter().enumerate() {
        match open {
            Some(_) if notch => tenon_size[axis] = cells(ranges.cross_section, rng, r - 1),
            Some(_) => tenon_size[axis] = cells(ranges.depth, rng, r - 1),
            None => {
                let size = cells(ranges.cross_section, rng, r - 2);
                tenon_size[axis] = size;
                tenon_offset[lateral] = rng.random_range(1..=r - 1 - size);
                lateral += 1;
            }
        }
    }
    JointSpec {
        mode,
        resolution: r,
        block_dims,
        tenon_size,
        tenon_offset,
    }
}

/// Build the two-part sample for `spec`.
pub fn generate_joint(spec: &JointSpec) -> Result<ShapeSample, JointError> {
    spec.validate()?;
    let r = spec.resolution;
    let cells = spec.cavity_cells();
    let tenon = VoxelGrid::filled(r, 1.0);
    let mut mortise = VoxelGrid::filled(r, 1.0);
    for z in cells[2].0..cells[2].1 {
        for y in cells[1].0..cells[1].1 {
            for x in cells[0].0..cells[0].1 {
                mortise.set(x, y, z, 0.0);
            }
        }
    }
    let boxes = spec.part_boxes().to_vec();
    ShapeSample::new(JOINT_CLASS_ID, vec![tenon, mortise], boxes, PartMask::all(2))
        .map_err(|e| JointError::InvalidSpec(e.to_string()))
}

#[derive(Clone, Debug)]
pub struct JointDataset {
    pub samples: Vec<ShapeSample>,
    pub labels: Vec<u8>,
    pub specs: Vec<JointSpec>,
}

/// `count` joints; sample `n` depends only on `(seed, n)`.
///
/// With `stratified`, modes cycle `0..8`; otherwise they are uniform.
pub fn generate_dataset(
    count: usize,
    seed: u64,
    resolution: usize,
    stratified: bool,
    ranges: &JointRanges,
) -> Result<JointDataset, JointError> {
    if count == 0 {
        return Err(JointError::InvalidSpec("count must be at least 1".into()));
    }
    let items: Result<Vec<(ShapeSample, u8, JointSpec)>, JointError> = (0..count)
        .into_par_iter()
        .map(|n| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, n as u64));
            let mode = if stratified {
                (n % MODE_COUNT as usize) as u8
            } else {
                rng.random_range(0..MODE_COUNT)
            };
            let spec = sample_spec(&mut rng, mode, resolution, ranges);
            Ok((generate_joint(&spec)?, mode, spec))
        })
        .collect();
    let mut out = JointDataset {
        samples: Vec::with_capacity(count),
        labels: Vec::with_capacity(count),
        specs: Vec::with_capacity(count),
    };
    for (s, l, spec) in items? {
        out.samples.push(s);
        out.labels.push(l);
        out.specs.push(spec);
    }
    Ok(out)
}

pub fn save_labels(dir: &Path, labels: &[u8]) -> Result<(), JointError> {
    let json = serde_json::to_string(labels).map_err(|e| JointError::Labels(e.to_string()))?;
    fs::write(dir.join("labels.json"), json).map_err(|e| JointError::Labels(e.to_string()))
}

pub fn load_labels(dir: &Path) -> Result<Vec<u8>, JointError> {
    let text = fs::read_to_string(dir.join("labels.json")).map_err(|e| JointError::Labels(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| JointError::Labels(e.to_string()))
}

/// Both parts resampled onto one lattice covering the union of their boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldGrids {
    pub resolution: usize,
    pub tenon: Vec<bool>,
    pub tenon_box: Vec<bool>,
    pub mortise: Vec<bool>,
    pub mortise_box: Vec<bool>,
}

fn sample_part(grid: &VoxelGrid, bbox: &Box6, p: [f64; 3]) -> Option<bool> {
    if !bbox.has_positive_extents() || !bbox.contains(p) {
        return None;
    }
    let r = grid.resolution();
    let lo = bbox.min_corner();
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let t = (p[a] - lo[a]) / bbox.extents[a] as f64;
        idx[a] = ((t * r as f64).floor().max(0.0) as usize).min(r - 1);
    }
    Some(grid.get(idx[0], idx[1], idx[2]) >= 0.5)
}

/// Resample both parts of a joint onto a common `resolution`^3 lattice.
pub fn world_grids(sample: &ShapeSample, resolution: usize) -> Result<WorldGrids, JointError> {
    if sample.k() != 2 {
        return Err(JointError::Arity(sample.k()));
    }
    let r = resolution;
    let n = r * r * r;
    let mut out = WorldGrids {
        resolution: r,
        tenon: vec![false; n],
        tenon_box: vec![false; n],
        mortise: vec![false; n],
        mortise_box: vec![false; n],
    };
    let present: Vec<usize> = (0..2)
        .filter(|&i| sample.mask.get(i) && sample.boxes[i].has_positive_extents())
        .collect();
    if present.is_empty() {
        return Ok(out);
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in &present {
        let (a, b) = (sample.boxes[i].min_corner(), sample.boxes[i].max_corner());
        for ax in 0..3 {
            lo[ax] = lo[ax].min(a[ax]);
            hi[ax] = hi[ax].max(b[ax]);
        }
    }
    let tenon_present = present.contains(&TENON);
    let mortise_present = present.contains(&MORTISE);
    for z in 0..r {
        for y in 0..r {
            for x in 0..r {
                let c = [x, y, z];
                let p: [f64; 3] = std::array::from_fn(|a| lo[a] + (c[a] as f64 + 0.5) / r as f64 * (hi[a] - lo[a]));
                let i = x + r * (y + r * z);
                if tenon_present {
                    if let Some(occ) = sample_part(&sample.parts[TENON], &sample.boxes[TENON], p) {
                        out.tenon_box[i] = true;
                        out.tenon[i] = occ;
                    }
                }
                if mortise_present {
                    if let Some(occ) = sample_part(&sample.parts[MORTISE], &sample.boxes[MORTISE], p) {
                        out.mortise_box[i] = true;
                        out.mortise[i] = occ;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Cavity fit of one joint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitScores {
    /// Share of the mortise material inside the tenon box that the tenon occupies.
    pub r_o: f64,
    /// Share of the tenon that sits in empty space inside the mortise box.
    pub r_e: f64,
    /// The tenon has no occupied voxel; `r_e` is reported as 0.
    pub empty_tenon: bool,
}

impl FitScores {
    /// `R = 1 - (R_e - R_o)`; 0 is a perfect fit.
    pub fn r(&self) -> f64 {
        1.0 - (self.r_e - self.r_o)
    }
}

/// Exact fit oracle on a common lattice at the sample's resolution.
pub fn fit_oracle(sample: &ShapeSample) -> Result<FitScores, JointError> {
    if sample.k() != 2 {
        return Err(JointError::Arity(sample.k()));
    }
    if sample.parts.iter().any(|p| !p.is_binary()) {
        return Err(JointError::NotBinary);
    }
    let w = world_grids(sample, sample.resolution())?;
    let mut overlap = 0usize;
    let mut mortise_under_tenon_box = 0usize;
    let mut tenon_in_cavity = 0usize;
    let mut tenon_total = 0usize;
    for i in 0..w.tenon.len() {
        if w.mortise[i] && w.tenon_box[i] {
            mortise_under_tenon_box += 1;
            overlap += w.tenon[i] as usize;
        }
        if w.tenon[i] {
            tenon_total += 1;
            if w.mortise_box[i] && !w.mortise[i] {
                tenon_in_cavity += 1;
            }
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(FitScores {
        r_o: ratio(overlap, mortise_under_tenon_box),
        r_e: ratio(tenon_in_cavity, tenon_total),
        empty_tenon: tenon_total == 0,
    })
}
