//! Shape distances, generative-quality scores and retrieval.

pub mod assignment;
mod classifier;

use log::warn;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::TensorError;
use crate::layers::LayerError;
use crate::shapes::ShapeSample;
use crate::synthjoints::{fit_oracle, JointError};

pub use classifier::{ClassifierTrainConfig, ModeClassifier, REQUIRED_ACCURACY};

/// Points per part when clouds are equalized.
pub const POINT_BUDGET: usize = 256;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Joint(#[from] JointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
}

/// Occupied voxel centers in shape coordinates, tagged with their part.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPointCloud {
    pub points: Vec<[f64; 3]>,
    pub part_id: Vec<usize>,
}

impl EvalPointCloud {
    pub fn new(points: Vec<[f64; 3]>, part_id: Vec<usize>) -> Result<Self, MetricError> {
        if points.len() != part_id.len() {
            return Err(MetricError::Contract(format!(
                "{} points with {} part ids",
                points.len(),
                part_id.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(MetricError::Contract("non-finite point".into()));
        }
        Ok(Self { points, part_id })
    }

    /// Part `i` of `sample`. An empty part is represented by its box center.
    pub fn from_part(sample: &ShapeSample, i: usize) -> Self {
        let grid = &sample.parts[i];
        let b = &sample.boxes[i];
        let lo = b.min_corner();
        let r = grid.resolution();
        let mut points = Vec::new();
        for z in 0..r {
            for y in 0..r {
                for x in 0..r {
                    if grid.get(x, y, z) >= 0.5 {
                        let c = [x, y, z];
                        points.push(std::array::from_fn(|a| {
                            lo[a] + (c[a] as f64 + 0.5) / r as f64 * b.extents[a] as f64
                        }));
                    }
                }
            }
        }
        if points.is_empty() {
            points.push(b.center.map(|c| c as f64));
        }
        let part_id = vec![i; points.len()];
        Self { points, part_id }
    }

    /// All present parts of `sample`.
    pub fn from_sample(sample: &ShapeSample) -> Self {
        let mut out = Self {
            points: Vec::new(),
            part_id: Vec::new(),
        };
        for i in (0..sample.k()).filter(|&i| sample.mask.get(i)) {
            let c = Self::from_part(sample, i);
            out.points.extend(c.points);
            out.part_id.extend(c.part_id);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Exactly `n` points picked at evenly spaced indices.
    pub fn budgeted(&self, n: usize) -> Self {
        let m = self.len();
        let pick: Vec<usize> = (0..n).map(|i| i * m / n).collect();
        Self {
            points: pick.iter().map(|&i| self.points[i]).collect(),
            part_id: pick.iter().map(|&i| self.part_id[i]).collect(),
        }
    }

    /// `n` points drawn uniformly with replacement.
    pub fn resample_uniform(&self, n: usize, rng: &mut impl Rng) -> Self {
        let m = self.len();
        let pick: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
        Self {
            points: pick.iter().map(|&i| self.points[i]).collect(),
            part_id: pick.iter().map(|&i| self.part_id[i]).collect(),
        }
    }
}

fn dist(p: &[f64; 3], q: &[f64; 3]) -> f64 {
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
}

fn nearest_sum(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    a.iter()
        .map(|p| b.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
        .sum()
}

/// Summed nearest-neighbor distances in both directions.
pub fn chamfer(a: &EvalPointCloud, b: &EvalPointCloud) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::Contract("chamfer of an empty cloud".into()));
    }
    Ok(nearest_sum(&a.points, &b.points) + nearest_sum(&b.points, &a.points))
}

/// Minimum-cost perfect matching under Euclidean cost. Sizes must agree.
pub fn emd(a: &EvalPointCloud, b: &EvalPointCloud) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::Contract(format!("emd of {} vs {} points", a.len(), b.len())));
    }
    let costs: Vec<Vec<f64>> = a
        .points
        .iter()
        .map(|p| b.points.iter().map(|q| dist(p, q)).collect())
        .collect();
    Ok(assignment::cost(&costs, &assignment::solve(&costs)))
}

/// `emd` after resampling both clouds uniformly with replacement to `n` points.
pub fn emd_resampled(a: &EvalPointCloud, b: &EvalPointCloud, n: usize, rng: &mut impl Rng) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() || n == 0 || n > POINT_BUDGET {
        return Err(MetricError::Contract(format!("emd resampling to {n} points")));
    }
    emd(&a.resample_uniform(n, rng), &b.resample_uniform(n, rng))
}

/// Point-set distance used as the ground of part-wise comparisons.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ground {
    #[default]
    Cd,
    Emd,
}

fn check_arity(x: &ShapeSample, y: &ShapeSample) -> Result<(), MetricError> {
    if x.k() != y.k() {
        return Err(MetricError::Contract(format!("{} parts vs {} parts", x.k(), y.k())));
    }
    Ok(())
}

/// Box distance plus point distance between part `i` of `x` and part `j` of `y`.
pub fn part_distance(
    x: &ShapeSample,
    i: usize,
    y: &ShapeSample,
    j: usize,
    ground: Ground,
    budget: Option<usize>,
) -> Result<f64, MetricError> {
    let (mut a, mut b) = (EvalPointCloud::from_part(x, i), EvalPointCloud::from_part(y, j));
    if let Some(n) = budget {
        a = a.budgeted(n);
        b = b.budgeted(n);
    }
    let points = match ground {
        Ground::Cd => chamfer(&a, &b)?,
        Ground::Emd => emd(&a, &b)?,
    };
    Ok(x.boxes[i].distance(&y.boxes[j]) + points)
}

/// Sum over parts present in both shapes of box L2 plus Chamfer distance.
pub fn shape_distance(x: &ShapeSample, y: &ShapeSample) -> Result<f64, MetricError> {
    check_arity(x, y)?;
    let mut total = 0.0;
    for i in 0..x.k() {
        if x.mask.get(i) && y.mask.get(i) {
            total += part_distance(x, i, y, i, Ground::Cd, Some(POINT_BUDGET))?;
        }
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdCov {
    pub mmd: f64,
    pub cov: f64,
}

/// Part-wise minimum matching distance and coverage.
pub fn mmd_cov(generated: &[ShapeSample], training: &[ShapeSample], ground: Ground) -> Result<MmdCov, MetricError> {
    if generated.is_empty() || training.is_empty() {
        return Err(MetricError::Contract("mmd/cov needs non-empty sets".into()));
    }
    let k = training[0].k();
    for s in generated.iter().chain(training) {
        if s.k() != k {
            return Err(MetricError::Contract(format!("{} parts vs {k} parts", s.k())));
        }
    }
    // d[i][g][t] for part i present in both generated g and training t
    let mut d: Vec<Vec<Vec<Option<f64>>>> = Vec::with_capacity(k);
    for i in 0..k {
        let rows: Result<Vec<Vec<Option<f64>>>, MetricError> = generated
            .par_iter()
            .map(|g| {
                training
                    .iter()
                    .map(|t| {
                        if g.mask.get(i) && t.mask.get(i) {
                            part_distance(g, i, t, i, ground, Some(POINT_BUDGET)).map(Some)
                        } else {
                            Ok(None)
                        }
                    })
                    .collect()
            })
            .collect();
        d.push(rows?);
    }

    let mut covered = vec![false; training.len()];
    for row in d.iter() {
        for per_gen in row {
            let best = per_gen
                .iter()
                .enumerate()
                .filter_map(|(t, v)| v.map(|v| (t, v)))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            if let Some((t, _)) = best {
                covered[t] = true;
            }
        }
    }

    let mut shape_scores = Vec::with_capacity(training.len());
    for (t, shape) in training.iter().enumerate() {
        let mut parts = Vec::new();
        for (i, row) in d.iter().enumerate() {
            if !shape.mask.get(i) {
                continue;
            }
            let best = row.iter().filter_map(|per_gen| per_gen[t]).fold(f64::INFINITY, f64::min);
            if best.is_finite() {
                parts.push(best);
            }
        }
        if !parts.is_empty() {
            shape_scores.push(parts.iter().sum::<f64>() / parts.len() as f64);
        }
    }
    if shape_scores.is_empty() {
        return Err(MetricError::Contract("no part is present in both sets".into()));
    }
    Ok(MmdCov {
        mmd: shape_scores.iter().sum::<f64>() / shape_scores.len() as f64,
        cov: covered.iter().filter(|&&c| c).count() as f64 / training.len() as f64,
    })
}

/// Axis-aligned mirror plane `x[axis] = offset`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MirrorPlane {
    pub axis: usize,
    pub offset: f64,
}

impl MirrorPlane {
    /// The plane `x = c` through the middle of the shape's bounding box.
    pub fn mid_sagittal(sample: &ShapeSample) -> Result<Self, MetricError> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in (0..sample.k()).filter(|&i| sample.mask.get(i)) {
            lo = lo.min(sample.boxes[i].min_corner()[0]);
            hi = hi.max(sample.boxes[i].max_corner()[0]);
        }
        if !lo.is_finite() {
            return Err(MetricError::Contract("shape has no present part".into()));
        }
        Ok(Self {
            axis: 0,
            offset: 0.5 * (lo + hi),
        })
    }
}

fn require_present(sample: &ShapeSample, parts: &[usize]) -> Result<(), MetricError> {
    for &i in parts {
        if i >= sample.k() || !sample.mask.get(i) {
            return Err(MetricError::Contract(format!("part {i} is absent")));
        }
    }
    Ok(())
}

/// Distance between the mirror image of part `i` and part `j`.
pub fn symmetry_score(sample: &ShapeSample, pair: (usize, usize), plane: MirrorPlane) -> Result<f64, MetricError> {
    let (i, j) = pair;
    require_present(sample, &[i, j])?;
    if plane.axis > 2 {
        return Err(MetricError::Contract(format!("mirror axis {}", plane.axis)));
    }
    let mut reflected = sample.clone();
    reflected.parts[i] = sample.parts[i].flipped(plane.axis);
    let c = &mut reflected.boxes[i].center[plane.axis];
    *c = (2.0 * plane.offset - *c as f64) as f32;
    part_distance(&reflected, i, sample, j, Ground::Cd, None)
}

/// Distance of the fourth box centroid from the plane through the first three.
pub fn coplanarity_score(sample: &ShapeSample, parts: [usize; 4]) -> Result<f64, MetricError> {
    require_present(sample, &parts)?;
    let c: Vec<[f64; 3]> = parts.iter().map(|&i| sample.boxes[i].center.map(|v| v as f64)).collect();
    let u: [f64; 3] = std::array::from_fn(|a| c[1][a] - c[0][a]);
    let v: [f64; 3] = std::array::from_fn(|a| c[2][a] - c[0][a]);
    let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if len < 1e-12 {
        return Err(MetricError::Degenerate("first three centroids are collinear".into()));
    }
    let w: [f64; 3] = std::array::from_fn(|a| c[3][a] - c[0][a]);
    Ok((n[0] * w[0] + n[1] * w[1] + n[2] * w[2]).abs() / len)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CavityScore {
    pub r_o: f64,
    pub r_e: f64,
    pub r: f64,
    pub empty_tenon: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CavityReport {
    pub per_sample: Vec<CavityScore>,
    pub r_over: f64,
}

/// Cavity fit of two-part joints after binarizing at 0.5.
pub fn cavity_scores(samples: &[ShapeSample]) -> Result<CavityReport, MetricError> {
    if samples.is_empty() {
        return Err(MetricError::Contract("no samples".into()));
    }
    let per_sample: Result<Vec<CavityScore>, MetricError> = samples
        .par_iter()
        .map(|s| {
            let f = fit_oracle(&s.binarized(0.5))?;
            Ok(CavityScore {
                r_o: f.r_o,
                r_e: f.r_e,
                r: f.r(),
                empty_tenon: f.empty_tenon,
            })
        })
        .collect();
    let per_sample = per_sample?;
    let n = per_sample.len() as f64;
    let mean_e = per_sample.iter().map(|c| c.r_e).sum::<f64>() / n;
    let mean_o = per_sample.iter().map(|c| c.r_o).sum::<f64>() / n;
    Ok(CavityReport {
        per_sample,
        r_over: mean_e - mean_o,
    })
}

/// `exp(E_x KL(p(y|x) || p(y)))` over rows of class probabilities.
pub fn inception_score(probs: &[Vec<f64>]) -> Result<f64, MetricError> {
    let Some(first) = probs.first() else {
        return Err(MetricError::Contract("no predictions".into()));
    };
    let c = first.len();
    if probs.iter().any(|p| p.len() != c) {
        return Err(MetricError::Contract("ragged predictions".into()));
    }
    let n = probs.len() as f64;
    let marginal: Vec<f64> = (0..c).map(|j| probs.iter().map(|p| p[j]).sum::<f64>() / n).collect();
    let kl: f64 = probs
        .iter()
        .map(|p| {
            p.iter()
                .zip(&marginal)
                .filter(|(&pj, _)| pj > 0.0)
                .map(|(&pj, &mj)| pj * (pj / mj).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;
    Ok(kl.exp())
}

/// Inception-style score of generated joints under a trained mode classifier.
pub fn inception_mode_score(generated: &[ShapeSample], classifier: &ModeClassifier) -> Result<f64, MetricError> {
    classifier.require_trained()?;
    inception_score(&classifier.predict_proba(generated)?)
}

/// The `n` nearest dataset entries as `(index, distance)`, ascending.
pub fn knn_retrieve(query: &ShapeSample, dataset: &[ShapeSample], n: usize) -> Result<Vec<(usize, f64)>, MetricError> {
    if dataset.is_empty() {
        return Err(MetricError::Contract("empty dataset".into()));
    }
    let n = if n > dataset.len() {
        warn!("requested {n} neighbors from {} shapes", dataset.len());
        dataset.len()
    } else {
        n
    };
    let d: Result<Vec<f64>, MetricError> = dataset.par_iter().map(|s| shape_distance(query, s)).collect();
    let mut ranked: Vec<(usize, f64)> = d?.into_iter().enumerate().collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    ranked.truncate(n);
    Ok(ranked)
}

/// Percentage of scores at or below each threshold.
pub fn threshold_curve(scores: &[f64], thresholds: &[f64]) -> Vec<(f64, f64)> {
    thresholds
        .iter()
        .map(|&t| {
            let hits = scores.iter().filter(|&&s| s <= t).count();
            let pct = if scores.is_empty() {
                0.0
            } else {
                100.0 * hits as f64 / scores.len() as f64
            };
            (t, pct)
        })
        .collect()
}

/// Voxel IoU of each present part at threshold 0.5.
pub fn part_ious(a: &ShapeSample, b: &ShapeSample) -> Result<Vec<f64>, MetricError> {
    check_arity(a, b)?;
    Ok((0..a.k())
        .filter(|&i| a.mask.get(i))
        .map(|i| a.parts[i].iou(&b.parts[i], 0.5))
        .collect())
}
