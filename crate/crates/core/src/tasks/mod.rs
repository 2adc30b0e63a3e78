//! Sampling, interpolation, completion and modality mapping on a trained model.

use std::str::FromStr;

use log::{debug, info};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{chamfer, EvalPointCloud, MetricError, POINT_BUDGET};
use crate::model::{ModelError, SagNet};
use crate::seeds::{derive_seed, mix_seed, SeedConcern};
use crate::shapes::{Box6, PartMask, ShapeSample, VoxelGrid};

pub const FEEDBACK_ITERATIONS: usize = 300;
pub const INIT_CENTER: (f32, f32) = (0.0, 1.0);
pub const INIT_EXTENT: (f32, f32) = (0.1, 0.5);
const DECODE_CHUNK: usize = 32;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// How part masks of sampled shapes are chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskPolicy {
    All,
    Fixed(PartMask),
    /// Uniform draw from the masks seen in training.
    Empirical(Vec<PartMask>),
}

impl MaskPolicy {
    pub fn empirical(data: &[ShapeSample]) -> Self {
        Self::Empirical(data.iter().map(|s| s.mask.clone()).collect())
    }

    fn draw(&self, k: usize, rng: &mut impl Rng) -> Result<PartMask, TaskError> {
        let m = match self {
            Self::All => PartMask::all(k),
            Self::Fixed(m) => m.clone(),
            Self::Empirical(ms) if ms.is_empty() => return Err(TaskError::Contract("no masks to draw from".into())),
            Self::Empirical(ms) => ms[rng.random_range(0..ms.len())].clone(),
        };
        if m.len() != k || !m.any() {
            return Err(TaskError::Contract(format!("mask {:?} for {k} parts", m.flags())));
        }
        Ok(m)
    }
}

/// Standard-normal latent codes from the sampling stream of `seed`.
pub fn sample_latents(count: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SeedConcern::Sampling));
    (0..count)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

/// `count` shapes decoded from prior samples, voxels binarized at 0.5.
pub fn sample_shapes(model: &SagNet<f32>, count: usize, seed: u64, policy: &MaskPolicy) -> Result<Vec<ShapeSample>, TaskError> {
    let codes = sample_latents(count, model.config.latent_dim, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(derive_seed(seed, SeedConcern::Sampling), 1));
    let masks = (0..count)
        .map(|_| policy.draw(model.config.k, &mut rng))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Vec::with_capacity(count);
    for (c, m) in codes.chunks(DECODE_CHUNK).zip(masks.chunks(DECODE_CHUNK)) {
        out.extend(model.decode(c, m)?.into_iter().map(|s| s.binarized(0.5)));
    }
    Ok(out)
}

/// Decodes of `(1-t) z_a + t z_b` at `steps` uniform `t` including both ends.
///
/// Codes are the posterior means. The first half uses the mask of `a`, the
/// rest the mask of `b`.
pub fn interpolate(model: &SagNet<f32>, a: &ShapeSample, b: &ShapeSample, steps: usize) -> Result<Vec<ShapeSample>, TaskError> {
    if steps < 2 {
        return Err(TaskError::Contract(format!("{steps} interpolation steps")));
    }
    let za = model.encode(&[a])?.remove(0).mu;
    let zb = model.encode(&[b])?.remove(0).mu;
    (0..steps)
        .map(|s| {
            let t = s as f32 / (steps - 1) as f32;
            let z: Vec<f32> = za.iter().zip(&zb).map(|(&x, &y)| (1.0 - t) * x + t * y).collect();
            let mask = if 2 * s < steps { &a.mask } else { &b.mask };
            Ok(model.decode(&[z], std::slice::from_ref(mask))?.remove(0))
        })
        .collect()
}

/// Bernoulli(0.5) voxels and a uniformly drawn box.
pub fn random_part(rng: &mut impl Rng, resolution: usize) -> (VoxelGrid, Box6) {
    let v = (0..resolution.pow(3)).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let grid = VoxelGrid::from_values(resolution, v).expect("sized grid");
    (grid, random_box(rng))
}

pub fn random_box(rng: &mut impl Rng) -> Box6 {
    Box6::new(
        std::array::from_fn(|_| rng.random_range(INIT_CENTER.0..=INIT_CENTER.1)),
        std::array::from_fn(|_| rng.random_range(INIT_EXTENT.0..=INIT_EXTENT.1)),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompletionProblem {
    pub partial: ShapeSample,
    pub missing: Vec<usize>,
    pub iterations: usize,
    pub seed: u64,
}

impl CompletionProblem {
    pub fn new(partial: ShapeSample, missing: Vec<usize>) -> Self {
        Self {
            partial,
            missing,
            iterations: FEEDBACK_ITERATIONS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FeedbackResult {
    #[serde(skip)]
    pub sample: ShapeSample,
    /// L2 norm of the overwritten values' change per iteration.
    pub drift: Vec<f64>,
    /// Error of the inferred modality against the input, for mappings.
    pub error: Option<f64>,
}

fn change_norm(a: &VoxelGrid, b: &VoxelGrid) -> f64 {
    a.values().iter().zip(b.values()).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum()
}

fn box_change(a: &Box6, b: &Box6) -> f64 {
    a.distance(b).powi(2)
}

fn reconstruct_one(model: &SagNet<f32>, s: &ShapeSample) -> Result<ShapeSample, TaskError> {
    let rec = model.reconstruct(&[s])?.remove(0);
    if !rec.all_finite() {
        return Err(TaskError::Contract("non-finite decode in feedback loop".into()));
    }
    Ok(rec)
}

/// Fill in the missing parts by repeated encode/decode.
pub fn complete(model: &SagNet<f32>, problem: &CompletionProblem) -> Result<FeedbackResult, TaskError> {
    let k = problem.partial.k();
    if k != model.config.k {
        return Err(TaskError::Contract(format!("{k} parts for a {}-part model", model.config.k)));
    }
    let mut missing = problem.missing.clone();
    missing.sort_unstable();
    missing.dedup();
    if missing.iter().any(|&m| m >= k) {
        return Err(TaskError::Contract(format!("missing parts {missing:?} out of {k}")));
    }
    if missing.is_empty() {
        return Ok(FeedbackResult {
            sample: problem.partial.clone(),
            drift: Vec::new(),
            error: None,
        });
    }
    if missing.len() == k {
        return Err(TaskError::Contract("every part is missing; sample instead".into()));
    }
    let fixed: Vec<usize> = (0..k).filter(|i| !missing.contains(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(problem.seed, SeedConcern::Sampling));
    let mut current = problem.partial.clone();
    for &m in &missing {
        let (g, b) = random_part(&mut rng, current.resolution());
        current.parts[m] = g;
        current.boxes[m] = b;
        current.mask.set(m, true);
    }
    let mut drift = Vec::with_capacity(problem.iterations);
    for it in 0..problem.iterations {
        let rec = reconstruct_one(model, &current)?;
        let mut change = 0.0;
        for &m in &missing {
            let g = rec.parts[m].binarized(0.5);
            change += change_norm(&current.parts[m], &g) + box_change(&current.boxes[m], &rec.boxes[m]);
            current.parts[m] = g;
            current.boxes[m] = rec.boxes[m];
        }
        for &f in &fixed {
            if current.parts[f] != problem.partial.parts[f] || current.boxes[f] != problem.partial.boxes[f] {
                return Err(TaskError::Contract(format!("fixed part {f} changed at iteration {it}")));
            }
        }
        debug!("complete iter {it}: change {:.6}", change.sqrt());
        drift.push(change.sqrt());
    }
    info!("completion finished, final change {:.6}", drift.last().copied().unwrap_or(0.0));
    Ok(FeedbackResult {
        sample: current,
        drift,
        error: None,
    })
}

/// Run independent completion problems in parallel.
pub fn complete_all(model: &SagNet<f32>, problems: &[CompletionProblem]) -> Result<Vec<FeedbackResult>, TaskError> {
    problems.par_iter().map(|p| complete(model, p)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Infer boxes from voxels.
    G2S,
    /// Infer voxels from boxes.
    S2G,
}

impl FromStr for Direction {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "g2s" => Ok(Self::G2S),
            "s2g" => Ok(Self::S2G),
            other => Err(TaskError::Contract(format!("invalid direction {other:?}; expected g2s or s2g"))),
        }
    }
}

/// Infer one modality of every present part from the other.
///
/// The input's own values of the inferred modality serve as ground truth:
/// mean box L2 for `G2S`, mean part Chamfer distance for `S2G`.
pub fn map_modality(
    model: &SagNet<f32>,
    sample: &ShapeSample,
    direction: Direction,
    iterations: usize,
    seed: u64,
) -> Result<FeedbackResult, TaskError> {
    if sample.k() != model.config.k {
        return Err(TaskError::Contract(format!("{} parts for a {}-part model", sample.k(), model.config.k)));
    }
    let present: Vec<usize> = (0..sample.k()).filter(|&i| sample.mask.get(i)).collect();
    if present.is_empty() {
        return Err(TaskError::Contract("no present part".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SeedConcern::Sampling));
    let mut current = sample.clone();
    for &i in &present {
        let (g, b) = random_part(&mut rng, sample.resolution());
        match direction {
            Direction::G2S => current.boxes[i] = b,
            Direction::S2G => current.parts[i] = g,
        }
    }
    let mut drift = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let rec = reconstruct_one(model, &current)?;
        let mut change = 0.0;
        for &i in &present {
            match direction {
                Direction::G2S => {
                    change += box_change(&current.boxes[i], &rec.boxes[i]);
                    current.boxes[i] = rec.boxes[i];
                }
                Direction::S2G => {
                    let g = rec.parts[i].binarized(0.5);
                    change += change_norm(&current.parts[i], &g);
                    current.parts[i] = g;
                }
            }
        }
        debug!("map iter {it}: change {:.6}", change.sqrt());
        drift.push(change.sqrt());
    }
    let mut err = 0.0;
    for &i in &present {
        err += match direction {
            Direction::G2S => current.boxes[i].distance(&sample.boxes[i]),
            Direction::S2G => chamfer(
                &EvalPointCloud::from_part(&current, i).budgeted(POINT_BUDGET),
                &EvalPointCloud::from_part(sample, i).budgeted(POINT_BUDGET),
            )?,
        };
    }
    Ok(FeedbackResult {
        sample: current,
        drift,
        error: Some(err / present.len() as f64),
    })
}

#[cfg(test)]
mod tests;
