//! Losses, annealing and the two-phase SGD loop.
//!
//! Phase 1 decodes the posterior mean and minimizes the reconstruction loss
//! only. Phase 2 decodes a reparameterized sample and adds the KL term and
//! the feature regularizer with linearly ramped weights.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Real, Tape, Tensor, TensorError, Var};
use crate::layers::Bound;
use crate::model::{
    reparameterize, Batch, DecodedFeatures, ExchangeState, LatentDistribution, ModelError, SagNet,
};
use crate::seeds::{derive_seed, SeedConcern};
use crate::shapes::{pair_index_list, ShapeSample, VoxelGrid};

pub const LOSS_LOG: &str = "loss.csv";
pub const TRAIN_CONFIG: &str = "train.json";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("numeric fault at iteration {iter}: {source}; last good weights kept")]
    NumericFault { iter: usize, source: TensorError },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

fn io_err(path: &Path, e: impl ToString) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    }
}

/// Linear ramps of the KL weight λ and the feature weight η.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub lambda_max: f64,
    pub eta_max: f64,
    /// Phase-2 iterations over which both weights rise from 0 to their max.
    pub ramp_iters: usize,
    pub phase1_iters: usize,
    pub phase2_iters: usize,
}

impl AnnealSchedule {
    pub fn new(ramp_iters: usize, phase1_iters: usize, phase2_iters: usize) -> Self {
        Self {
            lambda_max: 0.8,
            eta_max: 0.8,
            ramp_iters,
            phase1_iters,
            phase2_iters,
        }
    }

    fn ramp(&self, i: usize, max: f64) -> f64 {
        if self.ramp_iters == 0 {
            return max;
        }
        max * (i.min(self.ramp_iters) as f64 / self.ramp_iters as f64)
    }

    /// λ after `i` phase-2 iterations.
    pub fn lambda(&self, i: usize) -> f64 {
        self.ramp(i, self.lambda_max)
    }

    /// η after `i` phase-2 iterations.
    pub fn eta(&self, i: usize) -> f64 {
        self.ramp(i, self.eta_max)
    }

    pub fn total_iters(&self) -> usize {
        self.phase1_iters + self.phase2_iters
    }

    /// `(λ, η)` at global iteration `iter`; both 0 during phase 1.
    pub fn weights_at(&self, iter: usize) -> (f64, f64) {
        match iter.checked_sub(self.phase1_iters) {
            None => (0.0, 0.0),
            Some(i) => (self.lambda(i), self.eta(i)),
        }
    }

    pub fn in_phase2(&self, iter: usize) -> bool {
        iter >= self.phase1_iters
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iters: usize,
    pub phase1_iters: usize,
    pub ramp_iters: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Weight `w_b` of the squared box error.
    pub box_weight: f64,
    /// Checkpoint period in iterations; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk(10_000)
    }
}

impl TrainConfig {
    /// Desk-scale run of `iters` iterations: 20% warm-up, ramp over the rest.
    pub fn desk(iters: usize) -> Self {
        let phase1 = iters / 5;
        Self {
            iters,
            phase1_iters: phase1,
            ramp_iters: (iters - phase1).min(60_000),
            batch_size: 10,
            learning_rate: 0.001,
            momentum: 0.0,
            clip_norm: 5.0,
            box_weight: 10.0,
            checkpoint_every: 1000,
            seed: 0,
        }
    }

    /// 70000 mini-batches of 10 with λ, η ramped over 60000 iterations.
    pub fn full_scale() -> Self {
        Self {
            iters: 70_000,
            phase1_iters: 14_000,
            ramp_iters: 60_000,
            ..Self::desk(70_000)
        }
    }

    pub fn schedule(&self) -> AnnealSchedule {
        AnnealSchedule::new(self.ramp_iters, self.phase1_iters, self.iters.saturating_sub(self.phase1_iters))
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.phase1_iters > self.iters {
            return Err(TrainError::Contract(format!(
                "phase 1 of {} iterations exceeds the total {}",
                self.phase1_iters, self.iters
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Contract("batch size 0".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.clip_norm < 0.0 {
            return Err(TrainError::Contract("invalid optimizer settings".into()));
        }
        Ok(())
    }
}

/// Loss components of one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iter: usize,
    pub l_f: f64,
    pub l_kl: f64,
    pub r_reg: f64,
    pub total: f64,
    pub lambda: f64,
    pub eta: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "iter,l_f,l_kl,r_reg,total,lambda,eta";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iter, self.l_f, self.l_kl, self.r_reg, self.total, self.lambda, self.eta
        )
    }

    /// `l_f + λ·l_kl + η·r_reg`, the phase-2 total; phase 1 has λ = η = 0.
    pub fn reassembled(&self) -> f64 {
        self.l_f + self.lambda * self.l_kl + self.eta * self.r_reg
    }
}

/// Reconstruction loss on the tape, averaged over batch items.
///
/// Per item: for each present part the voxel binary cross-entropy averaged
/// over its `r³` cells, plus `box_weight` times the squared error of every
/// present pair vector.
pub fn loss_reconstruction<T: Real>(
    tape: &mut Tape<T>,
    batch: &Batch<T>,
    decoded: &DecodedFeatures,
    box_weight: f64,
) -> Result<Var, TensorError> {
    let vd = batch.voxels.dims().to_vec();
    if tape.dims(decoded.voxel_logits) != vd.as_slice() || tape.dims(decoded.pair_boxes) != batch.pairs.dims() {
        return Err(TensorError::Contract(format!(
            "decoded dims {:?}/{:?} for targets {:?}/{:?}",
            tape.dims(decoded.voxel_logits),
            tape.dims(decoded.pair_boxes),
            vd,
            batch.pairs.dims()
        )));
    }
    let items = batch.cond.batch as f64;
    let target: Arc<[T]> = batch.voxels.data().to_vec().into();
    let bce = tape.bce_with_logits(decoded.voxel_logits, target)?;
    let bce = tape.reshape(bce, &[vd[0], vd[1] * vd[2] * vd[3]])?;
    let per_part = tape.row_mean(bce)?;
    let pm = tape.constant(batch.cond.part_mask.clone());
    let per_part = tape.mul_column(per_part, pm)?;
    let voxel = tape.sum(per_part)?;
    let target = tape.constant(batch.pairs.clone());
    let diff = tape.sub(decoded.pair_boxes, target)?;
    let sq = tape.square(diff)?;
    let per_pair = tape.row_sum(sq)?;
    let qm = tape.constant(batch.cond.pair_mask.clone());
    let per_pair = tape.mul_column(per_pair, qm)?;
    let boxes = tape.sum(per_pair)?;
    let boxes = tape.scale(boxes, box_weight)?;
    let total = tape.add(voxel, boxes)?;
    tape.scale(total, 1.0 / items)
}

/// Closed-form KL to the standard normal, averaged over batch items.
pub fn loss_kl<T: Real>(tape: &mut Tape<T>, dist: &LatentDistribution) -> Result<Var, TensorError> {
    let items = tape.dims(dist.mu)[0] as f64;
    let mu2 = tape.square(dist.mu)?;
    let two_ls = tape.scale(dist.log_sigma, 2.0)?;
    let var = tape.exp(two_ls)?;
    let a = tape.add(mu2, var)?;
    let a = tape.sub(a, two_ls)?;
    let a = tape.add_scalar(a, -1.0)?;
    let s = tape.sum(a)?;
    tape.scale(s, 0.5 / items)
}

/// Squared distance between encoder-side and decoder-side features,
/// averaged over batch items. Absent rows are zero on both sides.
pub fn loss_feature_reg<T: Real>(
    tape: &mut Tape<T>,
    state: &ExchangeState,
    decoded: &DecodedFeatures,
    items: usize,
) -> Result<Var, TensorError> {
    let dg = tape.sub(decoded.hg_prime, state.geo)?;
    let dg = tape.square(dg)?;
    let dg = tape.sum(dg)?;
    let ds = tape.sub(decoded.hs_prime, state.structure)?;
    let ds = tape.square(ds)?;
    let ds = tape.sum(ds)?;
    let r = tape.add(dg, ds)?;
    tape.scale(r, 1.0 / items as f64)
}

/// Scalar reference of the reconstruction loss for one sample.
///
/// `probs` are predicted occupancies (clamped to `[1e-6, 1 - 1e-6]`),
/// `pair_vectors` the predicted 12-D pair vectors in pair order.
pub fn reconstruction_loss_value(
    target: &ShapeSample,
    probs: &[VoxelGrid],
    pair_vectors: &[[f64; 12]],
    box_weight: f64,
) -> Result<f64, TrainError> {
    let k = target.k();
    let pairs = pair_index_list(k).map_err(|e| TrainError::Contract(e.to_string()))?;
    if probs.len() != k || pair_vectors.len() != pairs.len() {
        return Err(TrainError::Contract(format!(
            "{} grids and {} pair vectors for k = {k}",
            probs.len(),
            pair_vectors.len()
        )));
    }
    let mut voxel = 0.0;
    for i in (0..k).filter(|&i| target.mask.get(i)) {
        let t = target.parts[i].values();
        let p = probs[i].values();
        if p.len() != t.len() {
            return Err(TrainError::Contract("grid resolution mismatch".into()));
        }
        let s: f64 = t
            .iter()
            .zip(p)
            .map(|(&y, &q)| {
                let q = (q as f64).clamp(1e-6, 1.0 - 1e-6);
                -(y as f64 * q.ln() + (1.0 - y as f64) * (1.0 - q).ln())
            })
            .sum();
        voxel += s / t.len() as f64;
    }
    let mut boxes = 0.0;
    for (p, &(i, j)) in pairs.pairs().iter().enumerate() {
        if target.mask.get(i) && target.mask.get(j) {
            let t = target.pair_vector(i, j);
            boxes += t
                .iter()
                .zip(&pair_vectors[p])
                .map(|(&a, &b)| (a as f64 - b).powi(2))
                .sum::<f64>();
        }
    }
    Ok(voxel + box_weight * boxes)
}

/// Loss variables of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_f: Var,
    pub l_kl: Var,
    pub r_reg: Var,
    pub total: Var,
}

/// Full forward pass and loss assembly.
///
/// With `noise = None` the decoder receives `μ`; otherwise
/// `z = μ + σ ⊙ noise`. `total = l_f + λ·l_kl + η·r_reg`.
#[allow(clippy::too_many_arguments)]
pub fn forward_loss<T: Real>(
    model: &SagNet<T>,
    tape: &mut Tape<T>,
    p: &Bound,
    batch: &Batch<T>,
    noise: Option<Tensor<T>>,
    lambda: f64,
    eta: f64,
    box_weight: f64,
) -> Result<LossVars, ModelError> {
    let state = model.analyze(tape, p, batch)?;
    let dist = model.fuse(tape, p, &state, &batch.cond)?;
    let z = match noise {
        Some(n) => reparameterize(tape, &dist, n)?,
        None => dist.mu,
    };
    let decoded = model.generate(tape, p, z, &batch.cond)?;
    let l_f = loss_reconstruction(tape, batch, &decoded, box_weight)?;
    let l_kl = loss_kl(tape, &dist)?;
    let r_reg = loss_feature_reg(tape, &state, &decoded, batch.cond.batch)?;
    let mut total = l_f;
    if lambda != 0.0 {
        let a = tape.scale(l_kl, lambda)?;
        total = tape.add(total, a)?;
    }
    if eta != 0.0 {
        let b = tape.scale(r_reg, eta)?;
        total = tape.add(total, b)?;
    }
    Ok(LossVars {
        l_f,
        l_kl,
        r_reg,
        total,
    })
}

/// Outcome of [`train`].
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub reports: Vec<LossReport>,
    /// Iterations whose gradient norm exceeded the clip threshold.
    pub clipped: usize,
}

/// Draws mini-batches by walking seeded permutations of the dataset.
struct Batcher {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        let mut b = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
        };
        b.reshuffle_if_needed();
        b
    }

    fn reshuffle_if_needed(&mut self) {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                self.reshuffle_if_needed();
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Train `model` in place.
///
/// When `out` is given, the run writes `train.json`, `loss.csv` and the
/// model checkpoint (`config.json`, `model.sagw`) every
/// `checkpoint_every` iterations and at the end. On a numeric fault the
/// last good weights are restored, checkpointed and the error returned.
pub fn train(
    model: &mut SagNet<f32>,
    data: &[ShapeSample],
    config: &TrainConfig,
    out: Option<&Path>,
    mut on_step: impl FnMut(&LossReport),
) -> Result<TrainSummary, TrainError> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::Contract("empty dataset".into()));
    }
    let schedule = config.schedule();
    let mut log = match out {
        Some(o) => {
            fs::create_dir_all(o).map_err(|e| io_err(o, e))?;
            let path = o.join(TRAIN_CONFIG);
            let text = serde_json::to_string_pretty(config).map_err(|e| io_err(&path, e))?;
            fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
            let path = o.join(LOSS_LOG);
            let mut w = BufWriter::new(File::create(&path).map_err(|e| io_err(&path, e))?);
            writeln!(w, "{}", LossReport::CSV_HEADER).map_err(|e| io_err(&path, e))?;
            Some((w, path))
        }
        None => None,
    };
    let mut batcher = Batcher::new(data.len(), derive_seed(config.seed, SeedConcern::Batching));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SeedConcern::Noise));
    let mut velocity: Vec<Vec<f32>> = model.store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    let ids: Vec<_> = model.store.ids().collect();
    let mut summary = TrainSummary {
        reports: Vec::with_capacity(config.iters),
        clipped: 0,
    };
    let latent = model.config.latent_dim;
    for iter in 0..config.iters {
        let picks = batcher.next(config.batch_size);
        let samples: Vec<&ShapeSample> = picks.iter().map(|&i| &data[i]).collect();
        let batch = Batch::<f32>::new(&model.config, &samples)?;
        let (lambda, eta) = schedule.weights_at(iter);
        let noise = schedule.in_phase2(iter).then(|| {
            let n = samples.len() * latent;
            let v = (0..n).map(|_| StandardNormal.sample(&mut noise_rng)).collect();
            Tensor::new(vec![samples.len(), latent], v).expect("noise dims")
        });
        let step = (|| -> Result<(LossReport, Vec<Vec<f32>>), TensorError> {
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape, true);
            let lv = forward_loss(model, &mut tape, &p, &batch, noise, lambda, eta, config.box_weight).map_err(
                |e| match e {
                    ModelError::Tensor(t) => t,
                    other => TensorError::Contract(other.to_string()),
                },
            )?;
            let scalar = |v: Var| tape.value(v).data()[0] as f64;
            let report = LossReport {
                iter,
                l_f: scalar(lv.l_f),
                l_kl: scalar(lv.l_kl),
                r_reg: scalar(lv.r_reg),
                total: scalar(lv.total),
                lambda,
                eta,
            };
            let mut grads = tape.backward(lv.total)?;
            let g = ids
                .iter()
                .map(|&id| {
                    grads
                        .take(p.var(id))
                        .unwrap_or_else(|| vec![0.0; model.store.get(id).numel()])
                })
                .collect();
            Ok((report, g))
        })();
        let (report, mut grads) = match step {
            Ok(v) => v,
            Err(source) => {
                if let Some(o) = out {
                    model.save(o)?;
                }
                return Err(TrainError::NumericFault { iter, source });
            }
        };
        let norm = grads
            .iter()
            .flatten()
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            if let Some(o) = out {
                model.save(o)?;
            }
            return Err(TrainError::NumericFault {
                iter,
                source: TensorError::Contract("non-finite gradient norm".into()),
            });
        }
        if config.clip_norm > 0.0 && norm > config.clip_norm {
            summary.clipped += 1;
            warn!("iter {iter}: gradient norm {norm:.3} clipped to {}", config.clip_norm);
            let f = (config.clip_norm / norm) as f32;
            grads.iter_mut().flatten().for_each(|g| *g *= f);
        }
        let lr = config.learning_rate as f32;
        let mu = config.momentum as f32;
        for ((&id, g), v) in ids.iter().zip(&grads).zip(&mut velocity) {
            let w = model.store.get_mut(id).data_mut();
            for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = mu * *v + g;
                *w -= lr * *v;
            }
        }
        if let Some((w, path)) = &mut log {
            writeln!(w, "{}", report.csv_row()).map_err(|e| io_err(path, e))?;
        }
        if iter % 100 == 0 {
            info!(
                "iter {iter}: l_f {:.5} l_kl {:.5} r {:.5} total {:.5}",
                report.l_f, report.l_kl, report.r_reg, report.total
            );
        }
        on_step(&report);
        summary.reports.push(report);
        if let Some(o) = out {
            if config.checkpoint_every > 0 && (iter + 1) % config.checkpoint_every == 0 {
                model.save(o)?;
            }
        }
    }
    if let Some(o) = out {
        if let Some((w, path)) = &mut log {
            w.flush().map_err(|e| io_err(path, e))?;
        }
        model.save(o)?;
    }
    Ok(summary)
}
