//! Small convolutional classifier predicting the joint mode of a two-part shape.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MetricError;
use crate::autodiff::{Tape, Tensor, Var};
use crate::layers::{Bound, Linear, ParamId, ParamStore, KERNEL, PAD, STRIDE};
use crate::seeds::{derive_seed, SeedConcern};
use crate::shapes::ShapeSample;
use crate::synthjoints::{world_grids, MODE_COUNT};

pub const REQUIRED_ACCURACY: f64 = 0.95;
const CHANNELS: [usize; 3] = [8, 16, 32];
const META_FILE: &str = "classifier.json";
const WEIGHTS_FILE: &str = "classifier.sagw";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub holdout: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            holdout: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    resolution: usize,
    held_out_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ModeClassifier {
    store: ParamStore<f32>,
    convs: Vec<(ParamId, ParamId)>,
    fc: Linear,
    resolution: usize,
    pub held_out_accuracy: Option<f64>,
}

impl ModeClassifier {
    /// Untrained network over a `resolution`^3 two-channel world grid.
    pub fn new(resolution: usize, seed: u64) -> Result<Self, MetricError> {
        if resolution != 16 {
            return Err(MetricError::Contract(format!(
                "classifier expects a 16^3 world grid, got {resolution}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SeedConcern::Init));
        let mut store = ParamStore::new();
        let k3 = KERNEL * KERNEL * KERNEL;
        let mut cin = 2;
        let mut convs = Vec::new();
        for (i, &cout) in CHANNELS.iter().enumerate() {
            let w = store.add_glorot(&mut rng, format!("conv{i}.w"), &[KERNEL, KERNEL, KERNEL, cin, cout], k3 * cin, k3 * cout);
            let b = store.add_zeros(format!("conv{i}.b"), &[cout]);
            convs.push((w, b));
            cin = cout;
        }
        let flat = cin * 8;
        let fc = Linear::new(&mut store, &mut rng, "fc", flat, MODE_COUNT as usize);
        Ok(Self {
            store,
            convs,
            fc,
            resolution,
            held_out_accuracy: None,
        })
    }

    pub fn require_trained(&self) -> Result<(), MetricError> {
        match self.held_out_accuracy {
            Some(a) if a >= REQUIRED_ACCURACY => Ok(()),
            Some(a) => Err(MetricError::Contract(format!(
                "classifier held-out accuracy {a:.3} is below {REQUIRED_ACCURACY}"
            ))),
            None => Err(MetricError::Contract("classifier is untrained".into())),
        }
    }

    fn features(&self, sample: &ShapeSample) -> Result<Vec<f32>, MetricError> {
        let w = world_grids(sample, self.resolution)?;
        Ok(w.tenon
            .iter()
            .zip(&w.mortise)
            .flat_map(|(&t, &m)| [t as u8 as f32, m as u8 as f32])
            .collect())
    }

    fn input(&self, rows: &[&[f32]]) -> Result<Tensor<f32>, MetricError> {
        let r = self.resolution;
        Ok(Tensor::new(vec![rows.len(), r, r, r, 2], rows.concat())?)
    }

    fn logits(&self, tape: &mut Tape<f32>, p: &Bound, x: Var) -> Result<Var, MetricError> {
        let n = tape.dims(x)[0];
        let mut h = x;
        for &(w, b) in &self.convs {
            h = tape.conv3d(h, p.var(w), STRIDE, PAD)?;
            h = tape.add_bias(h, p.var(b))?;
            h = tape.tanh(h)?;
        }
        let flat = tape.reshape(h, &[n, CHANNELS[2] * 8])?;
        Ok(self.fc.forward(tape, p, flat)?)
    }

    /// Class probabilities per sample.
    pub fn predict_proba(&self, samples: &[ShapeSample]) -> Result<Vec<Vec<f64>>, MetricError> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(64) {
            let feats = chunk.iter().map(|s| self.features(s)).collect::<Result<Vec<_>, _>>()?;
            let rows: Vec<&[f32]> = feats.iter().map(|f| f.as_slice()).collect();
            let mut tape = Tape::new();
            let p = self.store.bind(&mut tape, false);
            let x = tape.constant(self.input(&rows)?);
            let z = self.logits(&mut tape, &p, x)?;
            for row in tape.value(z).data().chunks(MODE_COUNT as usize) {
                let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
                let s: f64 = e.iter().sum();
                out.push(e.into_iter().map(|v| v / s).collect());
            }
        }
        Ok(out)
    }

    pub fn predict(&self, samples: &[ShapeSample]) -> Result<Vec<u8>, MetricError> {
        Ok(self
            .predict_proba(samples)?
            .iter()
            .map(|p| {
                (0..p.len())
                    .max_by(|&a, &b| p[a].total_cmp(&p[b]).then(b.cmp(&a)))
                    .unwrap_or(0) as u8
            })
            .collect())
    }

    /// Fit on labeled joints and record the held-out accuracy.
    pub fn train(&mut self, samples: &[ShapeSample], labels: &[u8], config: &ClassifierTrainConfig) -> Result<f64, MetricError> {
        if samples.len() != labels.len() || samples.len() < 2 {
            return Err(MetricError::Contract(format!(
                "{} samples with {} labels",
                samples.len(),
                labels.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SeedConcern::Batching));
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let n_hold = ((samples.len() as f64 * config.holdout).round() as usize).clamp(1, samples.len() - 1);
        let (held, fit) = order.split_at(n_hold);
        let mut fit = fit.to_vec();
        let feats = samples.iter().map(|s| self.features(s)).collect::<Result<Vec<_>, _>>()?;
        let ids: Vec<ParamId> = self.store.ids().collect();
        let mut velocity: Vec<Vec<f32>> = ids.iter().map(|&id| vec![0.0; self.store.get(id).numel()]).collect();
        let (lr, mu) = (config.learning_rate as f32, config.momentum as f32);
        for _ in 0..config.epochs {
            fit.shuffle(&mut rng);
            for chunk in fit.chunks(config.batch_size.max(1)) {
                let rows: Vec<&[f32]> = chunk.iter().map(|&i| feats[i].as_slice()).collect();
                let y: Arc<[usize]> = chunk.iter().map(|&i| labels[i] as usize).collect();
                let mut tape = Tape::new();
                let p = self.store.bind(&mut tape, true);
                let x = tape.constant(self.input(&rows)?);
                let z = self.logits(&mut tape, &p, x)?;
                let rows = tape.softmax_cross_entropy(z, y)?;
                let loss = tape.mean(rows)?;
                let mut grads = tape.backward(loss)?;
                for (&id, v) in ids.iter().zip(&mut velocity) {
                    let Some(g) = grads.take(p.var(id)) else { continue };
                    let w = self.store.get_mut(id).data_mut();
                    for ((w, g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                        *v = mu * *v + g;
                        *w -= lr * *v;
                    }
                }
            }
        }
        let held_samples: Vec<ShapeSample> = held.iter().map(|&i| samples[i].clone()).collect();
        let pred = self.predict(&held_samples)?;
        let correct = held.iter().zip(&pred).filter(|(&i, &p)| labels[i] == p).count();
        let acc = correct as f64 / held.len() as f64;
        self.held_out_accuracy = Some(acc);
        Ok(acc)
    }

    pub fn save(&self, dir: &Path) -> Result<(), MetricError> {
        let io = |path: &Path, e: &dyn std::fmt::Display| MetricError::Io {
            path: path.display().to_string(),
            detail: e.to_string(),
        };
        std::fs::create_dir_all(dir).map_err(|e| io(dir, &e))?;
        let meta = Meta {
            resolution: self.resolution,
            held_out_accuracy: self.held_out_accuracy,
        };
        let path = dir.join(META_FILE);
        let text = serde_json::to_string_pretty(&meta).map_err(|e| io(&path, &e))?;
        std::fs::write(&path, text + "\n").map_err(|e| io(&path, &e))?;
        self.store.save(&dir.join(WEIGHTS_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, MetricError> {
        let path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| MetricError::Io {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let meta: Meta = serde_json::from_str(&text).map_err(|e| MetricError::Io {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let mut out = Self::new(meta.resolution, 0)?;
        out.store.load_from(&ParamStore::load(&dir.join(WEIGHTS_FILE))?)?;
        out.held_out_accuracy = meta.held_out_accuracy;
        Ok(out)
    }
}
