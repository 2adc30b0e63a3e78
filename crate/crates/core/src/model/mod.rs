//! The full two-branch network.
//!
//! Batches are laid out part-major: part `i` of item `b` is row
//! `i * batch + b`, pair `p` of item `b` is row `p * batch + b`. Rows of
//! absent parts and of pairs touching them are held at zero after every
//! recurrent step.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Real, Tape, Tensor, TensorError, Var};
use crate::layers::{
    attention_messages, conv_depth, AttentionGate, Bound, GeoDecoder, GeoEncoder, Gru, Incidence, LayerError,
    Linear, ParamStore, StructDecoder, StructEncoder,
};
use crate::seeds::{derive_seed, SeedConcern};
use crate::shapes::{pair_index_list, Box6, PairIndex, PartMask, ShapeSample, VoxelGrid};

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "model.sagw";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
}

fn io_err(path: &Path, e: impl ToString) -> ModelError {
    ModelError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub k: usize,
    #[serde(rename = "r")]
    pub resolution: usize,
    pub latent_dim: usize,
    pub feature_dim: usize,
    /// Exchange iterations between the two branches.
    #[serde(rename = "T")]
    pub iterations: usize,
    pub channels: Vec<usize>,
    pub seed: u64,
    #[serde(default)]
    pub class_id: u32,
}

impl ModelConfig {
    /// Full-size network at resolution `r` (a power of two, 4 to 64).
    pub fn new(k: usize, resolution: usize) -> Result<Self, ModelError> {
        let depth = conv_depth(resolution)?;
        let channels = (0..depth).map(|i| 8 << i).collect();
        let c = Self {
            k,
            resolution,
            latent_dim: 512,
            feature_dim: 512,
            iterations: 2,
            channels,
            seed: 0,
            class_id: 0,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.k < 2 {
            return Err(ModelError::Config(format!("k = {} (need ≥ 2)", self.k)));
        }
        if !(1..=4).contains(&self.iterations) {
            return Err(ModelError::Config(format!("T = {} outside 1..=4", self.iterations)));
        }
        if self.latent_dim == 0 || self.feature_dim == 0 {
            return Err(ModelError::Config("zero latent or feature width".into()));
        }
        let depth = conv_depth(self.resolution)?;
        if self.channels.len() != depth || self.channels.contains(&0) {
            return Err(ModelError::Config(format!(
                "resolution {} needs {depth} non-zero channel widths, got {:?}",
                self.resolution, self.channels
            )));
        }
        Ok(())
    }

    pub fn pair_count(&self) -> usize {
        self.k * (self.k - 1) / 2
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| io_err(path, e))?;
        fs::write(path, text + "\n").map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let c: Self = serde_json::from_str(&text).map_err(|e| io_err(path, e))?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug)]
struct Layers {
    geo_enc: GeoEncoder,
    str_enc: StructEncoder,
    geo_gru: Gru,
    str_gru: Gru,
    f_g: AttentionGate,
    f_s: AttentionGate,
    seq_geo: Gru,
    seq_str: Gru,
    fuse_geo: Linear,
    fuse_str: Linear,
    fusion: Gru,
    head: Linear,
    split_fc: Linear,
    splitter: Gru,
    dec_geo: Gru,
    dec_str: Gru,
    geo_dec: GeoDecoder,
    str_dec: StructDecoder,
}

/// Presence information shared by encoder and decoder.
#[derive(Clone, Debug)]
pub struct Conditioning<T> {
    pub batch: usize,
    pub masks: Vec<Vec<bool>>,
    /// `[batch, k]` presence flags as reals.
    pub cond: Tensor<T>,
    /// `[k * batch, 1]`.
    pub part_mask: Tensor<T>,
    /// `[K * batch, 1]`, 1 where both parts are present.
    pub pair_mask: Tensor<T>,
    pub incidence: Incidence,
}

impl<T: Real> Conditioning<T> {
    pub fn new(k: usize, masks: &[PartMask]) -> Result<Self, ModelError> {
        if masks.is_empty() {
            return Err(ModelError::Contract("empty batch".into()));
        }
        if let Some(m) = masks.iter().find(|m| m.len() != k) {
            return Err(ModelError::Contract(format!("mask of {} parts for k = {k}", m.len())));
        }
        let batch = masks.len();
        let flags: Vec<Vec<bool>> = masks.iter().map(|m| m.flags().to_vec()).collect();
        let as_t = |b: bool| if b { T::ONE } else { T::ZERO };
        let cond = flags.iter().flat_map(|f| f.iter().map(|&b| as_t(b))).collect();
        let part_mask = (0..k).flat_map(|i| flags.iter().map(move |f| as_t(f[i]))).collect();
        let pairs = pair_index_list(k).map_err(|e| ModelError::Contract(e.to_string()))?;
        let pair_mask = pairs
            .pairs()
            .iter()
            .flat_map(|&(i, j)| flags.iter().map(move |f| as_t(f[i] && f[j])))
            .collect();
        Ok(Self {
            batch,
            incidence: Incidence::new(k, &flags)?,
            cond: Tensor::new(vec![batch, k], cond)?,
            part_mask: Tensor::new(vec![k * batch, 1], part_mask)?,
            pair_mask: Tensor::new(vec![pairs.len() * batch, 1], pair_mask)?,
            masks: flags,
        })
    }
}

/// Network inputs for a batch of samples.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub cond: Conditioning<T>,
    /// `[k * batch, r, r, r, 1]`.
    pub voxels: Tensor<T>,
    /// `[K * batch, 12]`.
    pub pairs: Tensor<T>,
}

impl<T: Real> Batch<T> {
    pub fn new(config: &ModelConfig, samples: &[&ShapeSample]) -> Result<Self, ModelError> {
        let (k, r) = (config.k, config.resolution);
        for s in samples {
            if s.k() != k || s.resolution() != r {
                return Err(ModelError::Contract(format!(
                    "sample with k = {}, r = {} for a model with k = {k}, r = {r}",
                    s.k(),
                    s.resolution()
                )));
            }
        }
        let masks: Vec<PartMask> = samples.iter().map(|s| s.mask.clone()).collect();
        let cond = Conditioning::new(k, &masks)?;
        let batch = samples.len();
        let r3 = r * r * r;
        let mut voxels = Vec::with_capacity(k * batch * r3);
        for i in 0..k {
            for s in samples {
                voxels.extend(s.parts[i].values().iter().map(|&v| T::from_f64(v as f64)));
            }
        }
        let pairs = pair_index_list(k).map_err(|e| ModelError::Contract(e.to_string()))?;
        let mut pv = Vec::with_capacity(pairs.len() * batch * 12);
        for &(i, j) in pairs.pairs() {
            for s in samples {
                pv.extend(s.pair_vector(i, j).iter().map(|&v| T::from_f64(v as f64)));
            }
        }
        Ok(Self {
            cond,
            voxels: Tensor::new(vec![k * batch, r, r, r, 1], voxels)?,
            pairs: Tensor::new(vec![pairs.len() * batch, 12], pv)?,
        })
    }
}

/// Per-part and per-pair features after the exchange iterations.
#[derive(Clone, Copy, Debug)]
pub struct ExchangeState {
    /// `[k * batch, H]`.
    pub geo: Var,
    /// `[K * batch, H]`.
    pub structure: Var,
    pub t: usize,
}

/// Latent Gaussian: `sigma = exp(log_sigma)`.
#[derive(Clone, Copy, Debug)]
pub struct LatentDistribution {
    pub mu: Var,
    pub log_sigma: Var,
}

/// Decoder outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub struct DecodedFeatures {
    /// `[k * batch, H]`.
    pub hg_prime: Var,
    /// `[K * batch, H]`.
    pub hs_prime: Var,
    /// `[k * batch, r, r, r, 1]`.
    pub voxel_logits: Var,
    /// `[K * batch, 12]`.
    pub pair_boxes: Var,
}

/// Mean and standard deviation of one latent code.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct SagNet<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    layers: Layers,
    pairs: PairIndex,
}

impl<T: Real> SagNet<T> {
    /// Fresh network with weights drawn from the config's init seed.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SeedConcern::Init));
        let mut s = ParamStore::new();
        let (h, l, k, r) = (config.feature_dim, config.latent_dim, config.k, config.resolution);
        let rng = &mut rng;
        let layers = Layers {
            geo_enc: GeoEncoder::new(&mut s, rng, "geo_enc", r, &config.channels, h)?,
            str_enc: StructEncoder::new(&mut s, rng, "str_enc", h),
            geo_gru: Gru::new(&mut s, rng, "geo_gru", h, h),
            str_gru: Gru::new(&mut s, rng, "str_gru", h, h),
            f_g: AttentionGate::new(&mut s, rng, "f_g", h),
            f_s: AttentionGate::new(&mut s, rng, "f_s", h),
            seq_geo: Gru::new(&mut s, rng, "seq_geo", h, h),
            seq_str: Gru::new(&mut s, rng, "seq_str", h, h),
            fuse_geo: Linear::new(&mut s, rng, "fuse_geo", h + k, h),
            fuse_str: Linear::new(&mut s, rng, "fuse_str", h + k, h),
            fusion: Gru::new(&mut s, rng, "fusion", h, h),
            head: Linear::new(&mut s, rng, "head", h, 2 * l),
            split_fc: Linear::new(&mut s, rng, "split_fc", l + k, h),
            splitter: Gru::new(&mut s, rng, "splitter", 0, h),
            dec_geo: Gru::new(&mut s, rng, "dec_geo", h, h),
            dec_str: Gru::new(&mut s, rng, "dec_str", h, h),
            geo_dec: GeoDecoder::new(&mut s, rng, "geo_dec", r, &config.channels, h)?,
            str_dec: StructDecoder::new(&mut s, rng, "str_dec", h),
        };
        let pairs = pair_index_list(k).map_err(|e| ModelError::Config(e.to_string()))?;
        Ok(Self {
            config,
            store: s,
            layers,
            pairs,
        })
    }

    pub fn cast<U: Real>(&self) -> SagNet<U> {
        SagNet {
            config: self.config.clone(),
            store: self.store.cast(),
            layers: self.layers.clone(),
            pairs: self.pairs.clone(),
        }
    }

    pub fn pairs(&self) -> &PairIndex {
        &self.pairs
    }

    /// Writes `config.json` and `model.sagw` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        self.config.save(&dir.join(CONFIG_FILE))?;
        self.store.save(&dir.join(WEIGHTS_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let config = ModelConfig::load(&dir.join(CONFIG_FILE))?;
        let mut model = Self::new(config)?;
        let weights = ParamStore::load(&dir.join(WEIGHTS_FILE))?;
        model.store.load_from(&weights)?;
        Ok(model)
    }

    fn masked_step(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        gru: &Gru,
        x: Var,
        h: Var,
        mask: Var,
    ) -> Result<Var, TensorError> {
        let h = gru.step(tape, p, Some(x), h)?;
        tape.mul_column(h, mask)
    }

    /// Encoder features followed by `T - 1` gated message exchanges.
    pub fn analyze(&self, tape: &mut Tape<T>, p: &Bound, batch: &Batch<T>) -> Result<ExchangeState, ModelError> {
        let ly = &self.layers;
        let h = self.config.feature_dim;
        let c = &batch.cond;
        let part_rows = self.config.k * c.batch;
        let pair_rows = self.pairs.len() * c.batch;
        if batch.voxels.dims()[0] != part_rows || batch.pairs.dims()[0] != pair_rows {
            return Err(ModelError::Contract("batch rows do not match its conditioning".into()));
        }
        let pm = tape.constant(c.part_mask.clone());
        let qm = tape.constant(c.pair_mask.clone());
        let vox = tape.constant(batch.voxels.clone());
        let pairs = tape.constant(batch.pairs.clone());
        let enc_g = ly.geo_enc.forward(tape, p, vox)?;
        let enc_s = ly.str_enc.forward(tape, p, pairs)?;
        let zg = tape.constant(Tensor::zeros(&[part_rows, h]));
        let zs = tape.constant(Tensor::zeros(&[pair_rows, h]));
        let mut geo = self.masked_step(tape, p, &ly.geo_gru, enc_g, zg, pm)?;
        let mut structure = self.masked_step(tape, p, &ly.str_gru, enc_s, zs, qm)?;
        for _ in 1..self.config.iterations {
            let (mg, ms) = attention_messages(tape, p, &ly.f_g, &ly.f_s, geo, structure, &c.incidence)?;
            geo = self.masked_step(tape, p, &ly.geo_gru, mg, geo, pm)?;
            structure = self.masked_step(tape, p, &ly.str_gru, ms, structure, qm)?;
        }
        Ok(ExchangeState {
            geo,
            structure,
            t: self.config.iterations,
        })
    }

    fn sequence(&self, tape: &mut Tape<T>, p: &Bound, gru: &Gru, rows: Var, steps: usize, batch: usize) -> Result<Var, TensorError> {
        let mut hid = tape.constant(Tensor::zeros(&[batch, self.config.feature_dim]));
        for i in 0..steps {
            let x = tape.slice_rows(rows, i * batch, batch)?;
            hid = gru.step(tape, p, Some(x), hid)?;
        }
        Ok(hid)
    }

    /// Sequence GRUs over parts and pairs, two-step fusion GRU, Gaussian head.
    pub fn fuse(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        state: &ExchangeState,
        cond: &Conditioning<T>,
    ) -> Result<LatentDistribution, ModelError> {
        let ly = &self.layers;
        let b = cond.batch;
        let hg = self.sequence(tape, p, &ly.seq_geo, state.geo, self.config.k, b)?;
        let hs = self.sequence(tape, p, &ly.seq_str, state.structure, self.pairs.len(), b)?;
        let c = tape.constant(cond.cond.clone());
        let a = tape.concat_cols(&[hg, c])?;
        let a = ly.fuse_geo.forward(tape, p, a)?;
        let a = tape.tanh(a)?;
        let s = tape.concat_cols(&[hs, c])?;
        let s = ly.fuse_str.forward(tape, p, s)?;
        let s = tape.tanh(s)?;
        let hv = tape.constant(Tensor::zeros(&[b, self.config.feature_dim]));
        let hv = ly.fusion.step(tape, p, Some(a), hv)?;
        let hv = ly.fusion.step(tape, p, Some(s), hv)?;
        let out = ly.head.forward(tape, p, hv)?;
        let l = self.config.latent_dim;
        Ok(LatentDistribution {
            mu: tape.slice_cols(out, 0, l)?,
            log_sigma: tape.slice_cols(out, l, l)?,
        })
    }

    /// Splitter GRU, unrolled decoder GRUs, voxel and box heads.
    pub fn generate(&self, tape: &mut Tape<T>, p: &Bound, z: Var, cond: &Conditioning<T>) -> Result<DecodedFeatures, ModelError> {
        let ly = &self.layers;
        let b = cond.batch;
        if tape.dims(z) != [b, self.config.latent_dim] {
            return Err(ModelError::Contract(format!(
                "latent dims {:?} for batch {b} and latent width {}",
                tape.dims(z),
                self.config.latent_dim
            )));
        }
        let c = tape.constant(cond.cond.clone());
        let zc = tape.concat_cols(&[z, c])?;
        let h0 = ly.split_fc.forward(tape, p, zc)?;
        let h0 = tape.tanh(h0)?;
        let seed_geo = ly.splitter.step(tape, p, None, h0)?;
        let seed_str = ly.splitter.step(tape, p, None, seed_geo)?;
        let unroll = |tape: &mut Tape<T>, gru: &Gru, seed: Var, steps: usize| -> Result<Var, TensorError> {
            let mut hid = seed;
            let mut outs = Vec::with_capacity(steps);
            for _ in 0..steps {
                hid = gru.step(tape, p, Some(seed), hid)?;
                outs.push(hid);
            }
            tape.concat_rows(&outs)
        };
        let hg = unroll(tape, &ly.dec_geo, seed_geo, self.config.k)?;
        let hs = unroll(tape, &ly.dec_str, seed_str, self.pairs.len())?;
        let pm = tape.constant(cond.part_mask.clone());
        let qm = tape.constant(cond.pair_mask.clone());
        let hg_prime = tape.mul_column(hg, pm)?;
        let hs_prime = tape.mul_column(hs, qm)?;
        let voxel_logits = ly.geo_dec.forward(tape, p, hg_prime)?;
        let pair_boxes = ly.str_dec.forward(tape, p, hs_prime)?;
        Ok(DecodedFeatures {
            hg_prime,
            hs_prime,
            voxel_logits,
            pair_boxes,
        })
    }

    /// Latent distributions of `samples`, evaluated without recording gradients.
    pub fn encode(&self, samples: &[&ShapeSample]) -> Result<Vec<Latent>, ModelError> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let batch = Batch::new(&self.config, samples)?;
        let state = self.analyze(&mut tape, &p, &batch)?;
        let dist = self.fuse(&mut tape, &p, &state, &batch.cond)?;
        let l = self.config.latent_dim;
        let mu = tape.value(dist.mu).data();
        let ls = tape.value(dist.log_sigma).data();
        Ok((0..samples.len())
            .map(|b| Latent {
                mu: mu[b * l..(b + 1) * l].iter().map(|v| v.to_f64() as f32).collect(),
                sigma: ls[b * l..(b + 1) * l].iter().map(|v| v.to_f64().exp() as f32).collect(),
            })
            .collect())
    }

    /// Real-valued shapes decoded from latent codes.
    pub fn decode(&self, codes: &[Vec<f32>], masks: &[PartMask]) -> Result<Vec<ShapeSample>, ModelError> {
        if codes.len() != masks.len() {
            return Err(ModelError::Contract(format!("{} codes for {} masks", codes.len(), masks.len())));
        }
        let l = self.config.latent_dim;
        if let Some(c) = codes.iter().find(|c| c.len() != l) {
            return Err(ModelError::Contract(format!("latent code of width {} (expected {l})", c.len())));
        }
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let cond = Conditioning::new(self.config.k, masks)?;
        let z: Vec<T> = codes.iter().flatten().map(|&v| T::from_f64(v as f64)).collect();
        let z = tape.constant(Tensor::new(vec![codes.len(), l], z)?);
        let out = self.generate(&mut tape, &p, z, &cond)?;
        let logits = tape.value(out.voxel_logits).to_f64_vec();
        let boxes = tape.value(out.pair_boxes).to_f64_vec();
        self.assemble(&logits, &boxes, masks)
    }

    /// Decode the means of the samples' own latent distributions.
    pub fn reconstruct(&self, samples: &[&ShapeSample]) -> Result<Vec<ShapeSample>, ModelError> {
        let latents = self.encode(samples)?;
        let codes: Vec<Vec<f32>> = latents.into_iter().map(|l| l.mu).collect();
        let masks: Vec<PartMask> = samples.iter().map(|s| s.mask.clone()).collect();
        self.decode(&codes, &masks)
    }

    /// Turn decoder outputs into samples: sigmoid occupancies, averaged boxes.
    pub fn assemble(&self, logits: &[f64], pair_boxes: &[f64], masks: &[PartMask]) -> Result<Vec<ShapeSample>, ModelError> {
        let (k, r) = (self.config.k, self.config.resolution);
        let batch = masks.len();
        let r3 = r * r * r;
        if logits.len() != k * batch * r3 || pair_boxes.len() != self.pairs.len() * batch * 12 {
            return Err(ModelError::Contract("decoder output sizes do not match the batch".into()));
        }
        let mut out = Vec::with_capacity(batch);
        for (b, mask) in masks.iter().enumerate() {
            let parts = (0..k)
                .map(|i| {
                    let row = &logits[(i * batch + b) * r3..(i * batch + b + 1) * r3];
                    let probs = row.iter().map(|&l| (1.0 / (1.0 + (-l).exp())) as f32).collect();
                    VoxelGrid::from_values(r, probs).map_err(|e| ModelError::Contract(e.to_string()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let candidates: Vec<[f64; 12]> = (0..self.pairs.len())
                .map(|p| {
                    let row = &pair_boxes[(p * batch + b) * 12..(p * batch + b + 1) * 12];
                    std::array::from_fn(|n| row[n])
                })
                .collect();
            let boxes = average_boxes(&self.pairs, &candidates, mask);
            let s = ShapeSample::new(self.config.class_id, parts, boxes, mask.clone())
                .map_err(|e| ModelError::Contract(e.to_string()))?;
            out.push(s);
        }
        Ok(out)
    }
}

/// Final box of each part: mean of the candidates proposed by its pairs.
///
/// Only pairs whose partner is present are averaged; a part with no present
/// partner falls back to all of its `k - 1` candidates. Absent parts get
/// zero boxes.
pub fn average_boxes(pairs: &PairIndex, candidates: &[[f64; 12]], mask: &PartMask) -> Vec<Box6> {
    let k = pairs.parts();
    (0..k)
        .map(|i| {
            if !mask.get(i) {
                return Box6::ZERO;
            }
            let mut sum = [0.0f64; 6];
            let mut all = [0.0f64; 6];
            let mut n = 0usize;
            for (p, first) in pairs.incident(i) {
                let (a, b) = pairs.pair(p);
                let partner = if first { b } else { a };
                let off = if first { 0 } else { 6 };
                for c in 0..6 {
                    all[c] += candidates[p][off + c];
                }
                if mask.get(partner) {
                    n += 1;
                    for c in 0..6 {
                        sum[c] += candidates[p][off + c];
                    }
                }
            }
            let (sum, n) = if n == 0 { (all, k - 1) } else { (sum, n) };
            Box6::from_array(std::array::from_fn(|c| (sum[c] / n as f64) as f32))
        })
        .collect()
}

/// `z = mu + exp(log_sigma) ⊙ noise` with `noise` a constant `[batch, L]` draw.
pub fn reparameterize<T: Real>(tape: &mut Tape<T>, dist: &LatentDistribution, noise: Tensor<T>) -> Result<Var, TensorError> {
    let sigma = tape.exp(dist.log_sigma)?;
    let n = tape.constant(noise);
    let sn = tape.mul(sigma, n)?;
    tape.add(dist.mu, sn)
}

#[cfg(test)]
mod tests;
