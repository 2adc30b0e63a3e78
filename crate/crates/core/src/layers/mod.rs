//! Neural building blocks over the autodiff tape.
//!
//! Layers only hold [`ParamId`]s into a [`ParamStore`]; a forward pass binds
//! the store onto a tape once and passes the resulting [`Bound`] around.
//! Volumes are channel-last, `[n, r, r, r, c]`.

mod params;

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Real, Tape, Tensor, TensorError, Var};

pub use params::{Bound, ParamId, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Debug, Error)]
pub enum LayerError {
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid layer configuration: {0}")]
    Config(String),
}

pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
pub const PAD: usize = 1;

/// Fully-connected layer, `x · W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        output: usize,
    ) -> Self {
        let w = store.add_glorot(rng, format!("{name}.w"), &[input, output], input, output);
        let b = store.add_zeros(format!("{name}.b"), &[output]);
        Self { w, b, input, output }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let m = tape.matmul(x, p.var(self.w))?;
        tape.add_bias(m, p.var(self.b))
    }
}

/// Gated recurrent unit.
///
/// `r = σ(x W_r + b_r + h U_r + c_r)`, `z = σ(x W_z + b_z + h U_z + c_z)`,
/// `n = tanh(x W_n + b_n + r ⊙ (h U_n + c_n))`, `h' = (1 − z) ⊙ n + z ⊙ h`.
/// Gate blocks are laid out `[r | z | n]` along the last axis. A cell built
/// with `input = 0` takes no input and only uses its input biases.
#[derive(Clone, Debug)]
pub struct Gru {
    pub wx: Option<ParamId>,
    pub bx: ParamId,
    pub wh: ParamId,
    pub bh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        let wx = (input > 0).then(|| store.add_glorot(rng, format!("{name}.wx"), &[input, 3 * hidden], input, hidden));
        let bx = store.add_zeros(format!("{name}.bx"), &[3 * hidden]);
        let wh = store.add_glorot(rng, format!("{name}.wh"), &[hidden, 3 * hidden], hidden, hidden);
        let bh = store.add_zeros(format!("{name}.bh"), &[3 * hidden]);
        Self {
            wx,
            bx,
            wh,
            bh,
            input,
            hidden,
        }
    }

    /// One step for a `[rows, hidden]` state and optional `[rows, input]` input.
    pub fn step<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Option<Var>, h: Var) -> Result<Var, TensorError> {
        let rows = tape.dims(h)[0];
        let hd = self.hidden;
        let gx = match (x, self.wx) {
            (Some(x), Some(wx)) => tape.matmul(x, p.var(wx))?,
            (None, None) => tape.constant(Tensor::zeros(&[rows, 3 * hd])),
            _ => {
                return Err(TensorError::Contract(format!(
                    "gru with input width {} called with input {:?}",
                    self.input,
                    x.map(|v| tape.dims(v).to_vec())
                )))
            }
        };
        let gx = tape.add_bias(gx, p.var(self.bx))?;
        let gh = tape.matmul(h, p.var(self.wh))?;
        let gh = tape.add_bias(gh, p.var(self.bh))?;
        let xr = tape.slice_cols(gx, 0, hd)?;
        let xz = tape.slice_cols(gx, hd, hd)?;
        let xn = tape.slice_cols(gx, 2 * hd, hd)?;
        let hr = tape.slice_cols(gh, 0, hd)?;
        let hz = tape.slice_cols(gh, hd, hd)?;
        let hn = tape.slice_cols(gh, 2 * hd, hd)?;
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r)?;
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z)?;
        let rn = tape.mul(r, hn)?;
        let n = tape.add(xn, rn)?;
        let n = tape.tanh(n)?;
        // h' = n + z ⊙ (h − n)
        let d = tape.sub(h, n)?;
        let zd = tape.mul(z, d)?;
        tape.add(n, zd)
    }
}

/// Number of stride-2 layers that take resolution `r` down to side 1.
pub fn conv_depth(r: usize) -> Result<usize, LayerError> {
    if r < 2 || !r.is_power_of_two() {
        return Err(LayerError::Config(format!("resolution {r} is not a power of two ≥ 2")));
    }
    Ok(r.trailing_zeros() as usize)
}

/// Voxel encoder: stride-2 convolutions with tanh down to side 1, then FC.
#[derive(Clone, Debug)]
pub struct GeoEncoder {
    pub convs: Vec<(ParamId, ParamId)>,
    pub fc: Linear,
    pub resolution: usize,
    pub channels: Vec<usize>,
}

impl GeoEncoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        resolution: usize,
        channels: &[usize],
        feature: usize,
    ) -> Result<Self, LayerError> {
        check_channels(resolution, channels)?;
        let k3 = KERNEL * KERNEL * KERNEL;
        let mut cin = 1;
        let mut convs = Vec::new();
        for (i, &cout) in channels.iter().enumerate() {
            let w = store.add_glorot(rng, format!("{name}.conv{i}.w"), &[KERNEL, KERNEL, KERNEL, cin, cout], k3 * cin, k3 * cout);
            let b = store.add_zeros(format!("{name}.conv{i}.b"), &[cout]);
            convs.push((w, b));
            cin = cout;
        }
        let fc = Linear::new(store, rng, &format!("{name}.fc"), cin, feature);
        Ok(Self {
            convs,
            fc,
            resolution,
            channels: channels.to_vec(),
        })
    }

    /// `[n, r, r, r, 1]` occupancies to `[n, feature]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let d = tape.dims(x).to_vec();
        let r = self.resolution;
        if d.len() != 5 || d[1..] != [r, r, r, 1] {
            return Err(TensorError::Shape {
                op: "geo_encode",
                detail: format!("expected [n,{r},{r},{r},1], got {d:?}"),
            });
        }
        let mut h = x;
        for &(w, b) in &self.convs {
            h = tape.conv3d(h, p.var(w), STRIDE, PAD)?;
            h = tape.add_bias(h, p.var(b))?;
            h = tape.tanh(h)?;
        }
        let flat = tape.reshape(h, &[d[0], *self.channels.last().expect("non-empty")])?;
        self.fc.forward(tape, p, flat)
    }
}

/// Voxel decoder mirroring [`GeoEncoder`]; returns logits.
#[derive(Clone, Debug)]
pub struct GeoDecoder {
    pub fc: Linear,
    pub deconvs: Vec<(ParamId, ParamId)>,
    pub resolution: usize,
    pub channels: Vec<usize>,
}

impl GeoDecoder {
    /// `channels` are the encoder widths; the decoder walks them in reverse.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        resolution: usize,
        channels: &[usize],
        feature: usize,
    ) -> Result<Self, LayerError> {
        check_channels(resolution, channels)?;
        let k3 = KERNEL * KERNEL * KERNEL;
        let top = *channels.last().expect("non-empty");
        let fc = Linear::new(store, rng, &format!("{name}.fc"), feature, top);
        let mut widths: Vec<usize> = channels.iter().rev().copied().collect();
        widths.push(1);
        let deconvs = widths
            .windows(2)
            .enumerate()
            .map(|(i, pair)| {
                let (cin, cout) = (pair[0], pair[1]);
                let w = store.add_glorot(rng, format!("{name}.deconv{i}.w"), &[KERNEL, KERNEL, KERNEL, cout, cin], k3 * cin, k3 * cout);
                let b = store.add_zeros(format!("{name}.deconv{i}.b"), &[cout]);
                (w, b)
            })
            .collect();
        Ok(Self {
            fc,
            deconvs,
            resolution,
            channels: channels.to_vec(),
        })
    }

    /// `[n, feature]` to `[n, r, r, r, 1]` logits; occupancy is their sigmoid.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, f: Var) -> Result<Var, TensorError> {
        let n = tape.dims(f)[0];
        let top = *self.channels.last().expect("non-empty");
        let h = self.fc.forward(tape, p, f)?;
        let h = tape.tanh(h)?;
        let mut h = tape.reshape(h, &[n, 1, 1, 1, top])?;
        let last = self.deconvs.len() - 1;
        for (i, &(w, b)) in self.deconvs.iter().enumerate() {
            h = tape.conv_transpose3d(h, p.var(w), STRIDE, PAD)?;
            h = tape.add_bias(h, p.var(b))?;
            if i < last {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }
}

fn check_channels(resolution: usize, channels: &[usize]) -> Result<(), LayerError> {
    let depth = conv_depth(resolution)?;
    if channels.len() != depth {
        return Err(LayerError::Config(format!(
            "resolution {resolution} needs {depth} conv layers, got {} channel widths",
            channels.len()
        )));
    }
    if channels.contains(&0) {
        return Err(LayerError::Config("zero channel width".into()));
    }
    Ok(())
}

/// Box-pair encoder: FC + tanh from 12 reals.
#[derive(Clone, Debug)]
pub struct StructEncoder {
    pub fc: Linear,
}

impl StructEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, feature: usize) -> Self {
        Self {
            fc: Linear::new(store, rng, &format!("{name}.fc"), 12, feature),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, pairs: Var) -> Result<Var, TensorError> {
        let h = self.fc.forward(tape, p, pairs)?;
        tape.tanh(h)
    }
}

/// Box-pair decoder: linear FC to 12 reals.
#[derive(Clone, Debug)]
pub struct StructDecoder {
    pub fc: Linear,
}

impl StructDecoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, feature: usize) -> Self {
        Self {
            fc: Linear::new(store, rng, &format!("{name}.fc"), feature, 12),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, f: Var) -> Result<Var, TensorError> {
        self.fc.forward(tape, p, f)
    }
}

/// Sigmoid gate over a concatenated feature pair: `σ([a, b] · W + c)`.
#[derive(Clone, Debug)]
pub struct AttentionGate {
    pub fc: Linear,
}

impl AttentionGate {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, feature: usize) -> Self {
        Self {
            fc: Linear::new(store, rng, &format!("{name}.fc"), 2 * feature, feature),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, a: Var, b: Var) -> Result<Var, TensorError> {
        let ab = tape.concat_cols(&[a, b])?;
        let g = self.fc.forward(tape, p, ab)?;
        tape.sigmoid(g)
    }
}

/// Row bookkeeping between part features and pair features.
///
/// Part rows are `i * batch + b`, pair rows are `p * batch + b` with `p`
/// the lexicographic pair position. Every pair has two incidences, one per
/// endpoint; incidences of pairs touching an absent part are dropped.
#[derive(Clone, Debug)]
pub struct Incidence {
    pub part_rows: usize,
    pub pair_rows: usize,
    /// Part row of the endpoint, per incidence.
    pub part: Arc<[usize]>,
    /// Pair row, per incidence.
    pub pair: Arc<[usize]>,
}

impl Incidence {
    /// `masks[b][i]` is the presence of part `i` in batch item `b`.
    pub fn new(k: usize, masks: &[Vec<bool>]) -> Result<Self, TensorError> {
        if k < 2 {
            return Err(TensorError::Contract(format!("incidence needs k ≥ 2, got {k}")));
        }
        let batch = masks.len();
        if let Some(m) = masks.iter().find(|m| m.len() != k) {
            return Err(TensorError::Contract(format!("mask of length {} for k = {k}", m.len())));
        }
        let mut part = Vec::new();
        let mut pair = Vec::new();
        let mut p = 0;
        for i in 0..k {
            for j in i + 1..k {
                for (b, m) in masks.iter().enumerate() {
                    if m[i] && m[j] {
                        for end in [i, j] {
                            part.push(end * batch + b);
                            pair.push(p * batch + b);
                        }
                    }
                }
                p += 1;
            }
        }
        Ok(Self {
            part_rows: k * batch,
            pair_rows: p * batch,
            part: part.into(),
            pair: pair.into(),
        })
    }
}

/// Gated message exchange between the geometry and structure branches.
///
/// `m_i = Σ_j f_g([h_i, h_ij]) ⊙ h_ij` and
/// `m_ij = f_s([h_ij, h_i]) ⊙ h_i + f_s([h_ij, h_j]) ⊙ h_j`.
pub fn attention_messages<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    f_g: &AttentionGate,
    f_s: &AttentionGate,
    geo: Var,
    structure: Var,
    inc: &Incidence,
) -> Result<(Var, Var), TensorError> {
    let gd = tape.dims(geo).to_vec();
    let sd = tape.dims(structure).to_vec();
    if gd.len() != 2 || sd.len() != 2 || gd[0] != inc.part_rows || sd[0] != inc.pair_rows || gd[1] != sd[1] {
        return Err(TensorError::Contract(format!(
            "attention over geometry {gd:?} and structure {sd:?} with {} part rows and {} pair rows",
            inc.part_rows, inc.pair_rows
        )));
    }
    if inc.part.is_empty() {
        let mg = tape.constant(Tensor::zeros(&gd));
        let ms = tape.constant(Tensor::zeros(&sd));
        return Ok((mg, ms));
    }
    let h_i = tape.gather_rows(geo, inc.part.clone())?;
    let h_ij = tape.gather_rows(structure, inc.pair.clone())?;
    let g = f_g.forward(tape, p, h_i, h_ij)?;
    let to_part = tape.mul(g, h_ij)?;
    let m_geo = tape.scatter_add_rows(to_part, inc.part.clone(), inc.part_rows)?;
    let s = f_s.forward(tape, p, h_ij, h_i)?;
    let to_pair = tape.mul(s, h_i)?;
    let m_str = tape.scatter_add_rows(to_pair, inc.pair.clone(), inc.pair_rows)?;
    Ok((m_geo, m_str))
}

#[cfg(test)]
mod tests;
