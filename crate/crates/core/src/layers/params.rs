//! Named parameter storage and the `SAGW` checkpoint format.
//!
//! Checkpoint layout, little-endian: magic `SAGW`, u32 version (1), u32
//! tensor count, then per tensor: u32 name length, UTF-8 name, u32 ndim,
//! u32 dims..., f32 data.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::LayerError;
use crate::autodiff::{Real, Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SAGW";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Register a tensor; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Weight drawn uniformly in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn add_glorot(
        &mut self,
        rng: &mut ChaCha8Rng,
        name: impl Into<String>,
        dims: &[usize],
        fan_in: usize,
        fan_out: usize,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
        self.add(name, Tensor::new(dims.to_vec(), data).expect("dims match data"))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, dims: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(dims))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Record every parameter on `tape`, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Replace values by name from `other`; names and dims must match exactly.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<(), LayerError> {
        if other.len() != self.len() {
            return Err(LayerError::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                other.len(),
                self.len()
            )));
        }
        for (name, value) in other.iter() {
            let id = self
                .find(name)
                .ok_or_else(|| LayerError::Checkpoint(format!("unknown tensor {name}")))?;
            if self.get(id).dims() != value.dims() {
                return Err(LayerError::Checkpoint(format!(
                    "tensor {name} has dims {:?}, model expects {:?}",
                    value.dims(),
                    self.get(id).dims()
                )));
            }
            self.tensors[id.0] = value.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (name, t) in self.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LayerError> {
        let mut pos = 0usize;
        let err = |pos: usize, what: &str| LayerError::Checkpoint(format!("byte {pos}: {what}"));
        let mut take = |n: usize| -> Result<(&[u8], usize), LayerError> {
            if pos + n > bytes.len() {
                return Err(err(pos, "truncated"));
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok((s, pos - n))
        };
        let (magic, _) = take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(err(0, "bad magic"));
        }
        let read_u32 = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;
        let (v, at) = take(4)?;
        if read_u32(v) != CHECKPOINT_VERSION as usize {
            return Err(err(at, "unsupported version"));
        }
        let count = read_u32(take(4)?.0);
        let mut store = Self::new();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let len = read_u32(take(4)?.0);
            let (name, at) = take(len)?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| err(at, "name is not UTF-8"))?;
            if !seen.insert(name.clone()) {
                return Err(err(at, "duplicate tensor name"));
            }
            let ndim = read_u32(take(4)?.0);
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(read_u32(take(4)?.0));
            }
            let n: usize = dims.iter().product();
            let (raw, at) = take(4 * n)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| err(at, &e.to_string()))?;
            store.add(name, t);
        }
        if pos != bytes.len() {
            return Err(err(pos, "trailing bytes"));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), LayerError> {
        fs::write(path, self.to_bytes()).map_err(|e| LayerError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, LayerError> {
        let bytes = fs::read(path).map_err(|e| LayerError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles in [`ParamStore`] registration order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::<f32>::new();
        s.add_glorot(&mut rng, "a.w", &[3, 4], 3, 4);
        s.add_zeros("a.b", &[4]);
        s.add_glorot(&mut rng, "conv", &[4, 4, 4, 1, 2], 64, 128);
        let bytes = s.to_bytes();
        let back = ParamStore::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add_zeros("x", &[2]);
        let mut bytes = s.to_bytes();
        bytes[0] = b'X';
        assert!(ParamStore::<f32>::from_bytes(&bytes).is_err());
        let bytes = s.to_bytes();
        assert!(ParamStore::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn glorot_bounds_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = ParamStore::<f64>::new();
        let id = s.add_glorot(&mut rng, "w", &[10, 20], 10, 20);
        let bound = (6.0f64 / 30.0).sqrt();
        assert!(s.get(id).data().iter().all(|v| v.abs() < bound));
    }
}
