//! On-disk dataset: a directory holding `manifest.json` and one binary
//! file per shape.
//!
//! Shape file layout, little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `SAGS` |
//! | 4 | u32 version (1) |
//! | 4 | u32 `k` |
//! | 4 | u32 `r` |
//! | k | mask bytes, 0 or 1 |
//! | 24k | per part: f32 cx, cy, cz, sx, sy, sz |
//! | k * ceil(r^3 / 8) | per part: occupancy bits, voxel `n` in bit `n % 8` of byte `n / 8` |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{class_id, class_name, Box6, PartMask, ShapeError, ShapeSample, VoxelGrid};

pub const SHAPE_MAGIC: &[u8; 4] = b"SAGS";
pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub class_name: String,
    pub k: usize,
    pub resolution: usize,
    pub count: usize,
    pub files: Vec<String>,
}

fn io_err(path: &Path, source: std::io::Error) -> ShapeError {
    ShapeError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write `samples` into directory `dir` (created if missing).
pub fn save_dataset(samples: &[ShapeSample], dir: &Path) -> Result<DatasetManifest, ShapeError> {
    let (k, r, class) = match samples.first() {
        Some(s) => (s.k(), s.resolution(), s.class_id),
        None => (0, 0, 0),
    };
    for (n, s) in samples.iter().enumerate() {
        if s.k() != k || s.resolution() != r || s.class_id != class {
            return Err(ShapeError::Precondition(format!(
                "sample {n} has k={} r={} class={}, dataset has k={k} r={r} class={class}",
                s.k(),
                s.resolution(),
                s.class_id
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut files = Vec::with_capacity(samples.len());
    for (n, s) in samples.iter().enumerate() {
        let name = format!("shape_{n:06}.sags");
        let bytes = encode_shape(s)?;
        let path = dir.join(&name);
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        files.push(name);
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        class_name: if samples.is_empty() { String::new() } else { class_name(class) },
        k,
        resolution: r,
        count: samples.len(),
        files,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| ShapeError::Manifest(e.to_string()))?;
    fs::write(&path, json).map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}

/// Read every shape listed in `dir/manifest.json`.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<ShapeSample>), ShapeError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| ShapeError::Manifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ShapeError::Manifest(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    if manifest.count != manifest.files.len() {
        return Err(ShapeError::Manifest(format!(
            "count {} but {} files listed",
            manifest.count,
            manifest.files.len()
        )));
    }
    let class = if manifest.count == 0 {
        0
    } else {
        class_id(&manifest.class_name)
            .ok_or_else(|| ShapeError::Manifest(format!("unknown class name {:?}", manifest.class_name)))?
    };
    let mut samples = Vec::with_capacity(manifest.count);
    for name in &manifest.files {
        let file = dir.join(name);
        let bytes = fs::read(&file).map_err(|e| io_err(&file, e))?;
        let sample = decode_shape(&bytes, name, class, Some((manifest.k, manifest.resolution)))?;
        samples.push(sample);
    }
    Ok((manifest, samples))
}

pub(crate) fn encode_shape(s: &ShapeSample) -> Result<Vec<u8>, ShapeError> {
    let k = s.k();
    let r = s.resolution();
    let packed = r.pow(3).div_ceil(8);
    let mut out = Vec::with_capacity(16 + k * (1 + 24 + packed));
    out.extend_from_slice(SHAPE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(k as u32).to_le_bytes());
    out.extend_from_slice(&(r as u32).to_le_bytes());
    out.extend(s.mask.flags().iter().map(|&b| b as u8));
    for b in &s.boxes {
        for v in b.to_array() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for (i, grid) in s.parts.iter().enumerate() {
        if !grid.is_binary() {
            return Err(ShapeError::Precondition(format!("part {i} voxels are not binary")));
        }
        let mut bytes = vec![0u8; packed];
        for (n, &v) in grid.values().iter().enumerate() {
            if v == 1.0 {
                bytes[n / 8] |= 1 << (n % 8);
            }
        }
        out.extend_from_slice(&bytes);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    file: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, detail: impl Into<String>) -> ShapeError {
        ShapeError::Format {
            file: self.file.to_string(),
            offset: offset as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ShapeError> {
        if self.offset + n > self.bytes.len() {
            return Err(self.err(
                self.offset,
                format!("truncated: need {n} bytes, {} remain", self.bytes.len() - self.offset),
            ));
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ShapeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32, ShapeError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub(crate) fn decode_shape(
    bytes: &[u8],
    file: &str,
    class: u32,
    expect: Option<(usize, usize)>,
) -> Result<ShapeSample, ShapeError> {
    let mut rd = Reader { bytes, offset: 0, file };
    let magic = rd.take(4)?;
    if magic != SHAPE_MAGIC {
        return Err(rd.err(0, format!("bad magic {magic:?}")));
    }
    let version = rd.u32()?;
    if version != FORMAT_VERSION {
        return Err(rd.err(4, format!("unsupported version {version}")));
    }
    let k = rd.u32()? as usize;
    let r = rd.u32()? as usize;
    if let Some((ek, er)) = expect {
        if k != ek {
            return Err(rd.err(8, format!("k={k} but manifest says {ek}")));
        }
        if r != er {
            return Err(rd.err(12, format!("r={r} but manifest says {er}")));
        }
    }
    if k == 0 || r == 0 {
        return Err(rd.err(8, "k and r must be positive"));
    }
    let mask_at = rd.offset;
    let mask_bytes = rd.take(k)?;
    let mut flags = Vec::with_capacity(k);
    for (i, &b) in mask_bytes.iter().enumerate() {
        match b {
            0 => flags.push(false),
            1 => flags.push(true),
            _ => return Err(rd.err(mask_at + i, format!("mask byte {b} is not 0 or 1"))),
        }
    }
    let mut boxes = Vec::with_capacity(k);
    for _ in 0..k {
        let mut v = [0f32; 6];
        for x in &mut v {
            *x = rd.f32()?;
        }
        boxes.push(Box6::from_array(v));
    }
    let packed = r.pow(3).div_ceil(8);
    let mut parts = Vec::with_capacity(k);
    for _ in 0..k {
        let bits = rd.take(packed)?;
        let values = (0..r.pow(3))
            .map(|n| ((bits[n / 8] >> (n % 8)) & 1) as f32)
            .collect();
        parts.push(VoxelGrid::from_values(r, values)?);
    }
    if rd.offset != bytes.len() {
        return Err(rd.err(rd.offset, format!("{} trailing bytes", bytes.len() - rd.offset)));
    }
    // keep decoded bytes authoritative: no zeroing here, so load(save(x)) == x
    Ok(ShapeSample {
        class_id: class,
        parts,
        boxes,
        mask: PartMask::new(flags),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sample(rng: &mut impl Rng, k: usize, r: usize) -> ShapeSample {
        let mut mask: Vec<bool> = (0..k).map(|_| rng.random_bool(0.8)).collect();
        mask[0] = true;
        let parts = (0..k)
            .map(|_| {
                VoxelGrid::from_values(r, (0..r.pow(3)).map(|_| rng.random_bool(0.4) as u8 as f32).collect()).unwrap()
            })
            .collect();
        let boxes = (0..k)
            .map(|_| Box6::from_array(std::array::from_fn(|_| rng.random::<f32>())))
            .collect();
        ShapeSample::new(0, parts, boxes, PartMask::new(mask)).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<_> = (0..3).map(|_| random_sample(&mut rng, 3, 5)).collect();
        let m = save_dataset(&samples, dir.path()).unwrap();
        assert_eq!(m.count, 3);
        let (m2, back) = load_dataset(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(back, samples);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(encode_shape(a).unwrap(), encode_shape(b).unwrap());
        }
    }

    #[test]
    fn empty_dataset_has_zero_count() {
        let dir = tempfile::tempdir().unwrap();
        let m = save_dataset(&[], dir.path()).unwrap();
        assert_eq!(m.count, 0);
        let (_, back) = load_dataset(dir.path()).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn corrupted_magic_reports_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = save_dataset(&[random_sample(&mut rng, 2, 4)], dir.path()).unwrap();
        let file = dir.path().join(&m.files[0]);
        let mut bytes = fs::read(&file).unwrap();
        bytes[1] = b'X';
        fs::write(&file, bytes).unwrap();
        match load_dataset(dir.path()) {
            Err(ShapeError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_and_header_mismatch_are_positioned() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_sample(&mut rng, 2, 4);
        let bytes = encode_shape(&s).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        match decode_shape(cut, "t", 0, None) {
            Err(ShapeError::Format { offset, .. }) => assert!(offset > 16),
            other => panic!("{other:?}"),
        }
        match decode_shape(&bytes, "t", 0, Some((3, 4))) {
            Err(ShapeError::Format { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("{other:?}"),
        }
        match decode_shape(&bytes, "t", 0, Some((2, 8))) {
            Err(ShapeError::Format { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("{other:?}"),
        }
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        match decode_shape(&bad_version, "t", 0, None) {
            Err(ShapeError::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mixed_k_is_rejected_on_save() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_sample(&mut rng, 2, 4);
        let b = random_sample(&mut rng, 3, 4);
        assert!(matches!(save_dataset(&[a, b], dir.path()), Err(ShapeError::Precondition(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn encode_decode_encode_is_stable(seed in any::<u64>(), k in 2usize..5, r in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_sample(&mut rng, k, r);
            let bytes = encode_shape(&s).unwrap();
            let back = decode_shape(&bytes, "p", 0, Some((k, r))).unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(encode_shape(&back).unwrap(), bytes);
        }
    }
}
