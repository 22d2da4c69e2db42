//! Flat on-disk checkpoint container.
//!
//! A checkpoint is a directory with three files:
//!
//! * `meta.json`: version, config digest, round, seeds, a tensor index
//!   (`group`, `name`, `dtype`, `shape`, byte `offset` and `length`, roles)
//!   and a mask index (`name`, `offset`, `length` in bytes)
//! * `tensors.bin`: little-endian f32 values, concatenated in index order
//!   (all of `theta0`, then all of `theta`)
//! * `masks.bin`: one byte (0 or 1) per prunable element, in index order

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::pruning::{MaskLayer, SparsityMask};
use crate::store::{NamedTensorStore, ParamEntry};

pub const FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.json";
pub const TENSORS_FILE: &str = "tensors.bin";
pub const MASKS_FILE: &str = "masks.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct RunCheckpoint {
    pub theta0: NamedTensorStore,
    pub theta: NamedTensorStore,
    pub mask: SparsityMask,
    pub round: usize,
    pub seeds: BTreeMap<String, u64>,
    pub config_digest: String,
    /// Free-form JSON carried along (evaluation records, traces).
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorIndex {
    pub group: String,
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    pub prunable: bool,
    pub output_layer: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskIndex {
    pub name: String,
    pub output_layer: bool,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub version: u32,
    pub config_digest: String,
    pub round: usize,
    pub seeds: BTreeMap<String, u64>,
    pub tensors: Vec<TensorIndex>,
    pub masks: Vec<MaskIndex>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

const GROUPS: [&str; 2] = ["theta0", "theta"];

pub fn write_checkpoint(dir: &Path, ckpt: &RunCheckpoint) -> Result<()> {
    ckpt.theta0.check_compatible(&ckpt.theta)?;
    ckpt.mask.check_aligned(&ckpt.theta)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut tensors = Vec::new();
    let mut bytes = Vec::with_capacity(8 * ckpt.theta.total_count());
    for (group, store) in GROUPS.iter().zip([&ckpt.theta0, &ckpt.theta]) {
        for e in store.iter() {
            let offset = bytes.len() as u64;
            for v in e.tensor.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorIndex {
                group: group.to_string(),
                name: e.name.clone(),
                dtype: "f32".into(),
                shape: e.tensor.shape().to_vec(),
                offset,
                length: bytes.len() as u64 - offset,
                prunable: e.prunable,
                output_layer: e.output_layer,
            });
        }
    }
    let mut mask_bytes = Vec::with_capacity(ckpt.mask.total());
    let masks = ckpt
        .mask
        .layers
        .iter()
        .map(|l| {
            let offset = mask_bytes.len() as u64;
            mask_bytes.extend(l.keep.iter().map(|&k| (k != 0) as u8));
            MaskIndex {
                name: l.name.clone(),
                output_layer: l.output_layer,
                offset,
                length: l.keep.len() as u64,
            }
        })
        .collect();
    let meta = Meta {
        version: FORMAT_VERSION,
        config_digest: ckpt.config_digest.clone(),
        round: ckpt.round,
        seeds: ckpt.seeds.clone(),
        tensors,
        masks,
        extra: ckpt.extra.clone(),
    };
    let write = |name: &str, data: &[u8]| {
        let path = dir.join(name);
        fs::write(&path, data).map_err(|e| Error::io(&path, e))
    };
    write(TENSORS_FILE, &bytes)?;
    write(MASKS_FILE, &mask_bytes)?;
    // meta.json last: its presence marks a complete checkpoint.
    write(META_FILE, &serde_json::to_vec_pretty(&meta)?)
}

pub fn read_meta(dir: &Path) -> Result<Meta> {
    let path = dir.join(META_FILE);
    let meta: Meta = serde_json::from_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
    if meta.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format version {}",
            path.display(),
            meta.version
        )));
    }
    Ok(meta)
}

/// Reads a checkpoint; when `expected_digest` is given, a different stored
/// digest is an error.
pub fn read_checkpoint(dir: &Path, expected_digest: Option<&str>) -> Result<RunCheckpoint> {
    let meta = read_meta(dir)?;
    if let Some(exp) = expected_digest {
        if exp != meta.config_digest {
            return Err(Error::DigestMismatch {
                expected: exp.to_string(),
                found: meta.config_digest,
            });
        }
    }
    let read = |name: &str| {
        let path = dir.join(name);
        fs::read(&path).map_err(|e| Error::io(&path, e))
    };
    let bytes = read(TENSORS_FILE)?;
    let mask_bytes = read(MASKS_FILE)?;

    let mut expected_offset = 0u64;
    let mut stores = [NamedTensorStore::new(), NamedTensorStore::new()];
    for t in &meta.tensors {
        if t.dtype != "f32" {
            return Err(Error::Checkpoint(format!("tensor `{}` has unsupported dtype {}", t.name, t.dtype)));
        }
        let n: usize = t.shape.iter().product();
        if t.offset != expected_offset || t.length != 4 * n as u64 || t.offset + t.length > bytes.len() as u64 {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` index (offset {}, length {}) is inconsistent",
                t.name, t.offset, t.length
            )));
        }
        expected_offset += t.length;
        let raw = &bytes[t.offset as usize..(t.offset + t.length) as usize];
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        let g = GROUPS
            .iter()
            .position(|&g| g == t.group)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor group `{}`", t.group)))?;
        stores[g].push(ParamEntry {
            name: t.name.clone(),
            tensor: Tensor::new(t.shape.clone(), data)?,
            prunable: t.prunable,
            output_layer: t.output_layer,
        })?;
    }
    if expected_offset != bytes.len() as u64 {
        return Err(Error::Checkpoint(format!(
            "{TENSORS_FILE} has {} bytes, index covers {expected_offset}",
            bytes.len()
        )));
    }
    let mut expected_offset = 0u64;
    let mut layers = Vec::with_capacity(meta.masks.len());
    for m in &meta.masks {
        if m.offset != expected_offset || m.offset + m.length > mask_bytes.len() as u64 {
            return Err(Error::Checkpoint(format!("mask `{}` index is inconsistent", m.name)));
        }
        expected_offset += m.length;
        let keep = mask_bytes[m.offset as usize..(m.offset + m.length) as usize].to_vec();
        if keep.iter().any(|&b| b > 1) {
            return Err(Error::Checkpoint(format!("mask `{}` holds bytes other than 0/1", m.name)));
        }
        layers.push(MaskLayer {
            name: m.name.clone(),
            output_layer: m.output_layer,
            keep,
        });
    }
    if expected_offset != mask_bytes.len() as u64 {
        return Err(Error::Checkpoint(format!("{MASKS_FILE} length does not match its index")));
    }
    let [theta0, theta] = stores;
    let ckpt = RunCheckpoint {
        theta0,
        theta,
        mask: SparsityMask { layers },
        round: meta.round,
        seeds: meta.seeds,
        config_digest: meta.config_digest,
        extra: meta.extra,
    };
    ckpt.theta0.check_compatible(&ckpt.theta)?;
    ckpt.mask.check_aligned(&ckpt.theta)?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_checkpoint(n_tensors: usize, seed: u64) -> RunCheckpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta0 = NamedTensorStore::new();
        for i in 0..n_tensors {
            let rank = rng.random_range(1..=4);
            let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=4)).collect();
            let n = shape.iter().product();
            // Include awkward bit patterns: subnormals, negative zero, extremes.
            let data: Vec<f32> = (0..n)
                .map(|_| match rng.random_range(0..8) {
                    0 => -0.0,
                    1 => f32::MIN_POSITIVE / 3.0,
                    2 => f32::MAX,
                    _ => rng.random_range(-10.0..10.0),
                })
                .collect();
            theta0
                .push(ParamEntry {
                    name: format!("t{i}"),
                    tensor: Tensor::new(shape, data).unwrap(),
                    prunable: rng.random_bool(0.7),
                    output_layer: i == 0,
                })
                .unwrap();
        }
        let mut theta = theta0.clone();
        for i in 0..theta.len() {
            for v in theta.tensor_mut(i).data_mut() {
                *v *= 0.5;
            }
        }
        let mut mask = SparsityMask::ones(&theta);
        for l in &mut mask.layers {
            for k in &mut l.keep {
                *k = rng.random_bool(0.5) as u8;
            }
        }
        RunCheckpoint {
            theta0,
            theta,
            mask,
            round: 3,
            seeds: BTreeMap::from([("train".to_string(), seed)]),
            config_digest: "abc".into(),
            extra: serde_json::json!({"note": 1}),
        }
    }

    fn bits(s: &NamedTensorStore) -> Vec<u32> {
        s.iter().flat_map(|e| e.tensor.data().iter().map(|v| v.to_bits())).collect()
    }

    #[test]
    fn thousand_tensor_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = random_checkpoint(1000, 1);
        write_checkpoint(dir.path(), &ckpt).unwrap();
        let back = read_checkpoint(dir.path(), Some("abc")).unwrap();
        assert_eq!(bits(&back.theta0), bits(&ckpt.theta0));
        assert_eq!(bits(&back.theta), bits(&ckpt.theta));
        assert_eq!(back.mask, ckpt.mask);
        assert_eq!(back.round, 3);
        assert_eq!(back.extra, ckpt.extra);
        let meta = read_meta(dir.path()).unwrap();
        let mut end = 0;
        for t in &meta.tensors {
            assert_eq!(t.offset, end);
            end += t.length;
        }
    }

    #[test]
    fn digest_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_checkpoint(dir.path(), &random_checkpoint(3, 2)).unwrap();
        assert!(matches!(
            read_checkpoint(dir.path(), Some("other")),
            Err(Error::DigestMismatch { .. })
        ));
        assert!(read_checkpoint(dir.path(), None).is_ok());
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_checkpoint(dir.path(), &random_checkpoint(3, 3)).unwrap();
        let p = dir.path().join(TENSORS_FILE);
        let mut b = fs::read(&p).unwrap();
        b.pop();
        fs::write(&p, b).unwrap();
        assert!(matches!(read_checkpoint(dir.path(), None), Err(Error::Checkpoint(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn round_trip_is_bit_exact(n in 1usize..40, seed in any::<u64>()) {
            let dir = tempfile::tempdir().unwrap();
            let ckpt = random_checkpoint(n, seed);
            write_checkpoint(dir.path(), &ckpt).unwrap();
            let back = read_checkpoint(dir.path(), None).unwrap();
            prop_assert_eq!(bits(&back.theta), bits(&ckpt.theta));
            prop_assert_eq!(back.mask, ckpt.mask);
        }
    }
}
