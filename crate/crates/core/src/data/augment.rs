use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, ImagePair};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::seed::{derive, stream};

fn crop(t: &Tensor<f32>, dy: usize, dx: usize, patch: usize) -> Tensor<f32> {
    let (_, w, c) = t.hwc().expect("validated image");
    let mut out = Vec::with_capacity(patch * patch * c);
    for y in dy..dy + patch {
        out.extend_from_slice(&t.data()[(y * w + dx) * c..(y * w + dx + patch) * c]);
    }
    Tensor::new(vec![patch, patch, c], out).expect("crop shape")
}

/// Aligned random crop; returns the pair and the `(dy, dx)` offset used.
pub fn crop_patch(pair: &ImagePair, patch: usize, seed: u64) -> Result<(ImagePair, (usize, usize))> {
    let (h, w, _) = pair.degraded.hwc()?;
    if patch == 0 || patch % 8 != 0 {
        return Err(Error::InvalidArgument(format!("patch {patch} must be a positive multiple of 8")));
    }
    if patch > h || patch > w {
        return Err(Error::InvalidArgument(format!("patch {patch} is larger than the {h}x{w} image")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dy = rng.random_range(0..=h - patch);
    let dx = rng.random_range(0..=w - patch);
    let out = ImagePair {
        degraded: crop(&pair.degraded, dy, dx, patch),
        clean: crop(&pair.clean, dy, dx, patch),
        ..pair.clone()
    };
    Ok((out, (dy, dx)))
}

pub fn flip_horizontal(t: &Tensor<f32>) -> Tensor<f32> {
    let (h, w, c) = t.hwc().expect("image tensor");
    Tensor::from_fn(&[h, w, c], |i| {
        let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
        t.data()[(y * w + (w - 1 - x)) * c + ch]
    })
}

pub fn flip_vertical(t: &Tensor<f32>) -> Tensor<f32> {
    let (h, w, c) = t.hwc().expect("image tensor");
    Tensor::from_fn(&[h, w, c], |i| {
        let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
        t.data()[((h - 1 - y) * w + x) * c + ch]
    })
}

/// Independent horizontal and vertical flips, each with probability 0.5,
/// applied identically to both images.
pub fn augment_flip(pair: &ImagePair, seed: u64) -> ImagePair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fh, fv) = (rng.random_bool(0.5), rng.random_bool(0.5));
    let mut out = pair.clone();
    if fh {
        out.degraded = flip_horizontal(&out.degraded);
        out.clean = flip_horizontal(&out.clean);
    }
    if fv {
        out.degraded = flip_vertical(&out.degraded);
        out.clean = flip_vertical(&out.clean);
    }
    out
}

/// Duplicates smaller datasets until every input contributes as many pairs
/// as the largest: whole copies first, then a seeded sample for the
/// remainder. Each duplicate gets a distinct `copy` index, which feeds the
/// per-sample augmentation seed.
pub fn balance_duplicate(datasets: &[Dataset], seed: u64) -> Result<Dataset> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::InvalidArgument("no datasets to balance".into()))?;
    if let Some(empty) = datasets.iter().position(Dataset::is_empty) {
        return Err(Error::InvalidArgument(format!("dataset {empty} is empty")));
    }
    let target = datasets.iter().map(Dataset::len).max().unwrap_or(0);
    let mut pairs = Vec::with_capacity(target * datasets.len());
    for (d, ds) in datasets.iter().enumerate() {
        let n = ds.len();
        for k in 0..target / n {
            pairs.extend(ds.pairs.iter().map(|p| ImagePair { copy: p.copy + k as u32, ..p.clone() }));
        }
        let rem = target % n;
        if rem > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[stream::BALANCE, d as u64]));
            let mut picks = rand::seq::index::sample(&mut rng, n, rem).into_vec();
            picks.sort_unstable();
            let copy = (target / n) as u32;
            pairs.extend(picks.into_iter().map(|i| ImagePair {
                copy: ds.pairs[i].copy + copy,
                ..ds.pairs[i].clone()
            }));
        }
    }
    Ok(Dataset::new(pairs, first.split))
}
