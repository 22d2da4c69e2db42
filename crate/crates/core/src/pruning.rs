//! Mask algebra and magnitude/random pruning with rewinding.
//!
//! Every prune step removes an exact count, `floor(rate · survivors)`, of the
//! currently surviving entries. Already-pruned entries never re-enter the
//! ranking. Ties in magnitude are broken by enumeration order of the tensor,
//! then by element index, so masks are fully deterministic.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::NamedTensorStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Global,
    Layerwise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    pub rate: f64,
    pub target_sparsity: f64,
    pub scope: Scope,
    pub output_layer_factor: f64,
    pub max_rounds: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            rate: 0.2,
            target_sparsity: 0.9,
            scope: Scope::Global,
            output_layer_factor: 0.5,
            max_rounds: 15,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(Error::InvalidArgument(format!("prune rate must be in (0,1), got {}", self.rate)));
        }
        if !(self.target_sparsity > 0.0 && self.target_sparsity < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "target sparsity must be in (0,1), got {}",
                self.target_sparsity
            )));
        }
        if !(self.output_layer_factor > 0.0 && self.output_layer_factor <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "output layer factor must be in (0,1], got {}",
                self.output_layer_factor
            )));
        }
        Ok(())
    }
}

/// Keep-flags for one prunable tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskLayer {
    pub name: String,
    pub output_layer: bool,
    /// 1 = surviving, 0 = pruned.
    pub keep: Vec<u8>,
}

impl MaskLayer {
    pub fn surviving(&self) -> usize {
        self.keep.iter().filter(|&&k| k != 0).count()
    }
}

/// Binary mask over the prunable tensors of a store, in enumeration order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityMask {
    pub layers: Vec<MaskLayer>,
}

impl SparsityMask {
    /// All-ones mask aligned with the prunable tensors of `store`.
    pub fn ones(store: &NamedTensorStore) -> Self {
        Self::filled(store, 1)
    }

    pub fn zeros(store: &NamedTensorStore) -> Self {
        Self::filled(store, 0)
    }

    fn filled(store: &NamedTensorStore, v: u8) -> Self {
        SparsityMask {
            layers: store
                .iter()
                .filter(|e| e.prunable)
                .map(|e| MaskLayer {
                    name: e.name.clone(),
                    output_layer: e.output_layer,
                    keep: vec![v; e.tensor.len()],
                })
                .collect(),
        }
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(|l| l.keep.len()).sum()
    }

    pub fn surviving(&self) -> usize {
        self.layers.iter().map(MaskLayer::surviving).sum()
    }

    pub fn layer(&self, name: &str) -> Option<&MaskLayer> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// True when every surviving entry of `self` also survives in `prev`.
    pub fn is_subset_of(&self, prev: &SparsityMask) -> bool {
        self.layers.len() == prev.layers.len()
            && self.layers.iter().zip(&prev.layers).all(|(a, b)| {
                a.keep.len() == b.keep.len() && a.keep.iter().zip(&b.keep).all(|(&x, &y)| x == 0 || y != 0)
            })
    }

    /// Checks one-to-one alignment with the prunable tensors of `store`.
    pub fn check_aligned(&self, store: &NamedTensorStore) -> Result<()> {
        let prunable: Vec<_> = store.iter().filter(|e| e.prunable).collect();
        if prunable.len() != self.layers.len() {
            return Err(Error::Alignment(format!(
                "mask has {} layers, store has {} prunable tensors",
                self.layers.len(),
                prunable.len()
            )));
        }
        for (l, e) in self.layers.iter().zip(prunable) {
            if l.name != e.name || l.keep.len() != e.tensor.len() {
                return Err(Error::Alignment(format!(
                    "mask layer `{}` ({} entries) does not match tensor `{}` ({} entries)",
                    l.name,
                    l.keep.len(),
                    e.name,
                    e.tensor.len()
                )));
            }
        }
        Ok(())
    }
}

/// `1 − surviving / total` over prunable entries.
pub fn sparsity(mask: &SparsityMask) -> f64 {
    let total = mask.total();
    if total == 0 {
        return 0.0;
    }
    1.0 - mask.surviving() as f64 / total as f64
}

/// `floor(rate · s)`, guarded against `0.29 · 100 = 28.999…` style round-off.
pub fn prune_count(rate: f64, surviving: usize) -> usize {
    let raw = rate * surviving as f64;
    ((raw + 1e-9).floor() as usize).min(surviving)
}

/// Surviving prunable entries as `(|value|, layer, index)`, in enumeration order.
fn survivors(theta: &NamedTensorStore, mask: &SparsityMask) -> Result<Vec<(f32, usize, usize)>> {
    mask.check_aligned(theta)?;
    let mut out = Vec::with_capacity(mask.surviving());
    for (li, (layer, entry)) in mask.layers.iter().zip(theta.iter().filter(|e| e.prunable)).enumerate() {
        for (i, (&k, &v)) in layer.keep.iter().zip(entry.tensor.data()).enumerate() {
            if k != 0 {
                out.push((v.abs(), li, i));
            }
        }
    }
    Ok(out)
}

fn prune_smallest(mut pool: Vec<(f32, usize, usize)>, count: usize, mask: &mut SparsityMask) {
    if count == 0 {
        return;
    }
    // Pool is already in (layer, index) order; a stable sort keeps that as the tie-break.
    pool.sort_by(|a, b| a.0.total_cmp(&b.0));
    for &(_, li, i) in &pool[..count] {
        mask.layers[li].keep[i] = 0;
    }
}

/// Prunes the `floor(p · s)` smallest-magnitude survivors pooled across all layers.
pub fn prune_step_global(theta: &NamedTensorStore, mask: &SparsityMask, p: f64) -> Result<SparsityMask> {
    let pool = survivors(theta, mask)?;
    let count = prune_count(p, pool.len());
    if count == 0 {
        log::warn!("global prune step removes nothing (p = {p}, {} survivors)", pool.len());
    }
    let mut next = mask.clone();
    prune_smallest(pool, count, &mut next);
    Ok(next)
}

/// Per-layer pruning at rate `p`, or `p · output_layer_factor` for the output layer.
pub fn prune_step_layerwise(
    theta: &NamedTensorStore,
    mask: &SparsityMask,
    p: f64,
    output_layer_factor: f64,
) -> Result<SparsityMask> {
    let pool = survivors(theta, mask)?;
    let mut next = mask.clone();
    let mut per_layer: Vec<Vec<(f32, usize, usize)>> = vec![Vec::new(); mask.layers.len()];
    for item in pool {
        per_layer[item.1].push(item);
    }
    let mut removed = 0;
    for (li, layer_pool) in per_layer.into_iter().enumerate() {
        let rate = if mask.layers[li].output_layer { p * output_layer_factor } else { p };
        let count = prune_count(rate, layer_pool.len());
        removed += count;
        prune_smallest(layer_pool, count, &mut next);
    }
    if removed == 0 {
        log::warn!("layer-wise prune step removes nothing (p = {p})");
    }
    Ok(next)
}

/// Zeroes `floor(p · s)` survivors drawn uniformly without replacement.
pub fn prune_step_random(mask: &SparsityMask, p: f64, seed: u64) -> SparsityMask {
    let alive: Vec<(usize, usize)> = mask
        .layers
        .iter()
        .enumerate()
        .flat_map(|(li, l)| l.keep.iter().enumerate().filter(|(_, &k)| k != 0).map(move |(i, _)| (li, i)))
        .collect();
    let count = prune_count(p, alive.len());
    let mut next = mask.clone();
    if count == 0 {
        log::warn!("random prune step removes nothing (p = {p}, {} survivors)", alive.len());
        return next;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for pick in index::sample(&mut rng, alive.len(), count) {
        let (li, i) = alive[pick];
        next.layers[li].keep[i] = 0;
    }
    next
}

/// Forces masked entries of `theta` to exactly 0; other entries are untouched.
pub fn apply_mask(theta: &mut NamedTensorStore, mask: &SparsityMask) -> Result<()> {
    mask.check_aligned(theta)?;
    let idx: Vec<usize> = (0..theta.len()).filter(|&i| theta.get(i).prunable).collect();
    for (layer, i) in mask.layers.iter().zip(idx) {
        for (v, &k) in theta.tensor_mut(i).data_mut().iter_mut().zip(&layer.keep) {
            if k == 0 {
                *v = 0.0;
            }
        }
    }
    Ok(())
}

/// `θ = m ⊙ θ₀`; non-prunable tensors are copied from `θ₀` unchanged.
pub fn rewind(theta0: &NamedTensorStore, mask: &SparsityMask) -> Result<NamedTensorStore> {
    let mut theta = theta0.clone();
    apply_mask(&mut theta, mask)?;
    Ok(theta)
}

/// `dense / sparse` parameter counts.
pub fn compression_rate(dense_count: f64, sparse_count: f64) -> Result<f64> {
    if !(sparse_count > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sparse parameter count must be positive, got {sparse_count}"
        )));
    }
    Ok(dense_count / sparse_count)
}

/// Formats a compression ratio as e.g. `x7.57`.
pub fn format_compression(rate: f64) -> String {
    format!("x{rate:.2}")
}

/// Idealized density `(1 − p)^k` after `k` rounds.
pub fn expected_density(k: u32, p: f64) -> f64 {
    (1.0 - p).powi(k as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use crate::store::ParamEntry;

    fn store(layers: &[(&str, &[f32], bool)]) -> NamedTensorStore {
        let mut s = NamedTensorStore::new();
        for &(name, vals, out) in layers {
            s.push(ParamEntry {
                name: name.into(),
                tensor: Tensor::new(vec![vals.len()], vals.to_vec()).unwrap(),
                prunable: true,
                output_layer: out,
            })
            .unwrap();
        }
        s
    }

    #[test]
    fn count_rule_guard() {
        assert_eq!(prune_count(0.29, 100), 29);
        assert_eq!(prune_count(0.2, 4), 0);
        assert_eq!(prune_count(0.2, 5), 1);
        assert_eq!(prune_count(0.9, 10), 9);
    }

    #[test]
    fn sparsity_values() {
        let s = store(&[("a", &[1.0; 4], false)]);
        let mut m = SparsityMask::ones(&s);
        assert_eq!(sparsity(&m), 0.0);
        m.layers[0].keep[..2].fill(0);
        assert_eq!(sparsity(&m), 0.5);
    }

    #[test]
    fn global_sorted_case() {
        let vals: Vec<f32> = (1..=10).map(|i| i as f32 / 10.0).collect();
        let s = store(&[("a", &vals, false)]);
        let m = prune_step_global(&s, &SparsityMask::ones(&s), 0.2).unwrap();
        assert_eq!(m.layers[0].keep, [0, 0, 1, 1, 1, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn ties_break_by_enumeration_order() {
        let s = store(&[("a", &[0.5, 0.5], false), ("b", &[0.5, -0.5], false)]);
        let m = prune_step_global(&s, &SparsityMask::ones(&s), 0.5).unwrap();
        assert_eq!(m.layers[0].keep, [0, 0]);
        assert_eq!(m.layers[1].keep, [1, 1]);
    }

    #[test]
    fn zero_count_is_noop() {
        let s = store(&[("a", &[0.1, 0.2, 0.3], false)]);
        let m0 = SparsityMask::ones(&s);
        assert_eq!(prune_step_global(&s, &m0, 0.2).unwrap(), m0);
        assert_eq!(prune_step_layerwise(&s, &m0, 0.2, 0.5).unwrap(), m0);
    }

    #[test]
    fn layerwise_output_layer_half_rate() {
        let vals: Vec<f32> = (1..=10).map(|i| i as f32).collect();
        let s = store(&[("a", &vals, false), ("out", &vals, true)]);
        let m = prune_step_layerwise(&s, &SparsityMask::ones(&s), 0.2, 0.5).unwrap();
        assert_eq!(m.layers[0].surviving(), 8);
        assert_eq!(m.layers[1].surviving(), 9);
    }

    #[test]
    fn misaligned_mask_rejected() {
        let s = store(&[("a", &[1.0, 2.0], false)]);
        let t = store(&[("a", &[1.0, 2.0, 3.0], false)]);
        let m = SparsityMask::ones(&t);
        assert!(rewind(&s, &m).is_err());
        assert!(prune_step_global(&s, &m, 0.5).is_err());
    }

    #[test]
    fn compression_formatting() {
        assert_eq!(format_compression(compression_rate(35.6e6, 4.7e6).unwrap()), "x7.57");
        assert_eq!(format_compression(compression_rate(100.0, 25.0).unwrap()), "x4.00");
        assert!(compression_rate(1.0, 0.0).is_err());
    }

    #[test]
    fn expected_density_values() {
        assert_eq!(expected_density(0, 0.2), 1.0);
        assert!((expected_density(1, 0.2) - 0.8).abs() < 1e-15);
        assert!((expected_density(15, 0.2) - 0.0352).abs() < 5e-5);
    }
}
