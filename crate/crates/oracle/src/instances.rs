//! Seeded random instance builders shared by the equivalence and
//! acceptance suites.

use cme_core::matching::normalize_features;
use cme_core::rng::SplitMix64;
use cme_core::types::{FeatureMap, Mask, MemoryBank, MemoryEntry};

/// Random finite feature map with entries in `[-1, 1]`.
pub fn random_map(rng: &mut SplitMix64, h: usize, w: usize, c: usize) -> FeatureMap {
    FeatureMap::new(h, w, c, rng.uniform_vec(h * w * c, -1.0, 1.0)).expect("valid random map")
}

/// Random map normalized per pixel (no zero pixels at these magnitudes).
pub fn random_unit_map(rng: &mut SplitMix64, h: usize, w: usize, c: usize) -> FeatureMap {
    normalize_features(&random_map(rng, h, w, c))
}

/// Bank of `n` unit keys with fg drawn uniformly and bg its complement.
pub fn random_bank(rng: &mut SplitMix64, n: usize, c: usize) -> MemoryBank {
    let mut bank = MemoryBank::new(c).expect("positive channels");
    for _ in 0..n {
        let key = rng.unit_vec(c);
        let fg = rng.next_f64();
        bank.push(MemoryEntry::new(key, fg, 1.0 - fg).expect("valid entry"))
            .expect("matching channels");
    }
    bank
}

/// Random soft mask with values in `[0, 1]`.
pub fn random_mask(rng: &mut SplitMix64, h: usize, w: usize) -> Mask {
    Mask::new(h, w, rng.uniform_vec(h * w, 0.0, 1.0)).expect("valid mask")
}

/// Random binary mask with the given foreground probability.
pub fn random_binary_mask(rng: &mut SplitMix64, h: usize, w: usize, p: f64) -> Mask {
    let data = (0..h * w)
        .map(|_| if rng.next_f64() < p { 1.0 } else { 0.0 })
        .collect();
    Mask::new(h, w, data).expect("valid mask")
}

/// Dimensions within the documented suite limits: `h, w <= 8`,
/// `c <= 16`, bank size `<= 64`.
pub fn matching_dims(rng: &mut SplitMix64) -> (usize, usize, usize, usize) {
    (
        1 + rng.next_below(8),
        1 + rng.next_below(8),
        1 + rng.next_below(16),
        1 + rng.next_below(64),
    )
}
