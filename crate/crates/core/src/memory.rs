//! Memory lifecycle: initialization from the first frame and the
//! per-frame compact update protocol, plus the baseline strategies used
//! for ablations.
//!
//! The compact update classifies every query pixel by its maximum
//! correlation `Re(i)` against the pre-update bank:
//!
//! - `Re(i) >= zeta`: merge the pixel into its best entry with blend
//!   weight `beta`, re-normalizing the key afterwards;
//! - `avg <= Re(i) < zeta`: append the pixel as a new entry, where
//!   `avg = mean(Re) / (2e)` over all query pixels;
//! - `Re(i) < avg`: discard.
//!
//! Merges are applied before expansions, in pixel order; entries appended
//! this frame never take part in the same frame's merging. Zero-norm
//! query pixels are always discarded (a zero key would break the bank's
//! unit-norm invariant).

use crate::matching::AffinityMatrix;
use crate::types::{
    CmeConfig, CmeError, FeatureMap, Mask, MemoryBank, MemoryEntry, MemoryStrategy, ZERO_NORM_EPS,
};

/// Telemetry for one memory update.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateReport {
    pub merged_count: usize,
    pub expanded_count: usize,
    pub discarded_count: usize,
    pub bank_size_before: usize,
    pub bank_size_after: usize,
    /// The expansion floor `mean(Re) / (2e)`; 0.0 for updates that do not
    /// compute correlations (initial-only and all-frames strategies).
    pub avg_threshold: f64,
}

impl UpdateReport {
    /// Conservation check: every query pixel lands in exactly one bucket.
    pub fn classified_total(&self) -> usize {
        self.merged_count + self.expanded_count + self.discarded_count
    }
}

/// Per-row maximum of the affinity matrix and its column index.
#[derive(Clone, Debug, PartialEq)]
pub struct MaxCorrelation {
    values: Vec<f64>,
    argmax: Vec<usize>,
}

impl MaxCorrelation {
    pub fn value(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn argmax(&self, i: usize) -> usize {
        self.argmax[i]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Builds the bank from the first frame: one entry per pixel carrying the
/// normalized feature vector and the mask pair's values. Zero-norm pixels
/// are skipped.
pub fn init_memory(features: &FeatureMap, fg: &Mask, bg: &Mask) -> Result<MemoryBank, CmeError> {
    if features.height() != fg.height() || features.width() != fg.width() {
        return Err(CmeError::Dimension(format!(
            "features {}x{} vs mask {}x{}",
            features.height(),
            features.width(),
            fg.height(),
            fg.width()
        )));
    }
    Mask::check_pair(fg, bg)?;
    let mut bank = MemoryBank::new(features.channels())?;
    for i in 0..features.pixel_count() {
        let px = features.pixel(i);
        let norm: f64 = px.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < ZERO_NORM_EPS {
            continue;
        }
        bank.push(MemoryEntry::new(px.to_vec(), fg.value(i), bg.value(i))?)?;
    }
    if bank.is_empty() {
        return Err(CmeError::EmptyBank(
            "every pixel of the initial frame is zero-norm".into(),
        ));
    }
    bank.mark_initial();
    Ok(bank)
}

/// Row-wise maximum and argmax; ties resolve to the lowest bank index.
pub fn max_correlations(a: &AffinityMatrix) -> Result<MaxCorrelation, CmeError> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(CmeError::Contract(
            "max correlation of an empty matrix".into(),
        ));
    }
    let mut values = Vec::with_capacity(a.rows());
    let mut argmax = Vec::with_capacity(a.rows());
    for i in 0..a.rows() {
        let row = a.row(i);
        let mut best = row[0];
        let mut best_j = 0;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                best_j = j;
            }
        }
        values.push(best);
        argmax.push(best_j);
    }
    Ok(MaxCorrelation { values, argmax })
}

fn check_update_args(
    bank: &MemoryBank,
    query: &FeatureMap,
    fg: &Mask,
    bg: &Mask,
) -> Result<(), CmeError> {
    if query.channels() != bank.channels() {
        return Err(CmeError::Dimension(format!(
            "query has {} channels, bank has {}",
            query.channels(),
            bank.channels()
        )));
    }
    if query.height() != fg.height() || query.width() != fg.width() {
        return Err(CmeError::Dimension(format!(
            "query {}x{} vs mask {}x{}",
            query.height(),
            query.width(),
            fg.height(),
            fg.width()
        )));
    }
    Mask::check_pair(fg, bg)
}

fn pixel_norm(px: &[f64]) -> f64 {
    px.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Compact per-frame update. `a` must be the affinity computed between
/// exactly this query and this bank.
pub fn cme_update(
    bank: &mut MemoryBank,
    query: &FeatureMap,
    fg: &Mask,
    bg: &Mask,
    a: &AffinityMatrix,
    cfg: &CmeConfig,
) -> Result<UpdateReport, CmeError> {
    cfg.validate()?;
    check_update_args(bank, query, fg, bg)?;
    if a.rows() != query.pixel_count() || a.cols() != bank.len() {
        return Err(CmeError::Contract(format!(
            "affinity is {}x{} but query has {} pixels and bank {} entries",
            a.rows(),
            a.cols(),
            query.pixel_count(),
            bank.len()
        )));
    }

    let zeta = cfg.upper_threshold;
    let beta = cfg.fusion_weight;
    let mc = max_correlations(a)?;

    // Expansion floor over all query pixels, merged ones included.
    let mean_re: f64 = mc.values().iter().sum::<f64>() / mc.len() as f64;
    let avg = mean_re / (2.0 * std::f64::consts::E);
    debug_assert!(
        mean_re > 2.0 * std::f64::consts::E * zeta || avg < zeta,
        "threshold ordering violated: avg {avg} >= zeta {zeta}"
    );

    let before = bank.len();
    let mut merged = 0usize;
    let mut discarded = 0usize;
    let mut expansions: Vec<usize> = Vec::new();

    for i in 0..query.pixel_count() {
        let px = query.pixel(i);
        if pixel_norm(px) < ZERO_NORM_EPS {
            discarded += 1;
            continue;
        }
        let re = mc.value(i);
        if re >= zeta {
            let j = mc.argmax(i);
            let entry = bank.entry(j);
            let mut key: Vec<f64> = entry
                .key()
                .iter()
                .zip(px)
                .map(|(k, q)| beta * q + (1.0 - beta) * k)
                .collect();
            let norm = pixel_norm(&key);
            if norm < ZERO_NORM_EPS {
                // Antipodal blend cancelled out; keep the stored key.
                key = entry.key().to_vec();
            } else {
                for v in key.iter_mut() {
                    *v /= norm;
                }
            }
            let new_fg = (beta * fg.value(i) + (1.0 - beta) * entry.fg()).clamp(0.0, 1.0);
            let new_bg = (beta * bg.value(i) + (1.0 - beta) * entry.bg()).clamp(0.0, 1.0);
            bank.entry_mut(j).set(key, new_fg, new_bg);
            merged += 1;
        } else if re >= avg {
            expansions.push(i);
        } else {
            discarded += 1;
        }
    }

    for &i in &expansions {
        let px = query.pixel(i);
        bank.push(MemoryEntry::new(px.to_vec(), fg.value(i), bg.value(i))?)?;
    }

    Ok(UpdateReport {
        merged_count: merged,
        expanded_count: expansions.len(),
        discarded_count: discarded,
        bank_size_before: before,
        bank_size_after: bank.len(),
        avg_threshold: avg,
    })
}

/// Non-compact strategies: initial-only leaves the bank untouched,
/// all-frames appends every pixel and then evicts the oldest non-initial
/// entries down to the configured cap.
pub fn baseline_update(
    bank: &mut MemoryBank,
    query: &FeatureMap,
    fg: &Mask,
    bg: &Mask,
    cfg: &CmeConfig,
) -> Result<UpdateReport, CmeError> {
    cfg.validate()?;
    check_update_args(bank, query, fg, bg)?;
    let before = bank.len();
    let hw = query.pixel_count();
    match cfg.strategy {
        MemoryStrategy::InitialOnly => Ok(UpdateReport {
            merged_count: 0,
            expanded_count: 0,
            discarded_count: hw,
            bank_size_before: before,
            bank_size_after: before,
            avg_threshold: 0.0,
        }),
        MemoryStrategy::AllFrames => {
            let mut appended = 0usize;
            for i in 0..hw {
                let px = query.pixel(i);
                if pixel_norm(px) < ZERO_NORM_EPS {
                    continue;
                }
                bank.push(MemoryEntry::new(px.to_vec(), fg.value(i), bg.value(i))?)?;
                appended += 1;
            }
            if let Some(cap) = cfg.all_frames_cap {
                bank.evict_non_initial_to(cap);
            }
            Ok(UpdateReport {
                merged_count: 0,
                expanded_count: appended,
                discarded_count: hw - appended,
                bank_size_before: before,
                bank_size_after: bank.len(),
                avg_threshold: 0.0,
            })
        }
        MemoryStrategy::Compact => Err(CmeError::Contract(
            "compact strategy must go through cme_update with an affinity matrix".into(),
        )),
    }
}
