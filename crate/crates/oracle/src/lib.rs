//! Naive, loop-based reference implementations of every numerical
//! operation in the main crate, used by tests to certify the optimized
//! paths. Each routine is written straight from the definitions with
//! explicit loops, full sorts, and strictly sequential evaluation.
//!
//! Nothing here shares code with the optimized implementations beyond
//! the shared domain types; keep it that way. Speed is a non-goal, and
//! the index-loop style is deliberate.
#![allow(clippy::needless_range_loop)]

use cme_core::matching::AffinityMatrix;
use cme_core::memory::UpdateReport;
use cme_core::types::{CmeConfig, CmeError, FeatureMap, Mask, MemoryBank, MemoryStrategy};

pub mod dfl;
pub mod instances;

pub use dfl::{
    fd_gradients, max_relative_error, naive_dfl_forward, relative_error, worst_offender,
};

/// Cosine affinity via an explicit triple loop.
pub fn naive_affinity(query: &FeatureMap, bank: &MemoryBank) -> Result<AffinityMatrix, CmeError> {
    if query.channels() != bank.channels() {
        return Err(CmeError::Dimension(
            "query and bank channel counts differ".into(),
        ));
    }
    if bank.is_empty() {
        return Err(CmeError::Contract("affinity against an empty bank".into()));
    }
    let rows = query.pixel_count();
    let cols = bank.len();
    let mut data = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let mut acc = 0.0;
            for ch in 0..query.channels() {
                acc += query.pixel(i)[ch] * bank.entry(j).key()[ch];
            }
            data[i * cols + j] = acc;
        }
    }
    AffinityMatrix::new(rows, cols, data)
}

/// Per-element value retrieval: affinity times the entry's stored value.
pub fn naive_retrieve(
    a: &AffinityMatrix,
    bank: &MemoryBank,
) -> Result<(Vec<f64>, Vec<f64>), CmeError> {
    if a.cols() != bank.len() {
        return Err(CmeError::Dimension(
            "affinity columns and bank size differ".into(),
        ));
    }
    let mut fg = vec![0.0; a.rows() * a.cols()];
    let mut bg = vec![0.0; a.rows() * a.cols()];
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            fg[i * a.cols() + j] = a.at(i, j) * bank.entry(j).fg();
            bg[i * a.cols() + j] = a.at(i, j) * bank.entry(j).bg();
        }
    }
    Ok((fg, bg))
}

/// Top-K average via a full descending sort.
pub fn naive_topk(v: &[f64], k: usize) -> Result<f64, CmeError> {
    if v.is_empty() || k == 0 {
        return Err(CmeError::Contract(
            "top-k average needs a non-empty vector and k >= 1".into(),
        ));
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let m = k.min(sorted.len());
    let mut sum = 0.0;
    for value in &sorted[..m] {
        sum += value;
    }
    Ok(sum / m as f64)
}

/// Foreground and background score maps from the full naive pipeline.
pub fn naive_similarity(
    query: &FeatureMap,
    bank: &MemoryBank,
    k: usize,
) -> Result<(Vec<f64>, Vec<f64>), CmeError> {
    let a = naive_affinity(query, bank)?;
    let (rf, rb) = naive_retrieve(&a, bank)?;
    let n = query.pixel_count();
    let cols = a.cols();
    let mut fg = Vec::with_capacity(n);
    let mut bg = Vec::with_capacity(n);
    for i in 0..n {
        fg.push(naive_topk(&rf[i * cols..(i + 1) * cols], k)?);
        bg.push(naive_topk(&rb[i * cols..(i + 1) * cols], k)?);
    }
    Ok((fg, bg))
}

/// Plain two-way softmax without max subtraction.
pub fn naive_posterior(fg: &[f64], bg: &[f64]) -> Vec<f64> {
    fg.iter()
        .zip(bg)
        .map(|(&sf, &sb)| {
            let ef = sf.exp();
            let eb = sb.exp();
            ef / (ef + eb)
        })
        .collect()
}

/// Row maxima and argmaxima by linear scan, ties to the lowest index.
pub fn naive_argmax(a: &AffinityMatrix) -> (Vec<f64>, Vec<usize>) {
    let mut values = Vec::with_capacity(a.rows());
    let mut indices = Vec::with_capacity(a.rows());
    for i in 0..a.rows() {
        let mut best = f64::NEG_INFINITY;
        let mut best_j = 0;
        for j in 0..a.cols() {
            if a.at(i, j) > best {
                best = a.at(i, j);
                best_j = j;
            }
        }
        values.push(best);
        indices.push(best_j);
    }
    (values, indices)
}

const ZERO_EPS: f64 = 1e-12;

/// Internal bank representation: (key, fg, bg) triples in plain vectors.
struct RawBank {
    entries: Vec<(Vec<f64>, f64, f64)>,
}

fn norm(v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for x in v {
        acc += x * x;
    }
    acc.sqrt()
}

/// Straight-line reimplementation of the per-frame memory update applied
/// frame by frame, honoring the configured strategy. Frames are (already
/// normalized features, foreground mask) pairs; the first frame
/// initializes the bank, every later frame produces one report.
pub fn naive_cme_trace(
    frames: &[(FeatureMap, Mask)],
    cfg: &CmeConfig,
) -> Result<Vec<UpdateReport>, CmeError> {
    if frames.is_empty() {
        return Err(CmeError::Contract("trace over an empty sequence".into()));
    }
    let zeta = cfg.upper_threshold;
    let beta = cfg.fusion_weight;
    let e = std::f64::consts::E;

    // Initialization from frame 0, skipping zero-norm pixels.
    let (first, first_fg) = &frames[0];
    let mut bank = RawBank {
        entries: Vec::new(),
    };
    for i in 0..first.pixel_count() {
        let px = first.pixel(i);
        if norm(px) < ZERO_EPS {
            continue;
        }
        bank.entries
            .push((px.to_vec(), first_fg.value(i), 1.0 - first_fg.value(i)));
    }
    if bank.entries.is_empty() {
        return Err(CmeError::EmptyBank("naive trace initialization".into()));
    }
    let initial_len = bank.entries.len();

    let mut reports = Vec::new();
    for (features, fg_mask) in &frames[1..] {
        let hw = features.pixel_count();

        match cfg.strategy {
            MemoryStrategy::InitialOnly => {
                let n = bank.entries.len();
                reports.push(UpdateReport {
                    merged_count: 0,
                    expanded_count: 0,
                    discarded_count: hw,
                    bank_size_before: n,
                    bank_size_after: n,
                    avg_threshold: 0.0,
                });
                continue;
            }
            MemoryStrategy::AllFrames => {
                let before = bank.entries.len();
                let mut appended = 0;
                for i in 0..hw {
                    let px = features.pixel(i);
                    if norm(px) < ZERO_EPS {
                        continue;
                    }
                    bank.entries
                        .push((px.to_vec(), fg_mask.value(i), 1.0 - fg_mask.value(i)));
                    appended += 1;
                }
                if let Some(cap) = cfg.all_frames_cap {
                    while bank.entries.len() - initial_len > cap {
                        bank.entries.remove(initial_len);
                    }
                }
                reports.push(UpdateReport {
                    merged_count: 0,
                    expanded_count: appended,
                    discarded_count: hw - appended,
                    bank_size_before: before,
                    bank_size_after: bank.entries.len(),
                    avg_threshold: 0.0,
                });
                continue;
            }
            MemoryStrategy::Compact => {}
        }

        // Affinity, maxima, and the expansion floor.
        let mut re = vec![0.0; hw];
        let mut arg = vec![0usize; hw];
        for i in 0..hw {
            let mut best = f64::NEG_INFINITY;
            let mut best_j = 0;
            for (j, (key, _, _)) in bank.entries.iter().enumerate() {
                let mut acc = 0.0;
                for ch in 0..features.channels() {
                    acc += features.pixel(i)[ch] * key[ch];
                }
                if acc > best {
                    best = acc;
                    best_j = j;
                }
            }
            re[i] = best;
            arg[i] = best_j;
        }
        let mut sum = 0.0;
        for v in &re {
            sum += v;
        }
        let avg = (sum / hw as f64) / (2.0 * e);

        let before = bank.entries.len();
        let mut merged = 0;
        let mut discarded = 0;
        let mut expansions = Vec::new();
        for i in 0..hw {
            let px = features.pixel(i);
            if norm(px) < ZERO_EPS {
                discarded += 1;
                continue;
            }
            if re[i] >= zeta {
                let j = arg[i];
                let (key, fgv, bgv) = &mut bank.entries[j];
                let mut blended: Vec<f64> = key
                    .iter()
                    .zip(px)
                    .map(|(kv, qv)| beta * qv + (1.0 - beta) * kv)
                    .collect();
                let kn = norm(&blended);
                if kn >= ZERO_EPS {
                    for b in blended.iter_mut() {
                        *b /= kn;
                    }
                    *key = blended;
                }
                // A cancelled (antipodal) blend keeps the stored key.
                *fgv = (beta * fg_mask.value(i) + (1.0 - beta) * *fgv).clamp(0.0, 1.0);
                *bgv = (beta * (1.0 - fg_mask.value(i)) + (1.0 - beta) * *bgv).clamp(0.0, 1.0);
                merged += 1;
            } else if re[i] >= avg {
                expansions.push(i);
            } else {
                discarded += 1;
            }
        }
        for &i in &expansions {
            let px = features.pixel(i);
            bank.entries
                .push((px.to_vec(), fg_mask.value(i), 1.0 - fg_mask.value(i)));
        }
        reports.push(UpdateReport {
            merged_count: merged,
            expanded_count: expansions.len(),
            discarded_count: discarded,
            bank_size_before: before,
            bank_size_after: bank.entries.len(),
            avg_threshold: avg,
        });
    }
    Ok(reports)
}
