//! Target similarity matching.
//!
//! A normalized query grid is matched against the memory bank: the
//! affinity matrix holds the cosine between every query pixel and every
//! stored key, the bank's foreground/background values weight each
//! affinity, and the per-pixel score is the mean of the K largest
//! weighted affinities. A two-way softmax over the foreground and
//! background scores yields the per-pixel target posterior.
//!
//! Affinity rows are computed in parallel; each row's reduction order is
//! fixed, so results are bit-identical for any worker count.

use rayon::prelude::*;

use crate::types::{CmeError, FeatureMap, MemoryBank, ZERO_NORM_EPS};

/// Dense `(h*w) x N` cosine-similarity matrix between query pixels and
/// bank entries, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl AffinityMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, CmeError> {
        if data.len() != rows * cols {
            return Err(CmeError::Dimension(format!(
                "affinity {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Per-pixel foreground and background similarity scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMaps {
    h: usize,
    w: usize,
    fg: Vec<f64>,
    bg: Vec<f64>,
}

impl ScoreMaps {
    pub fn from_parts(h: usize, w: usize, fg: Vec<f64>, bg: Vec<f64>) -> Result<Self, CmeError> {
        if fg.len() != h * w || bg.len() != h * w {
            return Err(CmeError::Dimension(format!(
                "score maps {h}x{w} need {} values, got {} and {}",
                h * w,
                fg.len(),
                bg.len()
            )));
        }
        Ok(Self { h, w, fg, bg })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn fg(&self) -> &[f64] {
        &self.fg
    }

    pub fn bg(&self) -> &[f64] {
        &self.bg
    }
}

/// Per-pixel foreground probability map with values in `[0, 1]`.
/// Softmax outputs are strictly inside `(0, 1)`; assembled full-frame maps
/// may carry exact 0 outside the matched region.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Posterior {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self, CmeError> {
        if data.len() != h * w {
            return Err(CmeError::Dimension(format!(
                "posterior {h}x{w} needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        if let Some(pos) = data
            .iter()
            .position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
        {
            return Err(CmeError::Invalid(format!(
                "posterior value {} ({}) outside [0, 1]",
                pos + 1,
                data[pos]
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn value(&self, i: usize) -> f64 {
        self.data[i]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Scores retrieved from the bank before top-K averaging: the affinity of
/// each (pixel, entry) pair weighted by the entry's stored value. Same
/// layout as the affinity matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievedScores {
    pub rows: usize,
    pub cols: usize,
    pub fg: Vec<f64>,
    pub bg: Vec<f64>,
}

impl RetrievedScores {
    pub fn fg_row(&self, i: usize) -> &[f64] {
        &self.fg[i * self.cols..(i + 1) * self.cols]
    }

    pub fn bg_row(&self, i: usize) -> &[f64] {
        &self.bg[i * self.cols..(i + 1) * self.cols]
    }
}

/// Per-pixel L2 normalization. Pixels with norm below [`ZERO_NORM_EPS`]
/// come back as all-zero vectors rather than NaN.
pub fn normalize_features(fm: &FeatureMap) -> FeatureMap {
    let mut out = fm.clone();
    for i in 0..fm.pixel_count() {
        let px = out.pixel_mut(i);
        let norm: f64 = px.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < ZERO_NORM_EPS {
            px.fill(0.0);
        } else {
            for v in px.iter_mut() {
                *v /= norm;
            }
        }
    }
    out
}

/// Cosine affinity between every normalized query pixel and every bank key.
pub fn compute_affinity(query: &FeatureMap, bank: &MemoryBank) -> Result<AffinityMatrix, CmeError> {
    if query.channels() != bank.channels() {
        return Err(CmeError::Dimension(format!(
            "query has {} channels, bank has {}",
            query.channels(),
            bank.channels()
        )));
    }
    if bank.is_empty() {
        return Err(CmeError::Contract("affinity against an empty bank".into()));
    }
    let rows = query.pixel_count();
    let cols = bank.len();
    let c = query.channels();
    let mut data = vec![0.0; rows * cols];
    data.par_chunks_mut(cols).enumerate().for_each(|(i, row)| {
        let q = query.pixel(i);
        for (j, slot) in row.iter_mut().enumerate() {
            let key = bank.entry(j).key();
            let mut acc = 0.0;
            for ch in 0..c {
                acc += q[ch] * key[ch];
            }
            *slot = acc;
        }
    });
    AffinityMatrix::new(rows, cols, data)
}

/// Weights each affinity by the matching entry's stored foreground and
/// background values, elementwise along the bank axis.
pub fn retrieve_scores(a: &AffinityMatrix, bank: &MemoryBank) -> Result<RetrievedScores, CmeError> {
    if a.cols() != bank.len() {
        return Err(CmeError::Dimension(format!(
            "affinity has {} columns, bank has {} entries",
            a.cols(),
            bank.len()
        )));
    }
    let (rows, cols) = (a.rows(), a.cols());
    let mut fg = vec![0.0; rows * cols];
    let mut bg = vec![0.0; rows * cols];
    for i in 0..rows {
        let arow = a.row(i);
        let frow = &mut fg[i * cols..(i + 1) * cols];
        let brow = &mut bg[i * cols..(i + 1) * cols];
        for j in 0..cols {
            let entry = bank.entry(j);
            frow[j] = arow[j] * entry.fg();
            brow[j] = arow[j] * entry.bg();
        }
    }
    Ok(RetrievedScores { rows, cols, fg, bg })
}

/// Mean of the `min(k, len)` largest values of `v`.
///
/// Ties are broken by value only: equal values contribute equally no
/// matter which copies are selected.
pub fn topk_average(v: &[f64], k: usize) -> Result<f64, CmeError> {
    if v.is_empty() {
        return Err(CmeError::Contract(
            "top-k average of an empty vector".into(),
        ));
    }
    if k == 0 {
        return Err(CmeError::Contract("top-k average with k = 0".into()));
    }
    let m = k.min(v.len());
    let mut buf = v.to_vec();
    if m < buf.len() {
        buf.select_nth_unstable_by(m - 1, |a, b| b.total_cmp(a));
    }
    buf[..m].sort_unstable_by(|a, b| b.total_cmp(a));
    let sum: f64 = buf[..m].iter().sum();
    Ok(sum / m as f64)
}

/// Full matching pass: affinity, value retrieval, and top-K averaging.
/// Returns the affinity matrix as well so the memory update can reuse it.
pub fn similarity_maps(
    query: &FeatureMap,
    bank: &MemoryBank,
    k: usize,
) -> Result<(ScoreMaps, AffinityMatrix), CmeError> {
    let a = compute_affinity(query, bank)?;
    let retrieved = retrieve_scores(&a, bank)?;
    let n = query.pixel_count();
    let mut fg = Vec::with_capacity(n);
    let mut bg = Vec::with_capacity(n);
    for i in 0..n {
        fg.push(topk_average(retrieved.fg_row(i), k)?);
        bg.push(topk_average(retrieved.bg_row(i), k)?);
    }
    Ok((
        ScoreMaps {
            h: query.height(),
            w: query.width(),
            fg,
            bg,
        },
        a,
    ))
}

/// Two-way softmax over the (foreground, background) score pair of each
/// pixel, computed with max subtraction.
pub fn posterior(scores: &ScoreMaps) -> Posterior {
    let n = scores.fg.len();
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let (sf, sb) = (scores.fg[i], scores.bg[i]);
        let m = sf.max(sb);
        let ef = (sf - m).exp();
        let eb = (sb - m).exp();
        data.push(ef / (ef + eb));
    }
    Posterior {
        h: scores.h,
        w: scores.w,
        data,
    }
}
