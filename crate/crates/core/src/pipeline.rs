//! Per-frame tracking loop over synthetic sequences.
//!
//! Frame 1 bootstraps the memory bank from a pseudo mask (the
//! ground-truth box filled with ones). Every later frame is processed as:
//! crop a query region around the previous box, normalize, match against
//! the bank, soft-max into a posterior, optionally fuse the DFL readout,
//! binarize at 0.5, extract the box of the largest connected component,
//! and finally update the memory with the binarized prediction.
//!
//! The crop is centered on the previous box with twice its width and
//! height (four times the area), clamped to the frame.

use crate::dfl::{dfl_forward, DflParams, LinearProbe};
use crate::matching::{normalize_features, posterior, similarity_maps, Posterior};
use crate::memory::{baseline_update, cme_update, init_memory, UpdateReport};
use crate::types::{CmeConfig, CmeError, FeatureMap, Mask, MemoryStrategy};

/// Seed of the fixed linear readout that turns DFL features into a
/// probability during tracking.
pub const DEFAULT_PROBE_SEED: u64 = 7919;

/// Axis-aligned box in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Box2D {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Box2D {
    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

/// Which deformable-feature variant the tracker runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DflMode {
    Off,
    /// Attention output gated by the initial mask.
    Full,
    /// Attention output without the initial-mask gate.
    NoPosterior,
}

impl DflMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DflMode::Off => "off",
            DflMode::Full => "full",
            DflMode::NoPosterior => "no-posterior",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CmeError> {
        match s {
            "off" => Ok(DflMode::Off),
            "full" => Ok(DflMode::Full),
            "no-posterior" => Ok(DflMode::NoPosterior),
            other => Err(CmeError::Invalid(format!(
                "unknown dfl mode '{other}' (expected off | full | no-posterior)"
            ))),
        }
    }
}

/// Optional components of a tracking run.
#[derive(Clone, Debug)]
pub struct TrackerOptions {
    pub dfl_mode: DflMode,
    /// Required unless `dfl_mode` is `Off`.
    pub dfl_params: Option<DflParams>,
    pub probe_seed: u64,
}

impl Default for TrackerOptions {
    fn default() -> Self {
        Self {
            dfl_mode: DflMode::Off,
            dfl_params: None,
            probe_seed: DEFAULT_PROBE_SEED,
        }
    }
}

/// Everything produced for one frame.
#[derive(Clone, Debug)]
pub struct FrameResult {
    pub frame: usize,
    /// Full-frame foreground probability; exactly 0 outside the crop.
    pub posterior: Posterior,
    /// Full-frame binarized prediction.
    pub mask: Mask,
    /// Effective box (the previous one is reused when the mask is empty).
    pub bbox: Box2D,
    pub iou: f64,
    pub report: UpdateReport,
}

/// Box interior set to 1, everything else 0.
pub fn pseudo_mask_from_box(bbox: &Box2D, h: usize, w: usize) -> Result<Mask, CmeError> {
    if bbox.w == 0 || bbox.h == 0 {
        return Err(CmeError::Contract(format!(
            "pseudo mask from an empty box {bbox:?}"
        )));
    }
    if bbox.x + bbox.w > w || bbox.y + bbox.h > h {
        return Err(CmeError::Contract(format!(
            "box {bbox:?} exceeds frame bounds {w}x{h}"
        )));
    }
    let mut data = vec![0.0; h * w];
    for y in bbox.y..bbox.y + bbox.h {
        for x in bbox.x..bbox.x + bbox.w {
            data[y * w + x] = 1.0;
        }
    }
    Mask::new(h, w, data)
}

fn extract_rect(fm: &FeatureMap, x: usize, y: usize, w: usize, h: usize) -> FeatureMap {
    let c = fm.channels();
    let mut data = Vec::with_capacity(w * h * c);
    for yy in y..y + h {
        for xx in x..x + w {
            data.extend_from_slice(fm.pixel(yy * fm.width() + xx));
        }
    }
    FeatureMap::new(h, w, c, data).expect("rect extraction is shape-consistent")
}

fn extract_mask_rect(m: &Mask, x: usize, y: usize, w: usize, h: usize) -> Mask {
    let mut data = Vec::with_capacity(w * h);
    for yy in y..y + h {
        for xx in x..x + w {
            data.push(m.value(yy * m.width() + xx));
        }
    }
    Mask::new(h, w, data).expect("rect extraction is shape-consistent")
}

/// Crop centered on the previous box with twice its width and height,
/// clamped to the frame. Returns the crop and its (x, y) offset.
pub fn crop_query_region(
    frame: &FeatureMap,
    prev_box: &Box2D,
) -> Result<(FeatureMap, (usize, usize)), CmeError> {
    if prev_box.w == 0 || prev_box.h == 0 {
        return Err(CmeError::Contract(format!(
            "empty previous box {prev_box:?}"
        )));
    }
    let (fw, fh) = (frame.width(), frame.height());
    let crop_w = (2 * prev_box.w).min(fw);
    let crop_h = (2 * prev_box.h).min(fh);
    let left = (prev_box.x as i64 + prev_box.w as i64 / 2 - crop_w as i64 / 2)
        .clamp(0, (fw - crop_w) as i64) as usize;
    let top = (prev_box.y as i64 + prev_box.h as i64 / 2 - crop_h as i64 / 2)
        .clamp(0, (fh - crop_h) as i64) as usize;
    Ok((extract_rect(frame, left, top, crop_w, crop_h), (left, top)))
}

/// Thresholds a posterior into a binary mask; 1 where `p >= threshold`.
pub fn binarize(post: &Posterior, threshold: f64) -> Result<Mask, CmeError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(CmeError::Contract(format!(
            "binarization threshold {threshold} outside (0, 1)"
        )));
    }
    let data = post
        .data()
        .iter()
        .map(|&p| if p >= threshold { 1.0 } else { 0.0 })
        .collect();
    Mask::new(post.height(), post.width(), data)
}

/// Bounding box of the largest 4-connected foreground component, or
/// `None` for an empty mask. Size ties resolve to the component found
/// first in scan order.
pub fn box_from_mask(mask: &Mask) -> Option<Box2D> {
    let (h, w) = (mask.height(), mask.width());
    let fg = |i: usize| mask.value(i) >= 0.5;
    let mut visited = vec![false; h * w];
    let mut best: Option<(usize, Box2D)> = None;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !fg(start) || visited[start] {
            continue;
        }
        let mut size = 0usize;
        let (mut min_x, mut min_y, mut max_x, mut max_y) = (usize::MAX, usize::MAX, 0usize, 0usize);
        visited[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = (i % w, i / w);
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_y = min_y.min(y);
            max_y = max_y.max(y);
            let mut visit = |j: usize| {
                if fg(j) && !visited[j] {
                    visited[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        let bbox = Box2D {
            x: min_x,
            y: min_y,
            w: max_x - min_x + 1,
            h: max_y - min_y + 1,
        };
        if best.as_ref().is_none_or(|(s, _)| size > *s) {
            best = Some((size, bbox));
        }
    }
    best.map(|(_, b)| b)
}

/// Intersection over union of two binary masks; 1 when both are empty.
pub fn compute_iou(pred: &Mask, truth: &Mask) -> Result<f64, CmeError> {
    if pred.height() != truth.height() || pred.width() != truth.width() {
        return Err(CmeError::Dimension(format!(
            "iou over {}x{} vs {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for i in 0..pred.pixel_count() {
        let p = pred.value(i) >= 0.5;
        let t = truth.value(i) >= 0.5;
        if p && t {
            inter += 1;
        }
        if p || t {
            union += 1;
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

pub fn mean_iou(results: &[FrameResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().map(|r| r.iou).sum::<f64>() / results.len() as f64
}

fn paste_mask(crop: &Mask, offset: (usize, usize), h: usize, w: usize) -> Mask {
    let mut data = vec![0.0; h * w];
    for yy in 0..crop.height() {
        for xx in 0..crop.width() {
            data[(offset.1 + yy) * w + offset.0 + xx] = crop.value(yy * crop.width() + xx);
        }
    }
    Mask::new(h, w, data).expect("paste is shape-consistent")
}

fn paste_posterior(
    values: &[f64],
    crop_h: usize,
    crop_w: usize,
    offset: (usize, usize),
    h: usize,
    w: usize,
) -> Posterior {
    let mut data = vec![0.0; h * w];
    for yy in 0..crop_h {
        for xx in 0..crop_w {
            data[(offset.1 + yy) * w + offset.0 + xx] = values[yy * crop_w + xx];
        }
    }
    Posterior::new(h, w, data).expect("paste is shape-consistent")
}

/// Runs the full tracking loop over a generated sequence.
pub fn run_tracker(
    frames: &[(FeatureMap, Mask)],
    cfg: &CmeConfig,
    opts: &TrackerOptions,
) -> Result<Vec<FrameResult>, CmeError> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(CmeError::Contract("tracking over an empty sequence".into()));
    }
    if opts.dfl_mode != DflMode::Off && opts.dfl_params.is_none() {
        return Err(CmeError::Contract(
            "dfl mode is enabled but no parameters were given".into(),
        ));
    }
    let (h, w) = (frames[0].0.height(), frames[0].0.width());
    for (t, (fm, mask)) in frames.iter().enumerate() {
        if fm.height() != h || fm.width() != w || mask.height() != h || mask.width() != w {
            return Err(CmeError::Dimension(format!(
                "frame {t} shape differs from frame 0"
            )));
        }
    }

    // Frame 1: pseudo mask from the ground-truth box, memory bootstrap.
    let (first_frame, first_truth) = &frames[0];
    let init_box = box_from_mask(first_truth).ok_or_else(|| {
        CmeError::Contract("ground-truth mask of the first frame is empty".into())
    })?;
    let pseudo = pseudo_mask_from_box(&init_box, h, w)?;
    let pseudo_bg = pseudo.complement();
    let first_norm = normalize_features(first_frame);
    let mut bank = init_memory(&first_norm, &pseudo, &pseudo_bg)?;

    let probe = opts
        .dfl_params
        .as_ref()
        .map(|p| LinearProbe::seeded(opts.probe_seed, p.hidden()));

    let mut results = Vec::with_capacity(frames.len());
    results.push(FrameResult {
        frame: 0,
        posterior: Posterior::new(h, w, pseudo.data().to_vec())?,
        mask: pseudo.clone(),
        bbox: init_box,
        iou: compute_iou(&pseudo, first_truth)?,
        report: UpdateReport {
            merged_count: 0,
            expanded_count: bank.len(),
            discarded_count: h * w - bank.len(),
            bank_size_before: 0,
            bank_size_after: bank.len(),
            avg_threshold: 0.0,
        },
    });

    let mut warned_zero_pixels = false;
    let mut prev_box = init_box;
    for (t, (frame, truth)) in frames.iter().enumerate().skip(1) {
        let (crop_raw, offset) = crop_query_region(frame, &prev_box)?;
        let (ch, cw) = (crop_raw.height(), crop_raw.width());
        let crop_norm = normalize_features(&crop_raw);
        if !warned_zero_pixels {
            let zeros = crop_norm.zero_pixel_count();
            if zeros > 0 {
                eprintln!(
                    "note: frame {t} crop contains {zeros} zero-norm pixels; \
                     they match nothing and stay at posterior 0.5"
                );
                warned_zero_pixels = true;
            }
        }

        let (scores, affinity) = similarity_maps(&crop_norm, &bank, cfg.top_k)?;
        let match_post = posterior(&scores);

        let fused: Vec<f64> = match opts.dfl_mode {
            DflMode::Off => match_post.data().to_vec(),
            mode => {
                let params = opts.dfl_params.as_ref().expect("checked above");
                let probe = probe.as_ref().expect("probe exists with params");
                let ref_crop = extract_rect(first_frame, offset.0, offset.1, cw, ch);
                let p1_crop = extract_mask_rect(&pseudo, offset.0, offset.1, cw, ch);
                let gate = match mode {
                    DflMode::Full => Some(&p1_crop),
                    _ => None,
                };
                let (dfl_out, _) = dfl_forward(&crop_raw, &ref_crop, gate, params)?;
                match_post
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &pm)| 0.5 * (pm + probe.prob(dfl_out.pixel(i))))
                    .collect()
            }
        };
        let crop_post = Posterior::new(ch, cw, fused)?;
        let crop_mask = binarize(&crop_post, 0.5)?;

        let full_mask = paste_mask(&crop_mask, offset, h, w);
        let full_post = paste_posterior(crop_post.data(), ch, cw, offset, h, w);
        let bbox = box_from_mask(&full_mask).unwrap_or(prev_box);
        let iou = compute_iou(&full_mask, truth)?;

        let crop_bg = crop_mask.complement();
        let report = match cfg.strategy {
            MemoryStrategy::Compact => {
                cme_update(&mut bank, &crop_norm, &crop_mask, &crop_bg, &affinity, cfg)?
            }
            _ => baseline_update(&mut bank, &crop_norm, &crop_mask, &crop_bg, cfg)?,
        };
        debug_assert_eq!(report.classified_total(), ch * cw);

        results.push(FrameResult {
            frame: t,
            posterior: full_post,
            mask: full_mask,
            bbox,
            iou,
            report,
        });
        prev_box = bbox;
    }
    Ok(results)
}
