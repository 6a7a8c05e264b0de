//! Deformable feature learning: pixel-to-global attention between a
//! query grid and a reference grid.
//!
//! Each query pixel is scored against every reference pixel through a
//! learnable bilinear form, the scores are row-softmaxed into weights,
//! and the weights aggregate a transformed copy of the reference. The
//! aggregate is concatenated with the transformed query pixel, projected
//! back down, and optionally gated by the initial-frame foreground mask:
//!
//! ```text
//! z_ij    = (W_F f_i)^T (W_R r_j)
//! d_ij    = softmax_j(z_ij)                    (max-subtracted)
//! v_i     = sum_j d_ij relu(W_v r_j)
//! f~_i    = relu(W_c [v_i ; relu(W_v f_i)])
//! f^_i    = f~_i * p1(i)                       (skipped in the no-posterior variant)
//! ```
//!
//! The backward pass is exact (softmax Jacobian and ReLU masks included)
//! and is verified against central finite differences in the tests.
//! Forward rows are evaluated in parallel with a fixed per-row reduction
//! order, so results do not depend on the worker count; the backward pass
//! is sequential.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::io::atomic_write;
use crate::rng::SplitMix64;
use crate::types::{CmeError, FeatureMap, Mask};

/// The four learnable linear transforms.
#[derive(Clone, Debug, PartialEq)]
pub struct DflParams {
    c: usize,
    d: usize,
    seed: u64,
    /// d x c, row-major.
    pub w_f: Vec<f64>,
    /// d x c.
    pub w_r: Vec<f64>,
    /// d x c.
    pub w_v: Vec<f64>,
    /// d x 2d.
    pub w_c: Vec<f64>,
}

impl DflParams {
    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn hidden(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Gradients of a scalar loss with respect to every parameter matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DflGradients {
    pub w_f: Vec<f64>,
    pub w_r: Vec<f64>,
    pub w_v: Vec<f64>,
    pub w_c: Vec<f64>,
}

impl DflGradients {
    fn zeros(c: usize, d: usize) -> Self {
        Self {
            w_f: vec![0.0; d * c],
            w_r: vec![0.0; d * c],
            w_v: vec![0.0; d * c],
            w_c: vec![0.0; d * 2 * d],
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.w_f
            .iter()
            .chain(&self.w_r)
            .chain(&self.w_v)
            .chain(&self.w_c)
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Everything the forward pass computes, cached for the backward pass.
#[derive(Clone, Debug)]
pub struct DflIntermediates {
    pub hw: usize,
    pub d: usize,
    /// hw x hw raw similarities.
    pub z: Vec<f64>,
    /// hw x hw softmax weights; every row sums to 1.
    pub d_w: Vec<f64>,
    /// hw x d aggregated reference features.
    pub v: Vec<f64>,
    /// hw x d enhanced features after the residual projection.
    pub f_tilde: Vec<f64>,
    /// hw x d final output (posterior-gated when a mask was given).
    pub f_hat: Vec<f64>,
    /// Per-pixel gate applied to `f_tilde`; `None` for the no-posterior variant.
    pub gate: Option<Vec<f64>>,
    // Pre-activations and transforms needed by the backward pass.
    qf: Vec<f64>,
    kr: Vec<f64>,
    vr_pre: Vec<f64>,
    vr: Vec<f64>,
    vq_pre: Vec<f64>,
    vq: Vec<f64>,
    f_tilde_pre: Vec<f64>,
}

/// Xavier-style uniform initialization, deterministic per seed. Matrices
/// are filled row-major in the order `W_F, W_R, W_v, W_c` from one
/// SplitMix64 stream.
pub fn dfl_init_params(seed: u64, c: usize, d: usize) -> Result<DflParams, CmeError> {
    if c == 0 || d == 0 {
        return Err(CmeError::Invalid(format!(
            "dfl dimensions must be positive, got c={c} d={d}"
        )));
    }
    let mut rng = SplitMix64::new(seed);
    let a_in = (6.0 / (c + d) as f64).sqrt();
    let a_mix = (6.0 / (3 * d) as f64).sqrt();
    let fill = |n: usize, a: f64, rng: &mut SplitMix64| -> Vec<f64> {
        (0..n).map(|_| rng.next_range(-a, a)).collect()
    };
    Ok(DflParams {
        c,
        d,
        seed,
        w_f: fill(d * c, a_in, &mut rng),
        w_r: fill(d * c, a_in, &mut rng),
        w_v: fill(d * c, a_in, &mut rng),
        w_c: fill(d * 2 * d, a_mix, &mut rng),
    })
}

/// Max-subtracted softmax of one row into `out`.
pub fn softmax_row(values: &[f64], out: &mut [f64]) {
    let m = values.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0;
    for (slot, &v) in out.iter_mut().zip(values) {
        let e = (v - m).exp();
        *slot = e;
        sum += e;
    }
    for slot in out.iter_mut() {
        *slot /= sum;
    }
}

fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let mut acc = 0.0;
        let row = &m[r * cols..(r + 1) * cols];
        for k in 0..cols {
            acc += row[k] * x[k];
        }
        out[r] = acc;
    }
}

fn check_forward_args(
    query: &FeatureMap,
    reference: &FeatureMap,
    p1_fg: Option<&Mask>,
    params: &DflParams,
) -> Result<(), CmeError> {
    if query.height() != reference.height()
        || query.width() != reference.width()
        || query.channels() != reference.channels()
    {
        return Err(CmeError::Dimension(format!(
            "query {}x{}x{} vs reference {}x{}x{}",
            query.height(),
            query.width(),
            query.channels(),
            reference.height(),
            reference.width(),
            reference.channels()
        )));
    }
    if let Some(m) = p1_fg {
        if m.height() != query.height() || m.width() != query.width() {
            return Err(CmeError::Dimension(format!(
                "posterior mask {}x{} vs query {}x{}",
                m.height(),
                m.width(),
                query.height(),
                query.width()
            )));
        }
    }
    if params.c != query.channels() {
        return Err(CmeError::Dimension(format!(
            "params expect {} channels, query has {}",
            params.c,
            query.channels()
        )));
    }
    Ok(())
}

/// Attention forward pass. `p1_fg = None` selects the no-posterior
/// variant (the final gating step is skipped).
pub fn dfl_forward(
    query: &FeatureMap,
    reference: &FeatureMap,
    p1_fg: Option<&Mask>,
    params: &DflParams,
) -> Result<(FeatureMap, DflIntermediates), CmeError> {
    check_forward_args(query, reference, p1_fg, params)?;
    let hw = query.pixel_count();
    let c = params.c;
    let d = params.d;

    // Per-pixel transforms of both grids.
    let mut qf = vec![0.0; hw * d];
    let mut kr = vec![0.0; hw * d];
    let mut vr_pre = vec![0.0; hw * d];
    let mut vq_pre = vec![0.0; hw * d];
    qf.par_chunks_mut(d).enumerate().for_each(|(i, out)| {
        matvec(&params.w_f, d, c, query.pixel(i), out);
    });
    kr.par_chunks_mut(d).enumerate().for_each(|(j, out)| {
        matvec(&params.w_r, d, c, reference.pixel(j), out);
    });
    vr_pre.par_chunks_mut(d).enumerate().for_each(|(j, out)| {
        matvec(&params.w_v, d, c, reference.pixel(j), out);
    });
    vq_pre.par_chunks_mut(d).enumerate().for_each(|(i, out)| {
        matvec(&params.w_v, d, c, query.pixel(i), out);
    });
    let vr: Vec<f64> = vr_pre.iter().map(|x| x.max(0.0)).collect();
    let vq: Vec<f64> = vq_pre.iter().map(|x| x.max(0.0)).collect();

    // Raw similarities and row softmax.
    let mut z = vec![0.0; hw * hw];
    z.par_chunks_mut(hw).enumerate().for_each(|(i, row)| {
        let qi = &qf[i * d..(i + 1) * d];
        for (j, slot) in row.iter_mut().enumerate() {
            let rj = &kr[j * d..(j + 1) * d];
            let mut acc = 0.0;
            for k in 0..d {
                acc += qi[k] * rj[k];
            }
            *slot = acc;
        }
    });
    let mut d_w = vec![0.0; hw * hw];
    d_w.par_chunks_mut(hw).enumerate().for_each(|(i, row)| {
        softmax_row(&z[i * hw..(i + 1) * hw], row);
    });

    // Weighted aggregation of the transformed reference.
    let mut v = vec![0.0; hw * d];
    v.par_chunks_mut(d).enumerate().for_each(|(i, out)| {
        let wrow = &d_w[i * hw..(i + 1) * hw];
        for j in 0..hw {
            let w = wrow[j];
            let vr_j = &vr[j * d..(j + 1) * d];
            for k in 0..d {
                out[k] += w * vr_j[k];
            }
        }
    });

    // Residual projection and optional posterior gate.
    let gate: Option<Vec<f64>> = p1_fg.map(|m| m.data().to_vec());
    let mut f_tilde_pre = vec![0.0; hw * d];
    f_tilde_pre
        .par_chunks_mut(d)
        .enumerate()
        .for_each(|(i, out)| {
            let vi = &v[i * d..(i + 1) * d];
            let qi = &vq[i * d..(i + 1) * d];
            for (r, slot) in out.iter_mut().enumerate() {
                let row = &params.w_c[r * 2 * d..(r + 1) * 2 * d];
                let mut acc = 0.0;
                for (rv, vv) in row[..d].iter().zip(vi) {
                    acc += rv * vv;
                }
                for (rv, qv) in row[d..].iter().zip(qi) {
                    acc += rv * qv;
                }
                *slot = acc;
            }
        });
    let f_tilde: Vec<f64> = f_tilde_pre.iter().map(|x| x.max(0.0)).collect();
    let f_hat: Vec<f64> = match &gate {
        Some(g) => f_tilde
            .iter()
            .enumerate()
            .map(|(idx, x)| x * g[idx / d])
            .collect(),
        None => f_tilde.clone(),
    };

    let out = FeatureMap::new(query.height(), query.width(), d, f_hat.clone())?;
    Ok((
        out,
        DflIntermediates {
            hw,
            d,
            z,
            d_w,
            v,
            f_tilde,
            f_hat,
            gate,
            qf,
            kr,
            vr_pre,
            vr,
            vq_pre,
            vq,
            f_tilde_pre,
        },
    ))
}

/// Exact gradients of `L = sum(loss_grad . f_hat)` with respect to the
/// four parameter matrices. `cache` must come from a forward pass over
/// the same `query`, `reference`, and gating mask.
pub fn dfl_backward(
    loss_grad: &FeatureMap,
    cache: &DflIntermediates,
    query: &FeatureMap,
    reference: &FeatureMap,
    params: &DflParams,
) -> Result<DflGradients, CmeError> {
    let hw = cache.hw;
    let d = cache.d;
    let c = params.c;
    if loss_grad.pixel_count() != hw || loss_grad.channels() != d {
        return Err(CmeError::Contract(format!(
            "loss gradient is {}x{} pixels x channels, cache expects {hw}x{d}",
            loss_grad.pixel_count(),
            loss_grad.channels()
        )));
    }
    if query.pixel_count() != hw
        || query.channels() != c
        || reference.pixel_count() != hw
        || reference.channels() != c
    {
        return Err(CmeError::Contract(
            "cached intermediates do not match the given inputs".into(),
        ));
    }

    let mut grads = DflGradients::zeros(c, d);

    // Through the gate and the output ReLU.
    let mut gy = vec![0.0; hw * d];
    for i in 0..hw {
        let g = match &cache.gate {
            Some(gate) => gate[i],
            None => 1.0,
        };
        for k in 0..d {
            let idx = i * d + k;
            let gt = loss_grad.data()[idx] * g;
            gy[idx] = if cache.f_tilde_pre[idx] > 0.0 {
                gt
            } else {
                0.0
            };
        }
    }

    // W_c and the concatenated input's gradient.
    let mut gv = vec![0.0; hw * d];
    let mut gvq = vec![0.0; hw * d];
    for i in 0..hw {
        let vi = &cache.v[i * d..(i + 1) * d];
        let qi = &cache.vq[i * d..(i + 1) * d];
        for r in 0..d {
            let gyr = gy[i * d + r];
            if gyr == 0.0 {
                continue;
            }
            let row = r * 2 * d;
            for k in 0..d {
                grads.w_c[row + k] += gyr * vi[k];
                grads.w_c[row + d + k] += gyr * qi[k];
            }
        }
        for k in 0..d {
            let mut acc_v = 0.0;
            let mut acc_q = 0.0;
            for r in 0..d {
                let gyr = gy[i * d + r];
                acc_v += gyr * params.w_c[r * 2 * d + k];
                acc_q += gyr * params.w_c[r * 2 * d + d + k];
            }
            gv[i * d + k] = acc_v;
            gvq[i * d + k] = acc_q;
        }
    }

    // Query-side W_v contribution.
    for i in 0..hw {
        let f_i = query.pixel(i);
        for k in 0..d {
            let idx = i * d + k;
            if cache.vq_pre[idx] > 0.0 && gvq[idx] != 0.0 {
                let row = &mut grads.w_v[k * c..(k + 1) * c];
                for (g, f) in row.iter_mut().zip(f_i) {
                    *g += gvq[idx] * f;
                }
            }
        }
    }

    // Aggregation: gradients of the weights and of the transformed reference.
    let mut gd = vec![0.0; hw * hw];
    let mut gvr = vec![0.0; hw * d];
    for i in 0..hw {
        let gv_i = &gv[i * d..(i + 1) * d];
        let wrow = &cache.d_w[i * hw..(i + 1) * hw];
        for j in 0..hw {
            let vr_j = &cache.vr[j * d..(j + 1) * d];
            let mut acc = 0.0;
            for k in 0..d {
                acc += gv_i[k] * vr_j[k];
            }
            gd[i * hw + j] = acc;
            let w = wrow[j];
            if w != 0.0 {
                for k in 0..d {
                    gvr[j * d + k] += w * gv_i[k];
                }
            }
        }
    }

    // Reference-side W_v contribution.
    for j in 0..hw {
        let r_j = reference.pixel(j);
        for k in 0..d {
            let idx = j * d + k;
            if cache.vr_pre[idx] > 0.0 && gvr[idx] != 0.0 {
                let row = &mut grads.w_v[k * c..(k + 1) * c];
                for (g, r) in row.iter_mut().zip(r_j) {
                    *g += gvr[idx] * r;
                }
            }
        }
    }

    // Softmax Jacobian, row by row.
    let mut gz = vec![0.0; hw * hw];
    for i in 0..hw {
        let wrow = &cache.d_w[i * hw..(i + 1) * hw];
        let grow = &gd[i * hw..(i + 1) * hw];
        let mut dot = 0.0;
        for j in 0..hw {
            dot += wrow[j] * grow[j];
        }
        for j in 0..hw {
            gz[i * hw + j] = wrow[j] * (grow[j] - dot);
        }
    }

    // Bilinear similarity: back to the transformed pixels, then W_F / W_R.
    let mut gqf = vec![0.0; hw * d];
    let mut gkr = vec![0.0; hw * d];
    for i in 0..hw {
        let gzrow = &gz[i * hw..(i + 1) * hw];
        let qf_i = &cache.qf[i * d..(i + 1) * d];
        for j in 0..hw {
            let g = gzrow[j];
            if g == 0.0 {
                continue;
            }
            let kr_j = &cache.kr[j * d..(j + 1) * d];
            for k in 0..d {
                gqf[i * d + k] += g * kr_j[k];
                gkr[j * d + k] += g * qf_i[k];
            }
        }
    }
    for i in 0..hw {
        let f_i = query.pixel(i);
        for k in 0..d {
            let g = gqf[i * d + k];
            if g != 0.0 {
                let row = &mut grads.w_f[k * c..(k + 1) * c];
                for (slot, f) in row.iter_mut().zip(f_i) {
                    *slot += g * f;
                }
            }
        }
    }
    for j in 0..hw {
        let r_j = reference.pixel(j);
        for k in 0..d {
            let g = gkr[j * d + k];
            if g != 0.0 {
                let row = &mut grads.w_r[k * c..(k + 1) * c];
                for (slot, r) in row.iter_mut().zip(r_j) {
                    *slot += g * r;
                }
            }
        }
    }

    Ok(grads)
}

const PARAMS_HEADER: &str = "dfl-params v1";

/// Writes parameters as text: header, `c d seed`, then the four matrices
/// row-major, one matrix per line. Round-trips bit-exactly.
pub fn save_params(params: &DflParams, path: &Path) -> Result<(), CmeError> {
    let mut out = String::new();
    out.push_str(PARAMS_HEADER);
    out.push('\n');
    out.push_str(&format!("{} {} {}\n", params.c, params.d, params.seed));
    for m in [&params.w_f, &params.w_r, &params.w_v, &params.w_c] {
        let line: Vec<String> = m.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

pub fn load_params(path: &Path) -> Result<DflParams, CmeError> {
    let text = fs::read_to_string(path)?;
    let ferr = |detail: String| CmeError::Format {
        path: path.display().to_string(),
        detail,
    };
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header.trim() != PARAMS_HEADER {
        return Err(ferr(format!(
            "expected header '{PARAMS_HEADER}', got '{header}'"
        )));
    }
    let dims: Vec<&str> = lines
        .next()
        .ok_or_else(|| ferr("missing dimension line".into()))?
        .split_whitespace()
        .collect();
    if dims.len() != 3 {
        return Err(ferr(format!(
            "expected 'c d seed', got {} fields",
            dims.len()
        )));
    }
    let c: usize = dims[0]
        .parse()
        .map_err(|_| ferr("'c' is not a count".into()))?;
    let d: usize = dims[1]
        .parse()
        .map_err(|_| ferr("'d' is not a count".into()))?;
    let seed: u64 = dims[2]
        .parse()
        .map_err(|_| ferr("'seed' is not a u64".into()))?;
    let mut read_matrix = |name: &str, n: usize| -> Result<Vec<f64>, CmeError> {
        let line = lines
            .next()
            .ok_or_else(|| ferr(format!("missing matrix '{name}'")))?;
        let values: Result<Vec<f64>, _> = line.split_whitespace().map(|t| t.parse()).collect();
        let values =
            values.map_err(|_| ferr(format!("matrix '{name}' has a non-numeric value")))?;
        if values.len() != n {
            return Err(ferr(format!(
                "matrix '{name}' has {} values, expected {n}",
                values.len()
            )));
        }
        if values.iter().any(|v: &f64| !v.is_finite()) {
            return Err(ferr(format!("matrix '{name}' has a non-finite value")));
        }
        Ok(values)
    };
    let w_f = read_matrix("w_f", d * c)?;
    let w_r = read_matrix("w_r", d * c)?;
    let w_v = read_matrix("w_v", d * c)?;
    let w_c = read_matrix("w_c", d * 2 * d)?;
    Ok(DflParams {
        c,
        d,
        seed,
        w_f,
        w_r,
        w_v,
        w_c,
    })
}

/// Fixed linear readout that turns a DFL output vector into a foreground
/// probability. Weights are seeded gaussians scaled by `1/d`, so the
/// logit stays small and the readout never overwhelms the matching
/// posterior it is fused with.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    weights: Vec<f64>,
}

impl LinearProbe {
    pub fn seeded(seed: u64, d: usize) -> Self {
        let mut rng = SplitMix64::new(seed);
        let weights = (0..d).map(|_| rng.next_gaussian() / d as f64).collect();
        Self { weights }
    }

    pub fn logit(&self, features: &[f64]) -> f64 {
        self.weights.iter().zip(features).map(|(w, f)| w * f).sum()
    }

    pub fn prob(&self, features: &[f64]) -> f64 {
        let x = self.logit(features);
        1.0 / (1.0 + (-x).exp())
    }
}

/// One gradient-descent step of cross-entropy between the probed DFL
/// output and a target mask. Returns the mean loss before the step.
pub fn toy_train_step(
    params: &mut DflParams,
    probe: &LinearProbe,
    query: &FeatureMap,
    reference: &FeatureMap,
    p1_fg: Option<&Mask>,
    target: &Mask,
    learning_rate: f64,
) -> Result<f64, CmeError> {
    if target.height() != query.height() || target.width() != query.width() {
        return Err(CmeError::Dimension(format!(
            "target mask {}x{} vs query {}x{}",
            target.height(),
            target.width(),
            query.height(),
            query.width()
        )));
    }
    let (out, cache) = dfl_forward(query, reference, p1_fg, params)?;
    let hw = out.pixel_count();
    let d = params.d;
    let mut loss = 0.0;
    let mut grad_data = vec![0.0; hw * d];
    for i in 0..hw {
        let p = probe.prob(out.pixel(i));
        let y = target.value(i);
        loss -= y * p.max(1e-12).ln() + (1.0 - y) * (1.0 - p).max(1e-12).ln();
        // d(BCE)/d(logit) = p - y, spread over the probe weights.
        let dlogit = (p - y) / hw as f64;
        for k in 0..d {
            grad_data[i * d + k] = dlogit * probe.weights[k];
        }
    }
    let loss_grad = FeatureMap::new(out.height(), out.width(), d, grad_data)?;
    let grads = dfl_backward(&loss_grad, &cache, query, reference, params)?;
    for (p, g) in params.w_f.iter_mut().zip(&grads.w_f) {
        *p -= learning_rate * g;
    }
    for (p, g) in params.w_r.iter_mut().zip(&grads.w_r) {
        *p -= learning_rate * g;
    }
    for (p, g) in params.w_v.iter_mut().zip(&grads.w_v) {
        *p -= learning_rate * g;
    }
    for (p, g) in params.w_c.iter_mut().zip(&grads.w_c) {
        *p -= learning_rate * g;
    }
    Ok(loss / hw as f64)
}
