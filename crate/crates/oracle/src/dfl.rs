//! Naive attention forward pass and central finite differences.

use cme_core::dfl::{DflGradients, DflParams};
use cme_core::types::{CmeError, FeatureMap, Mask};

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

fn transform(m: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        for k in 0..cols {
            out[r] += m[r * cols + k] * x[k];
        }
    }
    out
}

/// Attention forward pass written as explicit loops: raw similarities,
/// plain softmax (no max subtraction), weighted aggregation, residual
/// projection, and the optional posterior gate.
pub fn naive_dfl_forward(
    query: &FeatureMap,
    reference: &FeatureMap,
    p1_fg: Option<&Mask>,
    params: &DflParams,
) -> Result<FeatureMap, CmeError> {
    if query.height() != reference.height()
        || query.width() != reference.width()
        || query.channels() != reference.channels()
        || query.channels() != params.channels()
    {
        return Err(CmeError::Dimension("naive forward shape mismatch".into()));
    }
    if let Some(m) = p1_fg {
        if m.pixel_count() != query.pixel_count() {
            return Err(CmeError::Dimension("naive forward mask mismatch".into()));
        }
    }
    let hw = query.pixel_count();
    let c = params.channels();
    let d = params.hidden();

    let mut out = Vec::with_capacity(hw * d);
    for i in 0..hw {
        let qf = transform(&params.w_f, d, c, query.pixel(i));

        // Softmax weights over every reference pixel.
        let mut weights = vec![0.0; hw];
        let mut denom = 0.0;
        for j in 0..hw {
            let kr = transform(&params.w_r, d, c, reference.pixel(j));
            let mut z = 0.0;
            for k in 0..d {
                z += qf[k] * kr[k];
            }
            weights[j] = z.exp();
            denom += weights[j];
        }
        for w in weights.iter_mut() {
            *w /= denom;
        }

        // Weighted aggregation of the transformed reference.
        let mut v = vec![0.0; d];
        for j in 0..hw {
            let vr = transform(&params.w_v, d, c, reference.pixel(j));
            for k in 0..d {
                v[k] += weights[j] * relu(vr[k]);
            }
        }

        // Residual projection over the concatenated pair.
        let vq = transform(&params.w_v, d, c, query.pixel(i));
        let mut f_tilde = vec![0.0; d];
        for r in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += params.w_c[r * 2 * d + k] * v[k];
            }
            for k in 0..d {
                acc += params.w_c[r * 2 * d + d + k] * relu(vq[k]);
            }
            f_tilde[r] = relu(acc);
        }

        let gate = p1_fg.map(|m| m.value(i)).unwrap_or(1.0);
        for k in 0..d {
            out.push(f_tilde[k] * gate);
        }
    }
    FeatureMap::new(query.height(), query.width(), d, out)
}

fn loss_of(
    params: &DflParams,
    query: &FeatureMap,
    reference: &FeatureMap,
    p1_fg: Option<&Mask>,
    loss_grad: &FeatureMap,
) -> Result<f64, CmeError> {
    let out = naive_dfl_forward(query, reference, p1_fg, params)?;
    let mut acc = 0.0;
    for (g, f) in loss_grad.data().iter().zip(out.data()) {
        acc += g * f;
    }
    Ok(acc)
}

fn perturbed(params: &DflParams, matrix: usize, idx: usize, delta: f64) -> DflParams {
    let mut p = params.clone();
    match matrix {
        0 => p.w_f[idx] += delta,
        1 => p.w_r[idx] += delta,
        2 => p.w_v[idx] += delta,
        _ => p.w_c[idx] += delta,
    }
    p
}

/// Central finite differences of `L = sum(loss_grad . f_hat)` with respect
/// to every parameter entry, evaluated through the naive forward pass.
pub fn fd_gradients(
    params: &DflParams,
    query: &FeatureMap,
    reference: &FeatureMap,
    p1_fg: Option<&Mask>,
    loss_grad: &FeatureMap,
    step: f64,
) -> Result<DflGradients, CmeError> {
    let sizes = [
        params.w_f.len(),
        params.w_r.len(),
        params.w_v.len(),
        params.w_c.len(),
    ];
    let mut out: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    for (matrix, &n) in sizes.iter().enumerate() {
        for idx in 0..n {
            let plus = loss_of(
                &perturbed(params, matrix, idx, step),
                query,
                reference,
                p1_fg,
                loss_grad,
            )?;
            let minus = loss_of(
                &perturbed(params, matrix, idx, -step),
                query,
                reference,
                p1_fg,
                loss_grad,
            )?;
            out[matrix][idx] = (plus - minus) / (2.0 * step);
        }
    }
    let mut it = out.into_iter();
    Ok(DflGradients {
        w_f: it.next().unwrap(),
        w_r: it.next().unwrap(),
        w_v: it.next().unwrap(),
        w_c: it.next().unwrap(),
    })
}

/// Relative error with a floor that keeps near-zero pairs comparable.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error across all four gradient matrices.
pub fn max_relative_error(analytic: &DflGradients, numeric: &DflGradients) -> f64 {
    let pairs = [
        (&analytic.w_f, &numeric.w_f),
        (&analytic.w_r, &numeric.w_r),
        (&analytic.w_v, &numeric.w_v),
        (&analytic.w_c, &numeric.w_c),
    ];
    let mut worst = 0.0f64;
    for (a, n) in pairs {
        for (x, y) in a.iter().zip(n) {
            worst = worst.max(relative_error(*x, *y));
        }
    }
    worst
}

/// Like [`max_relative_error`] but reports which matrix holds the worst
/// entry, for diagnostics.
pub fn worst_offender(analytic: &DflGradients, numeric: &DflGradients) -> (&'static str, f64) {
    let pairs = [
        ("w_f", &analytic.w_f, &numeric.w_f),
        ("w_r", &analytic.w_r, &numeric.w_r),
        ("w_v", &analytic.w_v, &numeric.w_v),
        ("w_c", &analytic.w_c, &numeric.w_c),
    ];
    let mut worst = ("w_f", 0.0f64);
    for (name, a, n) in pairs {
        for (x, y) in a.iter().zip(n) {
            let e = relative_error(*x, *y);
            if e > worst.1 {
                worst = (name, e);
            }
        }
    }
    worst
}
