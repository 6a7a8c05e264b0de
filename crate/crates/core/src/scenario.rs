//! Synthetic tracking sequences.
//!
//! A scenario places a rectangular target (and optionally a distractor)
//! on an `h x w` grid of `c`-dimensional features. Each object carries a
//! single identity vector per frame:
//!
//! - the target's identity starts at a seeded unit vector and rotates by
//!   `appearance_drift_rate` radians per frame inside a fixed plane, so
//!   the cosine between frame `t` and frame `0` is exactly `cos(t * rate)`;
//! - distractor pixels carry a unit vector at cosine `similarity` to the
//!   target's *current* identity;
//! - background pixels carry a common seeded unit identity plus fresh
//!   per-pixel gaussian noise scaled by `noise_sigma`. With zero noise the
//!   background is exactly that identity, which keeps the noise-free
//!   regime separable instead of degenerating to zero-norm pixels.
//!
//! Object supports are axis-aligned rectangles whose half-extents pulsate
//! out of phase, which deforms the shape per frame while keeping the
//! support equal to its own bounding box. All draws come from one
//! SplitMix64 stream seeded by the scenario seed, so generation is
//! byte-identical across runs.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::rng::SplitMix64;
use crate::types::{CmeError, FeatureMap, Mask};

/// Phase advance per frame of the support deformation, radians.
const DEFORM_RATE: f64 = 0.7;

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct Trajectory {
    /// Center (x, y) at frame 0, in pixel units.
    pub center: (f64, f64),
    /// Per-frame center displacement (x, y).
    pub velocity: (f64, f64),
    /// Base half-extent of the rectangular support.
    pub radius: f64,
    /// Relative half-extent modulation in [0, 1).
    pub deform_amplitude: f64,
}

impl Trajectory {
    fn center_at(&self, t: usize) -> (f64, f64) {
        (
            self.center.0 + t as f64 * self.velocity.0,
            self.center.1 + t as f64 * self.velocity.1,
        )
    }

    /// Half-extents (x, y) at frame `t`; the axes pulsate out of phase.
    fn extents_at(&self, t: usize) -> (f64, f64) {
        let phase = DEFORM_RATE * t as f64;
        (
            self.radius * (1.0 + self.deform_amplitude * phase.sin()),
            self.radius * (1.0 + self.deform_amplitude * phase.cos()),
        )
    }

    fn contains(&self, t: usize, x: usize, y: usize) -> bool {
        let (cx, cy) = self.center_at(t);
        let (rx, ry) = self.extents_at(t);
        (x as f64 + 0.5 - cx).abs() <= rx && (y as f64 + 0.5 - cy).abs() <= ry
    }

    fn validate(&self, name: &str, w: usize, h: usize, frames: usize) -> Result<(), CmeError> {
        if self.radius <= 0.0 {
            return Err(CmeError::Contract(format!(
                "{name} radius must be positive, got {}",
                self.radius
            )));
        }
        if !(0.0..1.0).contains(&self.deform_amplitude) {
            return Err(CmeError::Invalid(format!(
                "{name} deform_amplitude {} outside [0, 1)",
                self.deform_amplitude
            )));
        }
        for t in 0..frames {
            let (cx, cy) = self.center_at(t);
            let (rx, ry) = self.extents_at(t);
            if cx - rx < 0.0 || cx + rx > w as f64 || cy - ry < 0.0 || cy + ry > h as f64 {
                return Err(CmeError::Contract(format!(
                    "{name} leaves the frame bounds at frame {t} \
                     (center {cx:.2},{cy:.2}, extents {rx:.2},{ry:.2})"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct DistractorSpec {
    pub center: (f64, f64),
    pub velocity: (f64, f64),
    pub radius: f64,
    pub deform_amplitude: f64,
    /// Cosine between distractor and current target identity, in [0, 1].
    pub similarity: f64,
}

impl DistractorSpec {
    fn trajectory(&self) -> Trajectory {
        Trajectory {
            center: self.center,
            velocity: self.velocity,
            radius: self.radius,
            deform_amplitude: self.deform_amplitude,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct SyntheticScenario {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub frame_count: usize,
    pub seed: u64,
    /// Gaussian noise scale added to background pixels.
    pub noise_sigma: f64,
    /// Per-frame rotation of the target identity, radians.
    pub appearance_drift_rate: f64,
    pub target: Trajectory,
    pub distractor: Option<DistractorSpec>,
}

impl SyntheticScenario {
    pub fn from_toml(text: &str) -> Result<Self, CmeError> {
        let scenario: SyntheticScenario = toml::from_str(text)
            .map_err(|e| CmeError::Invalid(format!("scenario parse error: {e}")))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, CmeError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            CmeError::Invalid(detail) | CmeError::Contract(detail) => CmeError::Format {
                path: path.display().to_string(),
                detail,
            },
            other => other,
        })
    }

    /// Number of independent identity directions the generator draws.
    fn required_channels(&self) -> usize {
        2 + usize::from(self.appearance_drift_rate != 0.0) + usize::from(self.distractor.is_some())
    }

    pub fn validate(&self) -> Result<(), CmeError> {
        if self.h == 0 || self.w == 0 || self.c == 0 || self.frame_count == 0 {
            return Err(CmeError::Invalid(format!(
                "scenario dimensions must be positive, got {}x{}x{} over {} frames",
                self.h, self.w, self.c, self.frame_count
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(CmeError::Invalid(format!(
                "noise_sigma {} must be non-negative",
                self.noise_sigma
            )));
        }
        let needed = self.required_channels();
        if self.c < needed {
            return Err(CmeError::Invalid(format!(
                "scenario needs at least {needed} channels for its identity directions, got {}",
                self.c
            )));
        }
        self.target
            .validate("target", self.w, self.h, self.frame_count)?;
        if let Some(d) = &self.distractor {
            if !(0.0..=1.0).contains(&d.similarity) {
                return Err(CmeError::Invalid(format!(
                    "distractor similarity {} outside [0, 1]",
                    d.similarity
                )));
            }
            d.trajectory()
                .validate("distractor", self.w, self.h, self.frame_count)?;
        }
        Ok(())
    }
}

/// Draws a unit vector orthogonal to all of `basis`.
fn orthogonal_unit(rng: &mut SplitMix64, n: usize, basis: &[Vec<f64>]) -> Vec<f64> {
    loop {
        let mut v = rng.gaussian_vec(n);
        for b in basis {
            let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= dot * bi;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Generates the frame sequence with per-frame ground-truth foreground
/// masks. Deterministic per seed.
pub fn generate_scenario(spec: &SyntheticScenario) -> Result<Vec<(FeatureMap, Mask)>, CmeError> {
    spec.validate()?;
    let mut rng = SplitMix64::new(spec.seed);
    let c = spec.c;

    // Identity directions, drawn in a fixed order.
    let target_base = rng.unit_vec(c);
    let drift_partner = if spec.appearance_drift_rate != 0.0 {
        Some(orthogonal_unit(
            &mut rng,
            c,
            std::slice::from_ref(&target_base),
        ))
    } else {
        None
    };
    let distractor_dir = if spec.distractor.is_some() {
        let mut basis = vec![target_base.clone()];
        if let Some(p) = &drift_partner {
            basis.push(p.clone());
        }
        Some(orthogonal_unit(&mut rng, c, &basis))
    } else {
        None
    };
    let background = {
        let mut basis = vec![target_base.clone()];
        if let Some(p) = &drift_partner {
            basis.push(p.clone());
        }
        if let Some(d) = &distractor_dir {
            basis.push(d.clone());
        }
        orthogonal_unit(&mut rng, c, &basis)
    };

    let distractor_traj = spec.distractor.as_ref().map(|d| d.trajectory());
    let mut frames = Vec::with_capacity(spec.frame_count);
    for t in 0..spec.frame_count {
        // Target identity at this frame.
        let theta = spec.appearance_drift_rate * t as f64;
        let target_vec: Vec<f64> = match &drift_partner {
            Some(p) => target_base
                .iter()
                .zip(p)
                .map(|(u, v)| theta.cos() * u + theta.sin() * v)
                .collect(),
            None => target_base.clone(),
        };
        let distractor_vec: Option<Vec<f64>> = spec.distractor.as_ref().map(|d| {
            let rho = d.similarity;
            let ortho = (1.0 - rho * rho).max(0.0).sqrt();
            distractor_dir
                .as_ref()
                .unwrap()
                .iter()
                .zip(&target_vec)
                .map(|(w, u)| rho * u + ortho * w)
                .collect()
        });

        let mut data = Vec::with_capacity(spec.h * spec.w * c);
        let mut truth = Vec::with_capacity(spec.h * spec.w);
        let mut target_pixels = 0usize;
        for y in 0..spec.h {
            for x in 0..spec.w {
                if spec.target.contains(t, x, y) {
                    data.extend_from_slice(&target_vec);
                    truth.push(1.0);
                    target_pixels += 1;
                } else if distractor_traj
                    .as_ref()
                    .is_some_and(|d| d.contains(t, x, y))
                {
                    data.extend_from_slice(distractor_vec.as_ref().unwrap());
                    truth.push(0.0);
                } else {
                    for &b in &background {
                        data.push(b + spec.noise_sigma * rng.next_gaussian());
                    }
                    truth.push(0.0);
                }
            }
        }
        if target_pixels == 0 {
            return Err(CmeError::Contract(format!(
                "target support is empty at frame {t}"
            )));
        }
        frames.push((
            FeatureMap::new(spec.h, spec.w, c, data)?,
            Mask::new(spec.h, spec.w, truth)?,
        ));
    }
    Ok(frames)
}
