//! Mouth trajectories, audio drivers and their feature grids.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const FEATURE_STEPS: usize = 20;
pub const FEATURE_COEFFS: usize = 13;
/// Spacing (in frames) between consecutive feature rows.
const ROW_SPACING: f64 = 0.2;
const SMOOTHING: usize = 5;

/// Smooth random trajectory in `[0, 1]`: Gaussian noise, a box filter of
/// width 5, then min-max rescaling.
pub fn mouth_trajectory<R: Rng + ?Sized>(frames: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..frames + SMOOTHING - 1).map(|_| rng.sample(StandardNormal)).collect();
    let smooth: Vec<f64> = raw.windows(SMOOTHING).map(|w| w.iter().sum::<f64>() / SMOOTHING as f64).collect();
    let lo = smooth.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = smooth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return vec![0.5; frames];
    }
    smooth.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// `clamp(mouth_open + noise * N(0, 1), 0, 1)`; with `noise == 0` the driver
/// is the trajectory itself and no randomness is consumed.
pub fn audio_driver<R: Rng + ?Sized>(mouth_open: &[f64], noise: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Domain(format!("noise must be finite and non-negative, got {noise}")));
    }
    if noise == 0.0 {
        return Ok(mouth_open.to_vec());
    }
    Ok(mouth_open
        .iter()
        .map(|&m| {
            let e: f64 = rng.sample(StandardNormal);
            (m + noise * e).clamp(0.0, 1.0)
        })
        .collect())
}

fn sample_linear(signal: &[f64], t: f64) -> f64 {
    let last = (signal.len() - 1) as f64;
    let t = t.clamp(0.0, last);
    let i = t.floor() as usize;
    if i as f64 == last {
        return signal[i];
    }
    let frac = t - i as f64;
    signal[i] * (1.0 - frac) + signal[i + 1] * frac
}

/// Expands one driver value into the coefficient row.
fn coefficients(d: f64, out: &mut [f64]) {
    out[0] = 2.0 * d - 1.0;
    for (c, v) in out.iter_mut().enumerate().skip(1) {
        *v = (std::f64::consts::PI * c as f64 * d).cos() / (1.0 + 0.1 * c as f64);
    }
}

/// Features for frame `index`: a `20 x 13` row-major grid. Row `r` samples
/// the driver at `index + (r - 9.5) * 0.2`, linearly interpolated and clamped
/// to the track.
pub fn frame_features(driver: &[f64], index: usize) -> Result<Vec<f64>> {
    if index >= driver.len() {
        return Err(Error::Validation(format!("frame {index} outside a track of {}", driver.len())));
    }
    let mut out = vec![0.0; FEATURE_STEPS * FEATURE_COEFFS];
    let centre = (FEATURE_STEPS as f64 - 1.0) / 2.0;
    for (r, row) in out.chunks_exact_mut(FEATURE_COEFFS).enumerate() {
        let t = index as f64 + (r as f64 - centre) * ROW_SPACING;
        coefficients(sample_linear(driver, t), row);
    }
    Ok(out)
}
