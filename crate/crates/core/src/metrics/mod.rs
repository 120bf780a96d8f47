//! Image and landmark metrics: PSNR, SSIM, LMD and the PCA projection.

mod landmarks;
mod pca;

use serde::{Deserialize, Serialize};

pub use landmarks::{extract_landmarks, luma_plane, mouth_coverage};
pub use pca::{pca_project_2d, PcaProjection};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::kv::KeyValues;
use crate::tensor::{Scalar, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("images differ in shape: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over all channels; `+inf` when the images
/// are identical.
pub fn psnr<S: Scalar>(real: &Tensor<S>, generated: &Tensor<S>, max_value: f64) -> Result<f64> {
    same_shape(real, generated)?;
    if !(max_value > 0.0) {
        return Err(Error::Domain(format!("max_value must be positive, got {max_value}")));
    }
    let mse = real
        .data()
        .iter()
        .zip(generated.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / real.numel().max(1) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Mean SSIM over all valid 11x11 Gaussian windows of the luma planes, for
/// images with dynamic range 1.
pub fn ssim<S: Scalar>(real: &Tensor<S>, generated: &Tensor<S>) -> Result<f64> {
    same_shape(real, generated)?;
    let (x, h, w) = luma_plane(real)?;
    let (y, _, _) = luma_plane(generated)?;
    ssim_plane(&x, &y, h, w)
}

/// SSIM of two single-channel `h x w` planes.
pub fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<f64> {
    if x.len() != h * w || y.len() != h * w {
        return Err(Error::Shape(format!("planes must have {} values", h * w)));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Validation(format!("image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")));
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let g = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..=h - SSIM_WINDOW {
        for ox in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (dy, gy) in g.iter().enumerate() {
                for (dx, gx) in g.iter().enumerate() {
                    let wgt = gy * gx;
                    let i = (oy + dy) * w + ox + dx;
                    let (a, b) = (x[i], y[i]);
                    mx += wgt * a;
                    my += wgt * b;
                    // Grouped so that swapping x and y, or passing x twice,
                    // yields bit-identical sums.
                    sxx += wgt * (a * a);
                    syy += wgt * (b * b);
                    sxy += wgt * (a * b);
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            let lum = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
            let cs = (2.0 * cov + c2) / (vx + vy + c2);
            total += lum * cs;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean Euclidean distance between corresponding landmarks over all frames.
pub fn lmd<A: AsRef<[Point]>>(real: &[A], generated: &[A]) -> Result<f64> {
    if real.len() != generated.len() {
        return Err(Error::Validation(format!("{} real frames vs {} generated", real.len(), generated.len())));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (r, g)) in real.iter().zip(generated).enumerate() {
        let (r, g) = (r.as_ref(), g.as_ref());
        if r.len() != g.len() {
            return Err(Error::Validation(format!("frame {i}: {} vs {} landmarks", r.len(), g.len())));
        }
        for (a, b) in r.iter().zip(g) {
            total += a.distance(b);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Validation("no landmarks to compare".into()));
    }
    Ok(total / count as f64)
}

/// Metrics for one evaluated sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub sequence: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub lmd_px: f64,
    /// Frames where the detector found no mouth and fell back to the region
    /// centre.
    pub detection_failures: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sequences: Vec<SequenceMetrics>,
    pub psnr_db: f64,
    pub ssim: f64,
    pub lmd_px: f64,
    pub detection_failures: usize,
}

impl MetricReport {
    pub fn from_sequences(sequences: Vec<SequenceMetrics>) -> Self {
        let n = sequences.len().max(1) as f64;
        Self {
            psnr_db: sequences.iter().map(|s| s.psnr_db).sum::<f64>() / n,
            ssim: sequences.iter().map(|s| s.ssim).sum::<f64>() / n,
            lmd_px: sequences.iter().map(|s| s.lmd_px).sum::<f64>() / n,
            detection_failures: sequences.iter().map(|s| s.detection_failures).sum(),
            sequences,
        }
    }

    /// `key=value` rendering; floats are written with round-trip precision.
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("psnr_db", self.psnr_db);
        kv.set("ssim", self.ssim);
        kv.set("lmd_px", self.lmd_px);
        kv.set("detection_failures", self.detection_failures);
        kv.set("num_sequences", self.sequences.len());
        for s in &self.sequences {
            let p = format!("seq.{}", s.sequence);
            kv.set(format!("{p}.psnr_db"), s.psnr_db);
            kv.set(format!("{p}.ssim"), s.ssim);
            kv.set(format!("{p}.lmd_px"), s.lmd_px);
            kv.set(format!("{p}.detection_failures"), s.detection_failures);
        }
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let n: usize = kv.parse_value("num_sequences")?;
        let mut ids: Vec<usize> = kv
            .iter()
            .filter_map(|(k, _)| k.strip_prefix("seq.")?.strip_suffix(".psnr_db")?.parse().ok())
            .collect();
        ids.sort_unstable();
        if ids.len() != n {
            return Err(Error::Validation(format!("report lists {} sequences, expected {n}", ids.len())));
        }
        let sequences = ids
            .into_iter()
            .map(|i| {
                let p = format!("seq.{i}");
                Ok(SequenceMetrics {
                    sequence: i,
                    psnr_db: kv.parse_value(&format!("{p}.psnr_db"))?,
                    ssim: kv.parse_value(&format!("{p}.ssim"))?,
                    lmd_px: kv.parse_value(&format!("{p}.lmd_px"))?,
                    detection_failures: kv.parse_value(&format!("{p}.detection_failures"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sequences,
            psnr_db: kv.parse_value("psnr_db")?,
            ssim: kv.parse_value("ssim")?,
            lmd_px: kv.parse_value("lmd_px")?,
            detection_failures: kv.parse_value("detection_failures")?,
        })
    }

    /// One JSON object per sequence; infinite PSNR is written as `"inf"`.
    pub fn json_lines(&self) -> Vec<String> {
        self.sequences
            .iter()
            .map(|s| {
                let psnr = if s.psnr_db.is_finite() { serde_json::json!(s.psnr_db) } else { serde_json::json!("inf") };
                serde_json::json!({
                    "kind": "eval",
                    "sequence": s.sequence,
                    "psnr_db": psnr,
                    "ssim": s.ssim,
                    "lmd_px": s.lmd_px,
                    "detection_failures": s.detection_failures,
                })
                .to_string()
            })
            .collect()
    }
}
