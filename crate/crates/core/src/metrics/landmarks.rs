//! Mouth landmark detector for frames from the synthetic renderer.
//!
//! Pixels are scored by how far their luma sits between the surrounding skin
//! (the region median) and the mouth colour, giving a fractional coverage
//! map. The mouth ellipse is then recovered from the coverage moments: its
//! centroid, its vertical extent through the centroid and its total area.

use crate::error::{Error, Result};
use crate::geometry::{Point, Region};
use crate::synthetic_data::render::{luma, MouthGeometry, MOUTH_COLOR};
use crate::tensor::{Scalar, Tensor};

/// Minimum skin-to-mouth luma contrast for detection to proceed.
const MIN_CONTRAST: f64 = 0.05;
/// Coverage mass (in pixels) below which no mouth is reported.
const MIN_MASS: f64 = 0.5;

fn image_dims<S: Scalar>(frame: &Tensor<S>) -> Result<(usize, usize)> {
    let shape = frame.shape();
    let chw = match shape.len() {
        3 => shape,
        4 if shape[0] == 1 => &shape[1..],
        _ => return Err(Error::Shape(format!("expected a [3, H, W] frame, got {shape:?}"))),
    };
    if chw[0] != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {shape:?}")));
    }
    Ok((chw[1], chw[2]))
}

/// Per-pixel luma of a planar RGB frame.
pub fn luma_plane<S: Scalar>(frame: &Tensor<S>) -> Result<(Vec<f64>, usize, usize)> {
    let (h, w) = image_dims(frame)?;
    let d = frame.data();
    let plane = h * w;
    let y = (0..plane).map(|i| luma([d[i].as_f64(), d[plane + i].as_f64(), d[2 * plane + i].as_f64()])).collect();
    Ok((y, h, w))
}

/// Fractional mouth coverage inside `region`, row-major `height x width` of
/// the region.
pub fn mouth_coverage<S: Scalar>(frame: &Tensor<S>, region: &Region) -> Result<Vec<f64>> {
    let (y, h, w) = luma_plane(frame)?;
    region.validate(w, h)?;
    let mut vals: Vec<f64> = Vec::with_capacity(region.area());
    for py in region.y0..region.y1 {
        vals.extend_from_slice(&y[py * w + region.x0..py * w + region.x1]);
    }
    let mut sorted = vals.clone();
    sorted.sort_by(f64::total_cmp);
    let skin = sorted[sorted.len() / 2];
    let contrast = skin - luma(MOUTH_COLOR);
    if !(contrast >= MIN_CONTRAST) {
        return Err(Error::Detection(format!("no skin/mouth contrast in region (skin luma {skin:.3})")));
    }
    Ok(vals.into_iter().map(|v| ((skin - v) / contrast).clamp(0.0, 1.0)).collect())
}

/// Left corner, right corner, top lip midpoint, bottom lip midpoint.
pub fn extract_landmarks<S: Scalar>(frame: &Tensor<S>, region: &Region) -> Result<[Point; 4]> {
    let (_, w) = image_dims(frame)?;
    let cov = mouth_coverage(frame, region)?;
    let (rw, rh) = (region.width(), region.height());
    let mass: f64 = cov.iter().sum();
    if mass < MIN_MASS {
        return Err(Error::Detection(format!("only {mass:.3} px of mouth coverage found")));
    }
    let mut cx = 0.0;
    let mut cy = 0.0;
    let mut columns = vec![0.0; rw];
    for (i, &a) in cov.iter().enumerate() {
        let (lx, ly) = (i % rw, i / rw);
        cx += a * (lx as f64 + 0.5);
        cy += a * (ly as f64 + 0.5);
        columns[lx] += a;
    }
    cx /= mass;
    cy /= mass;
    // Column height at the centroid, interpolating between column centres.
    let u = (cx - 0.5).clamp(0.0, (rw - 1) as f64);
    let k = (u.floor() as usize).min(rw.saturating_sub(2));
    let frac = if rw > 1 { u - k as f64 } else { 0.0 };
    let height = if rw > 1 { columns[k] * (1.0 - frac) + columns[k + 1] * frac } else { columns[0] };
    let semi_minor = 0.5 * height;
    if semi_minor <= 0.0 || rh == 0 {
        return Err(Error::Detection("mouth has no vertical extent".into()));
    }
    let semi_major = mass / (std::f64::consts::PI * semi_minor);
    let half_gap = (semi_minor - MouthGeometry::for_size(w).lip_half_thickness).max(0.0);
    let (x, y) = (region.x0 as f64 + cx, region.y0 as f64 + cy);
    Ok([
        Point::new(x - semi_major, y),
        Point::new(x + semi_major, y),
        Point::new(x, y - half_gap),
        Point::new(x, y + half_gap),
    ])
}
