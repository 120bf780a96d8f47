//! Procedural face renderer with exact mouth landmarks.
//!
//! Faces are drawn as layered ellipses with 4x4 supersampling. Only the
//! mouth changes from frame to frame: it is a dark ellipse whose vertical
//! half-gap is `mouth_open * max_gap / 2`, thickened by a constant lip line
//! so a closed mouth is still visible.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, Region};

pub const MOUTH_COLOR: [f64; 3] = [0.22, 0.04, 0.07];
const EYE_COLOR: [f64; 3] = [0.10, 0.08, 0.09];
const SUPERSAMPLE: usize = 4;

/// Rec. 601 luma.
pub fn luma(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

/// Per-identity appearance, all in normalized `[0, 1]` units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityParams {
    pub face_tint: [f32; 3],
    pub background: [f32; 3],
    /// Horizontal eye offset from the face center.
    pub eye_dx: f32,
    pub eye_y: f32,
    /// Face ellipse semi-axes (horizontal, vertical).
    pub face_axes: [f32; 2],
}

impl IdentityParams {
    pub const LEN: usize = 10;

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut u = |lo: f32, hi: f32| rng.random_range(lo..hi);
        let skin = u(0.55, 0.85);
        let face_tint = [skin, skin * u(0.70, 0.85), skin * u(0.55, 0.70)];
        // Backgrounds are lighter than any skin tone so the mouth is the only
        // dark blob near the lips.
        let bg = u(0.88, 0.98);
        let background = [bg, bg * u(0.95, 1.0), bg * u(0.92, 1.0)];
        Self {
            face_tint,
            background,
            eye_dx: u(0.12, 0.17),
            eye_y: u(0.36, 0.42),
            face_axes: [u(0.34, 0.42), u(0.42, 0.48)],
        }
    }

    pub fn to_vec(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(Self::LEN);
        v.extend_from_slice(&self.face_tint);
        v.extend_from_slice(&self.background);
        v.extend_from_slice(&[self.eye_dx, self.eye_y]);
        v.extend_from_slice(&self.face_axes);
        v
    }

    pub fn from_slice(v: &[f32]) -> Result<Self> {
        if v.len() != Self::LEN {
            return Err(Error::Validation(format!("identity needs {} values, got {}", Self::LEN, v.len())));
        }
        let p = Self {
            face_tint: [v[0], v[1], v[2]],
            background: [v[3], v[4], v[5]],
            eye_dx: v[6],
            eye_y: v[7],
            face_axes: [v[8], v[9]],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_vec().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain(format!("identity parameters must lie in [0, 1]: {self:?}")));
        }
        Ok(())
    }
}

/// Mouth placement in pixels for a given image size. Faces are aligned, so
/// this is identical for every identity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MouthGeometry {
    pub center: Point,
    pub half_width: f64,
    /// Lip gap at `mouth_open = 1`.
    pub max_gap: f64,
    /// Added to the vertical half-gap when drawing.
    pub lip_half_thickness: f64,
    /// Margin added around the mouth's extreme extent for [`Self::region`].
    pub dilation: usize,
}

impl MouthGeometry {
    pub fn for_size(size: usize) -> Self {
        let s = size as f64;
        Self {
            center: Point::new(0.5 * s, 0.70 * s),
            half_width: 0.125 * s,
            max_gap: 12.0 * s / 64.0,
            lip_half_thickness: s / 64.0,
            dilation: ((4.0 * s / 64.0).round() as usize).max(1),
        }
    }

    pub fn half_gap(&self, mouth_open: f64) -> f64 {
        0.5 * mouth_open * self.max_gap
    }

    /// Corners (left, right) then lip midpoints (top, bottom).
    pub fn landmarks(&self, mouth_open: f64) -> [Point; 4] {
        let c = self.center;
        let ry = self.half_gap(mouth_open);
        [
            Point::new(c.x - self.half_width, c.y),
            Point::new(c.x + self.half_width, c.y),
            Point::new(c.x, c.y - ry),
            Point::new(c.x, c.y + ry),
        ]
    }

    /// Bounding box of the widest-open mouth, dilated by `dilation` pixels.
    pub fn region(&self, size: usize) -> Region {
        let half_h = self.half_gap(1.0) + self.lip_half_thickness;
        let d = self.dilation as f64;
        let clamp = |v: f64| v.max(0.0).min(size as f64) as usize;
        Region::new(
            clamp((self.center.x - self.half_width - d).floor()),
            clamp((self.center.y - half_h - d).floor()),
            clamp((self.center.x + self.half_width + d).ceil()),
            clamp((self.center.y + half_h + d).ceil()),
        )
    }
}

/// Default lip region for `size x size` frames.
pub fn mouth_region(size: usize) -> Region {
    MouthGeometry::for_size(size).region(size)
}

fn inside_ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let dx = (x - cx) / rx;
    let dy = (y - cy) / ry;
    dx * dx + dy * dy <= 1.0
}

/// Renders one `3 x size x size` planar frame and its mouth landmarks.
pub fn render_scene_frame(identity: &IdentityParams, mouth_open: f64, size: usize) -> Result<(Vec<f32>, [Point; 4])> {
    if !(0.0..=1.0).contains(&mouth_open) {
        return Err(Error::Domain(format!("mouth_open must be in [0, 1], got {mouth_open}")));
    }
    if size < 8 {
        return Err(Error::Domain(format!("image size {size} is too small to render a face")));
    }
    identity.validate()?;
    let s = size as f64;
    let geom = MouthGeometry::for_size(size);
    let tint = identity.face_tint.map(f64::from);
    let bg = identity.background.map(f64::from);
    let (fa, fb) = (identity.face_axes[0] as f64 * s, identity.face_axes[1] as f64 * s);
    let (fcx, fcy) = (0.5 * s, 0.5 * s);
    let eye_r = 0.04 * s;
    let eye_y = identity.eye_y as f64 * s;
    let eyes = [fcx - identity.eye_dx as f64 * s, fcx + identity.eye_dx as f64 * s];
    let mouth_ry = geom.half_gap(mouth_open) + geom.lip_half_thickness;

    let mut image = vec![0.0f32; 3 * size * size];
    let n_sub = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for py in 0..size {
        for px in 0..size {
            let mut acc = [0.0f64; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    let color = if inside_ellipse(x, y, geom.center.x, geom.center.y, geom.half_width, mouth_ry) {
                        MOUTH_COLOR
                    } else if eyes.iter().any(|&ex| inside_ellipse(x, y, ex, eye_y, eye_r, eye_r)) {
                        EYE_COLOR
                    } else if inside_ellipse(x, y, fcx, fcy, fa, fb) {
                        tint
                    } else {
                        bg
                    };
                    for c in 0..3 {
                        acc[c] += color[c];
                    }
                }
            }
            for c in 0..3 {
                image[(c * size + py) * size + px] = (acc[c] / n_sub) as f32;
            }
        }
    }
    Ok((image, geom.landmarks(mouth_open)))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn identity() -> IdentityParams {
        IdentityParams::random(&mut ChaCha8Rng::seed_from_u64(9))
    }

    #[test]
    fn closed_mouth_has_zero_gap() {
        let (_, lm) = render_scene_frame(&identity(), 0.0, 64).unwrap();
        assert_eq!(lm[2], lm[3]);
    }

    #[test]
    fn open_mouth_gap_equals_max_gap() {
        let (_, lm) = render_scene_frame(&identity(), 1.0, 64).unwrap();
        assert_eq!(lm[3].y - lm[2].y, 12.0);
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = render_scene_frame(&identity(), 0.37, 64).unwrap();
        let b = render_scene_frame(&identity(), 0.37, 64).unwrap();
        assert!(a.0.iter().zip(&b.0).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn out_of_range_inputs() {
        assert!(matches!(render_scene_frame(&identity(), 1.5, 64), Err(Error::Domain(_))));
        let mut bad = identity();
        bad.eye_y = 2.0;
        assert!(matches!(render_scene_frame(&bad, 0.5, 64), Err(Error::Domain(_))));
    }

    #[test]
    fn landmarks_inside_image_and_region() {
        for size in [32, 64] {
            let region = mouth_region(size);
            region.validate(size, size).unwrap();
            for open in [0.0, 0.5, 1.0] {
                let (_, lm) = render_scene_frame(&identity(), open, size).unwrap();
                for p in lm {
                    assert!(p.x >= 0.0 && p.x < size as f64 && p.y >= 0.0 && p.y < size as f64);
                    assert!(region.contains_point(&p));
                }
            }
        }
    }

    #[test]
    fn identity_round_trips_through_slice() {
        let id = identity();
        assert_eq!(IdentityParams::from_slice(&id.to_vec()).unwrap(), id);
    }

    #[test]
    fn pixels_in_unit_range() {
        let (img, _) = render_scene_frame(&identity(), 0.8, 32).unwrap();
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
