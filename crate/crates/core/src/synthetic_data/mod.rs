//! Paired data with known ground truth: correlated Gaussians for estimator
//! checks and rendered talking-face sequences for the generation pipeline.

pub mod audio;
pub mod render;
mod store;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use audio::{audio_driver, frame_features, mouth_trajectory, FEATURE_COEFFS, FEATURE_STEPS};
pub use render::{mouth_region, render_scene_frame, IdentityParams, MouthGeometry};
pub use store::{load_dataset, save_dataset, DatasetManifest, FORMAT_TAG, FORMAT_VERSION};

use crate::error::{Error, Result};
use crate::geometry::{Point, Region};
use crate::info_oracle::{DiscreteJoint, GaussianPairSpec};
use crate::mi_estimators::{make_marginal_batch, PairedBatch};
use crate::tensor::{Scalar, Tensor};

/// `n` pairs with `y = rho * x + sqrt(1 - rho^2) * e` per dimension, plus
/// deranged marginals.
pub fn sample_correlated_gaussians<S: Scalar, R: Rng + ?Sized>(
    spec: &GaussianPairSpec,
    n: usize,
    rng: &mut R,
) -> Result<PairedBatch<S>> {
    spec.validate()?;
    if n < 2 {
        return Err(Error::Validation(format!("need at least 2 samples, got {n}")));
    }
    let d = spec.dim;
    let noise_scale = (1.0 - spec.rho * spec.rho).sqrt();
    let mut xs = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        let x: f64 = rng.sample(StandardNormal);
        let e: f64 = rng.sample(StandardNormal);
        xs.push(x);
        ys.push(spec.rho * x + noise_scale * e);
    }
    make_marginal_batch(Tensor::from_f64(&[n, d], &xs)?, Tensor::from_f64(&[n, d], &ys)?, rng)
}

/// Settings for [`generate_sequence_dataset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub num_identities: usize,
    pub frames_per_sequence: usize,
    pub image_size: usize,
    /// Standard deviation of the driver noise.
    pub noise: f64,
    /// Recorded in the manifest; generation itself draws from the caller's rng.
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { num_identities: 20, frames_per_sequence: 32, image_size: 32, noise: 0.05, seed: 0 }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0 {
            return Err(Error::Validation("num_identities must be at least 1".into()));
        }
        if self.frames_per_sequence < 2 {
            return Err(Error::Validation("frames_per_sequence must be at least 2".into()));
        }
        if self.image_size < 16 || self.image_size % 16 != 0 {
            return Err(Error::Validation(format!("image_size must be a positive multiple of 16, got {}", self.image_size)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Validation(format!("noise must be finite and non-negative, got {}", self.noise)));
        }
        Ok(())
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        [3, self.image_size, self.image_size]
    }
}

/// Rendered video for one identity. Frames are stacked `[T, 3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MouthScene {
    pub identity: IdentityParams,
    pub frames: Tensor<f32>,
    pub mouth_open: Vec<f32>,
    /// Left corner, right corner, top lip, bottom lip per frame.
    pub landmarks: Vec<[Point; 4]>,
}

impl MouthScene {
    pub fn len(&self) -> usize {
        self.mouth_open.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mouth_open.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.frames.dim(3)
    }

    /// Frame `i` as a `[1, 3, H, W]` tensor.
    pub fn frame(&self, i: usize) -> Tensor<f32> {
        self.frames.select_rows(&[i])
    }
}

/// Driver signal and its `[T, 20, 13]` feature grids.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioTrack {
    pub driver: Vec<f32>,
    pub features: Tensor<f32>,
}

impl AudioTrack {
    pub fn from_driver(driver: &[f64]) -> Result<Self> {
        let t = driver.len();
        let mut data = Vec::with_capacity(t * FEATURE_STEPS * FEATURE_COEFFS);
        for i in 0..t {
            data.extend(frame_features(driver, i)?.into_iter().map(|v| v as f32));
        }
        Ok(Self {
            driver: driver.iter().map(|&v| v as f32).collect(),
            features: Tensor::new(&[t, FEATURE_STEPS, FEATURE_COEFFS], data)?,
        })
    }

    /// Features of frame `i` as `[1, 1, 20, 13]`.
    pub fn frame_features(&self, i: usize) -> Tensor<f32> {
        let row = FEATURE_STEPS * FEATURE_COEFFS;
        Tensor::new(&[1, 1, FEATURE_STEPS, FEATURE_COEFFS], self.features.data()[i * row..(i + 1) * row].to_vec())
            .expect("row has the feature shape")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub scene: MouthScene,
    pub audio: AudioTrack,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn image_size(&self) -> usize {
        self.config.image_size
    }

    pub fn mouth_region(&self) -> Region {
        mouth_region(self.config.image_size)
    }

    pub fn total_frames(&self) -> usize {
        self.sequences.iter().map(|s| s.scene.len()).sum()
    }

    /// Indices of training and held-out sequences; the last
    /// `ceil(fraction * n)` sequences are held out (at least one, and at
    /// least one remains for training when there are two or more).
    pub fn split(&self, holdout_fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let n = self.sequences.len();
        let mut held = ((holdout_fraction * n as f64).ceil() as usize).max(1).min(n);
        if n >= 2 && held == n {
            held = n - 1;
        }
        ((0..n - held).collect(), (n - held..n).collect())
    }

    /// Driver and mouth opening of every frame, concatenated.
    pub fn driver_mouth_pairs(&self) -> Vec<(f32, f32)> {
        self.sequences
            .iter()
            .flat_map(|s| s.audio.driver.iter().copied().zip(s.scene.mouth_open.iter().copied()))
            .collect()
    }
}

/// Renders one sequence from an identity and a mouth trajectory.
pub fn render_sequence(identity: IdentityParams, mouth_open: &[f32], size: usize) -> Result<MouthScene> {
    let mut frames = Vec::with_capacity(mouth_open.len() * 3 * size * size);
    let mut landmarks = Vec::with_capacity(mouth_open.len());
    for &m in mouth_open {
        let (img, lm) = render_scene_frame(&identity, m as f64, size)?;
        frames.extend_from_slice(&img);
        // Stored landmarks are f32 so a saved dataset reloads bit for bit.
        landmarks.push(lm.map(|p| Point::new(p.x as f32 as f64, p.y as f32 as f64)));
    }
    Ok(MouthScene {
        identity,
        frames: Tensor::new(&[mouth_open.len(), 3, size, size], frames)?,
        mouth_open: mouth_open.to_vec(),
        landmarks,
    })
}

/// One identity per sequence; the mouth trajectory drives both the video and
/// (with noise) the audio.
pub fn generate_sequence_dataset<R: Rng + ?Sized>(config: &DatasetConfig, rng: &mut R) -> Result<Dataset> {
    config.validate()?;
    let mut sequences = Vec::with_capacity(config.num_identities);
    for _ in 0..config.num_identities {
        let identity = IdentityParams::random(rng);
        let mouth: Vec<f32> = mouth_trajectory(config.frames_per_sequence, rng).iter().map(|&v| v as f32).collect();
        let mouth64: Vec<f64> = mouth.iter().map(|&v| v as f64).collect();
        let driver = audio_driver(&mouth64, config.noise, rng)?;
        sequences.push(Sequence {
            scene: render_sequence(identity, &mouth, config.image_size)?,
            audio: AudioTrack::from_driver(&driver)?,
        });
    }
    Ok(Dataset { config: config.clone(), sequences })
}

/// Empirical joint of two `[0, 1]` signals on a `bins x bins` grid.
pub fn binned_joint(pairs: &[(f32, f32)], bins: usize) -> Result<DiscreteJoint> {
    if bins == 0 || pairs.is_empty() {
        return Err(Error::Validation("binning needs at least one bin and one sample".into()));
    }
    let bin = |v: f32| ((v.clamp(0.0, 1.0) as f64 * bins as f64) as usize).min(bins - 1);
    let mut counts = vec![0.0; bins * bins];
    for &(a, b) in pairs {
        counts[bin(a) * bins + bin(b)] += 1.0;
    }
    DiscreteJoint::from_counts(bins, bins, &counts)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::info_oracle::mutual_information_discrete;

    fn correlation(b: &PairedBatch<f64>) -> f64 {
        let x = b.joint_frames.data();
        let y = b.joint_audios.data();
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn gaussian_correlation_matches_rho() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (rho, tol) in [(0.0, 0.03), (0.9, 0.02)] {
            let b = sample_correlated_gaussians::<f64, _>(&GaussianPairSpec::new(rho, 1).unwrap(), 10_000, &mut rng).unwrap();
            assert!((correlation(&b) - rho).abs() < tol, "rho {rho}: {}", correlation(&b));
        }
        let b = sample_correlated_gaussians::<f64, _>(&GaussianPairSpec::new(0.999_999, 1).unwrap(), 1000, &mut rng).unwrap();
        assert!(correlation(&b) > 0.9999);
    }

    #[test]
    fn gaussian_sampling_rejects_bad_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = GaussianPairSpec::new(0.5, 1).unwrap();
        assert!(matches!(sample_correlated_gaussians::<f64, _>(&spec, 1, &mut rng), Err(Error::Validation(_))));
        let bad = GaussianPairSpec { rho: 1.0, dim: 1 };
        assert!(sample_correlated_gaussians::<f64, _>(&bad, 10, &mut rng).is_err());
    }

    fn small(noise: f64) -> DatasetConfig {
        DatasetConfig { num_identities: 3, frames_per_sequence: 8, image_size: 16, noise, seed: 0 }
    }

    #[test]
    fn zero_noise_driver_equals_mouth() {
        let ds = generate_sequence_dataset(&small(0.0), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for s in &ds.sequences {
            assert_eq!(s.audio.driver, s.scene.mouth_open);
        }
    }

    #[test]
    fn sequence_lengths_agree() {
        let ds = generate_sequence_dataset(&small(0.1), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for s in &ds.sequences {
            assert_eq!(s.scene.frames.shape(), &[8, 3, 16, 16]);
            assert_eq!(s.scene.landmarks.len(), 8);
            assert_eq!(s.audio.features.shape(), &[8, 20, 13]);
            assert!(s.audio.features.is_finite());
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate_sequence_dataset(&small(0.1), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = generate_sequence_dataset(&small(0.1), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_holds_out_tail() {
        let ds = generate_sequence_dataset(&small(0.1), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(ds.split(0.2), (vec![0, 1], vec![2]));
    }

    fn binned_mi(noise: f64) -> f64 {
        let cfg = DatasetConfig { num_identities: 40, frames_per_sequence: 64, image_size: 16, noise, seed: 0 };
        let ds = generate_sequence_dataset(&cfg, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
        mutual_information_discrete(&binned_joint(&ds.driver_mouth_pairs(), 16).unwrap())
    }

    #[test]
    fn driver_mouth_dependence_falls_with_noise() {
        let mi: Vec<f64> = [0.1, 0.25, 0.45].iter().map(|&n| binned_mi(n)).collect();
        assert!(mi[0] > 0.0);
        assert!(mi[0] > mi[1] && mi[1] > mi[2], "{mi:?}");
    }

    #[test]
    fn binned_joint_counts() {
        let j = binned_joint(&[(0.0, 0.0), (1.0, 1.0), (0.49, 0.51)], 2).unwrap();
        assert_eq!(j.table(), &[1.0 / 3.0, 1.0 / 3.0, 0.0, 1.0 / 3.0]);
    }
}
