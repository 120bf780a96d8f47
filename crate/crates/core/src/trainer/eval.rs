use crate::error::{Error, Result};
use crate::generation_model::Generator;
use crate::geometry::Point;
use crate::metrics::{extract_landmarks, lmd, psnr, ssim, MetricReport, SequenceMetrics};
use crate::synthetic_data::Dataset;
use crate::tensor::Tensor;

/// Report plus the flattened frames it was computed from, for PCA.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    pub real_frames: Vec<Vec<f64>>,
    pub generated_frames: Vec<Vec<f64>>,
}

/// Scores `generated` (one `[1, C, H, W]` tensor per frame) against sequence
/// `index` of the dataset. Frames where no mouth is detected count as
/// failures and are scored at the region centre.
pub fn evaluate_frames(dataset: &Dataset, index: usize, generated: &[Tensor<f32>]) -> Result<SequenceMetrics> {
    let seq = dataset
        .sequences
        .get(index)
        .ok_or_else(|| Error::Validation(format!("no sequence {index} in a dataset of {}", dataset.sequences.len())))?;
    if generated.len() != seq.scene.len() {
        return Err(Error::Shape(format!("{} generated frames for a {}-frame sequence", generated.len(), seq.scene.len())));
    }
    let region = dataset.mouth_region();
    let centre = Point::new((region.x0 + region.x1) as f64 / 2.0, (region.y0 + region.y1) as f64 / 2.0);
    let (mut psnr_sum, mut ssim_sum, mut failures) = (0.0, 0.0, 0);
    let mut found = Vec::with_capacity(generated.len());
    for (i, frame) in generated.iter().enumerate() {
        let real = seq.scene.frame(i);
        psnr_sum += psnr(&real, frame, 1.0)?;
        ssim_sum += ssim(&real, frame)?;
        match extract_landmarks(frame, &region) {
            Ok(p) => found.push(p),
            Err(Error::Detection(_)) => {
                failures += 1;
                found.push([centre; 4]);
            }
            Err(e) => return Err(e),
        }
    }
    let n = generated.len() as f64;
    Ok(SequenceMetrics {
        sequence: index,
        psnr_db: psnr_sum / n,
        ssim: ssim_sum / n,
        lmd_px: lmd(&seq.scene.landmarks, &found)?,
        detection_failures: failures,
    })
}

/// Autoregressive rollouts from the first frame of each listed sequence,
/// driven by its audio features.
pub fn evaluate_generator(generator: &Generator<f32>, dataset: &Dataset, indices: &[usize]) -> Result<Evaluation> {
    let mut sequences = Vec::with_capacity(indices.len());
    let mut real_frames = Vec::new();
    let mut generated_frames = Vec::new();
    for &s in indices {
        let seq = dataset
            .sequences
            .get(s)
            .ok_or_else(|| Error::Validation(format!("no sequence {s} in a dataset of {}", dataset.sequences.len())))?;
        let track: Vec<Tensor<f32>> = (0..seq.scene.len()).map(|i| seq.audio.frame_features(i)).collect();
        let frames = generator.generate_sequence(&seq.scene.frame(0), &track)?;
        sequences.push(evaluate_frames(dataset, s, &frames)?);
        for (i, f) in frames.iter().enumerate() {
            real_frames.push(seq.scene.frame(i).to_f64_vec());
            generated_frames.push(f.to_f64_vec());
        }
    }
    Ok(Evaluation { report: MetricReport::from_sequences(sequences), real_frames, generated_frames })
}
