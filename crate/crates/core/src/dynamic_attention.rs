//! Lip-region attention masks and the high -> low -> 1 rate schedule.
//!
//! A mask multiplies the identity face before it enters the identity encoder.
//! Inside the lip region the weight drops to the current rate (coarse mask)
//! or, after refinement, to `rate + (1 - rate) * (1 - s)` where `s` is a
//! per-pixel lip score from a small convolutional predictor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::Region;
use crate::nn::{lrelu, Bound, Conv2d, ParamSet};
use crate::tensor::{Scalar, Tensor};

/// Piecewise rate schedule over (possibly fractional) epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSchedule {
    pub start_rate: f64,
    pub end_rate: f64,
    pub decay_start_epoch: f64,
    pub decay_end_epoch: f64,
    pub fix_to_one_epoch: f64,
    pub total_epochs: f64,
}

impl AttentionSchedule {
    /// Decay over the 10%..40% span of training and rate 1 for the final 10%.
    pub fn for_epochs(total_epochs: usize) -> Self {
        let t = total_epochs as f64;
        Self {
            start_rate: 0.8,
            end_rate: 0.2,
            decay_start_epoch: 0.1 * t,
            decay_end_epoch: 0.4 * t,
            fix_to_one_epoch: 0.9 * t,
            total_epochs: t,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.7..=0.9).contains(&self.start_rate) {
            return Err(Error::Validation(format!("start_rate {} outside [0.7, 0.9]", self.start_rate)));
        }
        if !(0.1..=0.3).contains(&self.end_rate) {
            return Err(Error::Validation(format!("end_rate {} outside [0.1, 0.3]", self.end_rate)));
        }
        let ordered = 0.0 <= self.decay_start_epoch
            && self.decay_start_epoch < self.decay_end_epoch
            && self.decay_end_epoch <= self.fix_to_one_epoch
            && self.fix_to_one_epoch <= self.total_epochs;
        if !ordered {
            return Err(Error::Validation(format!(
                "need 0 <= decay_start < decay_end <= fix_to_one <= total, got {} {} {} {}",
                self.decay_start_epoch, self.decay_end_epoch, self.fix_to_one_epoch, self.total_epochs
            )));
        }
        Ok(())
    }

    pub fn schedule_rate(&self, epoch: f64) -> Result<f64> {
        if !(epoch >= 0.0 && epoch < self.total_epochs) {
            return Err(Error::Domain(format!("epoch {epoch} outside [0, {})", self.total_epochs)));
        }
        Ok(if epoch >= self.fix_to_one_epoch {
            1.0
        } else if epoch >= self.decay_end_epoch {
            self.end_rate
        } else if epoch >= self.decay_start_epoch {
            let u = (epoch - self.decay_start_epoch) / (self.decay_end_epoch - self.decay_start_epoch);
            self.start_rate + u * (self.end_rate - self.start_rate)
        } else {
            self.start_rate
        })
    }
}

/// Per-pixel weights for an `height x width` image.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub weights: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub rate: f64,
    pub region: Region,
}

impl AttentionMask {
    pub fn weight(&self, x: usize, y: usize) -> f64 {
        self.weights[y * self.width + x]
    }

    /// `[1, 1, H, W]` tensor of the weights.
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_f64(&[1, 1, self.height, self.width], &self.weights).expect("weights match the mask size")
    }
}

/// Stacks masks into `[N, 1, H, W]`.
pub fn stack_masks<S: Scalar>(masks: &[AttentionMask]) -> Result<Tensor<S>> {
    let parts: Vec<Tensor<S>> = masks.iter().map(AttentionMask::to_tensor).collect();
    Tensor::stack_rows(&parts.iter().collect::<Vec<_>>())
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Domain(format!("rate must lie in [0, 1], got {rate}")));
    }
    Ok(())
}

/// Coarse mask: `rate` inside `region`, 1 elsewhere.
pub fn initial_mask(height: usize, width: usize, region: Region, rate: f64) -> Result<AttentionMask> {
    check_rate(rate)?;
    region.validate(width, height)?;
    let mut weights = vec![1.0; height * width];
    for y in region.y0..region.y1 {
        weights[y * width + region.x0..y * width + region.x1].fill(rate);
    }
    Ok(AttentionMask { weights, height, width, rate, region })
}

/// Refines `prev` with lip scores `s` (row-major over the whole image, values
/// in `[0, 1]`). The rate and region are kept.
pub fn refine_mask(prev: &AttentionMask, scores: &[f64]) -> Result<AttentionMask> {
    if scores.len() != prev.height * prev.width {
        return Err(Error::Shape(format!("{} scores for a {}x{} mask", scores.len(), prev.height, prev.width)));
    }
    let mut out = prev.clone();
    let r = &prev.region;
    for y in r.y0..r.y1 {
        for x in r.x0..r.x1 {
            let i = y * prev.width + x;
            let s = scores[i].clamp(0.0, 1.0);
            out.weights[i] = prev.rate + (1.0 - prev.rate) * (1.0 - s);
        }
    }
    Ok(out)
}

/// Multiplies every channel of `image` (`[C, H, W]` or `[N, C, H, W]`) by the
/// mask.
pub fn apply_mask<S: Scalar>(image: &Tensor<S>, mask: &AttentionMask) -> Result<Tensor<S>> {
    let shape = image.shape();
    let hw = mask.height * mask.width;
    if shape.len() < 2 || shape[shape.len() - 2..] != [mask.height, mask.width] {
        return Err(Error::Shape(format!("image {shape:?} does not match a {}x{} mask", mask.height, mask.width)));
    }
    let mut out = image.clone();
    for plane in out.data_mut().chunks_exact_mut(hw) {
        for (v, &w) in plane.iter_mut().zip(&mask.weights) {
            *v *= S::lit(w);
        }
    }
    Ok(out)
}

/// Two-layer convolutional lip scorer producing `s` in `(0, 1)` per pixel.
#[derive(Clone, Debug)]
pub struct MaskPredictor<S> {
    pub params: ParamSet<S>,
    conv1: Conv2d,
    conv2: Conv2d,
}

pub const PREDICTOR_HIDDEN: usize = 8;
const BCE_EPS: f64 = 1e-6;

impl<S: Scalar> MaskPredictor<S> {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let conv1 = Conv2d::new(&mut params, "mask.conv1", channels, PREDICTOR_HIDDEN, 3, 1, 1, rng);
        let conv2 = Conv2d::new(&mut params, "mask.conv2", PREDICTOR_HIDDEN, 1, 3, 1, 1, rng);
        Self { params, conv1, conv2 }
    }

    pub fn output_layer(&self) -> &Conv2d {
        &self.conv2
    }

    /// `frames [N, C, H, W]` -> scores `[N, 1, H, W]`.
    pub fn forward(&self, g: &mut Graph<S>, p: &Bound, frames: Var) -> Result<Var> {
        let h = self.conv1.forward(g, p, frames)?;
        let h = lrelu(g, h);
        let logits = self.conv2.forward(g, p, h)?;
        Ok(g.sigmoid(logits))
    }

    pub fn scores(&self, frame: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(frame.clone());
        let s = self.forward(&mut g, &p, x)?;
        Ok(g.value(s).clone())
    }

    /// Binary cross-entropy between scores and `target [N, 1, h, w]` over the
    /// region crop.
    pub fn loss(&self, g: &mut Graph<S>, p: &Bound, frames: Var, region: Region, target: Var) -> Result<Var> {
        let s = self.forward(g, p, frames)?;
        let s = g.crop(s, region.as_crop())?;
        let s = g.clamp(s, S::lit(BCE_EPS), S::lit(1.0 - BCE_EPS));
        let log_s = g.ln(s);
        let not_s = g.neg(s);
        let not_s = g.add_scalar(not_s, S::one());
        let log_not_s = g.ln(not_s);
        let not_t = g.neg(target);
        let not_t = g.add_scalar(not_t, S::one());
        let a = g.mul(target, log_s)?;
        let b = g.mul(not_t, log_not_s)?;
        let ll = g.add(a, b)?;
        let m = g.mean(ll);
        Ok(g.neg(m))
    }
}

/// Fine mask from the predictor's scores on `frame` (`[1, C, H, W]`).
pub fn predict_mask<S: Scalar>(prev: &AttentionMask, frame: &Tensor<S>, predictor: &MaskPredictor<S>) -> Result<AttentionMask> {
    let s = frame.shape();
    if s.len() != 4 || s[0] != 1 || s[2] != prev.height || s[3] != prev.width {
        return Err(Error::Shape(format!("frame {s:?} does not match a {}x{} mask", prev.height, prev.width)));
    }
    refine_mask(prev, &predictor.scores(frame)?.to_f64_vec())
}
