//! Training objectives: adversarial, perceptual, lip L1, MI and their
//! weighted sum.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::Region;
use crate::mi_estimators::{MIEstimate, PairSource};
use crate::nn::{lrelu, Conv2d, ParamSet};
use crate::tensor::{Scalar, Tensor};

pub const GAN_EPS: f64 = 1e-7;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(GAN_EPS, 1.0 - GAN_EPS)
}

/// `ln d_real + ln(1 - d_fake)`, the quantity the discriminator ascends.
pub fn gan_loss(d_real: f64, d_fake: f64) -> f64 {
    clamp_prob(d_real).ln() + (1.0 - clamp_prob(d_fake)).ln()
}

/// Non-saturating generator term `-ln d_fake`.
pub fn generator_gan_loss(d_fake: f64) -> f64 {
    -clamp_prob(d_fake).ln()
}

/// Discriminator loss to minimize: `-mean(ln d_real + ln(1 - d_fake))`.
pub fn discriminator_loss_graph<S: Scalar>(g: &mut Graph<S>, d_real: Var, d_fake: Var) -> Result<Var> {
    let lo = S::lit(GAN_EPS);
    let hi = S::lit(1.0 - GAN_EPS);
    let r = g.clamp(d_real, lo, hi);
    let log_r = g.ln(r);
    let f = g.clamp(d_fake, lo, hi);
    let nf = g.neg(f);
    let nf = g.add_scalar(nf, S::one());
    let log_nf = g.ln(nf);
    let a = g.mean(log_r);
    let b = g.mean(log_nf);
    let s = g.add(a, b)?;
    Ok(g.neg(s))
}

/// Generator adversarial loss `-mean(ln d_fake)`.
pub fn generator_gan_loss_graph<S: Scalar>(g: &mut Graph<S>, d_fake: Var) -> Var {
    let f = g.clamp(d_fake, S::lit(GAN_EPS), S::lit(1.0 - GAN_EPS));
    let l = g.ln(f);
    let m = g.mean(l);
    g.neg(m)
}

/// Frozen random convolutional features used by the perceptual loss.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<S> {
    params: ParamSet<S>,
    layers: Vec<Conv2d>,
    /// Indices of layers whose activations enter the loss.
    pub taps: Vec<usize>,
    pub seed: u64,
}

pub const EXTRACTOR_SEED: u64 = 0x5eed_f00d;

impl<S: Scalar> FeatureExtractor<S> {
    /// Three 3x3 convolutions (stride 1, 2, 2) with leaky activations, tapped
    /// after every layer.
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let layers = vec![
            Conv2d::new(&mut params, "phi.conv1", channels, 8, 3, 1, 1, &mut rng),
            Conv2d::new(&mut params, "phi.conv2", 8, 16, 3, 2, 1, &mut rng),
            Conv2d::new(&mut params, "phi.conv3", 16, 16, 3, 2, 1, &mut rng),
        ];
        Self { params, layers, taps: vec![0, 1, 2], seed }
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Tapped activations of `x [N, C, H, W]`, with parameters bound as
    /// constants.
    pub fn features(&self, g: &mut Graph<S>, x: Var) -> Result<Vec<Var>> {
        let p = self.params.bind(g, false);
        let mut h = x;
        let mut taps = Vec::with_capacity(self.taps.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(g, &p, h)?;
            h = lrelu(g, y);
            if self.taps.contains(&i) {
                taps.push(h);
            }
        }
        Ok(taps)
    }
}

/// Sum of squared feature differences over all taps, divided by the total
/// number of tapped features.
pub fn perceptual_loss_graph<S: Scalar>(g: &mut Graph<S>, phi: &FeatureExtractor<S>, real: Var, generated: Var) -> Result<Var> {
    if g.shape(real) != g.shape(generated) {
        return Err(Error::Shape(format!("perceptual loss: {:?} vs {:?}", g.shape(real), g.shape(generated))));
    }
    let fr = phi.features(g, real)?;
    let fg = phi.features(g, generated)?;
    let count: usize = fr.iter().map(|&v| g.value(v).numel()).sum();
    let mut total: Option<Var> = None;
    for (a, b) in fr.into_iter().zip(fg) {
        let d = g.sub(a, b)?;
        let sq = g.square(d);
        let s = g.sum(sq);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = total.ok_or_else(|| Error::Validation("feature extractor has no taps".into()))?;
    Ok(g.scale(total, S::lit(1.0 / count as f64)))
}

pub fn perceptual_loss<S: Scalar>(phi: &FeatureExtractor<S>, real: &Tensor<S>, generated: &Tensor<S>) -> Result<f64> {
    let mut g = Graph::new();
    let r = g.constant(real.clone());
    let f = g.constant(generated.clone());
    let l = perceptual_loss_graph(&mut g, phi, r, f)?;
    Ok(g.value(l).item().as_f64())
}

/// The `region` sub-image of `[C, H, W]` or `[N, C, H, W]` frames.
pub fn crop_lip<S: Scalar>(frame: &Tensor<S>, region: &Region) -> Result<Tensor<S>> {
    let s = frame.shape();
    if s.len() < 3 {
        return Err(Error::Shape(format!("crop_lip expects [C, H, W] or [N, C, H, W], got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    region.validate(w, h)?;
    let planes = frame.numel() / (h * w);
    let mut out = Vec::with_capacity(planes * region.area());
    for p in frame.data().chunks_exact(h * w) {
        for y in region.y0..region.y1 {
            out.extend_from_slice(&p[y * w + region.x0..y * w + region.x1]);
        }
    }
    let mut shape = s[..s.len() - 2].to_vec();
    shape.extend_from_slice(&[region.height(), region.width()]);
    Tensor::new(&shape, out)
}

/// Mean absolute difference over the lip crop.
pub fn lip_loss_graph<S: Scalar>(g: &mut Graph<S>, real: Var, generated: Var, region: &Region) -> Result<Var> {
    if g.shape(real) != g.shape(generated) {
        return Err(Error::Shape(format!("lip loss: {:?} vs {:?}", g.shape(real), g.shape(generated))));
    }
    let s = g.shape(real).to_vec();
    if s.len() != 4 {
        return Err(Error::Shape(format!("lip loss expects [N, C, H, W], got {s:?}")));
    }
    region.validate(s[3], s[2])?;
    let r = g.crop(real, region.as_crop())?;
    let f = g.crop(generated, region.as_crop())?;
    let d = g.sub(r, f)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

pub fn lip_loss<S: Scalar>(real: &Tensor<S>, generated: &Tensor<S>, region: &Region) -> Result<f64> {
    if real.shape() != generated.shape() {
        return Err(Error::Shape(format!("lip loss: {:?} vs {:?}", real.shape(), generated.shape())));
    }
    let a = crop_lip(real, region)?;
    let b = crop_lip(generated, region)?;
    let total: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).sum();
    Ok(total / a.numel() as f64)
}

fn guard_source(estimate: &MIEstimate) -> Result<()> {
    if estimate.source != PairSource::GeneratedPairs {
        return Err(Error::Contract(format!(
            "the generator's MI term needs an estimate on generated pairs, got {:?}",
            estimate.source
        )));
    }
    Ok(())
}

/// `-estimate.value`; only generated-pair estimates are accepted.
pub fn mi_loss(estimate: &MIEstimate) -> Result<f64> {
    guard_source(estimate)?;
    Ok(-estimate.value)
}

/// Graph form of [`mi_loss`]: negates the node that produced `estimate`.
pub fn mi_loss_graph<S: Scalar>(g: &mut Graph<S>, value: Var, estimate: &MIEstimate) -> Result<Var> {
    guard_source(estimate)?;
    Ok(g.neg(value))
}

/// Weights on the perceptual, lip and MI terms; the GAN term has weight 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_perc: f64,
    pub lambda_lip: f64,
    pub lambda_mi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_perc: 1.0, lambda_lip: 10.0, lambda_mi: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_perc", self.lambda_perc), ("lambda_lip", self.lambda_lip), ("lambda_mi", self.lambda_mi)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Validation(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// `gan + λ1·perc + λ2·lip + λ3·mi`.
pub fn total_loss(gan: f64, perc: f64, lip: f64, mi: f64, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    if ![gan, perc, lip, mi].iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite loss term: gan={gan} perc={perc} lip={lip} mi={mi}")));
    }
    Ok(gan + weights.lambda_perc * perc + weights.lambda_lip * lip + weights.lambda_mi * mi)
}

/// Graph nodes of the individual generator loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub gan: Var,
    pub perc: Var,
    pub lip: Var,
    /// Absent when the MI term is disabled.
    pub mi: Option<Var>,
}

pub fn total_loss_graph<S: Scalar>(g: &mut Graph<S>, terms: &LossTerms, weights: &LossWeights) -> Result<Var> {
    weights.validate()?;
    let perc = g.scale(terms.perc, S::lit(weights.lambda_perc));
    let lip = g.scale(terms.lip, S::lit(weights.lambda_lip));
    let mut total = g.add(terms.gan, perc)?;
    total = g.add(total, lip)?;
    if let Some(mi) = terms.mi {
        let mi = g.scale(mi, S::lit(weights.lambda_mi));
        total = g.add(total, mi)?;
    }
    if !g.value(total).is_finite() {
        return Err(Error::Numeric(format!("total loss is not finite: {:?}", g.value(total).data())));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::mi_estimators::Representation;

    #[test]
    fn gan_loss_examples() {
        assert!((gan_loss(0.5, 0.5) + 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!(gan_loss(1.0, 0.0).abs() < 1e-6);
        assert!((gan_loss(0.8, 0.3) - (0.8f64.ln() + 0.7f64.ln())).abs() < 1e-15);
        assert!(gan_loss(0.0, 1.0).is_finite());
        assert!(generator_gan_loss(0.0).is_finite());
    }

    #[test]
    fn gan_graph_matches_scalar_form() {
        let mut g = Graph::<f64>::new();
        let r = g.constant(Tensor::from_f64(&[2, 1], &[0.8, 0.6]).unwrap());
        let f = g.constant(Tensor::from_f64(&[2, 1], &[0.3, 0.1]).unwrap());
        let l = discriminator_loss_graph(&mut g, r, f).unwrap();
        let expected = -(gan_loss(0.8, 0.3) + gan_loss(0.6, 0.1)) / 2.0;
        assert!((g.value(l).item() - expected).abs() < 1e-15);
        let gl = generator_gan_loss_graph(&mut g, f);
        assert!((g.value(gl).item() - (generator_gan_loss(0.3) + generator_gan_loss(0.1)) / 2.0).abs() < 1e-15);
    }

    fn image(seed: u64) -> Tensor<f64> {
        Tensor::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn perceptual_examples() {
        let phi = FeatureExtractor::<f64>::new(3, EXTRACTOR_SEED);
        let a = image(1);
        assert_eq!(perceptual_loss(&phi, &a, &a).unwrap(), 0.0);
        assert!(perceptual_loss(&phi, &a, &image(2)).unwrap() > 0.0);
        assert!(perceptual_loss(&phi, &a, &Tensor::zeros(&[1, 3, 16, 8])).is_err());
    }

    #[test]
    fn perceptual_golden_value() {
        let phi = FeatureExtractor::<f64>::new(3, EXTRACTOR_SEED);
        let v = perceptual_loss(&phi, &image(10), &image(11)).unwrap();
        assert_eq!(format!("{v:.12}"), GOLDEN_PERCEPTUAL);
    }

    const GOLDEN_PERCEPTUAL: &str = "0.061158543583";

    #[test]
    fn crop_examples() {
        let a = image(3);
        assert_eq!(crop_lip(&a, &Region::full(16, 16)).unwrap(), a);
        let c = crop_lip(&Tensor::<f64>::zeros(&[3, 40, 40]), &Region::new(4, 2, 36, 18)).unwrap();
        assert_eq!(c.shape(), &[3, 16, 32]);
        assert!(crop_lip(&a, &Region::new(0, 0, 17, 4)).is_err());
    }

    #[test]
    fn lip_loss_examples() {
        let region = Region::new(3, 4, 11, 9);
        let a = image(4);
        assert_eq!(lip_loss(&a, &a, &region).unwrap(), 0.0);
        let shifted = a.map(|v| v + 0.25);
        assert!((lip_loss(&a, &shifted, &region).unwrap() - 0.25).abs() < 1e-12);
        let b = image(5);
        let mut total = 0.0;
        for c in 0..3 {
            for y in region.y0..region.y1 {
                for x in region.x0..region.x1 {
                    let i = (c * 16 + y) * 16 + x;
                    total += (a.data()[i] - b.data()[i]).abs();
                }
            }
        }
        let oracle = total / (3 * region.area()) as f64;
        assert!((lip_loss(&a, &b, &region).unwrap() - oracle).abs() < 1e-15);
        let mut g = Graph::new();
        let (ra, rb) = (g.constant(a.clone()), g.constant(b.clone()));
        let l = lip_loss_graph(&mut g, ra, rb, &region).unwrap();
        assert!((g.value(l).item() - oracle).abs() < 1e-15);
    }

    #[test]
    fn mi_loss_guard() {
        let gen = MIEstimate { value: 0.4, representation: Representation::JensenShannon, source: PairSource::GeneratedPairs };
        assert_eq!(mi_loss(&gen).unwrap(), -0.4);
        let zero = MIEstimate { value: -2.0 * 2f64.ln(), ..gen };
        assert_eq!(mi_loss(&zero).unwrap(), 2.0 * 2f64.ln());
        let real = MIEstimate { source: PairSource::RealPairs, ..gen };
        assert!(matches!(mi_loss(&real), Err(Error::Contract(_))));
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::scalar(0.4));
        assert!(matches!(mi_loss_graph(&mut g, v, &real), Err(Error::Contract(_))));
    }

    #[test]
    fn total_loss_examples() {
        let zero = LossWeights { lambda_perc: 0.0, lambda_lip: 0.0, lambda_mi: 0.0 };
        assert_eq!(total_loss(1.5, 2.0, 3.0, 4.0, &zero).unwrap(), 1.5);
        let ones = LossWeights { lambda_perc: 1.0, lambda_lip: 1.0, lambda_mi: 1.0 };
        assert_eq!(total_loss(1.0, 2.0, 3.0, 4.0, &ones).unwrap(), 10.0);
        let no_mi = LossWeights { lambda_mi: 0.0, ..LossWeights::default() };
        let base = 0.7 + 1.0 * 0.2 + 10.0 * 0.05;
        assert_eq!(total_loss(0.7, 0.2, 0.05, -1.3, &no_mi).unwrap(), base);
        assert!(matches!(total_loss(f64::NAN, 0.0, 0.0, 0.0, &ones), Err(Error::Numeric(_))));
        let bad = LossWeights { lambda_lip: -1.0, ..ones };
        assert!(matches!(total_loss(0.0, 0.0, 0.0, 0.0, &bad), Err(Error::Validation(_))));
    }

    #[test]
    fn total_graph_without_mi_equals_zero_weight() {
        let mut g = Graph::<f64>::new();
        let terms = LossTerms {
            gan: g.constant(Tensor::scalar(0.7)),
            perc: g.constant(Tensor::scalar(0.2)),
            lip: g.constant(Tensor::scalar(0.05)),
            mi: Some(g.constant(Tensor::scalar(-1.3))),
        };
        let w0 = LossWeights { lambda_mi: 0.0, ..LossWeights::default() };
        let with_zero = total_loss_graph(&mut g, &terms, &w0).unwrap();
        let without = total_loss_graph(&mut g, &LossTerms { mi: None, ..terms }, &LossWeights::default()).unwrap();
        assert_eq!(g.value(with_zero).item(), g.value(without).item());
    }
}
