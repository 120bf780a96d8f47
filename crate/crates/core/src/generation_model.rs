//! Talking-face generator and frame discriminator.
//!
//! The generator maps (identity face, audio features, previous frame) to the
//! next frame through three encoders and a decoder that mirrors the identity
//! encoder with skip connections. The discriminator scores whether a frame
//! and an audio window belong together.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{lrelu, Bound, Conv2d, ConvTranspose2d, Linear, ParamSet};
use crate::tensor::{Scalar, Tensor};

/// Shapes shared by every network that sees frames or audio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Square frame side in pixels; must be divisible by `2^widths.len()`.
    pub image_size: usize,
    pub channels: usize,
    /// Output channels of the strided encoder stages.
    pub widths: Vec<usize>,
    /// Audio feature window (time steps, coefficients).
    pub audio_steps: usize,
    pub audio_coeffs: usize,
    pub audio_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 3,
            widths: vec![16, 32, 64, 128],
            audio_steps: 20,
            audio_coeffs: 13,
            audio_dim: 64,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Validation("encoder widths must be non-empty and positive".into()));
        }
        let factor = 1usize << self.widths.len();
        if self.image_size < factor || self.image_size % factor != 0 {
            return Err(Error::Validation(format!(
                "image size {} is not divisible by {factor} ({} encoder stages)",
                self.image_size,
                self.widths.len()
            )));
        }
        if self.channels == 0 || self.audio_steps < 2 || self.audio_coeffs < 2 || self.audio_dim == 0 {
            return Err(Error::Validation("channel and audio dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }

    pub fn audio_shape(&self) -> [usize; 3] {
        [1, self.audio_steps, self.audio_coeffs]
    }

    pub fn bottleneck_side(&self) -> usize {
        self.image_size >> self.widths.len()
    }
}

/// Strided convolutional encoder; every stage halves the spatial size.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    stages: Vec<Conv2d>,
}

impl ImageEncoder {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<S>,
        name: &str,
        in_channels: usize,
        widths: &[usize],
        rng: &mut R,
    ) -> Self {
        let mut cin = in_channels;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let conv = Conv2d::new(ps, &format!("{name}.stage{i}"), cin, w, 4, 2, 1, rng);
                cin = w;
                conv
            })
            .collect();
        Self { stages }
    }

    /// Activations of every stage, shallowest first.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let y = stage.forward(g, p, h)?;
            h = lrelu(g, y);
            out.push(h);
        }
        Ok(out)
    }

    pub fn stages(&self) -> &[Conv2d] {
        &self.stages
    }
}

/// Two convolutions over the `steps x coeffs` feature grid followed by a
/// flatten-projection.
#[derive(Clone, Debug)]
pub struct AudioEncoder {
    conv1: Conv2d,
    conv2: Conv2d,
    proj: Linear,
}

impl AudioEncoder {
    pub fn new<S: Scalar, R: Rng + ?Sized>(ps: &mut ParamSet<S>, name: &str, arch: &ArchConfig, rng: &mut R) -> Self {
        let conv1 = Conv2d::new(ps, &format!("{name}.conv1"), 1, 8, 3, 1, 1, rng);
        let conv2 = Conv2d::new(ps, &format!("{name}.conv2"), 8, 16, 3, 2, 1, rng);
        let flat = 16 * arch.audio_steps.div_ceil(2) * arch.audio_coeffs.div_ceil(2);
        let proj = Linear::new(ps, &format!("{name}.proj"), flat, arch.audio_dim, rng);
        Self { conv1, conv2, proj }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, audio: Var) -> Result<Var> {
        let h = self.conv1.forward(g, p, audio)?;
        let h = lrelu(g, h);
        let h = self.conv2.forward(g, p, h)?;
        let h = lrelu(g, h);
        let h = g.flatten(h)?;
        let h = self.proj.forward(g, p, h)?;
        Ok(lrelu(g, h))
    }

    pub fn projection(&self) -> &Linear {
        &self.proj
    }
}

fn check_shape(what: &str, got: &[usize], expected: &[usize]) -> Result<()> {
    if got.len() != expected.len() + 1 || got[1..] != *expected {
        return Err(Error::Shape(format!("{what}: expected [N, {expected:?}], got {got:?}")));
    }
    Ok(())
}

/// Generator parameters plus the layer layout that interprets them.
#[derive(Clone, Debug)]
pub struct Generator<S> {
    pub arch: ArchConfig,
    pub params: ParamSet<S>,
    identity_encoder: ImageEncoder,
    audio_encoder: AudioEncoder,
    image_encoder: ImageEncoder,
    decoder: Vec<ConvTranspose2d>,
    output: Conv2d,
}

impl<S: Scalar> Generator<S> {
    pub fn new<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut ps = ParamSet::new();
        let c = arch.channels;
        let identity_encoder = ImageEncoder::new(&mut ps, "identity_encoder", c, &arch.widths, rng);
        let audio_encoder = AudioEncoder::new(&mut ps, "audio_encoder", arch, rng);
        let image_encoder = ImageEncoder::new(&mut ps, "image_encoder", c, &arch.widths, rng);
        let depth = arch.widths.len();
        let deepest = arch.widths[depth - 1];
        let mut decoder = Vec::with_capacity(depth);
        let mut cin = 2 * deepest + arch.audio_dim;
        for level in (0..depth).rev() {
            let cout = if level == 0 { arch.widths[0] } else { arch.widths[level - 1] };
            decoder.push(ConvTranspose2d::new(&mut ps, &format!("frame_decoder.up{level}"), cin, cout, 4, 2, 1, rng));
            // Skip connection from the identity stage at the same resolution.
            cin = if level == 0 { cout } else { 2 * cout };
        }
        let output = Conv2d::new(&mut ps, "frame_decoder.output", cin, c, 3, 1, 1, rng);
        Ok(Self { arch: arch.clone(), params: ps, identity_encoder, audio_encoder, image_encoder, decoder, output })
    }

    /// Output layer slots, for constructing degenerate decoders in tests.
    pub fn output_layer(&self) -> &Conv2d {
        &self.output
    }

    /// One frame from `identity [N,C,H,W]`, `audio [N,1,T,F]` and
    /// `prev_frame [N,C,H,W]`. Output pixels are squashed into `[0, 1]`.
    pub fn forward(&self, g: &mut Graph<S>, p: &Bound, identity: Var, audio: Var, prev_frame: Var) -> Result<Var> {
        let frame = self.arch.frame_shape();
        check_shape("identity face", g.shape(identity), &frame)?;
        check_shape("previous frame", g.shape(prev_frame), &frame)?;
        check_shape("audio features", g.shape(audio), &self.arch.audio_shape())?;
        let n = g.shape(identity)[0];
        if g.shape(prev_frame)[0] != n || g.shape(audio)[0] != n {
            return Err(Error::Shape("generator inputs disagree on batch size".into()));
        }

        let skips = self.identity_encoder.forward(g, p, identity)?;
        let img = *self.image_encoder.forward(g, p, prev_frame)?.last().expect("at least one stage");
        let aud = self.audio_encoder.forward(g, p, audio)?;
        let side = self.arch.bottleneck_side();
        let aud = g.tile_spatial(aud, side, side)?;
        let mut h = g.concat(&[*skips.last().expect("stage"), img, aud])?;

        let depth = self.decoder.len();
        for (k, up) in self.decoder.iter().enumerate() {
            let y = up.forward(g, p, h)?;
            h = lrelu(g, y);
            let level = depth - 1 - k;
            if level > 0 {
                h = g.concat(&[h, skips[level - 1]])?;
            }
        }
        let logits = self.output.forward(g, p, h)?;
        Ok(g.sigmoid(logits))
    }

    /// Forward pass on plain tensors with frozen parameters.
    pub fn forward_tensors(&self, identity: &Tensor<S>, audio: &Tensor<S>, prev_frame: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let i = g.constant(identity.clone());
        let a = g.constant(audio.clone());
        let f = g.constant(prev_frame.clone());
        let out = self.forward(&mut g, &p, i, a, f)?;
        Ok(g.value(out).clone())
    }

    /// Autoregressive rollout over `audio_track` (one `[N,1,T,F]` tensor per
    /// frame). The first frame is conditioned on `identity` as its previous
    /// frame; frame `i` on generated frame `i - 1`.
    pub fn generate_sequence(&self, identity: &Tensor<S>, audio_track: &[Tensor<S>]) -> Result<Vec<Tensor<S>>> {
        self.generate_sequence_observed(identity, audio_track, |_, _| {})
    }

    /// [`Self::generate_sequence`] that reports `(index, prev_frame)` before
    /// each step.
    pub fn generate_sequence_observed(
        &self,
        identity: &Tensor<S>,
        audio_track: &[Tensor<S>],
        mut observe: impl FnMut(usize, &Tensor<S>),
    ) -> Result<Vec<Tensor<S>>> {
        if audio_track.is_empty() {
            return Err(Error::Validation("audio track must contain at least one frame".into()));
        }
        let mut frames: Vec<Tensor<S>> = Vec::with_capacity(audio_track.len());
        for (i, audio) in audio_track.iter().enumerate() {
            let prev = frames.last().unwrap_or(identity);
            observe(i, prev);
            let next = self.forward_tensors(identity, audio, prev)?;
            frames.push(next);
        }
        Ok(frames)
    }
}

/// Distance the discriminator output keeps from 0 and 1.
pub const PROB_MARGIN: f64 = 1e-6;

/// Frame discriminator: image CNN, audio FC and a classifier on the
/// concatenated features.
#[derive(Clone, Debug)]
pub struct Discriminator<S> {
    pub arch: ArchConfig,
    pub params: ParamSet<S>,
    image_cnn: ImageEncoder,
    audio_fc: Linear,
    hidden: Linear,
    classifier: Linear,
}

impl<S: Scalar> Discriminator<S> {
    pub fn new<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut ps = ParamSet::new();
        let image_cnn = ImageEncoder::new(&mut ps, "image_cnn", arch.channels, &arch.widths, rng);
        let side = arch.bottleneck_side();
        let img_flat = arch.widths[arch.widths.len() - 1] * side * side;
        let audio_fc = Linear::new(&mut ps, "audio_fc", arch.audio_steps * arch.audio_coeffs, arch.audio_dim, rng);
        let hidden = Linear::new(&mut ps, "classifier.hidden", img_flat + arch.audio_dim, 64, rng);
        let classifier = Linear::new(&mut ps, "classifier.out", 64, 1, rng);
        Ok(Self { arch: arch.clone(), params: ps, image_cnn, audio_fc, hidden, classifier })
    }

    pub fn classifier_layer(&self) -> &Linear {
        &self.classifier
    }

    /// Match probability in `(0, 1)` for each pair, shape `[N, 1]`.
    pub fn forward(&self, g: &mut Graph<S>, p: &Bound, frame: Var, audio: Var) -> Result<Var> {
        check_shape("frame", g.shape(frame), &self.arch.frame_shape())?;
        check_shape("audio features", g.shape(audio), &self.arch.audio_shape())?;
        let img = *self.image_cnn.forward(g, p, frame)?.last().expect("stage");
        let img = g.flatten(img)?;
        let aud = g.flatten(audio)?;
        let aud = self.audio_fc.forward(g, p, aud)?;
        let aud = lrelu(g, aud);
        let h = g.concat(&[img, aud])?;
        let h = self.hidden.forward(g, p, h)?;
        let h = lrelu(g, h);
        let logit = self.classifier.forward(g, p, h)?;
        let prob = g.sigmoid(logit);
        // Keep the probability strictly inside (0, 1) even for saturated logits.
        let prob = g.scale(prob, S::lit(1.0 - 2.0 * PROB_MARGIN));
        Ok(g.add_scalar(prob, S::lit(PROB_MARGIN)))
    }

    pub fn forward_tensors(&self, frame: &Tensor<S>, audio: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let f = g.constant(frame.clone());
        let a = g.constant(audio.clone());
        let out = self.forward(&mut g, &p, f, a)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn tiny_arch() -> ArchConfig {
        ArchConfig { image_size: 16, channels: 3, widths: vec![4, 8], audio_steps: 20, audio_coeffs: 13, audio_dim: 8 }
    }

    fn inputs(arch: &ArchConfig, n: usize, rng: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let s = arch.image_size;
        (
            Tensor::uniform(&[n, 3, s, s], 0.0, 1.0, rng),
            Tensor::uniform(&[n, 1, arch.audio_steps, arch.audio_coeffs], 0.0, 1.0, rng),
            Tensor::uniform(&[n, 3, s, s], 0.0, 1.0, rng),
        )
    }

    #[test]
    fn default_arch_output_shape_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let arch = ArchConfig::default();
        let gen = Generator::<f32>::new(&arch, &mut rng).unwrap();
        let (i, a, f) = inputs(&arch, 1, &mut rng);
        let out = gen.forward_tensors(&i.cast(), &a.cast(), &f.cast()).unwrap();
        assert_eq!(out.shape(), &[1, 3, 64, 64]);
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn zero_decoder_gives_mid_gray() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let arch = tiny_arch();
        let mut gen = Generator::<f64>::new(&arch, &mut rng).unwrap();
        let (w, b) = (gen.output.weight_slot(), gen.output.bias_slot());
        gen.params.by_index_mut(w).data_mut().fill(0.0);
        gen.params.by_index_mut(b).data_mut().fill(0.0);
        let (i, a, f) = inputs(&arch, 2, &mut rng);
        let out = gen.forward_tensors(&i, &a, &f).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let arch = tiny_arch();
        let gen = Generator::<f64>::new(&arch, &mut rng).unwrap();
        let (i, a, _) = inputs(&arch, 1, &mut rng);
        let wrong = Tensor::zeros(&[1, 3, 8, 8]);
        assert!(matches!(gen.forward_tensors(&i, &a, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn rollout_feeds_previous_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let arch = tiny_arch();
        let gen = Generator::<f64>::new(&arch, &mut rng).unwrap();
        let (identity, _, _) = inputs(&arch, 1, &mut rng);
        let track: Vec<Tensor<f64>> =
            (0..3).map(|_| Tensor::uniform(&[1, 1, 20, 13], 0.0, 1.0, &mut rng)).collect();
        let mut seen = Vec::new();
        let frames = gen.generate_sequence_observed(&identity, &track, |i, prev| seen.push((i, prev.clone()))).unwrap();
        assert_eq!(frames.len(), 3);
        assert_eq!(seen[0].1, identity);
        assert_eq!(seen[1].1, frames[0]);
        assert_eq!(seen[2].1, frames[1]);
        // Purity: frame i is reproducible from its declared inputs alone.
        let again = gen.forward_tensors(&identity, &track[2], &frames[1]).unwrap();
        assert_eq!(again, frames[2]);
        let single = gen.generate_sequence(&identity, &track[..1]).unwrap();
        assert_eq!(single[0], frames[0]);
        assert!(gen.generate_sequence(&identity, &[]).is_err());
    }

    #[test]
    fn every_encoder_receives_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let arch = tiny_arch();
        let gen = Generator::<f64>::new(&arch, &mut rng).unwrap();
        let (i, a, f) = inputs(&arch, 2, &mut rng);
        let mut g = Graph::new();
        let p = gen.params.bind(&mut g, true);
        let (iv, av, fv) = (g.constant(i), g.constant(a), g.constant(f));
        let out = gen.forward(&mut g, &p, iv, av, fv).unwrap();
        let loss = g.mean(out);
        let mut grads = g.backward(loss).unwrap();
        let grads = p.grads(&mut grads);
        for prefix in ["identity_encoder", "audio_encoder", "image_encoder", "frame_decoder"] {
            let norm: f64 = gen
                .params
                .names()
                .zip(&grads)
                .filter(|(n, _)| n.starts_with(prefix) && n.ends_with("weight"))
                .map(|(_, g)| g.as_ref().unwrap().data().iter().map(|v| v * v).sum::<f64>())
                .sum();
            assert!(norm > 0.0, "{prefix} has zero gradient");
        }
    }

    #[test]
    fn discriminator_output_is_a_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let arch = tiny_arch();
        let mut disc = Discriminator::<f64>::new(&arch, &mut rng).unwrap();
        let (f, a, _) = inputs(&arch, 3, &mut rng);
        let p = disc.forward_tensors(&f, &a).unwrap();
        assert_eq!(p.shape(), &[3, 1]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));

        let extreme = f.map(|_| 1.0e3);
        let p = disc.forward_tensors(&extreme, &a.map(|_| -1.0e3)).unwrap();
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let p32 = Discriminator::<f32>::new(&arch, &mut rng)
            .unwrap()
            .forward_tensors(&extreme.cast(), &a.map(|_| -1.0e3).cast())
            .unwrap();
        assert!(p32.data().iter().all(|&v| v > 0.0 && v < 1.0));

        let (w, b) = (disc.classifier.weight_slot(), disc.classifier.bias_slot());
        disc.params.by_index_mut(w).data_mut().fill(0.0);
        disc.params.by_index_mut(b).data_mut().fill(0.0);
        let p = disc.forward_tensors(&f, &a).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }
}
