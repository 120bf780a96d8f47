//! Neural lower bounds on mutual information and the asymmetric
//! train-on-real / estimate-on-generated protocol.
//!
//! A [`StatisticsNetwork`] scores `(frame, audio)` pairs. Its scores on joint
//! pairs and on marginal pairs (audio re-assigned by a derangement) feed one
//! of two objectives:
//!
//! * Donsker-Varadhan: `mean(T_joint) - ln mean(exp(T_marginal))`, a true
//!   lower bound on MI in nats.
//! * Jensen-Shannon: `mean(-softplus(-T_joint)) - mean(softplus(T_marginal))`,
//!   which tracks the relative size of MI and trains more stably.
//!
//! The estimator is only ever updated on real pairs through
//! [`estimator_update_step`]. The generator consumes
//! [`estimate_on_generated`], which binds the estimator as constants so no
//! gradient can reach it.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softplus_scalar, Graph, Var};
use crate::error::{Error, Result};
use crate::generation_model::{ArchConfig, AudioEncoder, ImageEncoder};
use crate::nn::{lrelu, Bound, Linear, Optimizer, ParamSet};
use crate::tensor::{Scalar, Tensor};

/// `ln(1 + e^x)`, overflow-safe.
pub fn softplus(x: f64) -> f64 {
    softplus_scalar(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Representation {
    #[serde(rename = "dv")]
    DonskerVaradhan,
    #[serde(rename = "js")]
    JensenShannon,
}

impl std::str::FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dv" => Ok(Self::DonskerVaradhan),
            "js" => Ok(Self::JensenShannon),
            other => Err(Error::Validation(format!("unknown MI representation {other:?} (expected dv or js)"))),
        }
    }
}

impl std::fmt::Display for Representation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::DonskerVaradhan => "dv",
            Self::JensenShannon => "js",
        })
    }
}

/// Which distribution an estimate was computed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairSource {
    RealPairs,
    GeneratedPairs,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MIEstimate {
    pub value: f64,
    pub representation: Representation,
    pub source: PairSource,
}

/// Joint pairs `(f_i, a_i)` and marginal pairs `(f_i, a_{perm(i)})`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedBatch<S> {
    pub joint_frames: Tensor<S>,
    pub joint_audios: Tensor<S>,
    pub marginal_frames: Tensor<S>,
    pub marginal_audios: Tensor<S>,
    /// Audio index paired with each marginal frame.
    pub marginal_audio_index: Vec<usize>,
}

impl<S: Scalar> PairedBatch<S> {
    pub fn batch_size(&self) -> usize {
        self.joint_frames.dim(0)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.joint_frames.dim(0);
        if self.joint_audios.dim(0) != n {
            return Err(Error::Shape("joint frames and audios differ in length".into()));
        }
        if self.marginal_frames.dim(0) != self.marginal_audios.dim(0) {
            return Err(Error::Shape("marginal frames and audios differ in length".into()));
        }
        if self.marginal_frames.shape()[1..] != self.joint_frames.shape()[1..]
            || self.marginal_audios.shape()[1..] != self.joint_audios.shape()[1..]
        {
            return Err(Error::Shape("joint and marginal samples have different shapes".into()));
        }
        Ok(())
    }
}

/// Uniformly random permutation of `0..n` with no fixed points.
pub fn derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Validation(format!("a derangement needs at least 2 elements, got {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    // Rejection sampling; the acceptance rate tends to 1/e.
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// Keeps the joint pairs and builds marginal pairs by deranging the audio.
pub fn make_marginal_batch<S: Scalar, R: Rng + ?Sized>(
    joint_frames: Tensor<S>,
    joint_audios: Tensor<S>,
    rng: &mut R,
) -> Result<PairedBatch<S>> {
    let n = joint_frames.dim(0);
    if joint_audios.dim(0) != n {
        return Err(Error::Shape(format!("{n} frames but {} audios", joint_audios.dim(0))));
    }
    let perm = derangement(n, rng)?;
    Ok(PairedBatch {
        marginal_frames: joint_frames.clone(),
        marginal_audios: joint_audios.select_rows(&perm),
        joint_frames,
        joint_audios,
        marginal_audio_index: perm,
    })
}

/// Input side of a [`StatisticsNetwork`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum StatisticsArch {
    /// Flat vectors `x [N, x_dim]`, `y [N, y_dim]` concatenated into the head.
    Vector { x_dim: usize, y_dim: usize, hidden: usize },
    /// Frames and audio windows, each through its own encoder.
    FrameAudio { arch: ArchConfig, hidden: usize },
}

#[derive(Clone, Debug)]
enum Encoders {
    Vector,
    FrameAudio { image: ImageEncoder, audio: AudioEncoder },
}

/// The scorer `T(frame, audio) -> R`: optional encoders followed by a
/// three-layer classifier with a one-dimensional output.
#[derive(Clone, Debug)]
pub struct StatisticsNetwork<S> {
    pub arch: StatisticsArch,
    pub params: ParamSet<S>,
    encoders: Encoders,
    head: [Linear; 3],
}

impl<S: Scalar> StatisticsNetwork<S> {
    pub fn new<R: Rng + ?Sized>(arch: StatisticsArch, rng: &mut R) -> Result<Self> {
        let mut ps = ParamSet::new();
        let (encoders, features, hidden) = match &arch {
            StatisticsArch::Vector { x_dim, y_dim, hidden } => {
                if *x_dim == 0 || *y_dim == 0 || *hidden == 0 {
                    return Err(Error::Validation("vector statistics network needs positive sizes".into()));
                }
                (Encoders::Vector, x_dim + y_dim, *hidden)
            }
            StatisticsArch::FrameAudio { arch: a, hidden } => {
                a.validate()?;
                let image = ImageEncoder::new(&mut ps, "image_encoder", a.channels, &a.widths, rng);
                let audio = AudioEncoder::new(&mut ps, "audio_encoder", a, rng);
                let side = a.bottleneck_side();
                let flat = a.widths[a.widths.len() - 1] * side * side;
                (Encoders::FrameAudio { image, audio }, flat + a.audio_dim, *hidden)
            }
        };
        let head = [
            Linear::new(&mut ps, "classifier.fc1", features, hidden, rng),
            Linear::new(&mut ps, "classifier.fc2", hidden, hidden, rng),
            Linear::new(&mut ps, "classifier.fc3", hidden, 1, rng),
        ];
        Ok(Self { arch, params: ps, encoders, head })
    }

    /// Final classifier layer; its bias shifts every score by a constant.
    pub fn output_layer(&self) -> &Linear {
        &self.head[2]
    }

    /// Scores `[N, 1]` for the pairs `(frames[i], audios[i])`.
    pub fn forward(&self, g: &mut Graph<S>, p: &Bound, frames: Var, audios: Var) -> Result<Var> {
        let features = match &self.encoders {
            Encoders::Vector => {
                let x = g.flatten(frames)?;
                let y = g.flatten(audios)?;
                g.concat(&[x, y])?
            }
            Encoders::FrameAudio { image, audio } => {
                let img = *image.forward(g, p, frames)?.last().expect("stage");
                let img = g.flatten(img)?;
                let aud = audio.forward(g, p, audios)?;
                g.concat(&[img, aud])?
            }
        };
        let h = self.head[0].forward(g, p, features)?;
        let h = lrelu(g, h);
        let h = self.head[1].forward(g, p, h)?;
        let h = lrelu(g, h);
        self.head[2].forward(g, p, h)
    }

    pub fn scores(&self, frames: &Tensor<S>, audios: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let f = g.constant(frames.clone());
        let a = g.constant(audios.clone());
        let out = self.forward(&mut g, &p, f, a)?;
        Ok(g.value(out).clone())
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }
}

fn ensure_finite<S: Scalar>(g: &Graph<S>, v: Var, what: &str) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("statistics network produced non-finite {what} scores")))
    }
}

/// Objective from joint and marginal score vectors already on `g`.
pub fn objective_from_scores<S: Scalar>(
    g: &mut Graph<S>,
    representation: Representation,
    joint: Var,
    marginal: Var,
) -> Result<Var> {
    ensure_finite(g, joint, "joint")?;
    ensure_finite(g, marginal, "marginal")?;
    match representation {
        Representation::DonskerVaradhan => {
            let first = g.mean(joint);
            let second = g.log_mean_exp(marginal);
            g.sub(first, second)
        }
        Representation::JensenShannon => {
            let neg = g.neg(joint);
            let sp_joint = g.softplus(neg);
            let first = g.mean(sp_joint);
            let sp_marg = g.softplus(marginal);
            let second = g.mean(sp_marg);
            // -mean(softplus(-T_joint)) - mean(softplus(T_marginal))
            let total = g.add(first, second)?;
            Ok(g.neg(total))
        }
    }
}

/// Scores a batch in one pass and returns the objective node.
///
/// `frames` and `audios` hold the joint samples; marginal samples reuse the
/// same frames with audio rows `marginal_audio_index`.
pub fn objective_graph<S: Scalar>(
    g: &mut Graph<S>,
    net: &StatisticsNetwork<S>,
    p: &Bound,
    representation: Representation,
    frames: Var,
    joint_audios: Var,
    marginal_audios: Var,
) -> Result<Var> {
    let n = g.shape(frames)[0];
    let all_frames = g.concat_rows(&[frames, frames])?;
    let all_audios = g.concat_rows(&[joint_audios, marginal_audios])?;
    let scores = net.forward(g, p, all_frames, all_audios)?;
    let joint = g.slice_rows(scores, 0, n)?;
    let marginal = g.slice_rows(scores, n, 2 * n)?;
    objective_from_scores(g, representation, joint, marginal)
}

fn batch_objective<S: Scalar>(
    g: &mut Graph<S>,
    net: &StatisticsNetwork<S>,
    p: &Bound,
    representation: Representation,
    batch: &PairedBatch<S>,
) -> Result<Var> {
    batch.validate()?;
    let jf = g.constant(batch.joint_frames.clone());
    let ja = g.constant(batch.joint_audios.clone());
    let mf = g.constant(batch.marginal_frames.clone());
    let ma = g.constant(batch.marginal_audios.clone());
    let joint = net.forward(g, p, jf, ja)?;
    let marginal = net.forward(g, p, mf, ma)?;
    objective_from_scores(g, representation, joint, marginal)
}

pub fn objective<S: Scalar>(
    batch: &PairedBatch<S>,
    net: &StatisticsNetwork<S>,
    representation: Representation,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = net.params.bind(&mut g, false);
    let v = batch_objective(&mut g, net, &p, representation, batch)?;
    Ok(g.value(v).item().as_f64())
}

/// `mean(T_joint) - ln mean(exp(T_marginal))`.
pub fn dv_objective<S: Scalar>(batch: &PairedBatch<S>, net: &StatisticsNetwork<S>) -> Result<f64> {
    objective(batch, net, Representation::DonskerVaradhan)
}

/// `mean(-softplus(-T_joint)) - mean(softplus(T_marginal))`.
pub fn js_objective<S: Scalar>(batch: &PairedBatch<S>, net: &StatisticsNetwork<S>) -> Result<f64> {
    objective(batch, net, Representation::JensenShannon)
}

/// Objective value and its gradient with respect to every estimator
/// parameter, in slot order.
pub fn objective_with_grads<S: Scalar>(
    batch: &PairedBatch<S>,
    net: &StatisticsNetwork<S>,
    representation: Representation,
) -> Result<(f64, Vec<Option<Tensor<S>>>)> {
    let mut g = Graph::new();
    let p = net.params.bind(&mut g, true);
    let v = batch_objective(&mut g, net, &p, representation, batch)?;
    let value = g.value(v).item().as_f64();
    let mut grads = g.backward(v)?;
    Ok((value, p.grads(&mut grads)))
}

/// One gradient-ascent step of the estimator on a batch of real pairs.
///
/// The optimizer minimizes, so it is handed the gradient of the negated
/// objective: plain SGD with rate `lr` moves parameters by `+lr * grad`.
/// Returns the objective value before the step.
pub fn estimator_update_step<S: Scalar, O: Optimizer<S>>(
    net: &mut StatisticsNetwork<S>,
    real_batch: &PairedBatch<S>,
    representation: Representation,
    optimizer: &mut O,
) -> Result<MIEstimate> {
    estimator_update_step_on(net, real_batch, representation, optimizer, PairSource::RealPairs)
}

/// [`estimator_update_step`] on a batch from an explicit source; the
/// symmetric ablation trains the estimator on (detached) generated pairs.
pub fn estimator_update_step_on<S: Scalar, O: Optimizer<S>>(
    net: &mut StatisticsNetwork<S>,
    batch: &PairedBatch<S>,
    representation: Representation,
    optimizer: &mut O,
    source: PairSource,
) -> Result<MIEstimate> {
    let (value, grads) = objective_with_grads(batch, net, representation)?;
    let ascent: Vec<Option<Tensor<S>>> = grads.into_iter().map(|g| g.map(|t| t.map(|v| -v))).collect();
    optimizer.step(&mut net.params, &ascent).map_err(|e| match e {
        Error::Numeric(msg) => Error::Numeric(format!("estimator update: {msg} (objective was {value})")),
        other => other,
    })?;
    Ok(MIEstimate { value, representation, source })
}

/// Objective on generated frames with the estimator frozen.
///
/// `generated` is a node produced by the generator; gradients flow back into
/// it while the estimator parameters are bound as constants.
pub fn estimate_on_generated<S: Scalar>(
    g: &mut Graph<S>,
    net: &StatisticsNetwork<S>,
    representation: Representation,
    generated: Var,
    audios: &Tensor<S>,
    marginal_audio_index: &[usize],
) -> Result<(Var, MIEstimate)> {
    if marginal_audio_index.len() != g.shape(generated)[0] || audios.dim(0) != g.shape(generated)[0] {
        return Err(Error::Shape("generated frames, audios and marginal index disagree in length".into()));
    }
    let frozen = net.params.bind(g, false);
    let ja = g.constant(audios.clone());
    let ma = g.constant(audios.select_rows(marginal_audio_index));
    let v = objective_graph(g, net, &frozen, representation, generated, ja, ma)?;
    let value = g.value(v).item().as_f64();
    Ok((v, MIEstimate { value, representation, source: PairSource::GeneratedPairs }))
}

/// Plain-tensor version of [`estimate_on_generated`] for reporting.
pub fn estimate_on_generated_batch<S: Scalar>(
    net: &StatisticsNetwork<S>,
    generated_batch: &PairedBatch<S>,
    representation: Representation,
) -> Result<MIEstimate> {
    let value = objective(generated_batch, net, representation)?;
    Ok(MIEstimate { value, representation, source: PairSource::GeneratedPairs })
}

pub mod benchmark {
    //! Estimator training on correlated Gaussians with a known answer.

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::info_oracle::GaussianPairSpec;
    use crate::nn::{Adam, AdamConfig};
    use crate::synthetic_data::sample_correlated_gaussians;

    #[derive(Clone, Debug)]
    pub struct GaussianRun {
        pub spec: GaussianPairSpec,
        pub representation: Representation,
        pub steps: usize,
        pub batch_size: usize,
        pub learning_rate: f64,
        pub hidden: usize,
        pub seed: u64,
    }

    impl GaussianRun {
        pub fn new(spec: GaussianPairSpec, representation: Representation, seed: u64) -> Self {
            Self { spec, representation, steps: 2000, batch_size: 256, learning_rate: 1e-3, hidden: 64, seed }
        }
    }

    /// Per-step objective values on fresh batches.
    pub fn train_gaussian_estimator(run: &GaussianRun) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
        let arch = StatisticsArch::Vector { x_dim: run.spec.dim, y_dim: run.spec.dim, hidden: run.hidden };
        let mut net = StatisticsNetwork::<f32>::new(arch, &mut rng)?;
        let mut cfg = AdamConfig::with_lr(run.learning_rate);
        cfg.beta1 = 0.9;
        let mut opt = Adam::new(cfg, &net.params);
        let mut trajectory = Vec::with_capacity(run.steps);
        for _ in 0..run.steps {
            let batch = sample_correlated_gaussians::<f32, _>(&run.spec, run.batch_size, &mut rng)?;
            let est = estimator_update_step(&mut net, &batch, run.representation, &mut opt)?;
            trajectory.push(est.value);
        }
        Ok(trajectory)
    }

    /// Estimator training on fixed scalar pairs `(x, y)`, drawing each batch
    /// with replacement. `run.spec` is not used.
    pub fn train_pair_estimator(pairs: &[(f32, f32)], run: &GaussianRun) -> Result<Vec<f64>> {
        if pairs.len() < 2 {
            return Err(Error::Validation(format!("need at least 2 pairs, got {}", pairs.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
        let arch = StatisticsArch::Vector { x_dim: 1, y_dim: 1, hidden: run.hidden };
        let mut net = StatisticsNetwork::<f32>::new(arch, &mut rng)?;
        let mut cfg = AdamConfig::with_lr(run.learning_rate);
        cfg.beta1 = 0.9;
        let mut opt = Adam::new(cfg, &net.params);
        let mut trajectory = Vec::with_capacity(run.steps);
        for _ in 0..run.steps {
            let picks: Vec<(f32, f32)> = (0..run.batch_size).map(|_| pairs[rng.random_range(0..pairs.len())]).collect();
            let x = Tensor::from_f32(&[run.batch_size, 1], &picks.iter().map(|p| p.0).collect::<Vec<_>>())?;
            let y = Tensor::from_f32(&[run.batch_size, 1], &picks.iter().map(|p| p.1).collect::<Vec<_>>())?;
            let batch = make_marginal_batch(x, y, &mut rng)?;
            let est = estimator_update_step(&mut net, &batch, run.representation, &mut opt)?;
            trajectory.push(est.value);
        }
        Ok(trajectory)
    }

    /// Mean of the final `window` entries.
    pub fn smoothed_tail(trajectory: &[f64], window: usize) -> f64 {
        let w = window.min(trajectory.len()).max(1);
        trajectory[trajectory.len() - w..].iter().sum::<f64>() / w as f64
    }
}
