//! Alternating training loop, evaluation, run directories and plots.

mod ablation;
mod config;
mod eval;
pub mod plot;
mod run;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablation::{ablate, AblationRow, AblationSummary};
pub use config::{AblationMode, TrainingConfig};
pub use eval::{evaluate_frames, evaluate_generator, Evaluation};
pub use run::{evaluate, load_generator, load_run_config, read_log, resume, train, train_on, RunArtifacts};
pub use run::{CHECKPOINT_DIR, CONFIG_FILE, DIAGNOSTIC_DIR, LOG_FILE, PCA_FILE, REPORT_FILE, UNTRAINED_REPORT_FILE};

use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::dynamic_attention::{initial_mask, refine_mask, stack_masks, AttentionMask, AttentionSchedule, MaskPredictor};
use crate::error::{Error, Result};
use crate::generation_model::{Discriminator, Generator};
use crate::geometry::Region;
use crate::losses::{
    discriminator_loss_graph, generator_gan_loss_graph, lip_loss_graph, mi_loss_graph, perceptual_loss_graph,
    total_loss_graph, FeatureExtractor, LossTerms,
};
use crate::metrics::mouth_coverage;
use crate::mi_estimators::{
    derangement, estimate_on_generated, estimator_update_step_on, make_marginal_batch, PairSource, StatisticsArch,
    StatisticsNetwork,
};
use crate::nn::{Adam, AdamConfig, Optimizer, ParamSet};
use crate::synthetic_data::Dataset;
use crate::tensor::Tensor;

/// Parameter updates a training step can perform.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Update {
    MaskPredictor,
    Discriminator,
    Estimator,
    Generator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub update: Update,
    pub estimator_before: String,
    pub estimator_after: String,
}

/// Structure of one step: which updates ran, the estimator checksum around
/// each, and which terms entered the generator loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub events: Vec<TraceEvent>,
    pub generator_terms: Vec<String>,
    pub estimator_source: Option<PairSource>,
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: f64,
    pub d_loss: f64,
    pub g_total: f64,
    pub gan: f64,
    pub perc: f64,
    pub lip: f64,
    /// Raw MI term of the generator loss (before the weight).
    pub mi_term: Option<f64>,
    /// Objective reported by the estimator update.
    pub mi_estimate: Option<f64>,
    pub attention_rate: Option<f64>,
    pub mask_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trace: Option<StepTrace>,
}

/// All trainable state of a run.
pub struct Trainer {
    pub config: TrainingConfig,
    pub dataset: Dataset,
    pub train_indices: Vec<usize>,
    pub heldout_indices: Vec<usize>,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub estimator: StatisticsNetwork<f32>,
    pub predictor: MaskPredictor<f32>,
    phi: FeatureExtractor<f32>,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
    opt_e: Adam<f32>,
    opt_m: Adam<f32>,
    schedule: AttentionSchedule,
    region: Region,
    /// Number of completed steps.
    pub step: usize,
    pub steps_per_epoch: usize,
}

/// Generator for everything random in step `step`; independent of how the
/// run reached that step.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

const SETS: [&str; 4] = ["generator", "discriminator", "estimator", "mask_predictor"];

impl Trainer {
    pub fn new(config: TrainingConfig, dataset: Dataset) -> Result<Self> {
        config.validate()?;
        if dataset.image_size() != config.image_size {
            return Err(Error::Validation(format!(
                "dataset frames are {0}x{0} but the config asks for {1}x{1}",
                dataset.image_size(),
                config.image_size
            )));
        }
        if dataset.sequences.len() < 2 {
            return Err(Error::Validation("training needs at least 2 sequences (one is held out)".into()));
        }
        let arch = config.arch();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = Generator::new(&arch, &mut rng)?;
        let discriminator = Discriminator::new(&arch, &mut rng)?;
        let estimator =
            StatisticsNetwork::new(StatisticsArch::FrameAudio { arch: arch.clone(), hidden: config.estimator_hidden }, &mut rng)?;
        let predictor = MaskPredictor::new(arch.channels, &mut rng);
        let phi = FeatureExtractor::new(arch.channels, config.extractor_seed);
        let (train_indices, heldout_indices) = dataset.split(config.holdout_fraction);
        let train_frames: usize = train_indices.iter().map(|&i| dataset.sequences[i].scene.len()).sum();
        let steps_per_epoch = config.steps_per_epoch.unwrap_or_else(|| train_frames.div_ceil(config.batch_size));
        let adam = |lr: f64, p: &ParamSet<f32>| Adam::new(AdamConfig::with_lr(lr), p);
        Ok(Self {
            opt_g: adam(config.lr_generator, &generator.params),
            opt_d: adam(config.lr_discriminator, &discriminator.params),
            opt_e: adam(config.lr_estimator, &estimator.params),
            opt_m: adam(config.lr_generator, &predictor.params),
            schedule: config.schedule(),
            region: dataset.mouth_region(),
            generator,
            discriminator,
            estimator,
            predictor,
            phi,
            train_indices,
            heldout_indices,
            steps_per_epoch,
            step: 0,
            config,
            dataset,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.config.epochs * self.steps_per_epoch
    }

    pub fn epoch_at(&self, step: usize) -> f64 {
        step as f64 / self.steps_per_epoch as f64
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Parameters, optimizer moments and counters.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        let parts: [(&str, &ParamSet<f32>, &Adam<f32>); 4] = [
            ("generator", &self.generator.params, &self.opt_g),
            ("discriminator", &self.discriminator.params, &self.opt_d),
            ("estimator", &self.estimator.params, &self.opt_e),
            ("mask_predictor", &self.predictor.params, &self.opt_m),
        ];
        for (name, params, opt) in parts {
            ck.insert(name, params);
            ck.insert(&format!("adam_m.{name}"), &opt.first_moment);
            ck.insert(&format!("adam_v.{name}"), &opt.second_moment);
            ck.meta.set(format!("adam_steps.{name}"), opt.step_count);
        }
        ck.meta.set("step", self.step);
        ck.meta.set("steps_per_epoch", self.steps_per_epoch);
        ck.meta.set("seed", self.config.seed);
        ck
    }

    /// Restores everything saved by [`Self::checkpoint`].
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let steps: usize = ck.meta.parse_value("steps_per_epoch")?;
        if steps != self.steps_per_epoch {
            return Err(Error::Validation(format!(
                "checkpoint was written with {steps} steps per epoch, config gives {}",
                self.steps_per_epoch
            )));
        }
        for name in SETS {
            let (params, opt) = match name {
                "generator" => (&mut self.generator.params, &mut self.opt_g),
                "discriminator" => (&mut self.discriminator.params, &mut self.opt_d),
                "estimator" => (&mut self.estimator.params, &mut self.opt_e),
                _ => (&mut self.predictor.params, &mut self.opt_m),
            };
            params.load_from(ck.set(name)?)?;
            opt.first_moment.load_from(ck.set(&format!("adam_m.{name}"))?)?;
            opt.second_moment.load_from(ck.set(&format!("adam_v.{name}"))?)?;
            opt.step_count = ck.meta.parse_value(&format!("adam_steps.{name}"))?;
        }
        self.step = ck.meta.parse_value("step")?;
        Ok(())
    }

    /// Attention rate used at `step`, or `None` with attention disabled.
    pub fn attention_rate(&self, step: usize) -> Result<Option<f64>> {
        if !self.config.ablation.da_enabled {
            return Ok(None);
        }
        self.schedule.schedule_rate(self.epoch_at(step)).map(Some)
    }

    /// Runs one training step and advances the step counter.
    pub fn step(&mut self) -> Result<StepRecord> {
        let mut rng = step_rng(self.config.seed, self.step);
        let batch = self.sample_batch(&mut rng)?;
        let epoch = self.epoch_at(self.step);
        let mode = self.config.ablation;
        let tracing = self.config.trace;
        let mut trace = tracing.then(StepTrace::default);
        let est_sum = |t: &Self| if tracing { t.estimator.checksum() } else { String::new() };
        let record = |trace: &mut Option<StepTrace>, update: Update, before: String, after: String| {
            if let Some(t) = trace.as_mut() {
                t.events.push(TraceEvent { update, estimator_before: before, estimator_after: after });
            }
        };

        // Dynamic attention on the identity input.
        let attention_rate = self.attention_rate(self.step)?;
        let mut identity_in = batch.identity.clone();
        let mut mask_loss = None;
        if let Some(rate) = attention_rate {
            if rate < 1.0 {
                let masks = self.batch_masks(rate, &batch.prev)?;
                identity_in = mask_rows(&batch.identity, &stack_masks(&masks)?)?;
            }
            let before = est_sum(self);
            mask_loss = Some(self.update_predictor(&batch.prev_real)?);
            record(&mut trace, Update::MaskPredictor, before, est_sum(self));
        }

        let mut g = Graph::new();
        let gp = self.generator.params.bind(&mut g, true);
        let id = g.constant(identity_in);
        let au = g.constant(batch.audio.clone());
        let pv = g.constant(batch.prev.clone());
        let fake = self.generator.forward(&mut g, &gp, id, au, pv)?;
        let fake_t = g.value(fake).clone();

        // Discriminator on matched real pairs against generated pairs.
        let before = est_sum(self);
        let d_loss = self.update_discriminator(&batch.target, &fake_t, &batch.audio)?;
        record(&mut trace, Update::Discriminator, before, est_sum(self));

        let mut mi_estimate = None;
        if mode.mi_enabled {
            let (frames, source) = if mode.asymmetric {
                (batch.target.clone(), PairSource::RealPairs)
            } else {
                (fake_t.clone(), PairSource::GeneratedPairs)
            };
            let pairs = make_marginal_batch(frames, batch.audio.clone(), &mut rng)?;
            let before = est_sum(self);
            let est =
                estimator_update_step_on(&mut self.estimator, &pairs, mode.mi_representation, &mut self.opt_e, source)?;
            record(&mut trace, Update::Estimator, before, est_sum(self));
            mi_estimate = Some(est.value);
            if let Some(t) = trace.as_mut() {
                t.estimator_source = Some(source);
            }
        }

        // Generator against the updated discriminator and a frozen estimator.
        let dp = self.discriminator.params.bind(&mut g, false);
        let d_fake = self.discriminator.forward(&mut g, &dp, fake, au)?;
        let gan = generator_gan_loss_graph(&mut g, d_fake);
        let real = g.constant(batch.target.clone());
        let perc = perceptual_loss_graph(&mut g, &self.phi, real, fake)?;
        let lip = lip_loss_graph(&mut g, real, fake, &self.region)?;
        let mi = if mode.mi_enabled {
            let perm = derangement(self.config.batch_size, &mut rng)?;
            let (v, est) = estimate_on_generated(&mut g, &self.estimator, mode.mi_representation, fake, &batch.audio, &perm)?;
            Some(mi_loss_graph(&mut g, v, &est)?)
        } else {
            None
        };
        let terms = LossTerms { gan, perc, lip, mi };
        let total = total_loss_graph(&mut g, &terms, &self.config.weights)?;
        let value = |g: &Graph<f32>, v| g.value(v).item() as f64;
        let (gan_v, perc_v, lip_v, mi_v, total_v) =
            (value(&g, gan), value(&g, perc), value(&g, lip), mi.map(|m| value(&g, m)), value(&g, total));
        let before = est_sum(self);
        let mut grads = g.backward(total)?;
        let grads = gp.grads(&mut grads);
        self.opt_g.step(&mut self.generator.params, &grads)?;
        record(&mut trace, Update::Generator, before, est_sum(self));
        if let Some(t) = trace.as_mut() {
            t.generator_terms = ["gan", "perc", "lip"].iter().map(|s| s.to_string()).collect();
            if mi.is_some() {
                t.generator_terms.push("mi".into());
            }
        }

        let rec = StepRecord {
            step: self.step,
            epoch,
            d_loss,
            g_total: total_v,
            gan: gan_v,
            perc: perc_v,
            lip: lip_v,
            mi_term: mi_v,
            mi_estimate,
            attention_rate,
            mask_loss,
            trace,
        };
        self.step += 1;
        Ok(rec)
    }

    fn sample_batch(&self, rng: &mut ChaCha8Rng) -> Result<Batch> {
        let b = self.config.batch_size;
        let picks: Vec<(usize, usize)> = (0..b)
            .map(|_| {
                let s = self.train_indices[rng.random_range(0..self.train_indices.len())];
                (s, rng.random_range(0..self.dataset.sequences[s].scene.len()))
            })
            .collect();
        let teacher: Vec<bool> = (0..b).map(|_| rng.random::<f64>() < self.config.teacher_forcing).collect();
        let seq = |s: usize| &self.dataset.sequences[s];
        let prev_index = |i: usize| i.saturating_sub(1);
        let rows = |f: &dyn Fn(usize, usize) -> Tensor<f32>| -> Result<Tensor<f32>> {
            let parts: Vec<Tensor<f32>> = picks.iter().map(|&(s, i)| f(s, i)).collect();
            Tensor::stack_rows(&parts.iter().collect::<Vec<_>>())
        };
        let identity = rows(&|s, _| seq(s).scene.frame(0))?;
        let target = rows(&|s, i| seq(s).scene.frame(i))?;
        let audio = rows(&|s, i| seq(s).audio.frame_features(i))?;
        let prev_real = rows(&|s, i| seq(s).scene.frame(prev_index(i)))?;

        // Without teacher forcing the previous frame is the generator's own
        // one-step prediction of it, made from the real frame before it.
        let fed_back: Vec<usize> = (0..b).filter(|&k| !teacher[k] && picks[k].1 > 0).collect();
        let mut prev = prev_real.clone();
        if !fed_back.is_empty() {
            let sub = |f: &dyn Fn(usize, usize) -> Tensor<f32>| -> Result<Tensor<f32>> {
                let parts: Vec<Tensor<f32>> = fed_back.iter().map(|&k| f(picks[k].0, picks[k].1 - 1)).collect();
                Tensor::stack_rows(&parts.iter().collect::<Vec<_>>())
            };
            let gen = self.generator.forward_tensors(
                &sub(&|s, _| seq(s).scene.frame(0))?,
                &sub(&|s, j| seq(s).audio.frame_features(j))?,
                &sub(&|s, j| seq(s).scene.frame(prev_index(j)))?,
            )?;
            let row = gen.numel() / fed_back.len();
            for (r, &k) in fed_back.iter().enumerate() {
                prev.data_mut()[k * row..(k + 1) * row].copy_from_slice(&gen.data()[r * row..(r + 1) * row]);
            }
        }
        Ok(Batch { identity, target, audio, prev, prev_real })
    }

    /// Coarse region mask refined by the predictor on each previous frame.
    fn batch_masks(&self, rate: f64, prev: &Tensor<f32>) -> Result<Vec<AttentionMask>> {
        let (h, w) = (prev.dim(2), prev.dim(3));
        let coarse = initial_mask(h, w, self.region, rate)?;
        let scores = self.predictor.scores(prev)?.to_f64_vec();
        scores.chunks_exact(h * w).map(|s| refine_mask(&coarse, s)).collect()
    }

    /// One step of the mask predictor towards the mouth coverage of the real
    /// previous frames.
    fn update_predictor(&mut self, prev_real: &Tensor<f32>) -> Result<f64> {
        let n = prev_real.dim(0);
        let mut target = Vec::with_capacity(n * self.region.area());
        for k in 0..n {
            match mouth_coverage(&prev_real.select_rows(&[k]), &self.region) {
                Ok(c) => target.extend(c),
                Err(Error::Detection(_)) => target.extend(std::iter::repeat_n(0.0, self.region.area())),
                Err(e) => return Err(e),
            }
        }
        let target = Tensor::<f32>::from_f64(&[n, 1, self.region.height(), self.region.width()], &target)?;
        let mut g = Graph::new();
        let p = self.predictor.params.bind(&mut g, true);
        let x = g.constant(prev_real.clone());
        let t = g.constant(target);
        let loss = self.predictor.loss(&mut g, &p, x, self.region, t)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("mask predictor loss is {value}")));
        }
        let mut grads = g.backward(loss)?;
        let grads = p.grads(&mut grads);
        self.opt_m.step(&mut self.predictor.params, &grads)?;
        Ok(value)
    }

    fn update_discriminator(&mut self, real: &Tensor<f32>, fake: &Tensor<f32>, audio: &Tensor<f32>) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.discriminator.params.bind(&mut g, true);
        let r = g.constant(real.clone());
        let f = g.constant(fake.clone());
        let a = g.constant(audio.clone());
        let d_real = self.discriminator.forward(&mut g, &p, r, a)?;
        let d_fake = self.discriminator.forward(&mut g, &p, f, a)?;
        let loss = discriminator_loss_graph(&mut g, d_real, d_fake)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("discriminator loss is {value}")));
        }
        let mut grads = g.backward(loss)?;
        let grads = p.grads(&mut grads);
        self.opt_d.step(&mut self.discriminator.params, &grads)?;
        Ok(value)
    }
}

struct Batch {
    identity: Tensor<f32>,
    target: Tensor<f32>,
    audio: Tensor<f32>,
    /// Previous frame as fed to the generator (real or generated).
    prev: Tensor<f32>,
    prev_real: Tensor<f32>,
}

/// `images [N, C, H, W]` times `masks [N, 1, H, W]`, per channel.
fn mask_rows(images: &Tensor<f32>, masks: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = images.shape();
    let hw = s[2] * s[3];
    if masks.shape() != [s[0], 1, s[2], s[3]] {
        return Err(Error::Shape(format!("masks {:?} for images {s:?}", masks.shape())));
    }
    let mut out = images.clone();
    for (n, block) in out.data_mut().chunks_exact_mut(s[1] * hw).enumerate() {
        let m = &masks.data()[n * hw..(n + 1) * hw];
        for plane in block.chunks_exact_mut(hw) {
            plane.iter_mut().zip(m).for_each(|(v, &w)| *v *= w);
        }
    }
    Ok(out)
}
