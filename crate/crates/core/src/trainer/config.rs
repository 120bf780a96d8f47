//! Training configuration, ablation toggles and their `key=value` form.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dynamic_attention::AttentionSchedule;
use crate::error::{Error, Result};
use crate::generation_model::ArchConfig;
use crate::kv::KeyValues;
use crate::losses::{LossWeights, EXTRACTOR_SEED};
use crate::mi_estimators::Representation;
use crate::synthetic_data::{FEATURE_COEFFS, FEATURE_STEPS};

/// Which training components are active. Mirrors the rows of the ablation
/// table: Baseline, +MINE, +DA, +MINE+DA, +MINE+JS, +MINE+JS+DA, +MINE+Asy+DA,
/// +AMIE and +AMIE+DA.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationMode {
    pub mi_enabled: bool,
    pub mi_representation: Representation,
    pub asymmetric: bool,
    pub da_enabled: bool,
}

impl AblationMode {
    const fn new(mi: bool, repr: Representation, asym: bool, da: bool) -> Self {
        Self { mi_enabled: mi, mi_representation: repr, asymmetric: asym, da_enabled: da }
    }

    pub const BASELINE: Self = Self::new(false, Representation::JensenShannon, true, false);
    pub const MINE: Self = Self::new(true, Representation::DonskerVaradhan, false, false);
    pub const DA: Self = Self::new(false, Representation::JensenShannon, true, true);
    pub const MINE_DA: Self = Self::new(true, Representation::DonskerVaradhan, false, true);
    pub const MINE_JS: Self = Self::new(true, Representation::JensenShannon, false, false);
    pub const MINE_JS_DA: Self = Self::new(true, Representation::JensenShannon, false, true);
    pub const MINE_ASY_DA: Self = Self::new(true, Representation::DonskerVaradhan, true, true);
    pub const AMIE: Self = Self::new(true, Representation::JensenShannon, true, false);
    pub const AMIE_DA: Self = Self::new(true, Representation::JensenShannon, true, true);

    /// The full table in row order with preset names.
    pub const TABLE: [(&'static str, Self); 9] = [
        ("baseline", Self::BASELINE),
        ("mine", Self::MINE),
        ("da", Self::DA),
        ("mine-da", Self::MINE_DA),
        ("mine-js", Self::MINE_JS),
        ("mine-js-da", Self::MINE_JS_DA),
        ("mine-asy-da", Self::MINE_ASY_DA),
        ("amie", Self::AMIE),
        ("amie-da", Self::AMIE_DA),
    ];

    /// Preset name, if this mode is one of the table rows. With MI disabled
    /// the representation and asymmetry flags are ignored.
    pub fn preset_name(&self) -> Option<&'static str> {
        Self::TABLE.iter().find(|(_, m)| m.equivalent(self)).map(|(n, _)| *n)
    }

    pub fn equivalent(&self, other: &Self) -> bool {
        if !self.mi_enabled && !other.mi_enabled {
            return self.da_enabled == other.da_enabled;
        }
        self == other
    }
}

impl Default for AblationMode {
    fn default() -> Self {
        Self::AMIE_DA
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['+', '_'], "-");
        let key = key.trim_start_matches('-');
        Self::TABLE
            .iter()
            .find(|(n, _)| *n == key)
            .map(|(_, m)| *m)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::TABLE.iter().map(|(n, _)| *n).collect();
                Error::Validation(format!("unknown ablation mode {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.preset_name() {
            Some(n) => f.write_str(n),
            None => write!(
                f,
                "mi={} repr={} asymmetric={} da={}",
                self.mi_enabled, self.mi_representation, self.asymmetric, self.da_enabled
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub seed: u64,
    pub image_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Defaults to one pass over the training frames.
    pub steps_per_epoch: Option<usize>,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub lr_estimator: f64,
    pub weights: LossWeights,
    pub ablation: AblationMode,
    /// Schedule fields left unset follow [`AttentionSchedule::for_epochs`].
    pub start_rate: Option<f64>,
    pub end_rate: Option<f64>,
    pub decay_start_epoch: Option<f64>,
    pub decay_end_epoch: Option<f64>,
    pub fix_to_one_epoch: Option<f64>,
    pub dataset: PathBuf,
    pub output: PathBuf,
    pub widths: Vec<usize>,
    pub audio_dim: usize,
    pub estimator_hidden: usize,
    /// Probability of feeding the real previous frame during training.
    pub teacher_forcing: f64,
    pub holdout_fraction: f64,
    /// Checkpoint interval in epochs; the final state is always saved.
    pub checkpoint_every: usize,
    pub extractor_seed: u64,
    /// Record estimator checksums around every update in the step trace.
    pub trace: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 32,
            batch_size: 8,
            epochs: 20,
            steps_per_epoch: None,
            lr_generator: 2e-4,
            lr_discriminator: 2e-4,
            lr_estimator: 1e-4,
            weights: LossWeights::default(),
            ablation: AblationMode::default(),
            start_rate: None,
            end_rate: None,
            decay_start_epoch: None,
            decay_end_epoch: None,
            fix_to_one_epoch: None,
            dataset: PathBuf::from("data"),
            output: PathBuf::from("runs/default"),
            widths: vec![8, 16, 32, 64],
            audio_dim: 64,
            estimator_hidden: 64,
            teacher_forcing: 0.5,
            holdout_fraction: 0.2,
            checkpoint_every: 5,
            extractor_seed: EXTRACTOR_SEED,
            trace: false,
        }
    }
}

impl TrainingConfig {
    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            image_size: self.image_size,
            channels: 3,
            widths: self.widths.clone(),
            audio_steps: FEATURE_STEPS,
            audio_coeffs: FEATURE_COEFFS,
            audio_dim: self.audio_dim,
        }
    }

    pub fn schedule(&self) -> AttentionSchedule {
        let d = AttentionSchedule::for_epochs(self.epochs);
        AttentionSchedule {
            start_rate: self.start_rate.unwrap_or(d.start_rate),
            end_rate: self.end_rate.unwrap_or(d.end_rate),
            decay_start_epoch: self.decay_start_epoch.unwrap_or(d.decay_start_epoch),
            decay_end_epoch: self.decay_end_epoch.unwrap_or(d.decay_end_epoch),
            fix_to_one_epoch: self.fix_to_one_epoch.unwrap_or(d.fix_to_one_epoch),
            total_epochs: d.total_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [("lr_generator", self.lr_generator), ("lr_discriminator", self.lr_discriminator), ("lr_estimator", self.lr_estimator)];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("{name} must be positive, got {v}")));
            }
        }
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Validation("batch_size must be at least 2 to form marginal pairs".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Validation("steps_per_epoch must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.teacher_forcing) {
            return Err(Error::Validation(format!("teacher_forcing must lie in [0, 1], got {}", self.teacher_forcing)));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::Validation(format!("holdout_fraction must lie in (0, 1), got {}", self.holdout_fraction)));
        }
        if self.checkpoint_every == 0 || self.estimator_hidden == 0 {
            return Err(Error::Validation("checkpoint_every and estimator_hidden must be positive".into()));
        }
        self.weights.validate()?;
        self.arch().validate()?;
        if self.ablation.da_enabled {
            self.schedule().validate()?;
        }
        Ok(())
    }

    /// Resolved `key=value` form; every field is written explicitly.
    pub fn to_kv(&self) -> KeyValues {
        let s = self.schedule();
        let mut kv = KeyValues::new();
        kv.set("seed", self.seed);
        kv.set("image_size", self.image_size);
        kv.set("batch_size", self.batch_size);
        kv.set("epochs", self.epochs);
        if let Some(n) = self.steps_per_epoch {
            kv.set("steps_per_epoch", n);
        }
        kv.set("lr_generator", self.lr_generator);
        kv.set("lr_discriminator", self.lr_discriminator);
        kv.set("lr_estimator", self.lr_estimator);
        kv.set("lambda_perc", self.weights.lambda_perc);
        kv.set("lambda_lip", self.weights.lambda_lip);
        kv.set("lambda_mi", self.weights.lambda_mi);
        kv.set("mi_enabled", self.ablation.mi_enabled);
        kv.set("mi_representation", self.ablation.mi_representation);
        kv.set("asymmetric", self.ablation.asymmetric);
        kv.set("da_enabled", self.ablation.da_enabled);
        kv.set("start_rate", s.start_rate);
        kv.set("end_rate", s.end_rate);
        kv.set("decay_start_epoch", s.decay_start_epoch);
        kv.set("decay_end_epoch", s.decay_end_epoch);
        kv.set("fix_to_one_epoch", s.fix_to_one_epoch);
        kv.set("dataset", self.dataset.display());
        kv.set("output", self.output.display());
        kv.set("widths", self.widths.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
        kv.set("audio_dim", self.audio_dim);
        kv.set("estimator_hidden", self.estimator_hidden);
        kv.set("teacher_forcing", self.teacher_forcing);
        kv.set("holdout_fraction", self.holdout_fraction);
        kv.set("checkpoint_every", self.checkpoint_every);
        kv.set("extractor_seed", self.extractor_seed);
        kv.set("trace", self.trace);
        kv
    }

    /// Applies every recognised key in `kv` on top of `self`. An `ablation`
    /// preset is applied first, then the individual toggles.
    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        const KNOWN: &[&str] = &[
            "seed", "image_size", "batch_size", "epochs", "steps_per_epoch", "lr_generator", "lr_discriminator",
            "lr_estimator", "lambda_perc", "lambda_lip", "lambda_mi", "ablation", "mi_enabled", "mi_representation",
            "asymmetric", "da_enabled", "start_rate", "end_rate", "decay_start_epoch", "decay_end_epoch",
            "fix_to_one_epoch", "dataset", "output", "widths", "audio_dim", "estimator_hidden", "teacher_forcing",
            "holdout_fraction", "checkpoint_every", "extractor_seed", "trace",
        ];
        if let Some((k, _)) = kv.iter().find(|(k, _)| !KNOWN.contains(k)) {
            return Err(Error::Validation(format!("unknown config key {k:?}")));
        }
        macro_rules! take {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.parse_opt($key)? {
                    $field = v;
                }
            };
            ($key:literal, opt $field:expr) => {
                if let Some(v) = kv.parse_opt($key)? {
                    $field = Some(v);
                }
            };
        }
        take!("seed", self.seed);
        take!("image_size", self.image_size);
        take!("batch_size", self.batch_size);
        take!("epochs", self.epochs);
        take!("steps_per_epoch", opt self.steps_per_epoch);
        take!("lr_generator", self.lr_generator);
        take!("lr_discriminator", self.lr_discriminator);
        take!("lr_estimator", self.lr_estimator);
        take!("lambda_perc", self.weights.lambda_perc);
        take!("lambda_lip", self.weights.lambda_lip);
        take!("lambda_mi", self.weights.lambda_mi);
        if let Some(preset) = kv.get("ablation") {
            self.ablation = preset.parse()?;
        }
        take!("mi_enabled", self.ablation.mi_enabled);
        take!("mi_representation", self.ablation.mi_representation);
        take!("asymmetric", self.ablation.asymmetric);
        take!("da_enabled", self.ablation.da_enabled);
        take!("start_rate", opt self.start_rate);
        take!("end_rate", opt self.end_rate);
        take!("decay_start_epoch", opt self.decay_start_epoch);
        take!("decay_end_epoch", opt self.decay_end_epoch);
        take!("fix_to_one_epoch", opt self.fix_to_one_epoch);
        take!("dataset", self.dataset);
        take!("output", self.output);
        if let Some(w) = kv.get("widths") {
            self.widths = w
                .split(',')
                .map(|p| p.trim().parse::<usize>().map_err(|e| Error::Validation(format!("widths {w:?}: {e}"))))
                .collect::<Result<_>>()?;
        }
        take!("audio_dim", self.audio_dim);
        take!("estimator_hidden", self.estimator_hidden);
        take!("teacher_forcing", self.teacher_forcing);
        take!("holdout_fraction", self.holdout_fraction);
        take!("checkpoint_every", self.checkpoint_every);
        take!("extractor_seed", self.extractor_seed);
        take!("trace", self.trace);
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv(kv)?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_display() {
        for (name, mode) in AblationMode::TABLE {
            assert_eq!(name.parse::<AblationMode>().unwrap(), mode);
            assert_eq!(mode.to_string(), name);
        }
        assert_eq!("+AMIE+DA".parse::<AblationMode>().unwrap(), AblationMode::AMIE_DA);
        assert!("nope".parse::<AblationMode>().is_err());
    }

    #[test]
    fn table_rows_are_distinct() {
        for (i, (_, a)) in AblationMode::TABLE.iter().enumerate() {
            for (_, b) in &AblationMode::TABLE[i + 1..] {
                assert!(!a.equivalent(b));
            }
        }
    }

    #[test]
    fn kv_round_trip_resolves_schedule() {
        let mut c = TrainingConfig { epochs: 10, ablation: AblationMode::MINE_JS, ..Default::default() };
        c.steps_per_epoch = Some(7);
        let back = TrainingConfig::from_kv(&KeyValues::parse(&c.to_kv().render()).unwrap()).unwrap();
        assert_eq!(back.schedule(), c.schedule());
        assert_eq!(back.ablation, c.ablation);
        assert_eq!(back.steps_per_epoch, Some(7));
        assert_eq!(back.to_kv(), c.to_kv());
    }

    #[test]
    fn preset_then_overrides() {
        let kv = KeyValues::parse("ablation=amie-da\nda_enabled=false\n").unwrap();
        assert_eq!(TrainingConfig::from_kv(&kv).unwrap().ablation, AblationMode::AMIE);
        assert!(TrainingConfig::from_kv(&KeyValues::parse("bogus=1").unwrap()).is_err());
    }

    #[test]
    fn validation_rejects_bad_values() {
        TrainingConfig::default().validate().unwrap();
        for bad in [
            TrainingConfig { lr_generator: 0.0, ..Default::default() },
            TrainingConfig { epochs: 0, ..Default::default() },
            TrainingConfig { batch_size: 1, ..Default::default() },
            TrainingConfig { image_size: 40, ..Default::default() },
            TrainingConfig { start_rate: Some(0.95), ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Validation(_))), "{bad:?}");
        }
    }
}
