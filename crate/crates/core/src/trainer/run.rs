use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::eval::evaluate_generator;
use super::plot::{emit_plots, series_csv, Series};
use super::{StepRecord, Trainer, TrainingConfig};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::generation_model::Generator;
use crate::kv::KeyValues;
use crate::metrics::{pca_project_2d, MetricReport};
use crate::synthetic_data::{load_dataset, Dataset};
use crate::tensor_io::write_file;

pub const CONFIG_FILE: &str = "config";
pub const LOG_FILE: &str = "run_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const DIAGNOSTIC_DIR: &str = "diagnostic_checkpoint";
pub const REPORT_FILE: &str = "report.kv";
pub const UNTRAINED_REPORT_FILE: &str = "report_untrained.kv";
pub const PCA_FILE: &str = "pca_points.csv";

/// Paths and reports of a finished run.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub config_path: PathBuf,
    pub log_path: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_path: PathBuf,
    pub untrained_report_path: PathBuf,
    pub pca_path: PathBuf,
    pub plots: Vec<PathBuf>,
    pub report: MetricReport,
    pub untrained_report: MetricReport,
    pub steps: usize,
}

pub fn load_run_config(run_dir: &Path) -> Result<TrainingConfig> {
    let path = run_dir.join(CONFIG_FILE);
    if !path.exists() {
        return Err(Error::Missing(format!("no resolved config at {}", path.display())));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    TrainingConfig::from_kv(&KeyValues::parse(&text)?)
}

fn read_report(path: &Path) -> Result<MetricReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MetricReport::from_kv(&KeyValues::parse(&text)?)
}

/// Training-step records of a run log; evaluation lines are skipped.
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    if !path.exists() {
        return Err(Error::Missing(format!("no run log at {}", path.display())));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |n: usize, e: serde_json::Error| Error::Format { path: path.to_path_buf(), reason: format!("line {}: {e}", n + 1) };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| bad(n, e))?;
        if v.get("kind").is_none() {
            out.push(serde_json::from_value(v).map_err(|e| bad(n, e))?);
        }
    }
    Ok(out)
}

/// Loads the dataset named in `config` and trains from scratch.
pub fn train(config: &TrainingConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let dataset = load_dataset(&config.dataset)?;
    train_on(config, dataset)
}

/// Trains on an in-memory dataset, writing the run into `config.output`.
pub fn train_on(config: &TrainingConfig, dataset: Dataset) -> Result<RunArtifacts> {
    let trainer = Trainer::new(config.clone(), dataset)?;
    let run_dir = config.output.clone();
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    write_file(&run_dir.join(CONFIG_FILE), config.to_kv().render().as_bytes())?;
    let log_path = run_dir.join(LOG_FILE);
    File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let untrained = evaluate_generator(&trainer.generator, &trainer.dataset, &trainer.heldout_indices)?.report;
    write_file(&run_dir.join(UNTRAINED_REPORT_FILE), untrained.to_kv().render().as_bytes())?;
    run_loop(trainer, &run_dir, untrained)
}

/// Continues the run in `run_dir` from its last checkpoint. Log lines past
/// the checkpoint are dropped and regenerated.
pub fn resume(run_dir: &Path) -> Result<RunArtifacts> {
    let config = load_run_config(run_dir)?;
    let dataset = load_dataset(&config.dataset)?;
    let mut trainer = Trainer::new(config, dataset)?;
    trainer.restore(&load_checkpoint(&run_dir.join(CHECKPOINT_DIR))?)?;
    let log_path = run_dir.join(LOG_FILE);
    let kept: Vec<StepRecord> = read_log(&log_path)?.into_iter().filter(|r| r.step < trainer.step).collect();
    let mut text = String::new();
    for r in &kept {
        text.push_str(&serde_json::to_string(r).expect("records serialize"));
        text.push('\n');
    }
    write_file(&log_path, text.as_bytes())?;
    let untrained = read_report(&run_dir.join(UNTRAINED_REPORT_FILE))?;
    run_loop(trainer, run_dir, untrained)
}

fn run_loop(mut trainer: Trainer, run_dir: &Path, untrained: MetricReport) -> Result<RunArtifacts> {
    let log_path = run_dir.join(LOG_FILE);
    let ckpt_dir = run_dir.join(CHECKPOINT_DIR);
    let file = OpenOptions::new().append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let every = trainer.config.checkpoint_every * trainer.steps_per_epoch;
    while !trainer.is_finished() {
        let rec = match trainer.step() {
            Ok(r) => r,
            Err(e @ Error::Numeric(_)) => {
                let _ = log.flush();
                save_checkpoint(&run_dir.join(DIAGNOSTIC_DIR), &trainer.checkpoint())?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        writeln!(log, "{}", serde_json::to_string(&rec).expect("records serialize")).map_err(|e| Error::io(&log_path, e))?;
        if trainer.step % every == 0 && !trainer.is_finished() {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            save_checkpoint(&ckpt_dir, &trainer.checkpoint())?;
        }
    }
    save_checkpoint(&ckpt_dir, &trainer.checkpoint())?;

    let eval = evaluate_generator(&trainer.generator, &trainer.dataset, &trainer.heldout_indices)?;
    let report_path = run_dir.join(REPORT_FILE);
    write_file(&report_path, eval.report.to_kv().render().as_bytes())?;
    for line in eval.report.json_lines() {
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    drop(log);
    let pca = pca_project_2d(&eval.real_frames, &eval.generated_frames)?;
    let pca_path = run_dir.join(PCA_FILE);
    let series = [
        Series::new("real", pca.real.iter().map(|p| (p[0], p[1])).collect()),
        Series::new("generated", pca.generated.iter().map(|p| (p[0], p[1])).collect()),
    ];
    write_file(&pca_path, series_csv(&series).as_bytes())?;
    let plots = emit_plots(run_dir)?;
    Ok(RunArtifacts {
        run_dir: run_dir.to_path_buf(),
        config_path: run_dir.join(CONFIG_FILE),
        log_path,
        checkpoint_dir: ckpt_dir,
        report_path,
        untrained_report_path: run_dir.join(UNTRAINED_REPORT_FILE),
        pca_path,
        plots,
        report: eval.report,
        untrained_report: untrained,
        steps: trainer.step,
    })
}

/// Generator stored in a run's checkpoint.
pub fn load_generator(run_dir: &Path) -> Result<(TrainingConfig, Generator<f32>)> {
    let config = load_run_config(run_dir)?;
    let ck = load_checkpoint(&run_dir.join(CHECKPOINT_DIR))?;
    let mut generator = Generator::new(&config.arch(), &mut ChaCha8Rng::seed_from_u64(0))?;
    generator.params.load_from(ck.set("generator")?)?;
    Ok((config, generator))
}

/// Held-out metrics of the generator checkpointed in `run_dir`.
pub fn evaluate(run_dir: &Path, dataset: &Dataset) -> Result<MetricReport> {
    let (config, generator) = load_generator(run_dir)?;
    if dataset.image_size() != config.image_size {
        return Err(Error::Validation(format!(
            "dataset frames are {0}x{0} but the run was trained on {1}x{1}",
            dataset.image_size(),
            config.image_size
        )));
    }
    let (_, heldout) = dataset.split(config.holdout_fraction);
    Ok(evaluate_generator(&generator, dataset, &heldout)?.report)
}
