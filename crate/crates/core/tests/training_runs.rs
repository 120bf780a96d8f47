use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use coherence_lab::checkpoint::{load_checkpoint, save_checkpoint};
use coherence_lab::synthetic_data::{generate_sequence_dataset, load_dataset, save_dataset, DatasetConfig};
use coherence_lab::trainer::plot::{parse_series_csv, PLOT_DIR, PLOT_FILES};
use coherence_lab::trainer::{
    evaluate, load_run_config, read_log, resume, train, train_on, AblationMode, Trainer, TrainingConfig, DIAGNOSTIC_DIR,
};
use coherence_lab::Error;

fn file_digests(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn one_epoch_smoke_run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let ds_cfg = DatasetConfig { num_identities: 10, ..Default::default() };
    let dataset = generate_sequence_dataset(&ds_cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    save_dataset(&dataset, &data).unwrap();
    let before = file_digests(&data);

    let config = TrainingConfig { epochs: 1, dataset: data.clone(), output: tmp.path().join("run"), ..Default::default() };
    let art = train(&config).unwrap();
    assert_eq!(file_digests(&data), before, "training touched the dataset");

    for p in [&art.config_path, &art.log_path, &art.report_path, &art.untrained_report_path, &art.pca_path] {
        assert!(p.is_file(), "{}", p.display());
    }
    assert!(art.checkpoint_dir.join("manifest").is_file());
    // The stored config has the schedule resolved but describes the same run.
    assert_eq!(load_run_config(&art.run_dir).unwrap().to_kv().render(), config.to_kv().render());
    for f in PLOT_FILES {
        let meta = std::fs::metadata(art.run_dir.join(PLOT_DIR).join(f)).unwrap();
        assert!(meta.len() > 0, "{f}");
    }
    assert_eq!(art.plots.len(), 4);

    // 8 training sequences of 32 frames at batch 8.
    let log = read_log(&art.log_path).unwrap();
    assert_eq!(log.len(), 32);
    assert_eq!(art.steps, 32);

    // Rate curve data are the schedule's values at the logged epochs.
    let schedule = config.schedule();
    let rate_csv = std::fs::read_to_string(art.run_dir.join(PLOT_DIR).join("attention_rate.csv")).unwrap();
    let rate = &parse_series_csv(&rate_csv).unwrap()[0];
    assert_eq!(rate.points.len(), log.len());
    for ((e, r), rec) in rate.points.iter().zip(&log) {
        assert_eq!(*e, rec.epoch);
        assert_eq!(*r, schedule.schedule_rate(*e).unwrap());
        assert_eq!(rec.attention_rate, Some(*r));
    }

    // One PCA point per evaluated frame in each set.
    let pca = parse_series_csv(&std::fs::read_to_string(&art.pca_path).unwrap()).unwrap();
    let frames: usize = art.report.sequences.len() * 32;
    assert_eq!(pca.iter().map(|s| (s.name.as_str(), s.points.len())).collect::<Vec<_>>(), [("real", frames), ("generated", frames)]);

    // Evaluation from the checkpoint is deterministic and matches the run.
    let reloaded = load_dataset(&data).unwrap();
    let r1 = evaluate(&art.run_dir, &reloaded).unwrap();
    let r2 = evaluate(&art.run_dir, &reloaded).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(r1, art.report);
    assert!(art.report.lmd_px < art.untrained_report.lmd_px, "{} vs {}", art.report.lmd_px, art.untrained_report.lmd_px);

    // Resuming a finished run only re-evaluates.
    let again = resume(&art.run_dir).unwrap();
    assert_eq!(again.report, art.report);
    assert_eq!(read_log(&art.log_path).unwrap(), log);
}

fn small_setup(mode: AblationMode) -> (TrainingConfig, coherence_lab::synthetic_data::Dataset) {
    let ds_cfg = DatasetConfig { num_identities: 5, frames_per_sequence: 6, image_size: 16, noise: 0.05, seed: 2 };
    let dataset = generate_sequence_dataset(&ds_cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let config = TrainingConfig {
        image_size: 16,
        batch_size: 4,
        epochs: 3,
        steps_per_epoch: Some(4),
        widths: vec![4, 8],
        audio_dim: 8,
        estimator_hidden: 8,
        ablation: mode,
        ..Default::default()
    };
    (config, dataset)
}

#[test]
fn checkpoint_on_disk_resumes_with_identical_next_step() {
    let tmp = tempfile::tempdir().unwrap();
    for mode in [AblationMode::AMIE_DA, AblationMode::MINE] {
        let (config, dataset) = small_setup(mode);
        let mut a = Trainer::new(config.clone(), dataset.clone()).unwrap();
        for _ in 0..5 {
            a.step().unwrap();
        }
        let dir = tmp.path().join(mode.to_string());
        save_checkpoint(&dir, &a.checkpoint()).unwrap();
        let expected = a.step().unwrap();

        let mut b = Trainer::new(config, dataset).unwrap();
        b.restore(&load_checkpoint(&dir).unwrap()).unwrap();
        assert_eq!(b.step().unwrap(), expected, "{mode}");
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    // Without attention the epoch count does not change the first epoch.
    let (mut config, dataset) = small_setup(AblationMode::AMIE);
    let data = tmp.path().join("data");
    save_dataset(&dataset, &data).unwrap();
    config.dataset = data;
    config.checkpoint_every = 1;

    config.output = tmp.path().join("full");
    let full = train(&config).unwrap();

    // A run cut short after its first checkpoint, then resumed.
    config.output = tmp.path().join("cut");
    let cut = train(&TrainingConfig { epochs: 1, ..config.clone() }).unwrap();
    std::fs::write(cut.run_dir.join("config"), config.to_kv().render()).unwrap();
    let resumed = resume(&cut.run_dir).unwrap();
    assert_eq!(resumed.report, full.report);
    assert_eq!(read_log(&resumed.log_path).unwrap(), read_log(&full.log_path).unwrap());
}

#[test]
fn non_finite_loss_aborts_with_diagnostic_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let (mut config, mut dataset) = small_setup(AblationMode::AMIE_DA);
    let (train_idx, _) = dataset.split(config.holdout_fraction);
    for i in train_idx {
        dataset.sequences[i].scene.frames.data_mut().fill(f32::NAN);
    }
    config.output = tmp.path().join("run");
    let err = train_on(&config, dataset).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
    let diag = load_checkpoint(&config.output.join(DIAGNOSTIC_DIR)).unwrap();
    assert_eq!(diag.sets.len(), 12);
}

#[test]
fn missing_checkpoint_and_dataset_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let (config, dataset) = small_setup(AblationMode::BASELINE);
    assert!(matches!(evaluate(tmp.path(), &dataset), Err(Error::Missing(_))));
    let cfg = TrainingConfig { dataset: tmp.path().join("nope"), ..config };
    assert!(train(&cfg).is_err());
}

#[test]
fn ablation_grid_writes_table() {
    let tmp = tempfile::tempdir().unwrap();
    let (mut config, dataset) = small_setup(AblationMode::BASELINE);
    config.epochs = 1;
    config.output = tmp.path().to_path_buf();
    let modes: Vec<(String, AblationMode)> =
        ["baseline", "mine-js"].iter().map(|n| (n.to_string(), n.parse().unwrap())).collect();
    let summary = coherence_lab::trainer::ablate(&config, &dataset, &modes, &[0, 1]).unwrap();
    assert_eq!(summary.rows.len(), 4);
    assert_eq!(summary.modes(), ["baseline", "mine-js"]);
    let csv = std::fs::read_to_string(tmp.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(tmp.path().join("mine-js/seed_1/report.kv").is_file());
}
