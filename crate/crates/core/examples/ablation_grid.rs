//! A reduced ablation grid: every toggle row for two seeds on a tiny dataset.

use coherence_lab::synthetic_data::{generate_sequence_dataset, DatasetConfig};
use coherence_lab::trainer::{ablate, AblationMode, TrainingConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> coherence_lab::Result<()> {
    let ds_config = DatasetConfig { num_identities: 5, frames_per_sequence: 8, image_size: 16, ..Default::default() };
    let dataset = generate_sequence_dataset(&ds_config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let base = TrainingConfig {
        image_size: 16,
        batch_size: 4,
        epochs: 2,
        steps_per_epoch: Some(20),
        widths: vec![4, 8],
        audio_dim: 16,
        estimator_hidden: 16,
        output: "runs/ablation-demo".into(),
        ..Default::default()
    };
    let modes: Vec<(String, AblationMode)> = AblationMode::TABLE.iter().map(|(n, m)| (n.to_string(), *m)).collect();
    let summary = ablate(&base, &dataset, &modes, &[0, 1])?;
    print!("{}", summary.to_csv());
    for mode in summary.modes() {
        println!("{mode}: median lmd {:.3}", summary.median_trained_lmd(mode).unwrap_or(f64::NAN));
    }
    Ok(())
}
