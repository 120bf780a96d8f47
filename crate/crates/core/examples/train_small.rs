//! A short AMIE+DA training run on a small dataset, then evaluation from the
//! saved checkpoint.
//!
//! cargo run --release --example train_small -- runs/small

use coherence_lab::synthetic_data::{generate_sequence_dataset, DatasetConfig};
use coherence_lab::trainer::{evaluate, train_on, AblationMode, TrainingConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> coherence_lab::Result<()> {
    let output = std::env::args().nth(1).unwrap_or_else(|| "runs/small".into());
    let ds_config = DatasetConfig { num_identities: 8, frames_per_sequence: 16, ..Default::default() };
    let dataset = generate_sequence_dataset(&ds_config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let config = TrainingConfig {
        ablation: AblationMode::AMIE_DA,
        epochs: 4,
        steps_per_epoch: Some(50),
        output: output.into(),
        ..Default::default()
    };
    let art = train_on(&config, dataset.clone())?;
    println!("untrained: lmd {:.3} px", art.untrained_report.lmd_px);
    println!("trained:   lmd {:.3} px  psnr {:.2} dB  ssim {:.3}", art.report.lmd_px, art.report.psnr_db, art.report.ssim);
    let again = evaluate(&art.run_dir, &dataset)?;
    assert_eq!(again, art.report);
    println!("artifacts in {}", art.run_dir.display());
    Ok(())
}
