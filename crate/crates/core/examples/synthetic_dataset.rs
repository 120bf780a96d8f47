//! Generates the mouth dataset, writes it to disk, reads it back and reports
//! the ground truth it carries.
//!
//! cargo run --release --example synthetic_dataset -- /tmp/mouth-data

use coherence_lab::info_oracle::mutual_information_discrete;
use coherence_lab::synthetic_data::{binned_joint, generate_sequence_dataset, load_dataset, save_dataset, DatasetConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> coherence_lab::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "mouth-data".into());
    let config = DatasetConfig::default();
    let dataset = generate_sequence_dataset(&config, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
    let manifest = save_dataset(&dataset, dir.as_ref())?;
    println!("{} sequences of {} frames, checksum {}", manifest.num_sequences, manifest.frames_per_sequence, manifest.checksum);

    let back = load_dataset(dir.as_ref())?;
    assert_eq!(back.sequences.len(), dataset.sequences.len());
    let seq = &back.sequences[0];
    println!("frames {:?}, mouth region {:?}", seq.scene.frames.shape(), back.mouth_region());
    for i in [0, 8, 16] {
        println!("frame {i}: open {:.3} landmarks {:?}", seq.scene.mouth_open[i], seq.scene.landmarks[i]);
    }
    let joint = binned_joint(&back.driver_mouth_pairs(), 16)?;
    println!("binned driver/mouth MI {:.3} nats", mutual_information_discrete(&joint));
    Ok(())
}
