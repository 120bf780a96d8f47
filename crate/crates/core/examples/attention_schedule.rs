//! Prints the attention rate over a 20-epoch run and the refined lip mask of
//! one frame.

use coherence_lab::dynamic_attention::{initial_mask, refine_mask, AttentionSchedule};
use coherence_lab::metrics::mouth_coverage;
use coherence_lab::synthetic_data::{generate_sequence_dataset, DatasetConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> coherence_lab::Result<()> {
    let schedule = AttentionSchedule::for_epochs(20);
    for e in 0..20 {
        let epoch = e as f64;
        println!("epoch {epoch:>4.1}: rate {:.3}", schedule.schedule_rate(epoch)?);
    }

    let config = DatasetConfig { num_identities: 1, ..Default::default() };
    let dataset = generate_sequence_dataset(&config, &mut ChaCha8Rng::seed_from_u64(1))?;
    let frame = dataset.sequences[0].scene.frame(5);
    let region = dataset.mouth_region();
    let size = dataset.image_size();
    let coarse = initial_mask(size, size, region, 0.2)?;
    // Ground-truth lip coverage stands in for the predictor's scores.
    let coverage = mouth_coverage(&frame, &region)?;
    let mut scores = vec![0.0; size * size];
    let w = region.x1 - region.x0;
    for (k, c) in coverage.iter().enumerate() {
        scores[(region.y0 + k / w) * size + region.x0 + k % w] = *c;
    }
    let refined = refine_mask(&coarse, &scores)?;
    for y in region.y0..region.y1 {
        let row: String = (region.x0..region.x1).map(|x| if refined.weight(x, y) < 0.5 { '#' } else { '.' }).collect();
        println!("{row}");
    }
    Ok(())
}
