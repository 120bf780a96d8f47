//! PSNR, SSIM and LMD on a real frame against degraded copies.

use coherence_lab::metrics::{extract_landmarks, lmd, psnr, ssim};
use coherence_lab::synthetic_data::{generate_sequence_dataset, DatasetConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> coherence_lab::Result<()> {
    let config = DatasetConfig { num_identities: 1, ..Default::default() };
    let dataset = generate_sequence_dataset(&config, &mut ChaCha8Rng::seed_from_u64(3))?;
    let region = dataset.mouth_region();
    let scene = &dataset.sequences[0].scene;
    let real = scene.frame(10);
    let truth = [scene.landmarks[10]];

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for sigma in [0.0f64, 0.02, 0.05, 0.1] {
        let noise = Normal::new(0.0, sigma.max(1e-12)).unwrap();
        let mut noisy = real.clone();
        for v in noisy.data_mut() {
            *v = (*v + noise.sample(&mut rng) as f32).clamp(0.0, 1.0);
        }
        let found = [extract_landmarks(&noisy, &region)?];
        println!(
            "sigma {sigma:.2}: psnr {:>6.2} dB  ssim {:.4}  lmd {:.3} px",
            psnr(&real, &noisy, 1.0)?,
            ssim(&real, &noisy)?,
            lmd(&truth, &found)?
        );
    }
    // The frame of the same face whose mouth opening differs most.
    let open = &scene.mouth_open;
    let j = (0..open.len()).max_by(|&a, &b| (open[a] - open[10]).abs().total_cmp(&(open[b] - open[10]).abs())).unwrap();
    let found = [extract_landmarks(&scene.frame(j), &region)?];
    println!("frame {j} vs frame 10: lmd {:.3} px", lmd(&truth, &found)?);
    Ok(())
}
