//! Projects real frames and blurred copies onto two principal components and
//! draws the scatter.

use coherence_lab::metrics::pca_project_2d;
use coherence_lab::synthetic_data::{generate_sequence_dataset, DatasetConfig};
use coherence_lab::trainer::plot::{render_chart, save_png, Series, Style};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn box_blur(v: &[f64], size: usize) -> Vec<f64> {
    let mut out = v.to_vec();
    let plane = size * size;
    for c in 0..v.len() / plane {
        for y in 1..size - 1 {
            for x in 1..size - 1 {
                let mut s = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        s += v[c * plane + (y + dy - 1) * size + x + dx - 1];
                    }
                }
                out[c * plane + y * size + x] = s / 9.0;
            }
        }
    }
    out
}

fn main() -> coherence_lab::Result<()> {
    let config = DatasetConfig { num_identities: 4, ..Default::default() };
    let dataset = generate_sequence_dataset(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let size = dataset.image_size();
    let mut real = Vec::new();
    let mut blurred = Vec::new();
    for seq in &dataset.sequences {
        for i in 0..seq.scene.len() {
            let v: Vec<f64> = seq.scene.frame(i).data().iter().map(|&x| x as f64).collect();
            blurred.push(box_blur(&v, size));
            real.push(v);
        }
    }
    let pca = pca_project_2d(&real, &blurred)?;
    println!("explained by 2 components: {:.3}", (pca.eigenvalues[0] + pca.eigenvalues[1]) / pca.total_variance);
    let to_pts = |p: &[[f64; 2]]| p.iter().map(|q| (q[0], q[1])).collect();
    let chart = render_chart(&[Series::new("real", to_pts(&pca.real)), Series::new("blurred", to_pts(&pca.generated))], Style::Points);
    save_png(&chart, "pca_demo.png".as_ref())?;
    println!("wrote pca_demo.png");
    Ok(())
}
