//! Two-component PCA over the union of real and generated frames.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PcaProjection {
    pub real: Vec<[f64; 2]>,
    pub generated: Vec<[f64; 2]>,
    pub mean: Vec<f64>,
    /// Unit principal directions in input space.
    pub components: [Vec<f64>; 2],
    /// Top two eigenvalues of the scatter matrix.
    pub eigenvalues: [f64; 2],
    /// Sum of squared distances to the mean.
    pub total_variance: f64,
}

/// Fits PCA on `real ∪ generated` and projects both onto the top two
/// components. Rows are flattened samples.
pub fn pca_project_2d(real: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<PcaProjection> {
    if real.len() < 3 || generated.len() < 3 {
        return Err(Error::Validation(format!(
            "PCA needs at least 3 samples per set, got {} and {}",
            real.len(),
            generated.len()
        )));
    }
    let d = real[0].len();
    if d < 2 || real.iter().chain(generated).any(|r| r.len() != d) {
        return Err(Error::Shape("PCA samples must share a dimension of at least 2".into()));
    }
    let rows: Vec<&Vec<f64>> = real.iter().chain(generated).collect();
    let n = rows.len();
    let mut mean = vec![0.0; d];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    if !centered.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("PCA input contains non-finite values".into()));
    }
    let total_variance = centered.iter().map(|v| v * v).sum();

    // Eigen-decompose whichever Gram matrix is smaller.
    let (components, eigenvalues): (Vec<Vec<f64>>, [f64; 2]) = if n < d {
        let gram = &centered * centered.transpose();
        let eig = SymmetricEigen::new(gram);
        let top = top_two(&eig);
        let values = [eig.eigenvalues[top[0]], eig.eigenvalues[top[1]]];
        let vecs = top
            .into_iter()
            .map(|k| {
                let u = eig.eigenvectors.column(k);
                let v = centered.transpose() * u;
                let norm = v.norm();
                if norm > 0.0 { v.iter().map(|x| x / norm).collect() } else { unit(d, k) }
            })
            .collect();
        (vecs, values)
    } else {
        let cov = centered.transpose() * &centered;
        let eig = SymmetricEigen::new(cov);
        let top = top_two(&eig);
        let values = [eig.eigenvalues[top[0]], eig.eigenvalues[top[1]]];
        (top.into_iter().map(|k| eig.eigenvectors.column(k).iter().copied().collect()).collect(), values)
    };
    let components: [Vec<f64>; 2] = [canonical_sign(components[0].clone()), canonical_sign(components[1].clone())];

    let project = |r: &Vec<f64>| -> [f64; 2] {
        let mut out = [0.0; 2];
        for (o, c) in out.iter_mut().zip(&components) {
            *o = r.iter().zip(&mean).zip(c).map(|((x, m), c)| (x - m) * c).sum();
        }
        out
    };
    let real_p: Vec<[f64; 2]> = real.iter().map(project).collect();
    let gen_p: Vec<[f64; 2]> = generated.iter().map(project).collect();
    Ok(PcaProjection { real: real_p, generated: gen_p, mean, components, eigenvalues, total_variance })
}

fn top_two(eig: &SymmetricEigen<f64, nalgebra::Dyn>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    order.truncate(2);
    order
}

fn unit(d: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[k % d] = 1.0;
    v
}

/// Flips `v` so its largest-magnitude entry is positive.
fn canonical_sign(mut v: Vec<f64>) -> Vec<f64> {
    let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
    if pivot < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn blob(rng: &mut ChaCha8Rng, n: usize, d: usize, offset: f64) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| { let e: f64 = StandardNormal.sample(rng); e + offset }).collect::<Vec<f64>>()).collect()
    }

    #[test]
    fn identical_sets_give_identical_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = blob(&mut rng, 10, 20, 0.0);
        let p = pca_project_2d(&a, &a).unwrap();
        assert_eq!(p.real, p.generated);
    }

    #[test]
    fn two_dimensional_data_is_rotated() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut a = blob(&mut rng, 8, 2, 0.0);
        let mut b = blob(&mut rng, 8, 2, 0.0);
        for r in a.iter_mut().chain(b.iter_mut()) {
            r[0] *= 3.0;
        }
        let p = pca_project_2d(&a, &b).unwrap();
        let pts: Vec<&Vec<f64>> = a.iter().chain(&b).collect();
        let proj: Vec<&[f64; 2]> = p.real.iter().chain(&p.generated).collect();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let d_in = (pts[i][0] - pts[j][0]).hypot(pts[i][1] - pts[j][1]);
                let d_out = (proj[i][0] - proj[j][0]).hypot(proj[i][1] - proj[j][1]);
                assert!((d_in - d_out).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn separated_blobs_have_separated_centroids() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = blob(&mut rng, 20, 100, 0.0);
        let b = blob(&mut rng, 20, 100, 2.0);
        let p = pca_project_2d(&a, &b).unwrap();
        let centroid = |s: &[[f64; 2]]| {
            let n = s.len() as f64;
            [s.iter().map(|p| p[0]).sum::<f64>() / n, s.iter().map(|p| p[1]).sum::<f64>() / n]
        };
        let (ca, cb) = (centroid(&p.real), centroid(&p.generated));
        // True separation is 2 * sqrt(100) = 20 along the first component.
        assert!((ca[0] - cb[0]).hypot(ca[1] - cb[1]) > 10.0);
    }

    #[test]
    fn reconstruction_error_is_residual_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for d in [5, 40] {
            let a = blob(&mut rng, 7, d, 0.0);
            let b = blob(&mut rng, 9, d, 0.5);
            let p = pca_project_2d(&a, &b).unwrap();
            let mut err = 0.0;
            for (row, proj) in a.iter().chain(&b).zip(p.real.iter().chain(&p.generated)) {
                for j in 0..d {
                    let rec = p.mean[j] + proj[0] * p.components[0][j] + proj[1] * p.components[1][j];
                    err += (row[j] - rec).powi(2);
                }
            }
            let expected = p.total_variance - p.eigenvalues[0] - p.eigenvalues[1];
            assert!((err - expected).abs() < 1e-6, "d={d}: {err} vs {expected}");
        }
    }

    #[test]
    fn too_few_samples() {
        let a = vec![vec![0.0, 1.0]; 2];
        assert!(matches!(pca_project_2d(&a, &a), Err(Error::Validation(_))));
    }
}
