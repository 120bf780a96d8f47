//! Trains DV and JS estimators on correlated Gaussians and compares the
//! smoothed estimates with the closed form.
//!
//! cargo run --release --example gaussian_mi -- 0.9

use coherence_lab::info_oracle::{gaussian_mi_analytic, GaussianPairSpec};
use coherence_lab::mi_estimators::benchmark::{smoothed_tail, train_gaussian_estimator, GaussianRun};
use coherence_lab::mi_estimators::Representation;

fn main() -> coherence_lab::Result<()> {
    let rho: f64 = std::env::args().nth(1).map(|s| s.parse().expect("rho")).unwrap_or(0.9);
    let spec = GaussianPairSpec::new(rho, 1)?;
    println!("analytic MI {:.4} nats", gaussian_mi_analytic(&spec)?);
    for repr in [Representation::DonskerVaradhan, Representation::JensenShannon] {
        let run = GaussianRun { steps: 1000, ..GaussianRun::new(spec.clone(), repr, 0) };
        let traj = train_gaussian_estimator(&run)?;
        for step in [100, 250, 500, 1000] {
            println!("{repr:?} step {step:>4}: {:.4}", smoothed_tail(&traj[..step], 100));
        }
    }
    Ok(())
}
