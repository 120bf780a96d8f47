use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::run::train_on;
use super::{AblationMode, TrainingConfig};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::synthetic_data::Dataset;
use crate::tensor_io::write_file;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: String,
    pub seed: u64,
    pub untrained_lmd: f64,
    pub trained_lmd: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub run_dir: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub rows: Vec<AblationRow>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

impl AblationSummary {
    /// Modes in the order they were run.
    pub fn modes(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.mode.as_str()) {
                out.push(&r.mode);
            }
        }
        out
    }

    fn column(&self, mode: &str, f: impl Fn(&AblationRow) -> f64) -> Vec<f64> {
        self.rows.iter().filter(|r| r.mode == mode).map(f).collect()
    }

    pub fn median_trained_lmd(&self, mode: &str) -> Option<f64> {
        median(self.column(mode, |r| r.trained_lmd))
    }

    pub fn median_untrained_lmd(&self, mode: &str) -> Option<f64> {
        median(self.column(mode, |r| r.untrained_lmd))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,seed,untrained_lmd,trained_lmd,psnr_db,ssim\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{},{}", r.mode, r.seed, r.untrained_lmd, r.trained_lmd, r.psnr_db, r.ssim);
        }
        out
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        for m in self.modes() {
            kv.set(format!("{m}.runs"), self.column(m, |_| 0.0).len());
            kv.set(format!("{m}.median_untrained_lmd"), self.median_untrained_lmd(m).unwrap_or(f64::NAN));
            kv.set(format!("{m}.median_trained_lmd"), self.median_trained_lmd(m).unwrap_or(f64::NAN));
        }
        kv
    }
}

/// Trains every mode with every seed on `dataset`. Run `k` of mode `m` goes
/// to `base.output/m/seed_<seed>`; the table is written to
/// `base.output/ablation.csv` and medians to `ablation_summary.kv`.
pub fn ablate(
    base: &TrainingConfig,
    dataset: &Dataset,
    modes: &[(String, AblationMode)],
    seeds: &[u64],
) -> Result<AblationSummary> {
    if modes.is_empty() || seeds.is_empty() {
        return Err(Error::Validation("ablation needs at least one mode and one seed".into()));
    }
    let mut summary = AblationSummary::default();
    for (name, mode) in modes {
        for &seed in seeds {
            let run_dir = base.output.join(name).join(format!("seed_{seed}"));
            let config = TrainingConfig { seed, ablation: *mode, output: run_dir.clone(), ..base.clone() };
            let art = train_on(&config, dataset.clone())?;
            summary.rows.push(AblationRow {
                mode: name.clone(),
                seed,
                untrained_lmd: art.untrained_report.lmd_px,
                trained_lmd: art.report.lmd_px,
                psnr_db: art.report.psnr_db,
                ssim: art.report.ssim,
                run_dir,
            });
        }
    }
    std::fs::create_dir_all(&base.output).map_err(|e| Error::io(&base.output, e))?;
    write_file(&base.output.join("ablation.csv"), summary.to_csv().as_bytes())?;
    write_file(&base.output.join("ablation_summary.kv"), summary.to_kv().render().as_bytes())?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(vec![]), None);
    }
}
