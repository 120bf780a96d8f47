//! Exact, non-neural mutual information and KL divergence.
//!
//! These are the ground truth the neural estimators are checked against:
//! discrete tables where every sum can be evaluated directly, and jointly
//! Gaussian pairs where the answer has a closed form. All values are in nats.

use crate::error::{Error, Result};

/// Tolerance on the sum-to-one constraint of probability tables.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// A joint probability table `p(x, y)` over `rows x cols` outcomes.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    rows: usize,
    cols: usize,
    table: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(rows: usize, cols: usize, table: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || table.len() != rows * cols {
            return Err(Error::Validation(format!(
                "table of {} entries does not match {rows}x{cols}",
                table.len()
            )));
        }
        validate_distribution(&table)?;
        Ok(Self { rows, cols, table })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Validation("ragged probability table".into()));
        }
        Self::new(rows.len(), cols, rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    /// Normalizes non-negative weights (e.g. a histogram) into a table.
    pub fn from_counts(rows: usize, cols: usize, counts: &[f64]) -> Result<Self> {
        let total: f64 = counts.iter().sum();
        if !(total > 0.0) || counts.iter().any(|&c| c < 0.0) {
            return Err(Error::Validation("counts must be non-negative with a positive total".into()));
        }
        Self::new(rows, cols, counts.iter().map(|c| c / total).collect())
    }

    /// The product of two marginals.
    pub fn independent(px: &[f64], py: &[f64]) -> Result<Self> {
        validate_distribution(px)?;
        validate_distribution(py)?;
        let table = px.iter().flat_map(|&a| py.iter().map(move |&b| a * b)).collect();
        Self::new(px.len(), py.len(), table)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.table[x * self.cols + y]
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn marginal_x(&self) -> Vec<f64> {
        self.table.chunks(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn marginal_y(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.cols];
        for row in self.table.chunks(self.cols) {
            for (acc, &p) in m.iter_mut().zip(row) {
                *acc += p;
            }
        }
        m
    }

    /// `p(x) p(y)` laid out like the joint table.
    pub fn product_of_marginals(&self) -> Vec<f64> {
        let px = self.marginal_x();
        let py = self.marginal_y();
        px.iter().flat_map(|&a| py.iter().map(move |&b| a * b)).collect()
    }

    /// `ln(p(x,y) / (p(x)p(y)))` where the joint is positive, `0` elsewhere.
    /// With full support this table attains the DV supremum.
    pub fn log_density_ratio(&self) -> Vec<f64> {
        self.table
            .iter()
            .zip(self.product_of_marginals())
            .map(|(&p, q)| if p > 0.0 { (p / q).ln() } else { 0.0 })
            .collect()
    }
}

fn validate_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Validation("empty distribution".into()));
    }
    if let Some(bad) = p.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Validation(format!("probability {bad} is negative or not finite")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::Validation(format!("probabilities sum to {total}, not 1")));
    }
    Ok(())
}

/// Correlated standard-normal pairs: `dim` independent coordinate pairs,
/// each with correlation `rho`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianPairSpec {
    pub rho: f64,
    pub dim: usize,
}

impl GaussianPairSpec {
    pub fn new(rho: f64, dim: usize) -> Result<Self> {
        let spec = Self { rho, dim };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho.abs() < 1.0) {
            return Err(Error::Domain(format!("|rho| must be < 1, got {}", self.rho)));
        }
        if self.dim == 0 {
            return Err(Error::Domain("dim must be at least 1".into()));
        }
        Ok(())
    }
}

/// `sum p(x,y) ln(p(x,y) / (p(x)p(y)))`, with `0 ln 0 = 0`.
pub fn mutual_information_discrete(joint: &DiscreteJoint) -> f64 {
    joint
        .table
        .iter()
        .zip(joint.product_of_marginals())
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, q)| p * (p / q).ln())
        .sum::<f64>()
        .max(0.0)
}

/// `sum p ln(p / q)`; requires `q > 0` wherever `p > 0`.
pub fn kl_divergence_discrete(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Validation(format!("lengths differ: {} vs {}", p.len(), q.len())));
    }
    validate_distribution(p)?;
    validate_distribution(q)?;
    let mut total = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::Domain(format!("p[{i}] = {pi} > 0 where q[{i}] = 0")));
        }
        total += pi * (pi / qi).ln();
    }
    Ok(total.max(0.0))
}

/// Closed-form MI of a [`GaussianPairSpec`]: `-dim/2 * ln(1 - rho^2)`.
pub fn gaussian_mi_analytic(spec: &GaussianPairSpec) -> Result<f64> {
    spec.validate()?;
    Ok(spec.dim as f64 * -0.5 * (1.0 - spec.rho * spec.rho).ln())
}

fn check_table_len(joint: &DiscreteJoint, t: &[f64]) -> Result<()> {
    if t.len() != joint.table.len() {
        return Err(Error::Validation(format!(
            "critic table has {} entries, joint has {}",
            t.len(),
            joint.table.len()
        )));
    }
    if t.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("critic table must be finite".into()));
    }
    Ok(())
}

/// Donsker-Varadhan bound `E_p[t] - ln E_{p(x)p(y)}[e^t]` for a critic
/// table `t` laid out like the joint. Never exceeds the exact MI.
pub fn dv_bound_exact(joint: &DiscreteJoint, t: &[f64]) -> Result<f64> {
    check_table_len(joint, t)?;
    let q = joint.product_of_marginals();
    let joint_term: f64 = joint.table.iter().zip(t).filter(|(&p, _)| p > 0.0).map(|(p, v)| p * v).sum();
    // Shift by the max over the support of q so large critics cannot overflow.
    let shift = t
        .iter()
        .zip(&q)
        .filter(|(_, &qi)| qi > 0.0)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let partition: f64 = t.iter().zip(&q).map(|(&v, &qi)| qi * (v - shift).exp()).sum();
    Ok(joint_term - shift - partition.ln())
}

/// Gradient of [`dv_bound_exact`] with respect to each table entry:
/// `p - q e^t / E_q[e^t]`.
pub fn dv_bound_gradient(joint: &DiscreteJoint, t: &[f64]) -> Result<Vec<f64>> {
    check_table_len(joint, t)?;
    let q = joint.product_of_marginals();
    let shift = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = t.iter().zip(&q).map(|(&v, &qi)| qi * (v - shift).exp()).collect();
    let z: f64 = weights.iter().sum();
    Ok(joint.table.iter().zip(weights).map(|(p, w)| p - w / z).collect())
}
