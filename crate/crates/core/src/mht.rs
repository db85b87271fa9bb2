//! Multiple testing over per-agent contamination p-values.

use serde::{Deserialize, Serialize};

use crate::error::{ContamError, Result};

/// `K` p-values with the agent each one belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PValueVector {
    values: Vec<f64>,
    agent_ids: Vec<String>,
}

impl PValueVector {
    pub fn new(values: Vec<f64>, agent_ids: Vec<String>) -> Result<Self> {
        if values.len() != agent_ids.len() {
            return Err(ContamError::config(format!(
                "{} p-values but {} agent ids",
                values.len(),
                agent_ids.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ContamError::domain(format!("p-value {v} is outside [0, 1]")));
        }
        Ok(Self { values, agent_ids })
    }

    /// Ids are the positions `0..K`.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        let ids = (0..values.len()).map(|i| i.to_string()).collect();
        Self::new(values, ids)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn agent_ids(&self) -> &[String] {
        &self.agent_ids
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultipleTestOutcome {
    /// Rejected agents, in input order.
    pub rejected: Vec<String>,
    pub rejected_indices: Vec<usize>,
    pub kappa: usize,
    /// Estimated number of true nulls; `None` for plain BH.
    pub k0_hat: Option<f64>,
    pub fdr_estimate: Option<f64>,
}

impl MultipleTestOutcome {
    pub fn is_rejected(&self, index: usize) -> bool {
        self.rejected_indices.binary_search(&index).is_ok()
    }
}

/// Step-up over sorted p-values with per-rank threshold `slope * j`.
fn step_up(p: &PValueVector, slope: f64, k0_hat: Option<f64>) -> MultipleTestOutcome {
    let mut sorted = p.values.clone();
    sorted.sort_by(f64::total_cmp);
    let kappa = (1..=sorted.len())
        .rev()
        .find(|&j| sorted[j - 1] <= slope * j as f64)
        .unwrap_or(0);
    let rejected_indices: Vec<usize> = if kappa == 0 {
        Vec::new()
    } else {
        let cut = sorted[kappa - 1];
        (0..p.len()).filter(|&i| p.values[i] <= cut).collect()
    };
    MultipleTestOutcome {
        rejected: rejected_indices.iter().map(|&i| p.agent_ids[i].clone()).collect(),
        kappa: rejected_indices.len(),
        rejected_indices,
        k0_hat,
        fdr_estimate: None,
    }
}

fn check_unit_open(name: &str, x: f64) -> Result<()> {
    if !(x > 0.0 && x < 1.0) {
        return Err(ContamError::config(format!("{name} = {x} must lie in (0, 1)")));
    }
    Ok(())
}

/// Benjamini-Hochberg at level `q_star`.
///
/// Tied p-values at the cutoff are all rejected, so `kappa` is the size of
/// the rejection set.
pub fn bh(p: &PValueVector, q_star: f64) -> Result<MultipleTestOutcome> {
    check_unit_open("q_star", q_star)?;
    if p.is_empty() {
        return Err(ContamError::config("no p-values to test"));
    }
    Ok(step_up(p, q_star / p.len() as f64, None))
}

/// `K0_hat = #{p > gamma} / (1 - gamma)`.
pub fn storey_k0_hat(p: &[f64], gamma: f64) -> f64 {
    p.iter().filter(|&&v| v > gamma).count() as f64 / (1.0 - gamma)
}

/// Storey's adaptive BH: BH with `K` replaced by `K0_hat`. `K0_hat = 0`
/// rejects everything.
pub fn storey_bh(p: &PValueVector, alpha: f64, gamma: f64) -> Result<MultipleTestOutcome> {
    check_unit_open("alpha", alpha)?;
    check_unit_open("gamma", gamma)?;
    if p.is_empty() {
        return Err(ContamError::config("no p-values to test"));
    }
    let k0 = storey_k0_hat(&p.values, gamma);
    let slope = if k0 == 0.0 { f64::INFINITY } else { alpha / k0 };
    Ok(step_up(p, slope, Some(k0)))
}

/// Liberal FDR estimate for the rejection region `{p <= delta}`:
/// `min(1, delta #{p > gamma} / ((1 - gamma) #{p <= delta}))`, and 1 when the
/// region is empty.
pub fn storey_fdr_estimate(p: &[f64], delta: f64, gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&delta) || !(0.0..=1.0).contains(&gamma) {
        return Err(ContamError::config(format!(
            "delta = {delta} and gamma = {gamma} must lie in [0, 1]"
        )));
    }
    let rejected = p.iter().filter(|&&v| v <= delta).count();
    if rejected == 0 {
        return Ok(1.0);
    }
    let above = p.iter().filter(|&&v| v > gamma).count();
    if above == 0 {
        return Ok(0.0);
    }
    if gamma == 1.0 {
        return Ok(1.0);
    }
    Ok((delta * above as f64 / ((1.0 - gamma) * rejected as f64)).min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> PValueVector {
        PValueVector::from_values(v.to_vec()).unwrap()
    }

    #[test]
    fn bh_examples() {
        let out = bh(&pv(&[0.01, 0.02, 0.5]), 0.05).unwrap();
        assert_eq!(out.kappa, 2);
        assert_eq!(out.rejected_indices, vec![0, 1]);
        assert_eq!(bh(&pv(&[1.0; 4]), 0.05).unwrap().kappa, 0);
        assert_eq!(bh(&pv(&[0.0; 4]), 0.05).unwrap().kappa, 4);
        assert!(matches!(bh(&pv(&[]), 0.05), Err(ContamError::Config(_))));
    }

    #[test]
    fn bh_ties_reject_together() {
        let out = bh(&pv(&[0.03, 0.03, 0.9]), 0.1).unwrap();
        assert_eq!(out.rejected_indices, vec![0, 1]);
    }

    #[test]
    fn storey_bh_examples() {
        let out = storey_bh(&pv(&[0.01, 0.2, 0.8, 0.9]), 0.05, 0.5).unwrap();
        assert_eq!(out.k0_hat, Some(4.0));
        assert_eq!(out.rejected_indices, vec![0]);

        let out = storey_bh(&pv(&[0.001, 0.9]), 0.05, 0.5).unwrap();
        assert_eq!(out.k0_hat, Some(2.0));
        assert_eq!(out.rejected, vec!["0".to_string()]);

        let out = storey_bh(&pv(&[0.3, 0.4]), 0.05, 0.5).unwrap();
        assert_eq!(out.k0_hat, Some(0.0));
        assert_eq!(out.kappa, 2);
    }

    #[test]
    fn fdr_estimate_examples() {
        let p = [0.01, 0.04, 0.6, 0.7];
        assert!((storey_fdr_estimate(&p, 0.05, 0.5).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(storey_fdr_estimate(&[0.5, 0.6], 0.05, 0.5).unwrap(), 1.0);
        assert_eq!(storey_fdr_estimate(&[0.01, 0.2], 0.05, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn fdr_estimate_can_drop_when_delta_crosses_a_pvalue() {
        let p = [0.01, 0.02, 0.9];
        let before = storey_fdr_estimate(&p, 0.015, 0.5).unwrap();
        let after = storey_fdr_estimate(&p, 0.02, 0.5).unwrap();
        assert!((before - 0.03).abs() < 1e-15);
        assert!((after - 0.02).abs() < 1e-15);
    }

    #[test]
    fn mismatched_lengths() {
        assert!(PValueVector::new(vec![0.1], vec![]).is_err());
        assert!(PValueVector::from_values(vec![1.5]).is_err());
    }
}
