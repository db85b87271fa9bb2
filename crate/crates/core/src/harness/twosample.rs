//! Classical two-sample baselines on one-dimensional scores.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ContamError, Result};

fn sorted(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// ECDF differences `F_a(t) - F_b(t)` at every pooled sample point.
fn ecdf_gaps(a: &[f64], b: &[f64]) -> Vec<f64> {
    let (sa, sb) = (sorted(a), sorted(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mut pooled: Vec<f64> = sa.iter().chain(&sb).copied().collect();
    pooled.sort_by(f64::total_cmp);
    pooled.dedup();
    pooled
        .iter()
        .map(|&t| {
            let fa = sa.partition_point(|&v| v <= t) as f64 / na;
            let fb = sb.partition_point(|&v| v <= t) as f64 / nb;
            fa - fb
        })
        .collect()
}

fn check(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(ContamError::domain("two-sample tests need two non-empty samples"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(ContamError::domain("samples contain NaN"));
    }
    Ok(())
}

/// `sup_t |F_a(t) - F_b(t)|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    ecdf_gaps(a, b).into_iter().map(f64::abs).fold(0.0, f64::max)
}

/// Root mean square ECDF gap over the pooled sample points.
pub fn l2_statistic(a: &[f64], b: &[f64]) -> f64 {
    let gaps = ecdf_gaps(a, b);
    (gaps.iter().map(|g| g * g).sum::<f64>() / gaps.len() as f64).sqrt()
}

/// Kolmogorov-Smirnov statistic and its asymptotic p-value
/// `min(1, 2 exp(-2 D^2 n m / (n + m)))`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    check(a, b)?;
    let d = ks_statistic(a, b);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let p = (2.0 * (-2.0 * d * d * n * m / (n + m)).exp()).min(1.0);
    Ok((d, p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TwoSampleStatistic {
    Ks,
    L2,
}

impl TwoSampleStatistic {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            TwoSampleStatistic::Ks => ks_statistic(a, b),
            TwoSampleStatistic::L2 => l2_statistic(a, b),
        }
    }
}

/// Permutation p-value `(1 + #{T_i >= T_obs}) / (n_perm + 1)` for any
/// statistic where large values speak against exchangeability.
pub fn permutation_two_sample<F>(a: &[f64], b: &[f64], statistic: F, n_perm: usize, seed: u64) -> Result<f64>
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    check(a, b)?;
    if n_perm < 1 {
        return Err(ContamError::config("need at least one permutation"));
    }
    let observed = statistic(a, b);
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..n_perm {
        pooled.shuffle(&mut rng);
        let (pa, pb) = pooled.split_at(a.len());
        if statistic(pa, pb) >= observed {
            hits += 1;
        }
    }
    Ok((1 + hits) as f64 / (n_perm + 1) as f64)
}
