//! Brute-force enumeration oracles.

use crate::error::{ContamError, Result};
use crate::statdist::NhgParams;

/// Largest population the enumeration oracle accepts.
pub const NHG_ENUMERATION_MAX: u64 = 10;

/// Exact law of a negative hypergeometric variate as integer counts over
/// the `C(N, Ks)` equally likely arrangements.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NhgTable {
    /// `counts[x]` arrangements give `X = x`.
    pub counts: Vec<u64>,
    pub total: u64,
}

impl NhgTable {
    pub fn pmf(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64 / self.total as f64).collect()
    }

    pub fn cdf(&self) -> Vec<f64> {
        let mut acc = 0u64;
        self.counts
            .iter()
            .map(|&c| {
                acc += c;
                acc as f64 / self.total as f64
            })
            .collect()
    }
}

/// Enumerate every placement of the `Ks` successes among `N` draws and count
/// the successes seen before the `r`-th failure.
pub fn nhg_enumeration(params: &NhgParams) -> Result<NhgTable> {
    let (n, ks, r) = (params.population(), params.successes(), params.failures());
    if n > NHG_ENUMERATION_MAX {
        return Err(ContamError::config(format!(
            "enumeration refused for N = {n} > {NHG_ENUMERATION_MAX}"
        )));
    }
    let mut counts = vec![0u64; ks as usize + 1];
    let mut total = 0u64;
    for mask in 0u32..(1u32 << n) {
        if mask.count_ones() as u64 != ks {
            continue;
        }
        total += 1;
        let (mut successes, mut failures) = (0u64, 0u64);
        if r > 0 {
            for pos in 0..n {
                if mask >> pos & 1 == 1 {
                    successes += 1;
                } else {
                    failures += 1;
                    if failures == r {
                        break;
                    }
                }
            }
        } else {
            successes = ks;
        }
        counts[successes as usize] += 1;
    }
    Ok(NhgTable { counts, total })
}

/// Irwin-Hall CDFs for `k = 1..=k_max` on the grid `x = i * h`, built from
/// `F_k(x) = int_{x-1}^{x} F_{k-1}(t) dt` with trapezoid sums.
/// `1 / h` must be a whole number.
pub fn irwin_hall_convolution(k_max: usize, h: f64) -> Result<Vec<Vec<f64>>> {
    let steps = (1.0 / h).round() as usize;
    if k_max == 0 || steps == 0 || ((steps as f64) * h - 1.0).abs() > 1e-9 {
        return Err(ContamError::config("convolution grid needs k_max >= 1 and 1/h integral"));
    }
    let len = k_max * steps + 1;
    let mut tables = Vec::with_capacity(k_max);
    tables.push((0..len).map(|i| (i as f64 * h).min(1.0)).collect::<Vec<f64>>());
    for _ in 1..k_max {
        let prev = tables.last().expect("first table pushed above");
        let mut integral = vec![0.0; len];
        for i in 1..len {
            integral[i] = integral[i - 1] + 0.5 * h * (prev[i - 1] + prev[i]);
        }
        let next = (0..len)
            .map(|i| integral[i] - if i >= steps { integral[i - steps] } else { 0.0 })
            .collect();
        tables.push(next);
    }
    Ok(tables)
}
