//! Conformal data contamination tests of `H0: pi <= pi_th`.
//!
//! Each test maps a batch of `m` conformal p-values (computed against `n_cal`
//! calibration points) to a statistic `T`, where small `T` is evidence of
//! contamination, and then to a p-value by conditioning on the binomial
//! number of inliers `k`:
//!
//! * Storey:   `T = #{p_i > lambda}`, exact, via negative hypergeometric
//!   order statistics.
//! * Quantile: `T = (n_cal + 1) p_(m - i0)`, exact, same decomposition with
//!   the roles of statistic and hyperparameter swapped.
//! * Fisher / Sum / generic `G`: `T = sum G(p_i)`, asymptotically valid as
//!   `n_cal` grows, via the law of `sum_{i<=k} G(U_i)` with a finite-sample
//!   inflation `sqrt(1 + k / n_cal)`.
//!
//! Every p-value is at least `pi_th^m`, the probability of a batch made only
//! of outliers.

use serde::{Deserialize, Serialize};

use crate::conformal::ConformalPValues;
use crate::error::{ContamError, Result};
use crate::statdist::{chi2_cdf, default_sampler, gsum_cdf_with, nhg_cdf, BinomParams, GSumSampler, NhgParams};

pub use crate::statdist::{ClosedForm, GFunction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestFamily {
    Storey,
    Quantile,
    Fisher,
    Sum,
    #[serde(rename = "generic-g")]
    GenericG,
}

impl TestFamily {
    pub const CLASSIC: [TestFamily; 4] = [
        TestFamily::Storey,
        TestFamily::Quantile,
        TestFamily::Fisher,
        TestFamily::Sum,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TestFamily::Storey => "storey",
            TestFamily::Quantile => "quantile",
            TestFamily::Fisher => "fisher",
            TestFamily::Sum => "sum",
            TestFamily::GenericG => "generic-g",
        }
    }
}

impl std::fmt::Display for TestFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TestFamily {
    type Err = ContamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "storey" => Ok(TestFamily::Storey),
            "quantile" => Ok(TestFamily::Quantile),
            "fisher" => Ok(TestFamily::Fisher),
            "sum" => Ok(TestFamily::Sum),
            "generic-g" => Ok(TestFamily::GenericG),
            _ => Err(ContamError::config(format!("unknown test family `{s}`"))),
        }
    }
}

/// Which Fisher p-value to use.
///
/// `Derived` applies the generic-`G` bound with `G(u) = 2 log((n+1) u)`, whose
/// sum law is `2k log(n+1) - chi2_{2k}`. `Printed` evaluates the chi-square
/// CDF directly at `(-T + 2k log(n+1) + 2k (sqrt(1+k/n) - 1)) / sqrt(1+k/n)`;
/// it is kept for comparison only and is not a valid p-value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FisherFormula {
    #[default]
    Derived,
    Printed,
}

impl std::str::FromStr for FisherFormula {
    type Err = ContamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "derived" => Ok(FisherFormula::Derived),
            "printed" => Ok(FisherFormula::Printed),
            _ => Err(ContamError::config(format!("unknown Fisher formula `{s}`"))),
        }
    }
}

/// Test family, threshold and the family's hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContamTestSpec {
    pub family: TestFamily,
    pub pi_th: f64,
    /// Storey only; must lie on `{1, ..., n_cal} / (n_cal + 1)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Quantile only; in `0..m`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i0: Option<usize>,
    /// Generic-G only.
    #[serde(skip)]
    pub g: Option<GFunction>,
    #[serde(default)]
    pub fisher_formula: FisherFormula,
    /// Snap an off-grid `lambda` down to the grid instead of failing.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub snap_lambda: bool,
}

impl ContamTestSpec {
    fn base(family: TestFamily, pi_th: f64) -> Self {
        Self {
            family,
            pi_th,
            lambda: None,
            i0: None,
            g: None,
            fisher_formula: FisherFormula::Derived,
            snap_lambda: false,
        }
    }

    pub fn storey(pi_th: f64, lambda: f64) -> Self {
        Self {
            lambda: Some(lambda),
            ..Self::base(TestFamily::Storey, pi_th)
        }
    }

    pub fn quantile(pi_th: f64, i0: usize) -> Self {
        Self {
            i0: Some(i0),
            ..Self::base(TestFamily::Quantile, pi_th)
        }
    }

    pub fn fisher(pi_th: f64) -> Self {
        Self::base(TestFamily::Fisher, pi_th)
    }

    pub fn fisher_printed(pi_th: f64) -> Self {
        Self {
            fisher_formula: FisherFormula::Printed,
            ..Self::base(TestFamily::Fisher, pi_th)
        }
    }

    pub fn sum(pi_th: f64) -> Self {
        Self::base(TestFamily::Sum, pi_th)
    }

    pub fn generic(pi_th: f64, g: GFunction) -> Self {
        Self {
            g: Some(g),
            ..Self::base(TestFamily::GenericG, pi_th)
        }
    }

    /// Check the spec against a batch of size `m` and calibration size `n_cal`.
    pub fn validate(&self, m: usize, n_cal: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.pi_th) {
            return Err(ContamError::config(format!(
                "pi_th = {} must lie in [0, 1)",
                self.pi_th
            )));
        }
        if m == 0 {
            return Err(ContamError::config("the test batch is empty"));
        }
        if n_cal == 0 {
            return Err(ContamError::config("calibration size must be positive"));
        }
        let fam = self.family;
        let mismatch = |what: &str| {
            Err(ContamError::config(format!(
                "hyperparameter `{what}` does not apply to the {fam} test"
            )))
        };
        if self.lambda.is_some() && fam != TestFamily::Storey {
            return mismatch("lambda");
        }
        if self.i0.is_some() && fam != TestFamily::Quantile {
            return mismatch("i0");
        }
        if self.g.is_some() && fam != TestFamily::GenericG {
            return mismatch("g");
        }
        if self.fisher_formula == FisherFormula::Printed && fam != TestFamily::Fisher {
            return mismatch("fisher_formula");
        }
        match fam {
            TestFamily::Storey => {
                self.lambda_rank(n_cal)?;
            }
            TestFamily::Quantile => {
                let i0 = self
                    .i0
                    .ok_or_else(|| ContamError::config("the quantile test needs i0"))?;
                if i0 >= m {
                    return Err(ContamError::config(format!(
                        "i0 = {i0} must be below the batch size m = {m}"
                    )));
                }
            }
            TestFamily::GenericG => {
                if self.g.is_none() {
                    return Err(ContamError::config("the generic-G test needs a G function"));
                }
            }
            TestFamily::Fisher | TestFamily::Sum => {}
        }
        Ok(())
    }

    /// `floor(lambda (n_cal + 1))`, checked to be a grid point in `1..=n_cal`.
    pub fn lambda_rank(&self, n_cal: usize) -> Result<usize> {
        let lambda = self
            .lambda
            .ok_or_else(|| ContamError::config("the Storey test needs lambda"))?;
        lambda_to_rank(lambda, n_cal, self.snap_lambda)
    }
}

/// Map a grid value `r / (n_cal + 1)` back to `r`.
pub fn lambda_to_rank(lambda: f64, n_cal: usize, snap: bool) -> Result<usize> {
    let scaled = lambda * (n_cal as f64 + 1.0);
    let nearest = scaled.round();
    let rank = if (scaled - nearest).abs() <= 1e-9 {
        nearest
    } else if snap {
        scaled.floor()
    } else {
        return Err(ContamError::config(format!(
            "lambda = {lambda} is not on the grid {{1..{n_cal}}}/{}",
            n_cal + 1
        )));
    };
    if !(1.0..=n_cal as f64).contains(&rank) {
        return Err(ContamError::config(format!(
            "lambda = {lambda} must lie in [1, {n_cal}]/{}",
            n_cal + 1
        )));
    }
    Ok(rank as usize)
}

pub fn lambda_from_rank(rank: usize, n_cal: usize) -> f64 {
    rank as f64 / (n_cal as f64 + 1.0)
}

/// Default Storey threshold `floor(n_cal / 8) / (n_cal + 1)`, raised to the
/// first grid point when `n_cal < 8`.
pub fn default_lambda(n_cal: usize) -> f64 {
    lambda_from_rank((n_cal / 8).max(1), n_cal)
}

/// Default quantile index `floor(m / 3)`.
pub fn default_i0(m: usize) -> usize {
    m / 3
}

/// Storey statistic: number of p-values strictly above `lambda`.
pub fn storey_stat(p: &ConformalPValues, lambda: f64) -> Result<usize> {
    let r = lambda_to_rank(lambda, p.n_cal(), false)?;
    Ok(storey_stat_rank(p, r))
}

fn storey_stat_rank(p: &ConformalPValues, lambda_rank: usize) -> usize {
    p.ranks().iter().filter(|&&r| r > lambda_rank).count()
}

/// Shared exact p-value:
/// `sum_{k > t0} B(k) F_NHG(x; n+k, n, k - t0) + sum_{k <= t0} B(k)`.
fn order_statistic_pvalue(t0: usize, x: i64, m: usize, n_cal: usize, pi_th: f64) -> Result<f64> {
    let pmf = BinomParams::new(m as u64, pi_th)?.pmf_table();
    let mut u: f64 = pmf[..=t0].iter().sum();
    for (k, &b) in pmf.iter().enumerate().skip(t0 + 1) {
        if b == 0.0 {
            continue;
        }
        let params = NhgParams::new((n_cal + k) as u64, n_cal as u64, (k - t0) as u64)?;
        u += b * nhg_cdf(x, &params);
    }
    Ok(u.clamp(0.0, 1.0))
}

fn check_pi_th(pi_th: f64) -> Result<()> {
    if !(0.0..1.0).contains(&pi_th) {
        return Err(ContamError::config(format!("pi_th = {pi_th} must lie in [0, 1)")));
    }
    Ok(())
}

/// Exact Storey p-value for statistic `t`.
pub fn storey_pvalue(t: usize, m: usize, n_cal: usize, spec: &ContamTestSpec) -> Result<f64> {
    if t > m {
        return Err(ContamError::domain(format!("Storey statistic {t} exceeds m = {m}")));
    }
    check_pi_th(spec.pi_th)?;
    let r = spec.lambda_rank(n_cal)?;
    order_statistic_pvalue(t, r as i64 - 1, m, n_cal, spec.pi_th)
}

/// Quantile statistic `(n_cal + 1) p_(m - i0)`, an integer rank.
pub fn quantile_stat(p: &ConformalPValues, i0: usize) -> Result<usize> {
    let m = p.len();
    if i0 >= m {
        return Err(ContamError::config(format!(
            "i0 = {i0} must be below the batch size m = {m}"
        )));
    }
    let mut ranks = p.ranks().to_vec();
    let idx = m - i0 - 1;
    let (_, kth, _) = ranks.select_nth_unstable(idx);
    Ok(*kth)
}

/// Exact quantile p-value for statistic `t` in `1..=n_cal + 1`.
pub fn quantile_pvalue(t: usize, m: usize, n_cal: usize, spec: &ContamTestSpec) -> Result<f64> {
    if t == 0 || t > n_cal + 1 {
        return Err(ContamError::domain(format!(
            "quantile statistic {t} is outside 1..={}",
            n_cal + 1
        )));
    }
    check_pi_th(spec.pi_th)?;
    let i0 = spec
        .i0
        .ok_or_else(|| ContamError::config("the quantile test needs i0"))?;
    if i0 >= m {
        return Err(ContamError::config(format!(
            "i0 = {i0} must be below the batch size m = {m}"
        )));
    }
    order_statistic_pvalue(i0, t as i64 - 1, m, n_cal, spec.pi_th)
}

/// Fisher statistic `2 sum log((n_cal + 1) p_i)`; zero iff every p-value is
/// minimal.
pub fn fisher_stat(p: &ConformalPValues) -> f64 {
    2.0 * p.ranks().iter().map(|&r| (r as f64).ln()).sum::<f64>()
}

/// Generic asymptotic p-value
/// `pi_th^m + sum_k B(k) F_{G^k}((T + k (s_k - 1) int G) / s_k)` with
/// `s_k = sqrt(1 + k / n_cal)`.
fn asymptotic_pvalue(
    t: f64,
    m: usize,
    n_cal: usize,
    pi_th: f64,
    g: &GFunction,
    sampler: &GSumSampler,
) -> Result<f64> {
    check_pi_th(pi_th)?;
    if n_cal == 0 {
        return Err(ContamError::config("calibration size must be positive"));
    }
    let pmf = BinomParams::new(m as u64, pi_th)?.pmf_table();
    let integral = g.integral();
    let mut u = pmf[0];
    for (k, &b) in pmf.iter().enumerate().skip(1) {
        if b == 0.0 {
            continue;
        }
        let s = (1.0 + k as f64 / n_cal as f64).sqrt();
        let y = (t + k as f64 * (s - 1.0) * integral) / s;
        u += b * gsum_cdf_with(sampler, y, k, g)?;
    }
    Ok(u.clamp(0.0, 1.0))
}

fn printed_fisher_pvalue(t: f64, m: usize, n_cal: usize, pi_th: f64) -> Result<f64> {
    check_pi_th(pi_th)?;
    let pmf = BinomParams::new(m as u64, pi_th)?.pmf_table();
    let log_n1 = (n_cal as f64 + 1.0).ln();
    let mut u = pmf[0];
    for (k, &b) in pmf.iter().enumerate().skip(1) {
        if b == 0.0 {
            continue;
        }
        let kf = k as f64;
        let s = (1.0 + kf / n_cal as f64).sqrt();
        let arg = (-t + 2.0 * kf * log_n1 + 2.0 * kf * (s - 1.0)) / s;
        u += b * chi2_cdf(arg, 2 * k as u32)?;
    }
    Ok(u.clamp(0.0, 1.0))
}

/// Asymptotic Fisher p-value for statistic `t >= 0`.
pub fn fisher_pvalue(t: f64, m: usize, n_cal: usize, spec: &ContamTestSpec) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(ContamError::domain(format!("Fisher statistic {t} must be non-negative")));
    }
    match spec.fisher_formula {
        FisherFormula::Derived => {
            let g = GFunction::fisher_variant(n_cal);
            asymptotic_pvalue(t, m, n_cal, spec.pi_th, &g, default_sampler())
        }
        FisherFormula::Printed => printed_fisher_pvalue(t, m, n_cal, spec.pi_th),
    }
}

pub fn sum_stat(p: &ConformalPValues) -> f64 {
    p.values().iter().sum()
}

/// Asymptotic Sum p-value for statistic `t` in `[0, m]`.
pub fn sum_pvalue(t: f64, m: usize, n_cal: usize, spec: &ContamTestSpec) -> Result<f64> {
    if !(0.0..=m as f64).contains(&t) {
        return Err(ContamError::domain(format!("Sum statistic {t} is outside [0, {m}]")));
    }
    asymptotic_pvalue(t, m, n_cal, spec.pi_th, &GFunction::identity(), default_sampler())
}

/// `T_G = sum G(p_i)` and its asymptotic p-value.
pub fn generic_g_pvalue(p: &ConformalPValues, g: &GFunction, pi_th: f64) -> Result<f64> {
    generic_g_pvalue_with(p, g, pi_th, default_sampler())
}

pub fn generic_g_pvalue_with(p: &ConformalPValues, g: &GFunction, pi_th: f64, sampler: &GSumSampler) -> Result<f64> {
    let t = generic_g_stat(p, g);
    asymptotic_pvalue(t, p.len(), p.n_cal(), pi_th, g, sampler)
}

pub fn generic_g_stat(p: &ConformalPValues, g: &GFunction) -> f64 {
    p.values().iter().map(|&v| g.eval(v)).sum()
}

/// Outcome of one contamination test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContamTestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub spec: ContamTestSpec,
    pub m: usize,
    pub n_cal: usize,
}

/// Compute the family's statistic and p-value for a batch.
pub fn run_contam_test(p: &ConformalPValues, spec: &ContamTestSpec) -> Result<ContamTestResult> {
    let (m, n_cal) = (p.len(), p.n_cal());
    spec.validate(m, n_cal)?;
    let (statistic, p_value) = match spec.family {
        TestFamily::Storey => {
            let t = storey_stat_rank(p, spec.lambda_rank(n_cal)?);
            (t as f64, storey_pvalue(t, m, n_cal, spec)?)
        }
        TestFamily::Quantile => {
            let t = quantile_stat(p, spec.i0.unwrap_or_default())?;
            (t as f64, quantile_pvalue(t, m, n_cal, spec)?)
        }
        TestFamily::Fisher => {
            let t = fisher_stat(p);
            (t, fisher_pvalue(t, m, n_cal, spec)?)
        }
        TestFamily::Sum => {
            let t = sum_stat(p);
            (t, sum_pvalue(t, m, n_cal, spec)?)
        }
        TestFamily::GenericG => {
            let g = spec.g.as_ref().expect("validated");
            let t = generic_g_stat(p, g);
            (t, asymptotic_pvalue(t, m, n_cal, spec.pi_th, g, default_sampler())?)
        }
    };
    Ok(ContamTestResult {
        statistic,
        p_value,
        spec: spec.clone(),
        m,
        n_cal,
    })
}
