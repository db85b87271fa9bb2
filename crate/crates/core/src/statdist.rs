//! Distribution functions used by the contamination p-values.
//!
//! Everything combinatorial is evaluated in log space and exponentiated at
//! the very end, so population sizes of a few thousand are fine.
//!
//! Conventions:
//!
//! * The binomial mass counts **inliers**: `B(k) = C(m,k) (1-pi)^k pi^(m-k)`.
//! * The negative hypergeometric variate counts the successes drawn (without
//!   replacement) before the `r`-th failure, supported on `{0, ..., Ks}`.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, OnceLock, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::{erf, gamma};

use crate::error::{ContamError, Result};

const LN_FACTORIAL_TABLE: usize = 4096;

/// Largest Irwin-Hall order evaluated with the exact piecewise polynomial.
pub const IRWIN_HALL_EXACT_MAX: usize = 30;

fn ln_factorial_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0..LN_FACTORIAL_TABLE)
            .map(|i| if i < 2 { 0.0 } else { gamma::ln_gamma(i as f64 + 1.0) })
            .collect()
    })
}

/// `ln(n!)`.
pub fn ln_factorial(n: u64) -> f64 {
    if (n as usize) < LN_FACTORIAL_TABLE {
        ln_factorial_table()[n as usize]
    } else {
        gamma::ln_gamma(n as f64 + 1.0)
    }
}

#[inline]
fn ln_choose(n: u64, k: u64) -> f64 {
    debug_assert!(k <= n);
    if k == 0 || k == n {
        0.0
    } else {
        ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
    }
}

const EXACT_INT_MAX: u64 = 1 << 53;

/// `C(n, k)` when it is an integer exactly representable as `f64`.
fn choose_small(n: u64, k: u64) -> Option<u64> {
    let k = k.min(n - k);
    let mut c: u64 = 1;
    for i in 0..k {
        // c * (n - i) is divisible by i + 1 at every step
        c = c.checked_mul(n - i)? / (i + 1);
        if c > EXACT_INT_MAX {
            return None;
        }
    }
    Some(c)
}

/// `ln C(n, k)`.
pub fn log_binom_coef(n: u64, k: u64) -> Result<f64> {
    if k > n {
        return Err(ContamError::domain(format!(
            "binomial coefficient C({n}, {k}) requires k <= n"
        )));
    }
    Ok(ln_choose(n, k))
}

/// Binomial law of the number of inliers in a batch of `trials` points
/// contaminated at rate `contamination`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinomParams {
    trials: u64,
    contamination: f64,
}

impl BinomParams {
    pub fn new(trials: u64, contamination: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&contamination) {
            return Err(ContamError::domain(format!(
                "contamination {contamination} is outside [0, 1]"
            )));
        }
        Ok(Self {
            trials,
            contamination,
        })
    }

    pub fn trials(&self) -> u64 {
        self.trials
    }

    pub fn contamination(&self) -> f64 {
        self.contamination
    }

    fn ln_pmf(&self, k: u64) -> f64 {
        let (m, pi) = (self.trials, self.contamination);
        let outliers = m - k;
        let mut ln = ln_choose(m, k);
        if k > 0 {
            if pi >= 1.0 {
                return f64::NEG_INFINITY;
            }
            ln += k as f64 * (-pi).ln_1p();
        }
        if outliers > 0 {
            if pi <= 0.0 {
                return f64::NEG_INFINITY;
            }
            ln += outliers as f64 * pi.ln();
        }
        ln
    }

    fn pmf(&self, k: u64) -> f64 {
        let (m, pi) = (self.trials, self.contamination);
        if (pi == 0.0 && k < m) || (pi == 1.0 && k > 0) {
            return 0.0;
        }
        if let Some(c) = choose_small(m, k) {
            let direct = c as f64 * (1.0 - pi).powi(k as i32) * pi.powi((m - k) as i32);
            if direct > 1e-280 {
                return direct;
            }
        }
        self.ln_pmf(k).exp()
    }

    /// Mass at every `k = 0..=trials`.
    pub fn pmf_table(&self) -> Vec<f64> {
        (0..=self.trials).map(|k| self.pmf(k)).collect()
    }
}

/// `P(#inliers = k)` for `params`.
pub fn binom_pmf_inliers(k: u64, params: &BinomParams) -> Result<f64> {
    if k > params.trials {
        return Err(ContamError::domain(format!(
            "inlier count {k} exceeds the batch size {}",
            params.trials
        )));
    }
    Ok(params.pmf(k))
}

/// Negative hypergeometric law: population `N`, `Ks` successes, and drawing
/// stops at the `r`-th failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NhgParams {
    population: u64,
    successes: u64,
    failures: u64,
}

impl NhgParams {
    pub fn new(population: u64, successes: u64, failures: u64) -> Result<Self> {
        if population == 0 {
            return Err(ContamError::domain("negative hypergeometric population must be positive"));
        }
        if successes > population {
            return Err(ContamError::domain(format!(
                "success states {successes} exceed population {population}"
            )));
        }
        if failures > population - successes {
            return Err(ContamError::domain(format!(
                "stopping failure count {failures} exceeds the {} failure states",
                population - successes
            )));
        }
        Ok(Self {
            population,
            successes,
            failures,
        })
    }

    pub fn population(&self) -> u64 {
        self.population
    }

    pub fn successes(&self) -> u64 {
        self.successes
    }

    pub fn failures(&self) -> u64 {
        self.failures
    }

    /// `P(X = x)` for `x` in the support. Requires `failures >= 1`.
    fn ln_pmf(&self, x: u64) -> f64 {
        let (n, ks, r) = (self.population, self.successes, self.failures);
        ln_choose(x + r - 1, x) + ln_choose(n - r - x, ks - x) - ln_choose(n, ks)
    }

    fn pmf(&self, x: u64) -> f64 {
        let (n, ks, r) = (self.population, self.successes, self.failures);
        let exact = (|| {
            let a = choose_small(x + r - 1, x)? as u128;
            let b = choose_small(n - r - x, ks - x)? as u128;
            let c = choose_small(n, ks)?;
            Some((a * b) as f64 / c as f64)
        })();
        exact.unwrap_or_else(|| self.ln_pmf(x).exp())
    }
}

/// `P(X <= x)` for the negative hypergeometric law.
pub fn nhg_cdf(x: i64, params: &NhgParams) -> f64 {
    if x < 0 {
        return 0.0;
    }
    let ks = params.successes;
    if x as u64 >= ks {
        return 1.0;
    }
    if params.failures == 0 {
        // nothing stops the draw before every success is out
        return 0.0;
    }
    let total: f64 = (0..=x as u64).map(|j| params.pmf(j)).sum();
    total.min(1.0)
}

/// Chi-square CDF with `dof` degrees of freedom.
pub fn chi2_cdf(x: f64, dof: u32) -> Result<f64> {
    if dof == 0 {
        return Err(ContamError::domain("chi-square needs at least one degree of freedom"));
    }
    if x.is_nan() {
        return Err(ContamError::domain("chi-square CDF evaluated at NaN"));
    }
    if x <= 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    Ok(gamma::gamma_lr(dof as f64 / 2.0, x / 2.0))
}

/// Upper tail `1 - chi2_cdf(x, dof)`, without cancellation.
pub fn chi2_sf(x: f64, dof: u32) -> Result<f64> {
    if dof == 0 {
        return Err(ContamError::domain("chi-square needs at least one degree of freedom"));
    }
    if x.is_nan() {
        return Err(ContamError::domain("chi-square survival evaluated at NaN"));
    }
    if x <= 0.0 {
        return Ok(1.0);
    }
    if x.is_infinite() {
        return Ok(0.0);
    }
    Ok(gamma::gamma_ur(dof as f64 / 2.0, x / 2.0))
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// CDF of the sum of `k` independent standard uniforms.
///
/// Up to [`IRWIN_HALL_EXACT_MAX`] the exact piecewise polynomial is evaluated
/// through the recursion
/// `F_j(t) = (t F_{j-1}(t) + (j - t) F_{j-1}(t - 1)) / j`, whose terms are all
/// non-negative on the support. Larger `k` use the normal approximation with
/// mean `k/2` and variance `k/12`; its error is of order `1/k`.
pub fn irwin_hall_cdf(x: f64, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(ContamError::domain("Irwin-Hall order must be positive"));
    }
    if x.is_nan() {
        return Err(ContamError::domain("Irwin-Hall CDF evaluated at NaN"));
    }
    if x <= 0.0 {
        return Ok(0.0);
    }
    if x >= k as f64 {
        return Ok(1.0);
    }
    if k > IRWIN_HALL_EXACT_MAX {
        let mean = k as f64 / 2.0;
        let sd = (k as f64 / 12.0).sqrt();
        return Ok(normal_cdf((x - mean) / sd));
    }
    Ok(irwin_hall_exact(x, k))
}

fn irwin_hall_exact(x: f64, k: usize) -> f64 {
    // cur[i] holds F_j(x - i); only shifts with x - i > -1 can be non-zero.
    let shifts = (x.floor() as usize).min(k);
    let mut cur: Vec<f64> = (0..=shifts + 1)
        .map(|i| if x - i as f64 >= 0.0 { 1.0 } else { 0.0 })
        .collect();
    for j in 1..=k {
        let jf = j as f64;
        for i in 0..=shifts {
            let t = x - i as f64;
            cur[i] = if t <= 0.0 {
                0.0
            } else if t >= jf {
                1.0
            } else {
                (t * cur[i] + (jf - t) * cur[i + 1]) / jf
            };
        }
    }
    cur[0].clamp(0.0, 1.0)
}

/// Which closed form, if any, gives the law of `sum G(U_i)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClosedForm {
    /// `G(u) = u`: Irwin-Hall.
    Identity,
    /// `G(u) = 2 log((n+1) u)`: a shifted, negated chi-square.
    FisherVariant,
    None,
}

#[derive(Clone)]
enum GKind {
    Identity,
    FisherVariant { n_cal: usize },
    Custom {
        name: String,
        eval: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        integral: f64,
    },
}

/// An increasing, non-negative transform `G` of conformal p-values, together
/// with its exact integral over `[0, 1]`.
///
/// The moment and growth conditions that make the asymptotic p-value valid
/// are the caller's responsibility; only monotonicity and non-negativity are
/// probed.
#[derive(Clone)]
pub struct GFunction {
    kind: GKind,
}

impl fmt::Debug for GFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GFunction")
            .field("name", &self.name())
            .field("integral", &self.integral())
            .finish()
    }
}

const G_PROBE_POINTS: usize = 1000;

impl GFunction {
    pub fn identity() -> Self {
        Self {
            kind: GKind::Identity,
        }
    }

    /// `G(u) = 2 log((n_cal + 1) u)`.
    pub fn fisher_variant(n_cal: usize) -> Self {
        Self {
            kind: GKind::FisherVariant { n_cal },
        }
    }

    /// A user supplied transform. `name` keys the Monte Carlo cache, so two
    /// different functions must not share a name.
    pub fn custom<F>(name: impl Into<String>, eval: F, integral: f64) -> Result<Self>
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=G_PROBE_POINTS {
            let u = i as f64 / G_PROBE_POINTS as f64;
            let v = eval(u);
            if v.is_nan() || v < 0.0 {
                return Err(ContamError::domain(format!(
                    "G must be non-negative on [0, 1]; G({u}) = {v}"
                )));
            }
            if v < prev {
                return Err(ContamError::domain(format!(
                    "G must be non-decreasing on [0, 1]; it drops at u = {u}"
                )));
            }
            prev = v;
        }
        if !integral.is_finite() {
            return Err(ContamError::domain("the integral of G must be finite"));
        }
        Ok(Self {
            kind: GKind::Custom {
                name: name.into(),
                eval: Arc::new(eval),
                integral,
            },
        })
    }

    pub fn eval(&self, u: f64) -> f64 {
        match &self.kind {
            GKind::Identity => u,
            GKind::FisherVariant { n_cal } => 2.0 * ((*n_cal as f64 + 1.0) * u).ln(),
            GKind::Custom { eval, .. } => eval(u),
        }
    }

    /// `int_0^1 G(u) du`.
    pub fn integral(&self) -> f64 {
        match &self.kind {
            GKind::Identity => 0.5,
            GKind::FisherVariant { n_cal } => 2.0 * (*n_cal as f64 + 1.0).ln() - 2.0,
            GKind::Custom { integral, .. } => *integral,
        }
    }

    pub fn closed_form(&self) -> ClosedForm {
        match self.kind {
            GKind::Identity => ClosedForm::Identity,
            GKind::FisherVariant { .. } => ClosedForm::FisherVariant,
            GKind::Custom { .. } => ClosedForm::None,
        }
    }

    pub fn name(&self) -> String {
        match &self.kind {
            GKind::Identity => "identity".to_string(),
            GKind::FisherVariant { n_cal } => format!("fisher-variant/{n_cal}"),
            GKind::Custom { name, .. } => name.clone(),
        }
    }
}

/// Monte Carlo estimator of `P(sum_{i<=k} G(U_i) <= y)` for transforms
/// without a closed form. Sorted samples are cached per `(G name, k)`.
pub struct GSumSampler {
    samples: usize,
    seed: u64,
    cache: RwLock<HashMap<(String, usize), Arc<Vec<f64>>>>,
}

impl Default for GSumSampler {
    fn default() -> Self {
        Self::new(1_000_000, 0x6a09_e667_f3bc_c908)
    }
}

impl GSumSampler {
    pub fn new(samples: usize, seed: u64) -> Self {
        Self {
            samples: samples.max(1),
            seed,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    fn sorted_sums(&self, g: &GFunction, k: usize) -> Arc<Vec<f64>> {
        let key = (g.name(), k);
        if let Some(hit) = self.cache.read().expect("gsum cache poisoned").get(&key) {
            return Arc::clone(hit);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(key.0.as_bytes()));
        rng.set_stream(k as u64);
        let mut sums: Vec<f64> = (0..self.samples)
            .map(|_| (0..k).map(|_| g.eval(rng.random::<f64>())).sum())
            .collect();
        sums.sort_by(f64::total_cmp);
        let sums = Arc::new(sums);
        self.cache
            .write()
            .expect("gsum cache poisoned")
            .entry(key)
            .or_insert_with(|| Arc::clone(&sums))
            .clone()
    }

    /// Empirical CDF from the cached samples, regardless of closed forms.
    pub fn monte_carlo_cdf(&self, y: f64, k: usize, g: &GFunction) -> f64 {
        let sums = self.sorted_sums(g, k);
        sums.partition_point(|&s| s <= y) as f64 / sums.len() as f64
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub(crate) fn default_sampler() -> &'static GSumSampler {
    static SAMPLER: OnceLock<GSumSampler> = OnceLock::new();
    SAMPLER.get_or_init(GSumSampler::default)
}

/// CDF of `sum_{i=1}^k G(U_i)` with `U_i` iid uniform, using the shared
/// default Monte Carlo sampler when no closed form applies.
pub fn gsum_cdf(y: f64, k: usize, g: &GFunction) -> Result<f64> {
    gsum_cdf_with(default_sampler(), y, k, g)
}

pub fn gsum_cdf_with(sampler: &GSumSampler, y: f64, k: usize, g: &GFunction) -> Result<f64> {
    if k == 0 {
        return Err(ContamError::domain("G-sum order must be positive"));
    }
    if y.is_nan() {
        return Err(ContamError::domain("G-sum CDF evaluated at NaN"));
    }
    match &g.kind {
        GKind::Identity => irwin_hall_cdf(y, k),
        GKind::FisherVariant { n_cal } => {
            // sum G(U_i) = 2k log(n+1) - chi2_{2k}
            let shift = 2.0 * k as f64 * (*n_cal as f64 + 1.0).ln();
            chi2_sf(shift - y, 2 * k as u32)
        }
        GKind::Custom { .. } => Ok(sampler.monte_carlo_cdf(y, k, g)),
    }
}
