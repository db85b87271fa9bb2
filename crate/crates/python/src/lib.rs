//! Python bindings. Structured reports cross the boundary as JSON text.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use contam_core::contamtest::{self, default_i0, default_lambda};
use contam_core::harness::{ks_two_sample as ks, run_simulated_protocol, run_study, ScenarioConfig};
use contam_core::mht;
use contam_core::protocol::{select_fixed_budget, select_threshold, AgentScore, DeltaPolicy, DEFAULT_GAMMA};
use contam_core::statdist::{self, BinomParams, NhgParams};
use contam_core::{
    ConformalCalibration, ConformalPValues, ContamError, ContamTestSpec, FisherFormula, PValueVector, ProtocolConfig,
    TestFamily,
};

create_exception!(contam, ContamException, PyException);
create_exception!(contam, ConfigError, ContamException);
create_exception!(contam, DataError, ContamException);

fn py_err(e: ContamError) -> PyErr {
    match e {
        ContamError::Config(_) => ConfigError::new_err(e.to_string()),
        ContamError::Data(_) => DataError::new_err(e.to_string()),
        _ => ContamException::new_err(e.to_string()),
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string(value).map_err(|e| DataError::new_err(e.to_string()))
}

fn from_json<T: serde::de::DeserializeOwned>(text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| ConfigError::new_err(e.to_string()))
}

#[pyfunction]
fn log_binom_coef(n: u64, k: u64) -> PyResult<f64> {
    statdist::log_binom_coef(n, k).map_err(py_err)
}

/// Binomial mass of `k` inliers among `m` points at contamination `pi`.
#[pyfunction]
fn binom_pmf_inliers(k: u64, m: u64, pi: f64) -> PyResult<f64> {
    let params = BinomParams::new(m, pi).map_err(py_err)?;
    statdist::binom_pmf_inliers(k, &params).map_err(py_err)
}

#[pyfunction]
fn nhg_cdf(x: i64, population: u64, successes: u64, failures: u64) -> PyResult<f64> {
    let params = NhgParams::new(population, successes, failures).map_err(py_err)?;
    Ok(statdist::nhg_cdf(x, &params))
}

#[pyfunction]
fn chi2_cdf(x: f64, dof: u32) -> PyResult<f64> {
    statdist::chi2_cdf(x, dof).map_err(py_err)
}

#[pyfunction]
fn irwin_hall_cdf(x: f64, k: usize) -> PyResult<f64> {
    statdist::irwin_hall_cdf(x, k).map_err(py_err)
}

/// Calibration scores of a fitted conformal score.
#[pyclass(name = "Calibration")]
struct PyCalibration {
    inner: ConformalCalibration,
}

#[pymethods]
impl PyCalibration {
    #[new]
    fn new(scores: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: ConformalCalibration::from_scores(scores).map_err(py_err)?,
        })
    }

    #[getter]
    fn n_cal(&self) -> usize {
        self.inner.n_cal()
    }

    /// Integer ranks `1 + #{calibration <= s}`.
    fn ranks(&self, scores: Vec<f64>) -> PyResult<Vec<usize>> {
        Ok(self.inner.pvalues_from_scores(&scores).map_err(py_err)?.ranks().to_vec())
    }

    fn pvalues(&self, scores: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.pvalues_from_scores(&scores).map_err(py_err)?.values())
    }

    /// Contamination test of one batch; returns `(statistic, p_value)`.
    #[pyo3(signature = (scores, family, pi_th, lam=None, i0=None, fisher_formula="derived"))]
    fn test(
        &self,
        scores: Vec<f64>,
        family: &str,
        pi_th: f64,
        lam: Option<f64>,
        i0: Option<usize>,
        fisher_formula: &str,
    ) -> PyResult<(f64, f64)> {
        let p = self.inner.pvalues_from_scores(&scores).map_err(py_err)?;
        contam_test_ranks(&p, family, pi_th, lam, i0, fisher_formula)
    }

    fn __repr__(&self) -> String {
        format!("Calibration(n_cal={})", self.inner.n_cal())
    }
}

fn contam_test_ranks(
    p: &ConformalPValues,
    family: &str,
    pi_th: f64,
    lam: Option<f64>,
    i0: Option<usize>,
    fisher_formula: &str,
) -> PyResult<(f64, f64)> {
    let family: TestFamily = family.parse().map_err(py_err)?;
    let formula: FisherFormula = fisher_formula.parse().map_err(py_err)?;
    let mut spec = match family {
        TestFamily::Storey => ContamTestSpec::storey(pi_th, lam.unwrap_or_else(|| default_lambda(p.n_cal()))),
        TestFamily::Quantile => ContamTestSpec::quantile(pi_th, i0.unwrap_or_else(|| default_i0(p.len()))),
        TestFamily::Fisher => ContamTestSpec::fisher(pi_th),
        TestFamily::Sum => ContamTestSpec::sum(pi_th),
        TestFamily::GenericG => return Err(ConfigError::new_err("the generic-G test needs a Rust G function")),
    };
    spec.fisher_formula = formula;
    let r = contam_core::run_contam_test(p, &spec).map_err(py_err)?;
    Ok((r.statistic, r.p_value))
}

/// Contamination test from conformal ranks on `{1, ..., n_cal + 1}`.
#[pyfunction]
#[pyo3(signature = (ranks, n_cal, family, pi_th, lam=None, i0=None, fisher_formula="derived"))]
fn contam_test(
    ranks: Vec<usize>,
    n_cal: usize,
    family: &str,
    pi_th: f64,
    lam: Option<f64>,
    i0: Option<usize>,
    fisher_formula: &str,
) -> PyResult<(f64, f64)> {
    let p = ConformalPValues::from_ranks(ranks, n_cal).map_err(py_err)?;
    contam_test_ranks(&p, family, pi_th, lam, i0, fisher_formula)
}

#[pyfunction]
fn storey_pvalue(t: usize, m: usize, n_cal: usize, pi_th: f64, lam: f64) -> PyResult<f64> {
    contamtest::storey_pvalue(t, m, n_cal, &ContamTestSpec::storey(pi_th, lam)).map_err(py_err)
}

#[pyfunction]
fn quantile_pvalue(t: usize, m: usize, n_cal: usize, pi_th: f64, i0: usize) -> PyResult<f64> {
    contamtest::quantile_pvalue(t, m, n_cal, &ContamTestSpec::quantile(pi_th, i0)).map_err(py_err)
}

#[pyfunction]
fn fisher_pvalue(t: f64, m: usize, n_cal: usize, pi_th: f64) -> PyResult<f64> {
    contamtest::fisher_pvalue(t, m, n_cal, &ContamTestSpec::fisher(pi_th)).map_err(py_err)
}

#[pyfunction]
fn sum_pvalue(t: f64, m: usize, n_cal: usize, pi_th: f64) -> PyResult<f64> {
    contamtest::sum_pvalue(t, m, n_cal, &ContamTestSpec::sum(pi_th)).map_err(py_err)
}

/// Indices rejected by Benjamini-Hochberg at level `q`.
#[pyfunction]
fn bh(p: Vec<f64>, q: f64) -> PyResult<Vec<usize>> {
    let v = PValueVector::from_values(p).map_err(py_err)?;
    Ok(mht::bh(&v, q).map_err(py_err)?.rejected_indices)
}

/// Storey-BH; returns `(rejected indices, estimated number of nulls)`.
#[pyfunction]
fn storey_bh(p: Vec<f64>, alpha: f64, gamma: f64) -> PyResult<(Vec<usize>, f64)> {
    let v = PValueVector::from_values(p).map_err(py_err)?;
    let out = mht::storey_bh(&v, alpha, gamma).map_err(py_err)?;
    Ok((out.rejected_indices, out.k0_hat.unwrap_or(f64::NAN)))
}

#[pyfunction]
fn fdr_estimate(p: Vec<f64>, delta: f64, gamma: f64) -> PyResult<f64> {
    mht::storey_fdr_estimate(&p, delta, gamma).map_err(py_err)
}

/// Kolmogorov-Smirnov statistic and asymptotic p-value.
#[pyfunction]
fn ks_two_sample(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64)> {
    ks(&a, &b).map_err(py_err)
}

/// Choose collaborators; returns the decision as JSON.
#[pyfunction]
#[pyo3(signature = (agent_ids, statistics, p_values, mode, k_budget=None, alpha=None, gamma=None))]
fn select(
    agent_ids: Vec<String>,
    statistics: Vec<f64>,
    p_values: Vec<f64>,
    mode: &str,
    k_budget: Option<usize>,
    alpha: Option<f64>,
    gamma: Option<f64>,
) -> PyResult<String> {
    if agent_ids.len() != statistics.len() || agent_ids.len() != p_values.len() {
        return Err(DataError::new_err("agent_ids, statistics and p_values differ in length"));
    }
    let scores: Vec<AgentScore> = agent_ids
        .into_iter()
        .zip(statistics)
        .zip(p_values)
        .map(|((agent_id, statistic), p_value)| AgentScore {
            agent_id,
            statistic,
            p_value,
        })
        .collect();
    let gamma = gamma.unwrap_or(DEFAULT_GAMMA);
    let decision = match mode {
        "budget" => {
            let k = k_budget.ok_or_else(|| ConfigError::new_err("budget mode needs k_budget"))?;
            select_fixed_budget(&scores, k, gamma, DeltaPolicy::MaxUnselected)
        }
        "threshold" => {
            let alpha = alpha.ok_or_else(|| ConfigError::new_err("threshold mode needs alpha"))?;
            select_threshold(&scores, alpha, gamma)
        }
        other => return Err(ConfigError::new_err(format!("unknown mode {other:?}"))),
    }
    .map_err(py_err)?;
    to_json(&decision)
}

/// Monte Carlo study from a scenario config; returns the report as JSON.
#[pyfunction]
fn simulate(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let cfg: ScenarioConfig = from_json(config_json)?;
    let report = py.detach(|| run_study(&cfg)).map_err(py_err)?;
    to_json(&report)
}

/// Run the data sharing procedure on a simulated scenario; returns the
/// report as JSON.
#[pyfunction]
#[pyo3(signature = (config_json, replicate=0))]
fn protocol(py: Python<'_>, config_json: &str, replicate: u64) -> PyResult<String> {
    let cfg: ProtocolConfig = from_json(config_json)?;
    let report = py.detach(|| run_simulated_protocol(&cfg, replicate)).map_err(|f| py_err(f.error))?;
    to_json(&report)
}

#[pymodule]
fn contam(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("ContamException", py.get_type::<ContamException>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("DataError", py.get_type::<DataError>())?;
    m.add_class::<PyCalibration>()?;
    m.add_function(wrap_pyfunction!(log_binom_coef, m)?)?;
    m.add_function(wrap_pyfunction!(binom_pmf_inliers, m)?)?;
    m.add_function(wrap_pyfunction!(nhg_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(chi2_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(irwin_hall_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(contam_test, m)?)?;
    m.add_function(wrap_pyfunction!(storey_pvalue, m)?)?;
    m.add_function(wrap_pyfunction!(quantile_pvalue, m)?)?;
    m.add_function(wrap_pyfunction!(fisher_pvalue, m)?)?;
    m.add_function(wrap_pyfunction!(sum_pvalue, m)?)?;
    m.add_function(wrap_pyfunction!(bh, m)?)?;
    m.add_function(wrap_pyfunction!(storey_bh, m)?)?;
    m.add_function(wrap_pyfunction!(fdr_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(ks_two_sample, m)?)?;
    m.add_function(wrap_pyfunction!(select, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(protocol, m)?)?;
    Ok(())
}
