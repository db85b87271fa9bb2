//! Monte Carlo power, FDR and TDR over replicates of a Gaussian scenario.
//!
//! Replicates run in parallel, each on its own RNG stream, and are reduced in
//! replicate order, so results do not depend on the thread count.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scenario::{gen_scenario, Procedure, ScenarioConfig};
use crate::conformal::{conformal_pvalues, split_fit};
use crate::contamtest::{run_contam_test, TestFamily};
use crate::error::{ContamError, Result};
use crate::mht::{bh, storey_bh, PValueVector};
use crate::protocol::TestConfig;

/// One agent's test outcome in one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub replicate: u64,
    pub family: TestFamily,
    pub agent_id: String,
    pub pi: f64,
    pub is_null: bool,
    pub statistic: f64,
    pub p_value: f64,
    pub rejected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentOutcome {
    pub agent_id: String,
    pub pi: f64,
    pub is_null: bool,
    /// `(statistic, p_value)` per requested test, in request order.
    pub tests: Vec<(f64, f64)>,
}

/// Contamination p-values of every agent's round-1 batch in replicate `rep`.
pub fn simulate_replicate(cfg: &ScenarioConfig, rep: u64, tests: &[TestConfig]) -> Result<Vec<AgentOutcome>> {
    let sc = gen_scenario(cfg, rep)?;
    let cal = split_fit(&sc.null_sample, cfg.ell, cfg.score_kind().trainer().as_ref())?;
    let specs = tests
        .iter()
        .map(|t| t.resolve(cfg.pi_th, cfg.m, cal.n_cal()))
        .collect::<Result<Vec<_>>>()?;
    sc.agents
        .iter()
        .map(|a| {
            let batch = a.batch(1, cfg.m).expect("scenario holds at least one batch");
            let p = conformal_pvalues(&cal, batch)?;
            let tests = specs
                .iter()
                .map(|s| run_contam_test(&p, s).map(|r| (r.statistic, r.p_value)))
                .collect::<Result<Vec<_>>>()?;
            Ok(AgentOutcome {
                agent_id: a.agent_id.clone(),
                pi: a.pi,
                is_null: a.is_null(cfg.pi_th),
                tests,
            })
        })
        .collect()
}

/// All replicates, in replicate order.
pub fn simulate_pvalues(cfg: &ScenarioConfig, tests: &[TestConfig]) -> Result<Vec<Vec<AgentOutcome>>> {
    cfg.validate()?;
    (0..cfg.replicates as u64)
        .into_par_iter()
        .map(|rep| simulate_replicate(cfg, rep, tests))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McCell {
    pub family: TestFamily,
    /// `power`, `fdr` or `tdr`.
    pub metric: String,
    pub alpha: f64,
    pub estimate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McReport {
    pub replicates: usize,
    pub runtime_secs: f64,
    pub cells: Vec<McCell>,
    #[serde(skip)]
    pub rows: Vec<McRow>,
}

impl McReport {
    pub fn cell(&self, family: TestFamily, metric: &str) -> Option<&McCell> {
        self.cells.iter().find(|c| c.family == family && c.metric == metric)
    }
}

/// `sqrt(p (1 - p) / R)`.
pub fn binomial_se(p: f64, replicates: usize) -> f64 {
    if replicates == 0 {
        return 0.0;
    }
    (p * (1.0 - p) / replicates as f64).max(0.0).sqrt()
}

/// Fraction of `p_values` at or below `alpha`, with its standard error.
pub fn rejection_rate(p_values: &[f64], alpha: f64) -> (f64, f64) {
    if p_values.is_empty() {
        return (0.0, 0.0);
    }
    let r = p_values.iter().filter(|&&u| u <= alpha).count() as f64 / p_values.len() as f64;
    (r, binomial_se(r, p_values.len()))
}

fn rows_single(out: &[Vec<AgentOutcome>], families: &[TestFamily], alpha: f64) -> Vec<McRow> {
    let mut rows = Vec::new();
    for (rep, agents) in out.iter().enumerate() {
        for (j, &family) in families.iter().enumerate() {
            for a in agents {
                let (statistic, p_value) = a.tests[j];
                rows.push(McRow {
                    replicate: rep as u64,
                    family,
                    agent_id: a.agent_id.clone(),
                    pi: a.pi,
                    is_null: a.is_null,
                    statistic,
                    p_value,
                    rejected: p_value <= alpha,
                });
            }
        }
    }
    rows
}

fn tests_for(cfg: &ScenarioConfig, families: &[TestFamily]) -> Vec<TestConfig> {
    families.iter().map(|&f| cfg.test_config(f)).collect()
}

/// Single-agent rejection rate `P(u <= alpha)` per family.
pub fn mc_power(cfg: &ScenarioConfig, families: &[TestFamily]) -> Result<McReport> {
    if cfg.agents != 1 {
        return Err(ContamError::config("power studies need exactly one agent"));
    }
    let start = Instant::now();
    let out = simulate_pvalues(cfg, &tests_for(cfg, families))?;
    let cells = families
        .iter()
        .enumerate()
        .map(|(j, &family)| {
            let u: Vec<f64> = out.iter().map(|agents| agents[0].tests[j].1).collect();
            let (estimate, se) = rejection_rate(&u, cfg.alpha);
            McCell {
                family,
                metric: "power".to_string(),
                alpha: cfg.alpha,
                estimate,
                se,
            }
        })
        .collect();
    Ok(McReport {
        replicates: cfg.replicates,
        runtime_secs: start.elapsed().as_secs_f64(),
        cells,
        rows: rows_single(&out, families, cfg.alpha),
    })
}

/// Per-replicate false discovery and true discovery proportions of one
/// multiple-testing run: `V / max(1, R)` and `S / max(1, K - K0)`.
pub fn fdp_tdp(agents: &[AgentOutcome], j: usize, procedure: Procedure, alpha: f64, gamma: f64) -> Result<(f64, f64, Vec<bool>)> {
    let p = PValueVector::new(
        agents.iter().map(|a| a.tests[j].1).collect(),
        agents.iter().map(|a| a.agent_id.clone()).collect(),
    )?;
    let outcome = match procedure {
        Procedure::Bh => bh(&p, alpha)?,
        Procedure::StoreyBh => storey_bh(&p, alpha, gamma)?,
    };
    let rejected: Vec<bool> = (0..agents.len()).map(|i| outcome.is_rejected(i)).collect();
    let r = outcome.kappa;
    let v = agents.iter().zip(&rejected).filter(|(a, &x)| x && a.is_null).count();
    let s = r - v;
    let alternatives = agents.iter().filter(|a| !a.is_null).count();
    Ok((v as f64 / r.max(1) as f64, s as f64 / alternatives.max(1) as f64, rejected))
}

/// Empirical FDR and TDR per family under the scenario's procedure.
pub fn mc_fdr_tdr(cfg: &ScenarioConfig, families: &[TestFamily]) -> Result<McReport> {
    if cfg.agents < 2 {
        return Err(ContamError::config("FDR studies need at least two agents"));
    }
    let start = Instant::now();
    let out = simulate_pvalues(cfg, &tests_for(cfg, families))?;
    let mut cells = Vec::new();
    let mut rows = Vec::new();
    for (j, &family) in families.iter().enumerate() {
        let mut fdp = Vec::with_capacity(out.len());
        let mut tdp = Vec::with_capacity(out.len());
        for (rep, agents) in out.iter().enumerate() {
            let (f, t, rejected) = fdp_tdp(agents, j, cfg.procedure, cfg.alpha, cfg.gamma)?;
            fdp.push(f);
            tdp.push(t);
            for (a, rej) in agents.iter().zip(rejected) {
                rows.push(McRow {
                    replicate: rep as u64,
                    family,
                    agent_id: a.agent_id.clone(),
                    pi: a.pi,
                    is_null: a.is_null,
                    statistic: a.tests[j].0,
                    p_value: a.tests[j].1,
                    rejected: rej,
                });
            }
        }
        for (metric, xs) in [("fdr", &fdp), ("tdr", &tdp)] {
            let estimate = xs.iter().sum::<f64>() / xs.len().max(1) as f64;
            cells.push(McCell {
                family,
                metric: metric.to_string(),
                alpha: cfg.alpha,
                estimate,
                se: binomial_se(estimate, xs.len()),
            });
        }
    }
    Ok(McReport {
        replicates: cfg.replicates,
        runtime_secs: start.elapsed().as_secs_f64(),
        cells,
        rows,
    })
}

/// Power study for one agent, FDR/TDR study otherwise.
pub fn run_study(cfg: &ScenarioConfig) -> Result<McReport> {
    cfg.validate()?;
    if cfg.agents == 1 {
        mc_power(cfg, &cfg.families)
    } else {
        mc_fdr_tdr(cfg, &cfg.families)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::scenario::Contamination;

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            n: 60,
            m: 20,
            replicates: 40,
            rounds: 1,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn strong_signal_gives_full_power() {
        let cfg = ScenarioConfig {
            contamination: Contamination::Fixed { pi: vec![1.0] },
            pi_th: 0.0,
            ..small()
        };
        let r = mc_power(&cfg, &[TestFamily::Storey, TestFamily::Quantile]).unwrap();
        for c in &r.cells {
            assert_eq!(c.estimate, 1.0, "{c:?}");
            assert_eq!(c.se, 0.0);
        }
        assert_eq!(r.rows.len(), 80);
    }

    #[test]
    fn no_true_nulls_means_zero_fdr() {
        let cfg = ScenarioConfig {
            agents: 4,
            contamination: Contamination::Fixed { pi: vec![1.0] },
            pi_th: 0.0,
            ..small()
        };
        let r = mc_fdr_tdr(&cfg, &[TestFamily::Storey]).unwrap();
        assert_eq!(r.cell(TestFamily::Storey, "fdr").unwrap().estimate, 0.0);
        assert!(r.cell(TestFamily::Storey, "tdr").unwrap().estimate > 0.9);
    }

    #[test]
    fn thread_count_does_not_matter() {
        let cfg = ScenarioConfig {
            agents: 3,
            contamination: Contamination::Uniform,
            ..small()
        };
        let tests = tests_for(&cfg, &TestFamily::CLASSIC);
        let serial = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| simulate_pvalues(&cfg, &tests).unwrap());
        let parallel = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| simulate_pvalues(&cfg, &tests).unwrap());
        assert_eq!(serial, parallel);
    }

    #[test]
    fn rate_and_se() {
        let (r, se) = rejection_rate(&[0.01, 0.2, 0.04, 0.5], 0.05);
        assert_eq!(r, 0.5);
        assert!((se - 0.25).abs() < 1e-15);
    }
}
