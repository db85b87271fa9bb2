//! Gaussian scenario: inliers `N(0, I)`, outliers `N(mu1 * 1, I)`.
//!
//! With `two_class` set, the null law is a balanced mixture of two labeled
//! classes centred at `-(mu1/2) * 1` (label 0) and `+(mu1/2) * 1` (label 1),
//! and an outlier is a class-1 point carrying label 0.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conformal::{Datapoint, ScoreKind};
use crate::contamtest::{default_i0, default_lambda, TestFamily};
use crate::error::{ContamError, Result};
use crate::protocol::{
    run_procedure_with, AgentDataSource, Evaluator, Hooks, KeepAll, NearestCentroid, ProtocolConfig, ProtocolFailure,
    ProtocolReport, TestConfig,
};

/// How each agent's contamination factor is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum Contamination {
    /// One value per agent, or a single value shared by all.
    Fixed { pi: Vec<f64> },
    /// iid standard uniform per agent and replicate.
    Uniform,
    /// The first `k0` agents get `pi0`, the rest `pi1`.
    Split { k0: usize, pi0: f64, pi1: f64 },
}

impl Default for Contamination {
    fn default() -> Self {
        Contamination::Fixed { pi: vec![0.1] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CountRule {
    /// Outlier count `Bin(m, pi)` drawn afresh for every batch.
    #[default]
    BinomialPerBatch,
    /// One `Bin(rounds * m, pi)` count over everything the agent holds,
    /// scattered uniformly across its batches.
    BinomialPer2m,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Procedure {
    Bh,
    #[default]
    StoreyBh,
}

fn d_dim() -> usize {
    2
}
fn d_mu1() -> f64 {
    4.0
}
fn d_n() -> usize {
    200
}
fn d_m() -> usize {
    100
}
fn d_agents() -> usize {
    1
}
fn d_pi_th() -> f64 {
    0.1
}
fn d_alpha() -> f64 {
    0.05
}
fn d_gamma() -> f64 {
    0.5
}
fn d_replicates() -> usize {
    1000
}
fn d_rounds() -> usize {
    2
}
fn d_families() -> Vec<TestFamily> {
    TestFamily::CLASSIC.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "d_dim")]
    pub dim: usize,
    #[serde(default = "d_mu1")]
    pub mu1: f64,
    #[serde(default = "d_n")]
    pub n: usize,
    #[serde(default)]
    pub ell: usize,
    #[serde(default = "d_m")]
    pub m: usize,
    #[serde(default = "d_agents")]
    pub agents: usize,
    #[serde(default)]
    pub contamination: Contamination,
    #[serde(default = "d_pi_th")]
    pub pi_th: f64,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i0: Option<usize>,
    #[serde(default = "d_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    /// Unset means per batch in studies and per `2m` in protocol runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count_rule: Option<CountRule>,
    #[serde(default = "d_rounds")]
    pub rounds: usize,
    #[serde(default)]
    pub score: Option<ScoreKind>,
    #[serde(default)]
    pub two_class: bool,
    /// Clean labeled points generated for evaluation.
    #[serde(default)]
    pub holdout: usize,
    #[serde(default = "d_families")]
    pub families: Vec<TestFamily>,
    #[serde(default)]
    pub procedure: Procedure,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n == 0 || self.m == 0 || self.agents == 0 || self.rounds == 0 {
            return Err(ContamError::config("dim, n, m, agents and rounds must be positive"));
        }
        if self.ell >= self.n {
            return Err(ContamError::config(format!(
                "ell = {} leaves no calibration points out of n = {}",
                self.ell, self.n
            )));
        }
        if !self.mu1.is_finite() {
            return Err(ContamError::config("mu1 must be finite"));
        }
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        match &self.contamination {
            Contamination::Fixed { pi } => {
                if pi.len() != 1 && pi.len() != self.agents {
                    return Err(ContamError::config(format!(
                        "{} contamination factors for {} agents",
                        pi.len(),
                        self.agents
                    )));
                }
                if !pi.iter().all(|&p| unit(p)) {
                    return Err(ContamError::config("contamination factors must lie in [0, 1]"));
                }
            }
            Contamination::Uniform => {}
            Contamination::Split { k0, pi0, pi1 } => {
                if *k0 > self.agents || !unit(*pi0) || !unit(*pi1) {
                    return Err(ContamError::config("invalid split contamination rule"));
                }
            }
        }
        if self.families.is_empty() || self.families.contains(&TestFamily::GenericG) {
            return Err(ContamError::config("families must be a non-empty subset of storey, quantile, fisher, sum"));
        }
        Ok(())
    }

    pub fn n_cal(&self) -> usize {
        self.n - self.ell
    }

    pub fn score_kind(&self) -> ScoreKind {
        self.score.unwrap_or(if self.two_class {
            ScoreKind::ClasswiseKnn(1)
        } else {
            ScoreKind::NegNorm
        })
    }

    /// Test configuration for `family` with this scenario's hyperparameters.
    pub fn test_config(&self, family: TestFamily) -> TestConfig {
        let mut t = TestConfig::new(family);
        match family {
            TestFamily::Storey => t.lambda = Some(self.lambda.unwrap_or_else(|| default_lambda(self.n_cal()))),
            TestFamily::Quantile => t.i0 = Some(self.i0.unwrap_or_else(|| default_i0(self.m))),
            _ => {}
        }
        t
    }

    pub fn agent_id(k: usize) -> String {
        format!("agent-{}", k + 1)
    }
}

/// Everything one agent holds: `rounds * m` points in delivery order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentData {
    pub agent_id: String,
    pub pi: f64,
    pub points: Vec<Datapoint>,
    pub outlier: Vec<bool>,
}

impl AgentData {
    /// Whether the agent satisfies `pi <= pi_th`.
    pub fn is_null(&self, pi_th: f64) -> bool {
        self.pi <= pi_th
    }

    pub fn batch(&self, round: usize, m: usize) -> Option<&[Datapoint]> {
        let start = round.checked_sub(1)?.checked_mul(m)?;
        self.points.get(start..start.checked_add(m)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub null_sample: Vec<Datapoint>,
    pub agents: Vec<AgentData>,
    pub holdout: Vec<Datapoint>,
}

struct Gen<'a> {
    cfg: &'a ScenarioConfig,
    rng: ChaCha8Rng,
}

impl Gen<'_> {
    fn gaussian(&mut self, centre: f64) -> Vec<f64> {
        (0..self.cfg.dim)
            .map(|_| centre + self.rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn inlier(&mut self) -> Datapoint {
        if self.cfg.two_class {
            let label = self.rng.random_bool(0.5) as i64;
            let centre = if label == 1 { self.cfg.mu1 / 2.0 } else { -self.cfg.mu1 / 2.0 };
            Datapoint::labeled(self.gaussian(centre), label)
        } else {
            Datapoint::new(self.gaussian(0.0))
        }
    }

    fn outlier(&mut self) -> Datapoint {
        if self.cfg.two_class {
            Datapoint::labeled(self.gaussian(self.cfg.mu1 / 2.0), 0)
        } else {
            Datapoint::new(self.gaussian(self.cfg.mu1))
        }
    }

    fn binomial(&mut self, trials: usize, p: f64) -> usize {
        Binomial::new(trials as u64, p)
            .expect("validated probability")
            .sample(&mut self.rng) as usize
    }

    fn agent(&mut self, k: usize, pi: f64) -> AgentData {
        let (m, rounds) = (self.cfg.m, self.cfg.rounds);
        let mut outlier = Vec::with_capacity(m * rounds);
        match self.cfg.count_rule.unwrap_or_default() {
            CountRule::BinomialPerBatch => {
                for _ in 0..rounds {
                    let c = self.binomial(m, pi);
                    let mut mask: Vec<bool> = (0..m).map(|i| i < c).collect();
                    mask.shuffle(&mut self.rng);
                    outlier.extend(mask);
                }
            }
            CountRule::BinomialPer2m => {
                let c = self.binomial(m * rounds, pi);
                let mut mask: Vec<bool> = (0..m * rounds).map(|i| i < c).collect();
                mask.shuffle(&mut self.rng);
                outlier = mask;
            }
        }
        let points = outlier
            .iter()
            .map(|&o| if o { self.outlier() } else { self.inlier() })
            .collect();
        AgentData {
            agent_id: ScenarioConfig::agent_id(k),
            pi,
            points,
            outlier,
        }
    }
}

/// Draw replicate `rep`. The stream depends only on `(seed, rep)`.
pub fn gen_scenario(cfg: &ScenarioConfig, rep: u64) -> Result<Scenario> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(rep);
    let mut g = Gen { cfg, rng };
    let null_sample = (0..cfg.n).map(|_| g.inlier()).collect();
    let pis: Vec<f64> = match &cfg.contamination {
        Contamination::Fixed { pi } if pi.len() == 1 => vec![pi[0]; cfg.agents],
        Contamination::Fixed { pi } => pi.clone(),
        Contamination::Uniform => (0..cfg.agents).map(|_| g.rng.random::<f64>()).collect(),
        Contamination::Split { k0, pi0, pi1 } => (0..cfg.agents)
            .map(|k| if k < *k0 { *pi0 } else { *pi1 })
            .collect(),
    };
    let agents = pis.iter().enumerate().map(|(k, &pi)| g.agent(k, pi)).collect();
    let holdout = (0..cfg.holdout).map(|_| g.inlier()).collect();
    Ok(Scenario {
        null_sample,
        agents,
        holdout,
    })
}

/// Serves a generated scenario to the data-sharing procedure.
pub struct GaussianSource {
    scenario: Scenario,
}

impl GaussianSource {
    pub fn new(cfg: &ScenarioConfig, rep: u64) -> Result<Self> {
        Ok(Self {
            scenario: gen_scenario(cfg, rep)?,
        })
    }

    pub fn from_scenario(scenario: Scenario) -> Self {
        Self { scenario }
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }
}

impl AgentDataSource for GaussianSource {
    fn local_data(&self) -> Result<Vec<Datapoint>> {
        Ok(self.scenario.null_sample.clone())
    }

    fn agent_ids(&self) -> Vec<String> {
        self.scenario.agents.iter().map(|a| a.agent_id.clone()).collect()
    }

    fn fetch(&self, agent: &str, round: usize, m: usize) -> Result<Vec<Datapoint>> {
        let data = self
            .scenario
            .agents
            .iter()
            .find(|a| a.agent_id == agent)
            .ok_or_else(|| ContamError::Protocol(format!("unknown agent {agent}")))?;
        data.batch(round, m)
            .map(<[Datapoint]>::to_vec)
            .ok_or_else(|| ContamError::Protocol(format!("agent {agent} has no data left for round {round}")))
    }

    fn holdout(&self) -> Option<Vec<Datapoint>> {
        (!self.scenario.holdout.is_empty()).then(|| self.scenario.holdout.clone())
    }
}

/// The scenario a protocol config runs on: its `scenario` block (or the
/// defaults) with the protocol's sizes, rounds and seed imposed. Outlier
/// counts default to one binomial draw over all rounds.
pub fn protocol_scenario(cfg: &ProtocolConfig) -> ScenarioConfig {
    let mut scenario = cfg.scenario.clone().unwrap_or_default();
    scenario.n = cfg.n;
    scenario.ell = cfg.ell;
    scenario.m = cfg.m;
    scenario.rounds = cfg.rounds;
    scenario.seed = cfg.seed;
    scenario.count_rule.get_or_insert(CountRule::BinomialPer2m);
    scenario
}

/// Run the procedure on replicate `rep` of the config's simulated scenario.
/// Labeled scenarios are scored on their holdout by a nearest-centroid
/// classifier. The report echoes the effective scenario.
pub fn run_simulated_protocol(cfg: &ProtocolConfig, rep: u64) -> std::result::Result<ProtocolReport, ProtocolFailure> {
    cfg.validate()?;
    let scenario = protocol_scenario(cfg);
    let source = GaussianSource::new(&scenario, rep)?;
    let evaluator: Option<&dyn Evaluator> = if scenario.two_class { Some(&NearestCentroid) } else { None };
    let cfg = ProtocolConfig {
        scenario: Some(scenario),
        ..cfg.clone()
    };
    let hooks = Hooks {
        subset: &KeepAll,
        evaluator,
    };
    run_procedure_with(&cfg, &source, &hooks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ScenarioConfig {
        ScenarioConfig {
            n: 20,
            m: 10,
            agents: 3,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_per_replicate() {
        let c = cfg();
        assert_eq!(gen_scenario(&c, 3).unwrap(), gen_scenario(&c, 3).unwrap());
        assert_ne!(gen_scenario(&c, 3).unwrap(), gen_scenario(&c, 4).unwrap());
    }

    #[test]
    fn extreme_factors() {
        let mut c = cfg();
        c.contamination = Contamination::Fixed { pi: vec![0.0] };
        let s = gen_scenario(&c, 0).unwrap();
        assert!(s.agents.iter().all(|a| a.outlier.iter().all(|o| !o)));
        c.contamination = Contamination::Fixed { pi: vec![1.0] };
        c.count_rule = Some(CountRule::BinomialPer2m);
        let s = gen_scenario(&c, 0).unwrap();
        assert!(s.agents.iter().all(|a| a.outlier.iter().all(|&o| o)));
        assert_eq!(s.agents[0].points.len(), 20);
    }

    #[test]
    fn split_rule_and_sizes() {
        let mut c = cfg();
        c.contamination = Contamination::Split { k0: 1, pi0: 0.1, pi1: 0.3 };
        let s = gen_scenario(&c, 0).unwrap();
        let pis: Vec<f64> = s.agents.iter().map(|a| a.pi).collect();
        assert_eq!(pis, vec![0.1, 0.3, 0.3]);
        assert_eq!(s.null_sample.len(), 20);
        assert!(s.agents.iter().all(|a| a.points.len() == 20 && a.points[0].dim() == 2));
    }

    #[test]
    fn source_exhausts() {
        let src = GaussianSource::new(&cfg(), 0).unwrap();
        assert_eq!(src.fetch("agent-1", 2, 10).unwrap().len(), 10);
        assert!(matches!(src.fetch("agent-1", 3, 10), Err(ContamError::Protocol(_))));
    }

    #[test]
    fn bad_config() {
        let mut c = cfg();
        c.contamination = Contamination::Fixed { pi: vec![0.1, 0.2] };
        assert!(gen_scenario(&c, 0).is_err());
        c = cfg();
        c.ell = 20;
        assert!(gen_scenario(&c, 0).is_err());
    }
}
