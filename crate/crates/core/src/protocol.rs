//! Multi-round data sharing between a requesting agent and `K` data agents.
//!
//! Round 1 collects a batch of `m` points from every agent, scores each batch
//! with a contamination test against the requester's calibration set, and
//! selects collaborators either by a fixed budget (largest statistics) or as
//! the agents not rejected by Storey-BH. Later rounds acquire data only from
//! the selected agents. Everything received is then passed through a subset
//! selection hook and handed to an evaluator.

use std::collections::BTreeSet;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{conformal_pvalues, split_fit, ConformalCalibration, ConformalPValues, Datapoint, ScoreKind};
use crate::contamtest::{default_i0, default_lambda, run_contam_test, ContamTestSpec, FisherFormula, TestFamily};
use crate::error::{ContamError, Result};
use crate::mht::{storey_bh, storey_fdr_estimate, MultipleTestOutcome, PValueVector};

/// `gamma` of the FDR estimate when the config leaves it unset.
pub const DEFAULT_GAMMA: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentBatch {
    pub agent_id: String,
    pub points: Vec<Datapoint>,
}

/// The part of an assessment that selection looks at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentScore {
    pub agent_id: String,
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentAssessment {
    pub agent_id: String,
    pub statistic: f64,
    pub p_value: f64,
    pub pvalues: ConformalPValues,
}

impl AgentAssessment {
    pub fn score(&self) -> AgentScore {
        AgentScore {
            agent_id: self.agent_id.clone(),
            statistic: self.statistic,
            p_value: self.p_value,
        }
    }
}

/// An agent dropped from selection, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentError {
    pub agent_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundOne {
    pub assessments: Vec<AgentAssessment>,
    pub excluded: Vec<AgentError>,
}

/// Test family and hyperparameters; unset hyperparameters take their
/// defaults once `m` and `n_cal` are known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestConfig {
    pub family: TestFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i0: Option<usize>,
    #[serde(default)]
    pub fisher_formula: FisherFormula,
}

impl TestConfig {
    pub fn new(family: TestFamily) -> Self {
        Self {
            family,
            lambda: None,
            i0: None,
            fisher_formula: FisherFormula::Derived,
        }
    }

    pub fn resolve(&self, pi_th: f64, m: usize, n_cal: usize) -> Result<ContamTestSpec> {
        let spec = match self.family {
            TestFamily::Storey => {
                ContamTestSpec::storey(pi_th, self.lambda.unwrap_or_else(|| default_lambda(n_cal)))
            }
            TestFamily::Quantile => ContamTestSpec::quantile(pi_th, self.i0.unwrap_or_else(|| default_i0(m))),
            TestFamily::Fisher => ContamTestSpec {
                fisher_formula: self.fisher_formula,
                ..ContamTestSpec::fisher(pi_th)
            },
            TestFamily::Sum => ContamTestSpec::sum(pi_th),
            TestFamily::GenericG => {
                return Err(ContamError::config("the generic-G test cannot be configured from a file"))
            }
        };
        if self.lambda.is_some() && self.family != TestFamily::Storey {
            return Err(ContamError::config(format!("lambda does not apply to the {} test", self.family)));
        }
        if self.i0.is_some() && self.family != TestFamily::Quantile {
            return Err(ContamError::config(format!("i0 does not apply to the {} test", self.family)));
        }
        spec.validate(m, n_cal)?;
        Ok(spec)
    }
}

/// Score every round-1 batch independently. Agents whose batch is empty or
/// cannot be scored are excluded and reported.
pub fn assess_round1(cal: &ConformalCalibration, batches: &[AgentBatch], test: &TestConfig, pi_th: f64) -> RoundOne {
    let results: Vec<std::result::Result<AgentAssessment, AgentError>> = batches
        .par_iter()
        .map(|batch| {
            assess_batch(cal, batch, test, pi_th).map_err(|e| AgentError {
                agent_id: batch.agent_id.clone(),
                error: e.to_string(),
            })
        })
        .collect();
    let mut out = RoundOne::default();
    for r in results {
        match r {
            Ok(a) => out.assessments.push(a),
            Err(e) => out.excluded.push(e),
        }
    }
    out
}

fn assess_batch(cal: &ConformalCalibration, batch: &AgentBatch, test: &TestConfig, pi_th: f64) -> Result<AgentAssessment> {
    if batch.points.is_empty() {
        return Err(ContamError::data("empty batch"));
    }
    let pvalues = conformal_pvalues(cal, &batch.points)?;
    let spec = test.resolve(pi_th, pvalues.len(), pvalues.n_cal())?;
    let result = run_contam_test(&pvalues, &spec)?;
    Ok(AgentAssessment {
        agent_id: batch.agent_id.clone(),
        statistic: result.statistic,
        p_value: result.p_value,
        pvalues,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    #[serde(rename = "budget")]
    FixedBudget,
    Threshold,
}

impl std::str::FromStr for SelectionMode {
    type Err = ContamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "budget" => Ok(SelectionMode::FixedBudget),
            "threshold" => Ok(SelectionMode::Threshold),
            _ => Err(ContamError::config(format!("unknown selection mode `{s}`"))),
        }
    }
}

/// Where to put the rejection cutoff `delta` of the FDR estimate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaPolicy {
    /// Largest p-value among the agents left out.
    #[default]
    MaxUnselected,
    Fixed(f64),
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionDecision {
    pub selected: Vec<String>,
    pub mode: SelectionMode,
    pub fdr_estimate: Option<f64>,
    pub mht_outcome: Option<MultipleTestOutcome>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

fn fdr_for_unselected(scores: &[AgentScore], selected: &BTreeSet<&str>, gamma: f64, policy: DeltaPolicy) -> Result<Option<f64>> {
    let delta = match policy {
        DeltaPolicy::Off => return Ok(None),
        DeltaPolicy::Fixed(d) => d,
        DeltaPolicy::MaxUnselected => {
            let max = scores
                .iter()
                .filter(|s| !selected.contains(s.agent_id.as_str()))
                .map(|s| s.p_value)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Ok(None);
            }
            max
        }
    };
    let p: Vec<f64> = scores.iter().map(|s| s.p_value).collect();
    storey_fdr_estimate(&p, delta, gamma).map(Some)
}

/// Keep the `k_budget` agents with the largest statistics, ordered by
/// statistic descending, then p-value ascending, then agent id.
pub fn select_fixed_budget(scores: &[AgentScore], k_budget: usize, gamma: f64, delta: DeltaPolicy) -> Result<SelectionDecision> {
    if k_budget == 0 {
        return Err(ContamError::config("the collaboration budget must be at least 1"));
    }
    let mut warnings = Vec::new();
    if k_budget > scores.len() {
        warnings.push(format!(
            "budget {k_budget} exceeds the {} assessed agents; selecting all",
            scores.len()
        ));
    }
    let mut order: Vec<&AgentScore> = scores.iter().collect();
    order.sort_by(|a, b| {
        b.statistic
            .total_cmp(&a.statistic)
            .then(a.p_value.total_cmp(&b.p_value))
            .then_with(|| a.agent_id.cmp(&b.agent_id))
    });
    let selected: Vec<String> = order
        .iter()
        .take(k_budget)
        .map(|s| s.agent_id.clone())
        .collect();
    let set: BTreeSet<&str> = selected.iter().map(String::as_str).collect();
    let fdr_estimate = fdr_for_unselected(scores, &set, gamma, delta)?;
    Ok(SelectionDecision {
        selected,
        mode: SelectionMode::FixedBudget,
        fdr_estimate,
        mht_outcome: None,
        warnings,
    })
}

/// Keep every agent that Storey-BH at `(alpha, gamma)` does not reject, in
/// input order.
pub fn select_threshold(scores: &[AgentScore], alpha: f64, gamma: f64) -> Result<SelectionDecision> {
    let p = PValueVector::new(
        scores.iter().map(|s| s.p_value).collect(),
        scores.iter().map(|s| s.agent_id.clone()).collect(),
    )?;
    let outcome = storey_bh(&p, alpha, gamma)?;
    let selected: Vec<String> = (0..scores.len())
        .filter(|&i| !outcome.is_rejected(i))
        .map(|i| scores[i].agent_id.clone())
        .collect();
    let set: BTreeSet<&str> = selected.iter().map(String::as_str).collect();
    let fdr_estimate = fdr_for_unselected(scores, &set, gamma, DeltaPolicy::MaxUnselected)?;
    Ok(SelectionDecision {
        selected,
        mode: SelectionMode::Threshold,
        fdr_estimate,
        mht_outcome: Some(outcome),
        warnings: Vec::new(),
    })
}

/// Where the requester's local data and every agent's batches come from.
pub trait AgentDataSource: Sync {
    /// The requester's own `n` null points.
    fn local_data(&self) -> Result<Vec<Datapoint>>;
    fn agent_ids(&self) -> Vec<String>;
    /// Batch of `m` points from `agent` in `round` (1-based). Returns a
    /// protocol error once the agent has nothing left.
    fn fetch(&self, agent: &str, round: usize, m: usize) -> Result<Vec<Datapoint>>;
    /// Clean labeled points for evaluating the final model.
    fn holdout(&self) -> Option<Vec<Datapoint>> {
        None
    }
}

/// Post-acquisition data subset selection.
pub trait SubsetSelector: Sync {
    fn select(&self, data: Vec<Datapoint>) -> Vec<Datapoint>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct KeepAll;

impl SubsetSelector for KeepAll {
    fn select(&self, data: Vec<Datapoint>) -> Vec<Datapoint> {
        data
    }
}

/// Trains on `training` and returns a score on `validation` (larger is better).
pub trait Evaluator: Sync {
    fn name(&self) -> &str;
    fn evaluate(&self, training: &[Datapoint], validation: &[Datapoint]) -> Result<f64>;
}

/// Nearest class centroid, scored by validation accuracy.
#[derive(Debug, Clone, Copy, Default)]
pub struct NearestCentroid;

impl Evaluator for NearestCentroid {
    fn name(&self) -> &str {
        "nearest-centroid"
    }

    fn evaluate(&self, training: &[Datapoint], validation: &[Datapoint]) -> Result<f64> {
        let mut sums: std::collections::BTreeMap<i64, (Vec<f64>, usize)> = Default::default();
        for p in training {
            let label = p
                .label
                .ok_or_else(|| ContamError::data("nearest-centroid training needs labels"))?;
            let entry = sums.entry(label).or_insert_with(|| (vec![0.0; p.dim()], 0));
            if entry.0.len() != p.dim() {
                return Err(ContamError::data("training points differ in dimension"));
            }
            entry.0.iter_mut().zip(&p.features).for_each(|(s, x)| *s += x);
            entry.1 += 1;
        }
        if sums.is_empty() {
            return Err(ContamError::data("no training data"));
        }
        let centroids: Vec<(i64, Vec<f64>)> = sums
            .into_iter()
            .map(|(l, (s, c))| (l, s.into_iter().map(|v| v / c as f64).collect()))
            .collect();
        if validation.is_empty() {
            return Err(ContamError::data("no validation data"));
        }
        let mut correct = 0usize;
        for p in validation {
            let label = p
                .label
                .ok_or_else(|| ContamError::data("nearest-centroid validation needs labels"))?;
            let predicted = centroids
                .iter()
                .map(|(l, c)| {
                    let d: f64 = c.iter().zip(&p.features).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d, *l)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .map(|(_, l)| l)
                .expect("at least one centroid");
            correct += (predicted == label) as usize;
        }
        Ok(correct as f64 / validation.len() as f64)
    }
}

/// Procedure inputs, read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub ell: usize,
    pub n: usize,
    pub m: usize,
    pub score: ScoreKind,
    pub test: TestConfig,
    pub mode: SelectionMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_budget: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub pi_th: f64,
    pub rounds: usize,
    pub seed: u64,
    /// Simulated agents for the command line runner.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<crate::harness::ScenarioConfig>,
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(ContamError::config("n and m must be positive"));
        }
        if self.ell >= self.n {
            return Err(ContamError::config(format!(
                "ell = {} leaves no calibration points out of n = {}",
                self.ell, self.n
            )));
        }
        if self.rounds < 2 {
            return Err(ContamError::config("the procedure needs at least 2 rounds"));
        }
        if !(0.0..1.0).contains(&self.pi_th) {
            return Err(ContamError::config(format!("pi_th = {} must lie in [0, 1)", self.pi_th)));
        }
        match self.mode {
            SelectionMode::FixedBudget => {
                if self.k_budget.unwrap_or(0) == 0 {
                    return Err(ContamError::config("budget mode needs k_budget >= 1"));
                }
            }
            SelectionMode::Threshold => {
                if self.alpha.is_none() || self.gamma.is_none() {
                    return Err(ContamError::config("threshold mode needs alpha and gamma"));
                }
            }
        }
        self.test.resolve(self.pi_th, self.m, self.n - self.ell)?;
        Ok(())
    }

    fn gamma(&self) -> f64 {
        self.gamma.unwrap_or(DEFAULT_GAMMA)
    }

    fn select(&self, scores: &[AgentScore]) -> Result<SelectionDecision> {
        self.select_with_budget(scores, self.k_budget.unwrap_or(0))
    }

    fn select_with_budget(&self, scores: &[AgentScore], k_budget: usize) -> Result<SelectionDecision> {
        match self.mode {
            SelectionMode::FixedBudget => select_fixed_budget(scores, k_budget, self.gamma(), DeltaPolicy::MaxUnselected),
            SelectionMode::Threshold => select_threshold(scores, self.alpha.unwrap_or(0.0), self.gamma()),
        }
    }
}

/// One batch received from one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Acquisition {
    pub round: usize,
    pub agent_id: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub evaluator: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub config: ProtocolConfig,
    pub n_cal: usize,
    pub assessments: Vec<AgentAssessment>,
    pub excluded: Vec<AgentError>,
    pub decision: Option<SelectionDecision>,
    pub acquisitions: Vec<Acquisition>,
    pub local_points: usize,
    pub acquired_points: usize,
    pub training_points: usize,
    pub evaluation: Option<Evaluation>,
}

impl ProtocolReport {
    fn empty(config: &ProtocolConfig, n_cal: usize) -> Self {
        Self {
            config: config.clone(),
            n_cal,
            assessments: Vec::new(),
            excluded: Vec::new(),
            decision: None,
            acquisitions: Vec::new(),
            local_points: 0,
            acquired_points: 0,
            training_points: 0,
            evaluation: None,
        }
    }

    pub fn total_points(&self) -> usize {
        self.local_points + self.acquired_points
    }

    /// Every batch after round 1 came from a selected agent.
    pub fn verify_provenance(&self) -> Result<()> {
        let selected: BTreeSet<&str> = self
            .decision
            .iter()
            .flat_map(|d| d.selected.iter().map(String::as_str))
            .collect();
        match self
            .acquisitions
            .iter()
            .find(|a| a.round >= 2 && !selected.contains(a.agent_id.as_str()))
        {
            Some(a) => Err(ContamError::Protocol(format!(
                "round {} data came from unselected agent {}",
                a.round, a.agent_id
            ))),
            None => Ok(()),
        }
    }
}

/// A run that stopped early, with whatever had been done so far.
#[derive(Debug, Clone)]
pub struct ProtocolFailure {
    pub error: ContamError,
    pub partial: Option<Box<ProtocolReport>>,
}

impl fmt::Display for ProtocolFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for ProtocolFailure {}

impl From<ContamError> for ProtocolFailure {
    fn from(error: ContamError) -> Self {
        Self { error, partial: None }
    }
}

pub struct Hooks<'a> {
    pub subset: &'a dyn SubsetSelector,
    pub evaluator: Option<&'a dyn Evaluator>,
}

impl Default for Hooks<'_> {
    fn default() -> Self {
        Self {
            subset: &KeepAll,
            evaluator: None,
        }
    }
}

fn fetch_round1(source: &dyn AgentDataSource, m: usize) -> Result<Vec<AgentBatch>> {
    source
        .agent_ids()
        .into_iter()
        .map(|agent_id| {
            let points = source.fetch(&agent_id, 1, m)?;
            Ok(AgentBatch { agent_id, points })
        })
        .collect()
}

pub fn run_procedure(config: &ProtocolConfig, source: &dyn AgentDataSource) -> std::result::Result<ProtocolReport, ProtocolFailure> {
    run_procedure_with(config, source, &Hooks::default())
}

pub fn run_procedure_with(
    config: &ProtocolConfig,
    source: &dyn AgentDataSource,
    hooks: &Hooks<'_>,
) -> std::result::Result<ProtocolReport, ProtocolFailure> {
    config.validate()?;
    let local = source.local_data()?;
    if local.len() != config.n {
        return Err(ContamError::data(format!(
            "local data has {} points, config says n = {}",
            local.len(),
            config.n
        ))
        .into());
    }
    let cal = split_fit(&local, config.ell, config.score.trainer().as_ref())?;
    let mut report = ProtocolReport::empty(config, cal.n_cal());
    report.local_points = local.len();
    let fail = |error: ContamError, report: ProtocolReport| ProtocolFailure {
        error,
        partial: Some(Box::new(report)),
    };

    let batches = match fetch_round1(source, config.m) {
        Ok(b) => b,
        Err(e) => return Err(fail(e, report)),
    };
    let mut received: Vec<Datapoint> = Vec::new();
    for b in &batches {
        report.acquisitions.push(Acquisition {
            round: 1,
            agent_id: b.agent_id.clone(),
            count: b.points.len(),
        });
        report.acquired_points += b.points.len();
        received.extend(b.points.iter().cloned());
    }
    let round1 = assess_round1(&cal, &batches, &config.test, config.pi_th);
    report.assessments = round1.assessments;
    report.excluded = round1.excluded;

    let scores: Vec<AgentScore> = report.assessments.iter().map(AgentAssessment::score).collect();
    let decision = if scores.is_empty() {
        SelectionDecision {
            selected: Vec::new(),
            mode: config.mode,
            fdr_estimate: None,
            mht_outcome: None,
            warnings: vec!["no agent could be assessed".to_string()],
        }
    } else {
        match config.select(&scores) {
            Ok(d) => d,
            Err(e) => return Err(fail(e, report)),
        }
    };
    let selected = decision.selected.clone();
    report.decision = Some(decision);

    for round in 2..=config.rounds {
        for agent in &selected {
            match source.fetch(agent, round, config.m) {
                Ok(points) => {
                    report.acquisitions.push(Acquisition {
                        round,
                        agent_id: agent.clone(),
                        count: points.len(),
                    });
                    report.acquired_points += points.len();
                    received.extend(points);
                }
                Err(e) => return Err(fail(e, report)),
            }
        }
    }

    let mut training = local;
    training.extend(received);
    let training = hooks.subset.select(training);
    report.training_points = training.len();
    if let (Some(evaluator), Some(holdout)) = (hooks.evaluator, source.holdout()) {
        match evaluator.evaluate(&training, &holdout) {
            Ok(score) => {
                report.evaluation = Some(Evaluation {
                    evaluator: evaluator.name().to_string(),
                    score,
                })
            }
            Err(e) => return Err(fail(e, report)),
        }
    }
    Ok(report)
}

/// First grid entry with the largest value of `f`.
pub fn argmax_budget<F>(grid: &[usize], mut f: F) -> Result<usize>
where
    F: FnMut(usize) -> Result<f64>,
{
    let mut best: Option<(usize, f64)> = None;
    for &k in grid {
        let v = f(k)?;
        best = match best {
            Some((bk, bv)) if bv > v || (bv == v && bk <= k) => Some((bk, bv)),
            _ => Some((k, v)),
        };
    }
    best.map(|(k, _)| k)
        .ok_or_else(|| ContamError::config("the budget grid is empty"))
}

/// Pick `k_budget` by validation: train on the fitting split plus the round-1
/// data of the agents selected under each budget, validate on the
/// calibration split. Ties go to the smallest budget.
pub fn budget_by_validation(
    config: &ProtocolConfig,
    source: &dyn AgentDataSource,
    budget_grid: &[usize],
    evaluator: &dyn Evaluator,
) -> Result<usize> {
    if budget_grid.is_empty() {
        return Err(ContamError::config("the budget grid is empty"));
    }
    let mut cfg = config.clone();
    cfg.mode = SelectionMode::FixedBudget;
    cfg.k_budget = Some(budget_grid.iter().copied().max().unwrap_or(1).max(1));
    cfg.validate()?;
    let local = source.local_data()?;
    if local.len() != cfg.n {
        return Err(ContamError::data(format!(
            "local data has {} points, config says n = {}",
            local.len(),
            cfg.n
        )));
    }
    let cal = split_fit(&local, cfg.ell, cfg.score.trainer().as_ref())?;
    let batches = fetch_round1(source, cfg.m)?;
    let round1 = assess_round1(&cal, &batches, &cfg.test, cfg.pi_th);
    let scores: Vec<AgentScore> = round1.assessments.iter().map(AgentAssessment::score).collect();
    let (fit_part, validation) = local.split_at(cfg.ell);
    argmax_budget(budget_grid, |k| {
        let chosen: BTreeSet<String> = if scores.is_empty() || k == 0 {
            BTreeSet::new()
        } else {
            cfg.select_with_budget(&scores, k)?.selected.into_iter().collect()
        };
        let mut training = fit_part.to_vec();
        for b in &batches {
            if chosen.contains(&b.agent_id) {
                training.extend(b.points.iter().cloned());
            }
        }
        evaluator.evaluate(&training, validation)
    })
}
