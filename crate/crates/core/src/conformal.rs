//! Split-conformal scores and conformal p-values.
//!
//! A score is fitted on the first `ell` points of the null sample and
//! evaluated on the remaining `n - ell` calibration points. Larger scores mean
//! "more inlier-like". The conformal p-value of a test point with score `s` is
//!
//! ```text
//! p = (1 + #{j : s_j <= s}) / (n_cal + 1)
//! ```
//!
//! with the comparison applied deterministically (no randomised tie
//! breaking). Validity assumes continuously distributed scores.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{ContamError, Result};

/// One observation: a feature vector and an optional class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Datapoint {
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<i64>,
}

impl Datapoint {
    pub fn new(features: Vec<f64>) -> Self {
        Self {
            features,
            label: None,
        }
    }

    pub fn labeled(features: Vec<f64>, label: i64) -> Self {
        Self {
            features,
            label: Some(label),
        }
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// A fitted conformal score.
pub trait ScoreFn: Send + Sync {
    fn score(&self, x: &Datapoint) -> Result<f64>;
}

/// Fits a [`ScoreFn`] on the fitting split of the null sample.
pub trait ScoreTrainer: Send + Sync {
    fn fit(&self, fit_part: &[Datapoint]) -> Result<Arc<dyn ScoreFn>>;
}

/// `s(x) = -||x||`; needs no fitting.
#[derive(Debug, Clone, Copy, Default)]
pub struct NegativeNorm;

impl ScoreFn for NegativeNorm {
    fn score(&self, x: &Datapoint) -> Result<f64> {
        Ok(score_negative_norm(x))
    }
}

impl ScoreTrainer for NegativeNorm {
    fn fit(&self, _fit_part: &[Datapoint]) -> Result<Arc<dyn ScoreFn>> {
        Ok(Arc::new(NegativeNorm))
    }
}

pub fn score_negative_norm(x: &Datapoint) -> f64 {
    -x.features.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Negated distance to the `k`-th nearest fitted point.
#[derive(Debug, Clone)]
pub struct KnnDistance {
    reference: Vec<Vec<f64>>,
    k: usize,
}

impl KnnDistance {
    pub fn fit(points: &[Datapoint], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(ContamError::config("k-NN score needs k >= 1"));
        }
        if points.len() < k {
            return Err(ContamError::config(format!(
                "k-NN score with k = {k} needs at least {k} fitting points, got {}",
                points.len()
            )));
        }
        Ok(Self {
            reference: points.iter().map(|p| p.features.clone()).collect(),
            k,
        })
    }
}

impl ScoreFn for KnnDistance {
    fn score(&self, x: &Datapoint) -> Result<f64> {
        let mut d: Vec<f64> = self
            .reference
            .iter()
            .map(|r| euclidean(r, &x.features))
            .collect();
        let (_, kth, _) = d.select_nth_unstable_by(self.k - 1, f64::total_cmp);
        Ok(-*kth)
    }
}

pub fn score_knn_distance(x: &Datapoint, fitted: &[Datapoint], k_nn: usize) -> Result<f64> {
    KnnDistance::fit(fitted, k_nn)?.score(x)
}

#[derive(Debug, Clone, Copy)]
pub struct KnnTrainer {
    pub k: usize,
}

impl ScoreTrainer for KnnTrainer {
    fn fit(&self, fit_part: &[Datapoint]) -> Result<Arc<dyn ScoreFn>> {
        Ok(Arc::new(KnnDistance::fit(fit_part, self.k)?))
    }
}

/// Dispatches to a per-class score, each fitted only on the fitting points
/// carrying that label.
pub struct Classwise {
    per_class: BTreeMap<i64, Arc<dyn ScoreFn>>,
}

impl Classwise {
    pub fn new(per_class: BTreeMap<i64, Arc<dyn ScoreFn>>) -> Self {
        Self { per_class }
    }

    pub fn classes(&self) -> impl Iterator<Item = i64> + '_ {
        self.per_class.keys().copied()
    }
}

impl ScoreFn for Classwise {
    fn score(&self, x: &Datapoint) -> Result<f64> {
        score_classwise(x, &self.per_class)
    }
}

pub fn score_classwise(x: &Datapoint, per_class: &BTreeMap<i64, Arc<dyn ScoreFn>>) -> Result<f64> {
    let label = x
        .label
        .ok_or_else(|| ContamError::domain("class-wise score needs a labeled point"))?;
    per_class
        .get(&label)
        .ok_or_else(|| ContamError::domain(format!("label {label} was not seen while fitting")))?
        .score(x)
}

pub struct ClasswiseTrainer<T> {
    pub inner: T,
}

impl<T: ScoreTrainer> ScoreTrainer for ClasswiseTrainer<T> {
    fn fit(&self, fit_part: &[Datapoint]) -> Result<Arc<dyn ScoreFn>> {
        let mut groups: BTreeMap<i64, Vec<Datapoint>> = BTreeMap::new();
        for p in fit_part {
            let label = p
                .label
                .ok_or_else(|| ContamError::data("class-wise fitting needs labeled points"))?;
            groups.entry(label).or_default().push(p.clone());
        }
        let mut per_class = BTreeMap::new();
        for (label, pts) in groups {
            per_class.insert(label, self.inner.fit(&pts)?);
        }
        Ok(Arc::new(Classwise::new(per_class)))
    }
}

/// Built-in score choices, written `negnorm`, `knn[:k]`,
/// `classwise-negnorm` or `classwise-knn[:k]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ScoreKind {
    NegNorm,
    Knn(usize),
    ClasswiseNegNorm,
    ClasswiseKnn(usize),
}

impl ScoreKind {
    pub fn trainer(&self) -> Box<dyn ScoreTrainer> {
        match *self {
            ScoreKind::NegNorm => Box::new(NegativeNorm),
            ScoreKind::Knn(k) => Box::new(KnnTrainer { k }),
            ScoreKind::ClasswiseNegNorm => Box::new(ClasswiseTrainer { inner: NegativeNorm }),
            ScoreKind::ClasswiseKnn(k) => Box::new(ClasswiseTrainer {
                inner: KnnTrainer { k },
            }),
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreKind::NegNorm => write!(f, "negnorm"),
            ScoreKind::Knn(k) => write!(f, "knn:{k}"),
            ScoreKind::ClasswiseNegNorm => write!(f, "classwise-negnorm"),
            ScoreKind::ClasswiseKnn(k) => write!(f, "classwise-knn:{k}"),
        }
    }
}

impl std::str::FromStr for ScoreKind {
    type Err = ContamError;

    fn from_str(s: &str) -> Result<Self> {
        let (name, k) = match s.split_once(':') {
            Some((name, k)) => {
                let k: usize = k
                    .parse()
                    .map_err(|_| ContamError::config(format!("bad neighbour count in score `{s}`")))?;
                (name, Some(k))
            }
            None => (s, None),
        };
        match (name, k) {
            ("negnorm", None) => Ok(ScoreKind::NegNorm),
            ("knn", k) => Ok(ScoreKind::Knn(k.unwrap_or(1))),
            ("classwise-negnorm", None) => Ok(ScoreKind::ClasswiseNegNorm),
            ("classwise-knn", k) => Ok(ScoreKind::ClasswiseKnn(k.unwrap_or(1))),
            _ => Err(ContamError::config(format!("unknown score `{s}`"))),
        }
    }
}

impl TryFrom<String> for ScoreKind {
    type Error = ContamError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ScoreKind> for String {
    fn from(k: ScoreKind) -> String {
        k.to_string()
    }
}

/// Fitted score plus the calibration scores that define the empirical null.
#[derive(Clone)]
pub struct ConformalCalibration {
    score: Option<Arc<dyn ScoreFn>>,
    cal_scores: Vec<f64>,
    sorted: Vec<f64>,
}

impl fmt::Debug for ConformalCalibration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConformalCalibration")
            .field("n_cal", &self.cal_scores.len())
            .field("has_score", &self.score.is_some())
            .finish()
    }
}

impl ConformalCalibration {
    /// Calibration from precomputed scores; test points must then be given
    /// as scores as well.
    pub fn from_scores(cal_scores: Vec<f64>) -> Result<Self> {
        if cal_scores.is_empty() {
            return Err(ContamError::config("calibration set is empty"));
        }
        if cal_scores.iter().any(|s| s.is_nan()) {
            return Err(ContamError::data("calibration scores contain NaN"));
        }
        let mut sorted = cal_scores.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            score: None,
            cal_scores,
            sorted,
        })
    }

    pub fn n_cal(&self) -> usize {
        self.cal_scores.len()
    }

    /// Calibration scores in the order of the calibration split.
    pub fn cal_scores(&self) -> &[f64] {
        &self.cal_scores
    }

    pub fn score_fn(&self) -> Option<&Arc<dyn ScoreFn>> {
        self.score.as_ref()
    }

    /// Rank `1 + #{j : s_j <= s}` of a test score.
    pub fn rank_of(&self, s: f64) -> usize {
        1 + self.sorted.partition_point(|&c| c <= s)
    }

    pub fn pvalues_from_scores(&self, test_scores: &[f64]) -> Result<ConformalPValues> {
        if test_scores.iter().any(|s| s.is_nan()) {
            return Err(ContamError::data("test scores contain NaN"));
        }
        Ok(ConformalPValues {
            ranks: test_scores.iter().map(|&s| self.rank_of(s)).collect(),
            n_cal: self.n_cal(),
        })
    }

    pub fn score(&self, x: &Datapoint) -> Result<f64> {
        self.score
            .as_ref()
            .ok_or_else(|| ContamError::config("calibration was built from raw scores and has no score function"))?
            .score(x)
    }
}

/// Fit the score on the first `ell` points and calibrate on the rest.
pub fn split_fit(null_sample: &[Datapoint], ell: usize, trainer: &dyn ScoreTrainer) -> Result<ConformalCalibration> {
    if ell >= null_sample.len() {
        return Err(ContamError::config(format!(
            "fitting split ell = {ell} leaves no calibration points out of n = {}",
            null_sample.len()
        )));
    }
    let (fit_part, cal_part) = null_sample.split_at(ell);
    let score = trainer.fit(fit_part)?;
    let cal_scores = cal_part
        .iter()
        .map(|p| score.score(p))
        .collect::<Result<Vec<_>>>()?;
    let mut cal = ConformalCalibration::from_scores(cal_scores)?;
    cal.score = Some(score);
    Ok(cal)
}

/// Conformal p-values stored as integer ranks on the grid
/// `{1, ..., n_cal + 1} / (n_cal + 1)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConformalPValues {
    ranks: Vec<usize>,
    n_cal: usize,
}

impl ConformalPValues {
    pub fn from_ranks(ranks: Vec<usize>, n_cal: usize) -> Result<Self> {
        if n_cal == 0 {
            return Err(ContamError::config("calibration size must be positive"));
        }
        if let Some(r) = ranks.iter().find(|&&r| r == 0 || r > n_cal + 1) {
            return Err(ContamError::domain(format!(
                "rank {r} is off the conformal grid 1..={}",
                n_cal + 1
            )));
        }
        Ok(Self { ranks, n_cal })
    }

    /// Accepts values within `1e-9` of the conformal grid.
    pub fn from_values(values: &[f64], n_cal: usize) -> Result<Self> {
        let scale = n_cal as f64 + 1.0;
        let ranks = values
            .iter()
            .map(|&v| {
                let r = (v * scale).round();
                if !v.is_finite() || (v * scale - r).abs() > 1e-9 || r < 1.0 {
                    return Err(ContamError::domain(format!(
                        "p-value {v} is not on the conformal grid for n_cal = {n_cal}"
                    )));
                }
                Ok(r as usize)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_ranks(ranks, n_cal)
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    pub fn n_cal(&self) -> usize {
        self.n_cal
    }

    /// `(n_cal + 1) * p` for every point.
    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn values(&self) -> Vec<f64> {
        let scale = self.n_cal as f64 + 1.0;
        self.ranks.iter().map(|&r| r as f64 / scale).collect()
    }
}

/// Conformal p-values of `test_points` against `cal`.
pub fn conformal_pvalues(cal: &ConformalCalibration, test_points: &[Datapoint]) -> Result<ConformalPValues> {
    let scores = test_points
        .iter()
        .map(|p| cal.score(p))
        .collect::<Result<Vec<_>>>()?;
    cal.pvalues_from_scores(&scores)
}
