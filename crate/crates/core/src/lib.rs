//! Conformal data contamination tests.
//!
//! Given a reference sample from a null law `P0` and a batch of `m` points
//! from `(1 - pi) P0 + pi P1`, the tests in [`contamtest`] decide whether the
//! contamination factor `pi` exceeds a threshold `pi_th` without any
//! assumption on `P0` or `P1`. [`mht`] combines the per-agent p-values with
//! BH or Storey-BH, and [`protocol`] runs the multi-round data sharing
//! procedure built on top. [`harness`] holds the Gaussian simulation
//! studies and brute-force oracles used to validate everything.

pub mod conformal;
pub mod contamtest;
pub mod dataio;
pub mod error;
pub mod harness;
pub mod mht;
pub mod protocol;
pub mod statdist;

pub use conformal::{
    conformal_pvalues, split_fit, ConformalCalibration, ConformalPValues, Datapoint, ScoreFn, ScoreKind, ScoreTrainer,
};
pub use contamtest::{run_contam_test, ContamTestResult, ContamTestSpec, FisherFormula, TestFamily};
pub use error::{ContamError, Result};
pub use mht::{bh, storey_bh, storey_fdr_estimate, MultipleTestOutcome, PValueVector};
pub use protocol::{run_procedure, ProtocolConfig, ProtocolReport, SelectionDecision};
pub use statdist::GFunction;
