//! Simulation harness: Gaussian scenarios, Monte Carlo studies, oracles and
//! two-sample baselines.

pub mod montecarlo;
pub mod oracle;
pub mod scenario;
pub mod twosample;

pub use montecarlo::{
    binomial_se, fdp_tdp, mc_fdr_tdr, mc_power, rejection_rate, run_study, simulate_pvalues, simulate_replicate,
    AgentOutcome, McCell, McReport, McRow,
};
pub use oracle::{irwin_hall_convolution, nhg_enumeration, NhgTable};
pub use scenario::{
    gen_scenario, protocol_scenario, run_simulated_protocol, AgentData, Contamination, CountRule, GaussianSource, Procedure, Scenario, ScenarioConfig};
pub use twosample::{ks_statistic, ks_two_sample, l2_statistic, permutation_two_sample, TwoSampleStatistic};
