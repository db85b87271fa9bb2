use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use contam_core::contamtest::{default_i0, default_lambda};
use contam_core::dataio;
use contam_core::harness::{run_simulated_protocol, run_study, ScenarioConfig};
use contam_core::protocol::{select_fixed_budget, select_threshold, DeltaPolicy, DEFAULT_GAMMA};
use contam_core::{
    run_contam_test, split_fit, ConformalCalibration, ContamError, ContamTestSpec, FisherFormula, ProtocolConfig, Result,
    ScoreKind, TestFamily,
};

#[derive(Parser)]
#[command(name = "contam", version, about = "Conformal data contamination tests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Storey,
    Quantile,
    Fisher,
    Sum,
}

impl From<Family> for TestFamily {
    fn from(f: Family) -> Self {
        match f {
            Family::Storey => TestFamily::Storey,
            Family::Quantile => TestFamily::Quantile,
            Family::Fisher => TestFamily::Fisher,
            Family::Sum => TestFamily::Sum,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Formula {
    Derived,
    Printed,
}

#[derive(Clone, Copy, ValueEnum)]
enum Score {
    Negnorm,
    Knn,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Budget,
    Threshold,
}

#[derive(Subcommand)]
enum Command {
    /// Test one batch of scores against calibration scores.
    ContamTest {
        #[arg(long)]
        null_scores: PathBuf,
        #[arg(long)]
        test_scores: PathBuf,
        #[arg(long, value_enum)]
        family: Family,
        #[arg(long)]
        pi_th: f64,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        i0: Option<usize>,
        #[arg(long, value_enum, default_value = "derived")]
        fisher_formula: Formula,
    },
    /// Conformal p-values of a test set against a null set.
    Pvalues {
        #[arg(long)]
        null: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_enum)]
        score: Score,
        #[arg(long, default_value_t = 0)]
        ell: usize,
        #[arg(long, default_value_t = 1)]
        k_nn: usize,
    },
    /// Choose collaborators from a table of agent p-values.
    Select {
        #[arg(long)]
        pvalues: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        k_budget: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Monte Carlo study of a Gaussian scenario.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        /// Also write per-replicate rows here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the data sharing procedure on a simulated scenario.
    Protocol {
        #[arg(long)]
        config: PathBuf,
    },
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| ContamError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| ContamError::Config(format!("{}: {e}", path.display())))
}

fn emit<T: Serialize>(value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| ContamError::Data(e.to_string()))?;
    let mut out = io::stdout().lock();
    writeln!(out, "{json}").map_err(|e| ContamError::Data(e.to_string()))
}

#[derive(Serialize)]
struct TestOutput {
    statistic: f64,
    p_value: f64,
}

fn contam_test(
    null_scores: &Path,
    test_scores: &Path,
    family: TestFamily,
    pi_th: f64,
    lambda: Option<f64>,
    i0: Option<usize>,
    formula: FisherFormula,
) -> Result<()> {
    let cal = ConformalCalibration::from_scores(dataio::read_scores(null_scores)?)?;
    let p = cal.pvalues_from_scores(&dataio::read_scores(test_scores)?)?;
    let (m, n_cal) = (p.len(), p.n_cal());
    let mut spec = match family {
        TestFamily::Storey => ContamTestSpec::storey(pi_th, lambda.unwrap_or_else(|| default_lambda(n_cal))),
        TestFamily::Quantile => ContamTestSpec::quantile(pi_th, i0.unwrap_or_else(|| default_i0(m))),
        TestFamily::Fisher => ContamTestSpec::fisher(pi_th),
        _ => ContamTestSpec::sum(pi_th),
    };
    if family != TestFamily::Storey && lambda.is_some() {
        spec.lambda = lambda;
    }
    if family != TestFamily::Quantile && i0.is_some() {
        spec.i0 = i0;
    }
    spec.fisher_formula = formula;
    let r = run_contam_test(&p, &spec)?;
    emit(&TestOutput {
        statistic: r.statistic,
        p_value: r.p_value,
    })
}

fn pvalues(null: &Path, test: &Path, score: Score, ell: usize, k_nn: usize) -> Result<()> {
    let null = dataio::read_dataset(null)?;
    let test = dataio::read_dataset(test)?;
    let kind = match score {
        Score::Negnorm => ScoreKind::NegNorm,
        Score::Knn => ScoreKind::Knn(k_nn),
    };
    let cal = split_fit(&null, ell, kind.trainer().as_ref())?;
    let p = contam_core::conformal_pvalues(&cal, &test)?;
    dataio::write_pvalues(io::stdout().lock(), &p.values())
}

fn select(path: &Path, mode: Mode, k_budget: Option<usize>, alpha: Option<f64>, gamma: Option<f64>) -> Result<()> {
    let scores = dataio::read_agent_scores(path)?;
    if scores.is_empty() {
        return Err(ContamError::Data("no agents in the p-value table".into()));
    }
    let gamma = gamma.unwrap_or(DEFAULT_GAMMA);
    let decision = match mode {
        Mode::Budget => {
            let k = k_budget.ok_or_else(|| ContamError::Config("budget mode needs --k-budget".into()))?;
            select_fixed_budget(&scores, k, gamma, DeltaPolicy::MaxUnselected)?
        }
        Mode::Threshold => {
            let alpha = alpha.ok_or_else(|| ContamError::Config("threshold mode needs --alpha".into()))?;
            select_threshold(&scores, alpha, gamma)?
        }
    };
    emit(&decision)
}

fn simulate(path: &Path, replicates: Option<usize>, seed: Option<u64>, threads: Option<usize>, csv: Option<&Path>) -> Result<()> {
    let mut cfg: ScenarioConfig = read_config(path)?;
    if let Some(r) = replicates {
        cfg.replicates = r;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let report = match threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| ContamError::Config(e.to_string()))?
            .install(|| run_study(&cfg))?,
        None => run_study(&cfg)?,
    };
    if let Some(csv) = csv {
        let file = fs::File::create(csv).map_err(|e| ContamError::Data(format!("cannot create {}: {e}", csv.display())))?;
        dataio::write_rows(io::BufWriter::new(file), &report.rows)?;
    }
    emit(&report)
}

fn protocol(path: &Path) -> Result<()> {
    let cfg: ProtocolConfig = read_config(path)?;
    match run_simulated_protocol(&cfg, 0) {
        Ok(report) => emit(&report),
        Err(failure) => {
            if let Some(partial) = &failure.partial {
                emit(partial)?;
            }
            Err(failure.error)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ContamTest {
            null_scores,
            test_scores,
            family,
            pi_th,
            lambda,
            i0,
            fisher_formula,
        } => {
            let formula = match fisher_formula {
                Formula::Derived => FisherFormula::Derived,
                Formula::Printed => FisherFormula::Printed,
            };
            contam_test(&null_scores, &test_scores, family.into(), pi_th, lambda, i0, formula)
        }
        Command::Pvalues {
            null,
            test,
            score,
            ell,
            k_nn,
        } => pvalues(&null, &test, score, ell, k_nn),
        Command::Select {
            pvalues,
            mode,
            k_budget,
            alpha,
            gamma,
        } => select(&pvalues, mode, k_budget, alpha, gamma),
        Command::Simulate {
            config,
            replicates,
            seed,
            threads,
            csv,
        } => simulate(&config, replicates, seed, threads, csv.as_deref()),
        Command::Protocol { config } => protocol(&config),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("contam: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
