use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rsls_core::detect::Metric;
use rsls_core::gridmodel::{self, GridError};
use rsls_core::harness::{self, Experiment, ExperimentConfig, HarnessError};

#[derive(Parser)]
#[command(name = "rsls", version, about = "Contingency detection and state estimation for switched grid models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Mae,
    L2,
    Max,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Mae => Metric::Mae,
            MetricArg::L2 => Metric::L2,
            MetricArg::Max => Metric::Max,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the linearized model of a case (base topology or one scenario) as JSON.
    Linearize {
        case: PathBuf,
        /// 1-based scenario number from the case document.
        #[arg(long)]
        scenario: Option<usize>,
    },
    /// Solve the power flow of a case and print it as JSON.
    Powerflow { case: PathBuf },
    /// Check that the configured probing input separates every pair of modes.
    ValidateInput {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one experiment and write trace.csv, segments.csv and meta.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "RSLS_OUT_DIR")]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        metric: Option<MetricArg>,
    },
    /// Run seeded repetitions in parallel and print a JSON summary.
    Montecarlo {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        metric: Option<MetricArg>,
    },
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

impl From<GridError> for Failure {
    fn from(e: GridError) -> Self {
        let code = match e {
            GridError::Io(_) | GridError::Json(_) | GridError::Schema(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure {
            code: 1,
            message: e.to_string(),
        }
    }
}

// A closed pipe on stdout (`rsls ... | head`) is not an error.
fn emit(text: &str) -> Result<(), Failure> {
    match writeln!(io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(Failure {
            code: 1,
            message: e.to_string(),
        }),
        _ => Ok(()),
    }
}

fn usage(message: String) -> Failure {
    Failure { code: 2, message }
}

fn load_case(path: &Path) -> Result<gridmodel::GridCase, Failure> {
    gridmodel::load_case(path).map_err(|e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    })
}

fn linearize(case: &Path, scenario: Option<usize>) -> Result<(), Failure> {
    let mut case = load_case(case)?;
    if let Some(n) = scenario {
        let count = case.scenarios.len();
        if n == 0 || n > count {
            return Err(usage(format!("scenario {n} out of range (case has {count})")));
        }
        let s = case.scenarios[n - 1].clone();
        case = gridmodel::apply_contingency(&case, &s)?;
    }
    let eq = gridmodel::compute_equilibrium(&case)?;
    let model = gridmodel::linearize(&case, &eq)?;
    emit(&serde_json::to_string_pretty(&model)?)
}

fn powerflow(case: &Path) -> Result<(), Failure> {
    let case = load_case(case)?;
    let flow = gridmodel::solve_power_flow(&case)?;
    emit(&serde_json::to_string_pretty(&flow)?)
}

fn load_config(path: &Path, metric: Option<MetricArg>) -> Result<ExperimentConfig, Failure> {
    let mut c = ExperimentConfig::load(path)?;
    if let Some(m) = metric {
        c.run.metric = m.into();
    }
    Ok(c)
}

fn validate_input(config: &Path) -> Result<(), Failure> {
    let c = load_config(config, None)?;
    let verdict = harness::validate_config_input(&c)?;
    if verdict.is_ok() {
        return emit("ok");
    }
    for v in &verdict.violations {
        emit(&v.to_string())?;
    }
    Err(Failure {
        code: 1,
        message: format!("probing input rejected ({} violations)", verdict.violations.len()),
    })
}

fn run(config: &Path, seed: Option<u64>, out: Option<PathBuf>, metric: Option<MetricArg>) -> Result<(), Failure> {
    let exp = Experiment::prepare(load_config(config, metric)?)?;
    let outcome = exp.run(seed)?;
    let root = exp.output_root(out.as_deref(), Path::new("out"));
    let dir = exp.write_run(&outcome, &root)?;
    let acc = outcome.trace.detection_accuracy().unwrap_or(f64::NAN);
    emit(&format!(
        "{}: detection {:.3}, final error {:.3e} -> {}",
        outcome.run_id,
        acc,
        outcome.trace.mu_final.unwrap_or(f64::NAN),
        dir.display()
    ))
}

fn montecarlo(config: &Path, runs: Option<usize>, seed: Option<u64>, metric: Option<MetricArg>) -> Result<(), Failure> {
    let exp = Experiment::prepare(load_config(config, metric)?)?;
    let runs = runs
        .or(exp.config.montecarlo.as_ref().map(|m| m.runs))
        .ok_or_else(|| usage("no run count: pass --runs or add a [montecarlo] table".into()))?;
    let summary = exp.montecarlo(runs, seed)?;
    emit(&serde_json::to_string_pretty(&summary)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Linearize { case, scenario } => linearize(&case, scenario),
        Command::Powerflow { case } => powerflow(&case),
        Command::ValidateInput { config } => validate_input(&config),
        Command::Run {
            config,
            seed,
            out,
            metric,
        } => run(&config, seed, out, metric),
        Command::Montecarlo {
            config,
            runs,
            seed,
            metric,
        } => montecarlo(&config, runs, seed, metric),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
