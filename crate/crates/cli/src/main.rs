mod commands;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Built-in defaults; a config file and then flags override them.
pub mod defaults {
    pub const SEED: u64 = 1;
    pub const DT: f64 = 0.04;
    pub const DE_POP: usize = 200;
    pub const GA_POP: usize = 500;
    pub const ITERS: usize = 50;
    pub const OAT_GRID: usize = 11;
    pub const SOBOL_SAMPLES: usize = 1024;
    pub const ISHIGAMI_SAMPLES: usize = 4096;
    pub const ISHIGAMI_TOLERANCE: f64 = 0.05;
    pub const SCREENING_THRESHOLD: f64 = 0.05;
    pub const DEFAULT_MODEL: &str = "eidm";
}

#[derive(Parser, Debug)]
#[command(name = "cfcal", version, about = "Car-following calibration and scenario validation")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "CFCAL_JOBS", default_value_t = 0)]
    pub jobs: usize,

    /// JSON file with per-subcommand defaults, e.g. {"calibrate": {"pop": 100}}.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Extract leader-follower pairs from a trajectory CSV.
    Select(SelectArgs),
    /// Calibrate a model on every selected pair.
    Calibrate(CalibrateArgs),
    /// Run a scenario with default or calibrated drivers.
    Simulate(SimulateArgs),
    /// Post-process a simulation log.
    Analyze(AnalyzeArgs),
    /// Parameter screening against the calibration objective.
    Sensitivity(SensitivityArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Select(_) => "select",
            Command::Calibrate(_) => "calibrate",
            Command::Simulate(_) => "simulate",
            Command::Analyze(_) => "analyze",
            Command::Sensitivity(_) => "sensitivity",
        }
    }
}

#[derive(Args, Debug, serde::Serialize)]
pub struct SelectArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Comma separated lane ids to keep.
    #[arg(long, value_delimiter = ',')]
    pub lanes: Option<Vec<i64>>,
    /// LANE:X or LANE:X,Y,DIR_X,DIR_Y; repeat per lane.
    #[arg(long = "stop-line")]
    pub stop_line: Vec<String>,
    #[arg(long, default_value_t = defaults::DT)]
    pub dt: f64,
    #[arg(long)]
    pub stop_speed: Option<f64>,
    #[arg(long)]
    pub stop_duration: Option<f64>,
    #[arg(long)]
    pub jump_threshold: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    De,
    Ga,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    /// krauss, idm, iidm, eidm or eidm_sched.
    #[arg(long, default_value = defaults::DEFAULT_MODEL)]
    pub model: String,
    /// Schedule speeds (m/s) for eidm_sched, e.g. 5,12.
    #[arg(long, value_delimiter = ',')]
    pub schedule_breakpoints: Vec<f64>,
    #[arg(long, value_enum, default_value_t = Algo::De)]
    pub algo: Algo,
    /// Defaults to 200 for DE and 500 for GA.
    #[arg(long)]
    pub pop: Option<usize>,
    #[arg(long, default_value_t = defaults::ITERS)]
    pub iters: usize,
    #[arg(long, default_value_t = defaults::DT)]
    pub dt: f64,
    #[arg(long, default_value_t = defaults::SEED)]
    pub seed: u64,
    /// Krauss followers see the leader's deceleration.
    #[arg(long)]
    pub leader_decel_visible: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct SimulateArgs {
    /// queue, ring or stopgo.
    #[arg(long)]
    pub scenario: String,
    /// Calibration results (or a list of parameter sets) forming the fleet.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Model with default parameters, used when --params is absent.
    #[arg(long, default_value = defaults::DEFAULT_MODEL)]
    pub model: String,
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long, default_value_t = defaults::DT)]
    pub dt: f64,
    #[arg(long, default_value_t = defaults::SEED)]
    pub seed: u64,
    /// Cycle through the fleet instead of drawing from it.
    #[arg(long)]
    pub round_robin: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Report {
    Fd,
    Wave,
    Queue,
    Metrics,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long, value_enum)]
    pub report: Report,
    /// Congestion speed for the wave front (m/s).
    #[arg(long, default_value_t = cfcal::analysis::CONGESTION_SPEED)]
    pub v_c: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Oat,
    Sobol,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct SensitivityArgs {
    #[arg(long, required_unless_present = "ishigami_self_test")]
    pub pairs: Option<PathBuf>,
    #[arg(long, default_value = defaults::DEFAULT_MODEL)]
    pub model: String,
    #[arg(long, value_delimiter = ',')]
    pub schedule_breakpoints: Vec<f64>,
    #[arg(long, value_enum, default_value_t = Method::Sobol)]
    pub method: Method,
    /// Sobol base sample count, rounded down to a power of two.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Points per parameter for the one-at-a-time sweep.
    #[arg(long, default_value_t = defaults::OAT_GRID)]
    pub grid: usize,
    #[arg(long, default_value_t = defaults::DT)]
    pub dt: f64,
    #[arg(long, default_value_t = defaults::SEED)]
    pub seed: u64,
    /// Index above which a parameter is flagged as influential.
    #[arg(long, default_value_t = defaults::SCREENING_THRESHOLD)]
    pub threshold: f64,
    /// Check the estimator on the Ishigami function instead of a model.
    #[arg(long)]
    pub ishigami_self_test: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Error raised for bad flags or unusable inputs; exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<cfcal::Error>() {
            return match e {
                cfcal::Error::Config(_) | cfcal::Error::Schema(_) | cfcal::Error::Json(_) => 2,
                _ => 1,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 2;
        }
    }
    1
}

/// Inserts config-file values as flags right after the subcommand name, so
/// that flags given on the command line override them.
fn with_config_args(argv: Vec<OsString>, cli: &Cli) -> Result<Vec<OsString>> {
    let Some(path) = &cli.config else { return Ok(argv) };
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let root: serde_json::Value = serde_json::from_str(&text).context("config file is not valid JSON")?;
    let name = cli.command.name();
    let Some(section) = root.get(name) else { return Ok(argv) };
    let Some(map) = section.as_object() else {
        return usage(format!("config section '{name}' must be an object"));
    };
    let mut extra = Vec::new();
    for (k, v) in map {
        let flag = format!("--{}", k.replace('_', "-"));
        match v {
            serde_json::Value::Bool(true) => extra.push(flag.into()),
            serde_json::Value::Bool(false) | serde_json::Value::Null => {}
            serde_json::Value::Array(items) => {
                let joined: Vec<String> = items.iter().map(scalar).collect::<Result<_>>()?;
                extra.push(flag.into());
                extra.push(joined.join(",").into());
            }
            other => {
                extra.push(flag.into());
                extra.push(scalar(other)?.into());
            }
        }
    }
    let Some(pos) = argv.iter().position(|a| a == name) else { return Ok(argv) };
    let mut out = argv[..=pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

fn scalar(v: &serde_json::Value) -> Result<String> {
    match v {
        serde_json::Value::String(s) => Ok(s.clone()),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        serde_json::Value::Bool(b) => Ok(b.to_string()),
        other => usage(format!("unsupported config value {other}")),
    }
}

fn parse() -> Result<Cli> {
    let argv: Vec<OsString> = std::env::args_os().collect();
    let first = Cli::try_parse_from(&argv).unwrap_or_else(|e| e.exit());
    if first.config.is_none() {
        return Ok(first);
    }
    let argv = with_config_args(argv, &first)?;
    Ok(Cli::try_parse_from(argv).unwrap_or_else(|e| e.exit()))
}

fn run() -> Result<()> {
    let cli = parse()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .context("cannot start worker pool")?;
    pool.install(|| commands::dispatch(&cli))
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
