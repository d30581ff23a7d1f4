//! Command-line arguments and their resolution into plans.
//!
//! Precedence is flags, then the config file, then defaults. `RRL_SEED`
//! overrides a config-file seed but not `--seed`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use rrl_core::macrorisk::ZeroCellPolicy;
use rrl_core::simlab::{CountSampling, HistoryConfig, MacroReadout, SimulationConfig};

use crate::error::CliError;
use crate::io::{PanelSource, UnitsArg};
use crate::plan::{replay, run_plan, Plan, RhoChoice};

pub const SEED_ENV: &str = "RRL_SEED";

#[derive(Debug, Parser)]
#[command(name = "rrl", version, about = "Rating-transition credit-risk toolkit")]
pub struct Cli {
    /// Treat warnings as errors (outputs are still written).
    #[arg(long, global = true)]
    pub strict: bool,
    /// More log output on stderr; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Empirical cohort matrices and a data-quality report.
    Estimate(EstimateArgs),
    /// One-factor model: thresholds, correlation and the factor series.
    FitOnefactor(FitOnefactorArgs),
    /// Probit regression of tail transition rates on macro variables.
    FitMacrorisk(FitMacroriskArgs),
    /// PD per scenario period from a macro-risk fit.
    Forecast(ForecastArgs),
    /// Compare both PD estimators on perturbed replicates.
    Simulate(SimulateArgs),
    /// Write the built-in synthetic history and macro series as CSV.
    Synth(SynthArgs),
    /// Re-run a recorded manifest and check outputs match byte for byte.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct PanelOptions {
    /// Units of per-period tables.
    #[arg(long, value_enum, default_value_t = UnitsArg::Auto)]
    pub units: UnitsArg,
    /// Cohort size assigned to each observed row of a rate table (fractions or percent).
    #[arg(long, default_value_t = 1.0)]
    pub cohort_size: f64,
    /// Grade labels best to worst, default last, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub grades: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct OutArg {
    /// Output directory.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Long-format CSV, per-period CSV, or a directory of per-period CSVs.
    #[arg(long)]
    pub panel: PathBuf,
    #[command(flatten)]
    pub panel_options: PanelOptions,
    #[arg(long, default_value_t = 1e-6)]
    pub clip_epsilon: f64,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct FitOnefactorArgs {
    #[arg(long)]
    pub panel: PathBuf,
    #[command(flatten)]
    pub panel_options: PanelOptions,
    /// `fixed <value>`, `basel` or `search`.
    #[arg(long, num_args = 1..=2, value_names = ["MODE", "VALUE"], required = true)]
    pub rho: Vec<String>,
    /// With `--rho basel`: take PD from the panel's average default column (the default).
    #[arg(long, conflicts_with = "pd")]
    pub pd_from_history: bool,
    /// With `--rho basel`: PD per non-default grade, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub pd: Option<Vec<f64>>,
    /// Report -z instead of z.
    #[arg(long)]
    pub flip_sign: bool,
    #[arg(long, default_value_t = 1e-6)]
    pub clip_epsilon: f64,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ZeroCellsArg {
    Clip,
    Continuity,
}

impl From<ZeroCellsArg> for ZeroCellPolicy {
    fn from(z: ZeroCellsArg) -> Self {
        match z {
            ZeroCellsArg::Clip => ZeroCellPolicy::Clip,
            ZeroCellsArg::Continuity => ZeroCellPolicy::ContinuityCorrection,
        }
    }
}

#[derive(Debug, Args)]
pub struct FitMacroriskArgs {
    #[arg(long)]
    pub panel: PathBuf,
    #[command(flatten)]
    pub panel_options: PanelOptions,
    /// Macro CSV with header `period,<var>,...` aligned with the panel.
    #[arg(long = "macro")]
    pub macro_path: PathBuf,
    #[arg(long, value_enum, default_value_t = ZeroCellsArg::Clip)]
    pub zero_cells: ZeroCellsArg,
    #[arg(long, default_value_t = 1e-6)]
    pub clip_epsilon: f64,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    /// `fit.json` written by fit-macrorisk.
    #[arg(long)]
    pub fit: PathBuf,
    /// Scenario CSV, same layout as a macro file.
    #[arg(long)]
    pub scenario: PathBuf,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SamplingArg {
    Deterministic,
    Multinomial,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Historical panel; the built-in synthetic history when absent.
    #[arg(long)]
    pub panel: Option<PathBuf>,
    #[command(flatten)]
    pub panel_options: PanelOptions,
    /// Macro series; synthesized from the true factor when absent.
    #[arg(long = "macro")]
    pub macro_path: Option<PathBuf>,
    /// JSON simulation config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub noise_scale: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub sampling: Option<SamplingArg>,
    /// Run replicates on one thread.
    #[arg(long)]
    pub serial: bool,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub periods: Option<usize>,
    #[arg(long)]
    pub start_year: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub out: OutArg,
}

fn existing(path: &Path) -> Result<PathBuf, CliError> {
    fs::canonicalize(path).map_err(|e| CliError::input(path.display(), e.to_string()))
}

fn panel_source(path: &Path, o: &PanelOptions) -> Result<PanelSource, CliError> {
    if !(o.cohort_size > 0.0 && o.cohort_size.is_finite()) {
        return Err(CliError::Usage("--cohort-size must be positive".into()));
    }
    Ok(PanelSource {
        path: existing(path)?,
        units: o.units,
        cohort_size: o.cohort_size,
        grades: o.grades.clone(),
    })
}

fn rho_choice(a: &FitOnefactorArgs) -> Result<RhoChoice, CliError> {
    let mode = a.rho[0].as_str();
    let value = a.rho.get(1);
    let choice = match (mode, value) {
        ("fixed", Some(v)) => {
            let rho: f64 = v
                .parse()
                .map_err(|_| CliError::Usage(format!("--rho fixed: not a number: {v:?}")))?;
            RhoChoice::Fixed { rho }
        }
        ("fixed", None) => return Err(CliError::Usage("--rho fixed needs a value".into())),
        ("basel", None) => RhoChoice::Basel { pd: a.pd.clone() },
        ("search", None) => RhoChoice::Search,
        ("basel" | "search", Some(_)) => {
            return Err(CliError::Usage(format!("--rho {mode} takes no value")))
        }
        _ => {
            return Err(CliError::Usage(format!(
                "--rho: unknown mode {mode:?}; use fixed <value>, basel or search"
            )))
        }
    };
    if !matches!(choice, RhoChoice::Basel { .. }) && (a.pd.is_some() || a.pd_from_history) {
        return Err(CliError::Usage("--pd and --pd-from-history apply to --rho basel only".into()));
    }
    Ok(choice)
}

/// Reads the seed override from the environment value, if any.
pub fn env_seed(value: Option<String>) -> Result<Option<u64>, CliError> {
    value
        .map(|v| {
            v.trim()
                .parse::<u64>()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))
        })
        .transpose()
}

pub fn simulation_config(a: &SimulateArgs, env: Option<u64>) -> Result<SimulationConfig, CliError> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
            serde_json::from_str(&text).map_err(|e| CliError::input(path.display(), e.to_string()))?
        }
        None => SimulationConfig::default(),
    };
    if let Some(s) = env {
        cfg.seed = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.replicates {
        cfg.replicates = r;
    }
    if let Some(n) = a.noise_scale {
        cfg.noise_scale = n;
    }
    if let Some(s) = a.sampling {
        cfg.count_sampling = match s {
            SamplingArg::Deterministic => CountSampling::Deterministic,
            SamplingArg::Multinomial => CountSampling::Multinomial,
        };
    }
    if a.serial {
        cfg.parallel = false;
    }
    cfg.validate()?;
    if cfg.trace_replicate >= cfg.replicates {
        return Err(CliError::Usage(format!(
            "trace_replicate {} must be below replicates {}",
            cfg.trace_replicate, cfg.replicates
        )));
    }
    Ok(cfg)
}

/// Turns parsed arguments into a plan; `None` for replay.
pub fn resolve(command: &Command, env: Option<u64>) -> Result<Option<Plan>, CliError> {
    let plan = match command {
        Command::Estimate(a) => Plan::Estimate {
            panel: panel_source(&a.panel, &a.panel_options)?,
            clip_epsilon: a.clip_epsilon,
        },
        Command::FitOnefactor(a) => Plan::FitOnefactor {
            panel: panel_source(&a.panel, &a.panel_options)?,
            rho: rho_choice(a)?,
            flip_sign: a.flip_sign,
            clip_epsilon: a.clip_epsilon,
        },
        Command::FitMacrorisk(a) => Plan::FitMacrorisk {
            panel: panel_source(&a.panel, &a.panel_options)?,
            macro_path: existing(&a.macro_path)?,
            clip_epsilon: a.clip_epsilon,
            zero_cells: a.zero_cells.into(),
        },
        Command::Forecast(a) => Plan::Forecast {
            fit: existing(&a.fit)?,
            scenario: existing(&a.scenario)?,
        },
        Command::Simulate(a) => Plan::Simulate {
            panel: a
                .panel
                .as_deref()
                .map(|p| panel_source(p, &a.panel_options))
                .transpose()?,
            macro_path: a.macro_path.as_deref().map(existing).transpose()?,
            config: simulation_config(a, env)?,
        },
        Command::Synth(a) => {
            let mut history = HistoryConfig::default();
            if let Some(p) = a.periods {
                history.periods = p;
            }
            if let Some(y) = a.start_year {
                history.start_year = y;
            }
            if let Some(s) = a.seed.or(env) {
                history.seed = s;
            }
            if history.periods == 0 {
                return Err(CliError::Usage("--periods must be at least 1".into()));
            }
            Plan::Synth {
                history,
                macro_readout: MacroReadout::default(),
            }
        }
        Command::Replay(_) => return Ok(None),
    };
    Ok(Some(plan))
}

fn out_dir(command: &Command) -> &Path {
    match command {
        Command::Estimate(a) => &a.out.out,
        Command::FitOnefactor(a) => &a.out.out,
        Command::FitMacrorisk(a) => &a.out.out,
        Command::Forecast(a) => &a.out.out,
        Command::Simulate(a) => &a.out.out,
        Command::Synth(a) => &a.out.out,
        Command::Replay(a) => &a.out.out,
    }
}

/// Runs a parsed command line. Warnings are logged; with `--strict` any
/// warning turns into [`CliError::Strict`] after outputs are written.
pub fn run(cli: &Cli, env: Option<u64>) -> Result<(), CliError> {
    let out = out_dir(&cli.command);
    if let Command::Replay(a) = &cli.command {
        let m = replay(&a.manifest, out)?;
        log::info!("replay of {} reproduced {} files", m.command, m.outputs.len());
        return Ok(());
    }
    let plan = resolve(&cli.command, env)?.expect("non-replay command");
    let (manifest, warnings) = run_plan(&plan, out)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    log::info!("{}: wrote {} files to {}", manifest.command, manifest.outputs.len() + 1, out.display());
    if cli.strict && !warnings.is_empty() {
        return Err(CliError::Strict(warnings.len()));
    }
    Ok(())
}
