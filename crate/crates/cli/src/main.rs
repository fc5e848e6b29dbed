mod commands;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use abc_eqf_core::config::{MdModeConfig, ResidualModeConfig};
use abc_eqf_core::{FilterSelection, RunConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "abc-eqf", version, about = "Equivariant filter for attitude, gyro bias and sensor calibration")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; defaults are used for absent keys.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    filter: Option<FilterArg>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    residual_mode: Option<ResidualArg>,
    #[arg(long, global = true, value_enum)]
    md_mode: Option<MdArg>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize gyro, direction and truth logs.
    Simulate,
    /// Filter recorded logs.
    Run {
        /// Directory holding gyro.csv, dir_<id>.csv and optionally truth.csv.
        #[arg(long, value_name = "DIR")]
        logs: PathBuf,
    },
    /// Monte-Carlo campaign with seeds `seed + k`.
    Montecarlo {
        #[arg(long, default_value_t = 25)]
        runs: usize,
    },
    /// Side-by-side table from report files written by `montecarlo`.
    Compare {
        #[arg(required = true, value_name = "REPORT")]
        reports: Vec<PathBuf>,
    },
    /// Runtime of the four covariance propagation variants.
    BenchPhi {
        #[arg(long, default_value_t = 14_000)]
        steps: usize,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FilterArg {
    Eqf,
    Iekf,
    Both,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ResidualArg {
    Subtract,
    Literal,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MdArg {
    Analytic,
    FirstOrder,
}

impl Common {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(f) = self.filter {
            cfg.filter = match f {
                FilterArg::Eqf => FilterSelection::Eqf,
                FilterArg::Iekf => FilterSelection::Iekf,
                FilterArg::Both => FilterSelection::Both,
            };
        }
        if let Some(r) = self.residual_mode {
            cfg.residual_mode = match r {
                ResidualArg::Subtract => ResidualModeConfig::Subtract,
                ResidualArg::Literal => ResidualModeConfig::Literal,
            };
        }
        if let Some(m) = self.md_mode {
            cfg.md_mode = match m {
                MdArg::Analytic => MdModeConfig::Analytic,
                MdArg::FirstOrder => MdModeConfig::FirstOrder,
            };
        }
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let out = cli.common.out_dir();
    match &cli.command {
        Command::Simulate => commands::simulate(&load(&cli.common, None)?, &out),
        Command::Run { logs } => {
            let fallback = logs.join("config.resolved.toml");
            let cfg = load(&cli.common, Some(fallback.as_path()).filter(|p| p.exists()))?;
            commands::run(&cfg, logs, &out)
        }
        Command::Montecarlo { runs } => commands::montecarlo(&load(&cli.common, None)?, *runs, &out),
        Command::Compare { reports } => commands::compare(reports, cli.common.out.as_deref()),
        Command::BenchPhi { steps, repeats } => {
            commands::bench_phi(&load(&cli.common, None)?, *steps, *repeats, cli.common.out.as_deref())
        }
    }
}

fn load(common: &Common, fallback: Option<&std::path::Path>) -> Result<RunConfig, CliError> {
    let path = common.config.as_deref().or(fallback);
    if common.config.is_none() {
        if let Some(p) = path {
            log::info!("using {}", p.display());
        }
    }
    let mut cfg = io::load_config(path)?;
    common.apply(&mut cfg);
    let origin = path.map_or_else(|| "<defaults>".to_string(), |p| p.display().to_string());
    io::validate(&cfg, &origin)?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
