//! `eecm`: simulate, estimate, fit and report from the command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use eecm_core::characterization::FitMode;
use eecm_core::Electrode;

use crate::config::{ConfigError, RunConfig};

#[derive(Parser)]
#[command(
    name = "eecm",
    version,
    about = "Electrode-level battery model: simulation, state estimation, fitting and health reports"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario: measurements.csv, truth.csv, truth_esoh.json.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Scenario JSON.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Run the estimator over a scenario or a measurement CSV.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Scenario JSON (simulated on the fly).
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Measurement CSV (t_s,current_a,voltage_v).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Truth CSV aligned with --input, used for plots.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Write SVG plots.
        #[arg(long)]
        plots: bool,
    },
    /// Fit one electrode's RC table from HPPC data or a synthetic HPPC schedule.
    Fit {
        #[command(flatten)]
        common: Common,
        /// HPPC schedule JSON (synthesized from the pack's own table).
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// HPPC CSV (t_s,current_a,potential_v,sol).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum)]
        electrode: Option<ElectrodeArg>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        generations: Option<usize>,
        #[arg(long)]
        population: Option<usize>,
    },
    /// Health report from an estimates CSV.
    Report {
        #[command(flatten)]
        common: Common,
        /// Estimates CSV written by `estimate`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Run configuration JSON; flags override its fields.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Parameter pack JSON (default: built-in LG M50 pack).
    #[arg(long)]
    pack: Option<PathBuf>,
    #[arg(short, long, env = "EECM_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ElectrodeArg {
    Positive,
    Negative,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Local,
    Joint,
}

impl Common {
    fn config(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::load_or_default(self.config.as_deref())?;
        if let Some(p) = &self.pack {
            cfg.pack = Some(p.clone());
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = Some(d.clone());
        }
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        Ok(cfg)
    }
}

fn set<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

fn run(command: Command) -> anyhow::Result<Vec<PathBuf>> {
    match command {
        Command::Simulate { common, scenario } => {
            let mut cfg = common.config()?;
            set(&mut cfg.scenario, scenario);
            commands::simulate(&cfg)
        }
        Command::Estimate {
            common,
            scenario,
            input,
            truth,
            plots,
        } => {
            let mut cfg = common.config()?;
            set(&mut cfg.scenario, scenario);
            set(&mut cfg.input, input);
            set(&mut cfg.truth, truth);
            cfg.plots |= plots;
            commands::estimate(&cfg)
        }
        Command::Fit {
            common,
            scenario,
            input,
            electrode,
            mode,
            generations,
            population,
        } => {
            let mut cfg = common.config()?;
            set(&mut cfg.scenario, scenario);
            set(&mut cfg.input, input);
            if let Some(e) = electrode {
                cfg.electrode = Some(match e {
                    ElectrodeArg::Positive => Electrode::Positive,
                    ElectrodeArg::Negative => Electrode::Negative,
                });
            }
            if let Some(m) = mode {
                cfg.fit.mode = match m {
                    ModeArg::Local => FitMode::Local,
                    ModeArg::Joint => FitMode::Joint,
                };
            }
            if let Some(g) = generations {
                cfg.fit.generations = g;
            }
            if let Some(p) = population {
                cfg.fit.population = p;
            }
            commands::fit(&cfg)
        }
        Command::Report { common, input } => {
            let mut cfg = common.config()?;
            set(&mut cfg.input, input);
            commands::report(&cfg)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| {
        e.downcast_ref::<ConfigError>().is_some()
            || e.downcast_ref::<eecm_core::Error>()
                .is_some_and(|e| e.is_config())
    });
    if config {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(files) => {
            for f in files {
                log::info!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
