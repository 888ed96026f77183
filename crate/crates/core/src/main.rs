use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rofbs_sim::experiment::{ConfigError, Experiment, ExperimentConfig, Fault};
use rofbs_sim::{FamilyProfile, HookPoint, ReportFormat};

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_CONSISTENCY: u8 = 4;

#[derive(Parser)]
#[command(name = "rofbs-sim", version, about = "Backup hook-point simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sweep and print a report.
    Run {
        /// Experiment config (JSON). Uses the bundled default when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        hook: Option<HookPoint>,
        #[arg(long)]
        family: Option<String>,
        #[arg(long)]
        format: Option<ReportFormat>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run every cell, write event logs and recount them independently.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        log_dir: Option<PathBuf>,
        #[arg(long, hide = true, value_parser = ["stale-backup"])]
        inject_fault: Option<String>,
    },
    /// Shipped workload profiles.
    Profiles {
        #[command(subcommand)]
        action: ListAction,
    },
    /// Observable hook points, in open-path order.
    Hooks {
        #[command(subcommand)]
        action: ListAction,
    },
}

#[derive(Subcommand)]
enum ListAction {
    List,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        let code = match e {
            ConfigError::Invalid(_) => EXIT_USAGE,
            ConfigError::Io { .. } => EXIT_IO,
        };
        Failure::new(code, e.to_string())
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    Ok(match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default_config(),
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            config,
            seed,
            hook,
            family,
            format,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let format = format.unwrap_or(cfg.output.format);
            let out = out.or_else(|| {
                cfg.output
                    .path
                    .as_ref()
                    .map(|p| match (&cfg.base_dir, p.is_relative()) {
                        (Some(base), true) => base.join(p),
                        _ => p.clone(),
                    })
            });
            let exp: Experiment = cfg.resolve()?.restrict(hook, family.as_deref(), seed)?;
            let sweep = exp
                .run_sweep()
                .map_err(|e| Failure::new(EXIT_CONSISTENCY, e.to_string()))?;
            let text = sweep.render(format);
            match out {
                Some(path) => fs::write(&path, text)
                    .map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::Verify {
            config,
            log_dir,
            inject_fault,
        } => {
            let cfg = load_config(config.as_deref())?;
            let log_dir = log_dir
                .or_else(|| cfg.log_dir.clone())
                .unwrap_or_else(|| PathBuf::from("logs"));
            let fault = inject_fault.map(|_| Fault::CountStaleBackups);
            let exp = cfg.resolve()?;
            let outcome = exp
                .verify_with_oracle(&log_dir, fault)
                .map_err(|e| Failure::new(EXIT_IO, e.to_string()))?;
            if outcome.passed() {
                println!(
                    "verify: {} cells agree with log replay ({})",
                    outcome.cells_checked,
                    log_dir.display()
                );
                Ok(())
            } else {
                for d in &outcome.diffs {
                    eprintln!("{d}");
                }
                Err(Failure::new(
                    EXIT_CONSISTENCY,
                    format!(
                        "verify: {} of {} cells disagree with log replay",
                        outcome.diffs.len(),
                        outcome.cells_checked
                    ),
                ))
            }
        }
        Command::Profiles {
            action: ListAction::List,
        } => {
            for p in FamilyProfile::shipped() {
                println!(
                    "{:<12} {:<9} {:<14} opens/tick={:<3} write_delay={} ext={}",
                    p.name,
                    format!("{:?}", p.actor).to_lowercase(),
                    format!("{:?}", p.enumeration).to_lowercase(),
                    p.opens_per_tick,
                    p.write_delay,
                    if p.rename_ext.is_empty() {
                        "-"
                    } else {
                        &p.rename_ext
                    },
                );
            }
            Ok(())
        }
        Command::Hooks {
            action: ListAction::List,
        } => {
            for h in HookPoint::ALL {
                println!("{:<20} {}", h.name(), h.layer());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
