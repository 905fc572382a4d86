use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sgi_cli::error::{CliError, CliResult, ConfigError, ConfigErrorKind};
use sgi_cli::execute::execute;
use sgi_cli::scenario::{
    load_scenario, Experiment, FeasibilitySpec, FitKind, FitSpec, Format, OutputSpec, Parameters, Scenario,
};
use sgi_cli::selftest::run_selftest;
use sgi_core::feasibility::{reference_wire, MacroObjectSpec};

#[derive(Parser)]
#[command(name = "sgi", version, about = "Full-loop Stern-Gerlach interferometer laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// scenario file (TOML)
    #[arg(long)]
    config: Option<PathBuf>,
    /// output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// overrides the scenario seed
    #[arg(long)]
    seed: Option<u64>,
    /// series format; reports are always JSON
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// print nothing on success
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Sine,
    GaussianSine,
}

#[derive(Subcommand)]
enum Command {
    /// single run, half-loop vs full-loop delay series, or jitter Monte Carlo
    Simulate(Common),
    /// readout-phase, delay, reverse-pulse or single-kick scans
    Scan(Common),
    /// pulse-timing optimization
    Optimize(Common),
    /// fit a fringe CSV
    Fit {
        #[command(flatten)]
        common: Common,
        /// data file; used when no --config is given
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "sine")]
        model: ModelArg,
    },
    /// macroscopic-object feasibility report (defaults when no --config is given)
    Feasibility(Common),
    /// run the acceptance suite
    Selftest {
        #[command(flatten)]
        common: Common,
        /// comma-separated criterion numbers, default all
        #[arg(long, value_delimiter = ',')]
        criteria: Vec<u8>,
    },
}

fn config_error(key: &str, message: impl Into<String>) -> CliError {
    CliError::Config(ConfigError::new(ConfigErrorKind::InvalidValue, key, message))
}

fn load(common: &Common, allowed: &[Experiment], subcommand: &str) -> CliResult<Scenario> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config(ConfigError::new(ConfigErrorKind::MissingKey, "--config", "a scenario file is required")))?;
    let scenario = load_scenario(path)?;
    if !allowed.contains(&scenario.experiment) {
        let names: Vec<&str> = allowed.iter().map(|e| e.name()).collect();
        return Err(config_error(
            "experiment",
            format!("`{}` cannot run under `sgi {subcommand}`; expected one of {}", scenario.experiment.name(), names.join(", ")),
        ));
    }
    Ok(scenario)
}

fn bare_scenario(name: &str, experiment: Experiment, parameters: Parameters) -> Scenario {
    Scenario {
        name: name.into(),
        experiment,
        seed: 0,
        output: OutputSpec { format: Format::Csv, path: None },
        parameters,
    }
}

fn run_scenario(mut scenario: Scenario, common: &Common, command: &str) -> CliResult<()> {
    if let Some(seed) = common.seed {
        scenario.seed = seed;
    }
    let format = common.format.unwrap_or(scenario.output.format);
    let dir = common
        .out
        .clone()
        .or_else(|| scenario.output.path.clone())
        .unwrap_or_else(|| Path::new("sgi-out").join(&scenario.name));
    let outcome = execute(&scenario, &dir, format, command)?;
    if !common.quiet {
        println!("{}: {}", scenario.name, outcome.summary);
        for p in &outcome.artifacts {
            println!("  wrote {}", p.display());
        }
    }
    Ok(())
}

fn real_main(cli: Cli, command_line: &str) -> CliResult<()> {
    match cli.command {
        Command::Simulate(c) => {
            let s = load(&c, &[Experiment::Simulate, Experiment::HalfVsFull, Experiment::Jitter], "simulate")?;
            run_scenario(s, &c, command_line)
        }
        Command::Scan(c) => {
            let s = load(&c, &[Experiment::Scan, Experiment::SingleKick], "scan")?;
            run_scenario(s, &c, command_line)
        }
        Command::Optimize(c) => run_scenario(load(&c, &[Experiment::Optimize], "optimize")?, &c, command_line),
        Command::Fit { common, input, model } => {
            let s = match (&common.config, input) {
                (Some(_), None) => load(&common, &[Experiment::Fit], "fit")?,
                (None, Some(input)) => {
                    let model = match model {
                        ModelArg::Sine => FitKind::Sine,
                        ModelArg::GaussianSine => FitKind::GaussianSine,
                    };
                    let spec = FitSpec { input, model, envelope_center: Some(0.0), k2: None, phase_hint: None };
                    bare_scenario("fit", Experiment::Fit, Parameters::Fit(spec))
                }
                (Some(_), Some(_)) => return Err(config_error("--input", "give either --config or --input, not both")),
                (None, None) => return Err(config_error("--input", "fit needs --config or --input")),
            };
            run_scenario(s, &common, command_line)
        }
        Command::Feasibility(c) => {
            let s = if c.config.is_some() {
                load(&c, &[Experiment::Feasibility], "feasibility")?
            } else {
                let spec = FeasibilitySpec {
                    object: MacroObjectSpec::default(),
                    wire: reference_wire(),
                    distance: 1e-6,
                    times: vec![1e-3, 10e-3, 0.1, 0.5],
                };
                bare_scenario("feasibility", Experiment::Feasibility, Parameters::Feasibility(spec))
            };
            run_scenario(s, &c, command_line)
        }
        Command::Selftest { common, criteria } => {
            if common.config.is_some() {
                return Err(config_error("--config", "selftest takes no scenario file"));
            }
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("sgi-selftest"));
            let quiet = common.quiet;
            let report = run_selftest(&out, common.seed.unwrap_or(0), &criteria, |c| {
                if !quiet {
                    println!("{}", c.line());
                    if let Some(n) = &c.note {
                        println!("             note: {n}");
                    }
                }
            })?;
            if !quiet {
                println!("{} passed, {} failed; report in {}", report.passed, report.failed, out.join("selftest.json").display());
            }
            if report.failed > 0 {
                return Err(CliError::Failed(format!("{} acceptance criteria failed", report.failed)));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let command_line = std::iter::once("sgi".to_string()).chain(std::env::args().skip(1)).collect::<Vec<_>>().join(" ");
    let cli = Cli::parse();
    match real_main(cli, &command_line) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
