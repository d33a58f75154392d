use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use delayed_hiv::scenario::{parse_config, run, Mode, OutputFormat, ScenarioError};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Simulate,
    Equilibria,
    Stability,
    Ocp,
    Sweep,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Simulate => Mode::Simulate,
            ModeArg::Equilibria => Mode::Equilibria,
            ModeArg::Stability => Mode::Stability,
            ModeArg::Ocp => Mode::Ocp,
            ModeArg::Sweep => Mode::Sweep,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

/// Delayed HIV model: simulation, equilibrium stability and optimal treatment.
#[derive(Debug, Parser)]
#[command(version, about)]
struct Cli {
    /// What to run; overrides the `mode` key of the config file.
    mode: ModeArg,
    /// Scenario file (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Data file to write; the summary goes next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let text = match fs::read_to_string(&cli.config) {
        Ok(t) => t,
        Err(source) => return fail(ScenarioError::Read { path: cli.config, source }),
    };
    let mut config = match parse_config(&text, Some(cli.mode.into())) {
        Ok(c) => c,
        Err(e) => return fail(e.into()),
    };
    if let Some(out) = cli.out {
        config.output_path = Some(out);
    }
    if let Some(f) = cli.format {
        config.format = match f {
            FormatArg::Csv => OutputFormat::Csv,
            FormatArg::Json => OutputFormat::Json,
        };
    }
    if cli.print_config {
        print!("{}", config.to_config_text());
        return ExitCode::SUCCESS;
    }
    match run(&config) {
        Ok(report) => {
            match serde_json::to_string_pretty(&report) {
                Ok(json) => println!("{json}"),
                Err(e) => eprintln!("warning: cannot serialise report: {e}"),
            }
            if !report.converged {
                eprintln!("warning: optimal control iteration did not converge; data written anyway");
            }
            ExitCode::from(report.exit_code() as u8)
        }
        Err(e) => fail(e),
    }
}

fn fail(e: ScenarioError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}
