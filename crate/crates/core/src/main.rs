use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use sigmaflow::harness::{self, parse_override, Experiment, RunConfig, Status, OUTPUT_ENV};
use sigmaflow::Error;

/// Stochastic quantization experiments for the O(N) sigma model.
#[derive(Parser, Debug)]
#[command(name = "sigmaflow", version, after_help = format!(
    "Experiments: {}\nOverrides take the form --key=value or --section.key=value.\nOutputs go to output_dir, else ${OUTPUT_ENV}, else ./sigmaflow-out.",
    Experiment::ALL.map(|e| e.name()).join(", ")
))]
struct Cli {
    /// experiment to run
    experiment: String,
    /// TOML configuration file
    #[arg(long)]
    config: PathBuf,
    /// configuration overrides, `--key=value`
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

fn load(cli: &Cli) -> Result<RunConfig, Error> {
    let experiment: Experiment = cli.experiment.parse()?;
    let mut overrides = vec![("experiment".to_string(), format!("\"{experiment}\""))];
    for o in &cli.overrides {
        overrides.push(parse_override(o)?);
    }
    RunConfig::load(&cli.config, &overrides)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("sigmaflow: {e}");
            return ExitCode::from(2);
        }
    };
    match harness::run(&cfg) {
        Ok(summary) => {
            let label = match summary.status {
                Status::Pass => "PASS",
                Status::Fail => "FAIL",
                Status::Complete => "COMPLETE",
            };
            println!("{} {label} {}", cfg.experiment, summary.dir.display());
            if summary.status == Status::Fail {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("sigmaflow: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("sigmaflow: run aborted: {e}");
            ExitCode::from(3)
        }
    }
}
