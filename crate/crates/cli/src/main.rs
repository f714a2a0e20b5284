use std::process::ExitCode;

use cfm_cli::config::{Cli, CliCommand, Command, RunConfig};
use cfm_cli::run::{error_record, exit_code, run, Manifest};
use clap::Parser;

fn resolve(cli: Cli) -> cfm::Result<RunConfig> {
    let (command, flags) = match cli.command {
        CliCommand::Estimate(f) => (Command::Estimate, f),
        CliCommand::Cv(f) => (Command::Cv, f),
        CliCommand::Simulate(f) => (Command::Simulate, f),
        CliCommand::Evaluate(f) => (Command::Evaluate, f),
        CliCommand::Rerun { manifest, out } => {
            let mut config = Manifest::read(&manifest)?.config;
            if let Some(out) = out {
                config.out = out;
            }
            config.validate()?;
            return Ok(config);
        }
    };
    RunConfig::resolve(command, &flags)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = resolve(cli).and_then(|config| {
        let outcome = run(&config);
        if let Err(e) = &outcome {
            // best effort: the output directory may be the thing that failed
            let _ = std::fs::write(config.out.join("error.json"), error_record(e));
        }
        outcome
    });
    match result {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
