use std::process::ExitCode;

use clap::Parser;
use rtwins_cli::config::{self, Cli, Command};
use rtwins_cli::{cmd_estimate, cmd_replicate, cmd_report, cmd_simulate, exit_code};

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Estimate(args) => {
            let out = cmd_estimate(&config::resolve_estimate(&args)?)?;
            print!("{}", out.report.to_text());
        }
        Command::Simulate(args) => cmd_simulate(&config::resolve_simulate(&args)?)?,
        Command::Replicate(args) => {
            let out = cmd_replicate(&config::resolve_replicate(&args)?)?;
            println!(
                "{} new replications, {} failures; wrote {}, {}, {}",
                out.study.new_replications,
                out.study.failures,
                out.records.display(),
                out.metrics.display(),
                out.plot_data.display()
            );
        }
        Command::Report(args) => {
            let run = config::resolve_report(&args)?;
            let metrics = cmd_report(&run)?;
            println!("wrote {} metric rows to {}", metrics.len(), run.output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
