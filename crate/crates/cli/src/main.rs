use std::process::ExitCode;

use clap::Parser;
use difftune_cli::{resolve, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match resolve(&cli.command) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if cli.command.args().dry_run {
        match serde_json::to_string_pretty(&config) {
            Ok(s) => println!("{s}"),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::FAILURE;
            }
        }
        return ExitCode::SUCCESS;
    }
    match run(&config) {
        Ok(outcome) => {
            for path in &outcome.artifacts {
                println!("wrote {}", path.display());
            }
            for (name, report) in &outcome.reports {
                println!(
                    "{name}: mmd={:.6} sliced_w2={:.6} nearest={:.6}",
                    report.mmd, report.sliced_wasserstein, report.nearest_sample_mean_dist
                );
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
