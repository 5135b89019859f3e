//! `ltau` command-line front end. Every subcommand reads containers, writes
//! containers, CSV or JSON, and reports failures as one JSON object on stderr.

mod args;
mod commands;
mod output;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            output::report_error("usage", &e.to_string());
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::BuildPdfs(a) => commands::build_pdfs(a),
        Command::BuildIndex(a) => commands::build_index(a),
        Command::OodThreshold(a) => commands::ood_threshold(a),
        Command::Predict(a) => commands::predict(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Reweight(a) => commands::reweight(a),
        Command::ToyTrain(a) => commands::toy_train(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            output::report_error(output::error_kind(&e), &e.to_string());
            ExitCode::FAILURE
        }
    }
}
