use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use causalmotion::cli::{error_json, run, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", error_json("usage", msg.lines().next().unwrap_or("invalid arguments")));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(e.code(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
