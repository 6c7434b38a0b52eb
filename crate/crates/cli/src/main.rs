use clap::Parser;
use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(ffgvi_cli::run(ffgvi_cli::Cli::parse()))
}
