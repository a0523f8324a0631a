use std::process::ExitCode;

use clap::Parser;
use microgrid_uio::cli::{run, Cli};

fn main() -> ExitCode {
    ExitCode::from(run(Cli::parse()))
}
